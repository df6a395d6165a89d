//! Pipeline configuration file (TOML).
//!
//! ```toml
//! tile = 512
//! overlap = 75
//! threshold = 0.5
//! tta = true
//! seed = 7
//!
//! [[segmenter]]
//! kind = "classical"
//!
//! [[classifier]]
//! kind = "external"
//! command = "python3 classify.py"
//!
//! [[augment]]
//! kind = "flip_h"
//! p = 0.5
//! ```

use std::path::Path;

use mitodet::augment::{AugmentSpec, Augmentation};
use mitodet::infer::{
    ClassicalScorer, ConstantScorer, ExternalScorer, OracleClassifier, OracleScorer, Scorer, ScorerMode,
};
use mitodet::{dataset, infer, metrics, postprocess, AnnotationSet};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const ORACLE_SIGMA: f64 = 6.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScorerKind {
    Oracle,
    Classical,
    Constant,
    External,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScorerSpec {
    pub kind: ScorerKind,
    /// Shell command, external scorers only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<String>,
    /// Oracle bump width (segmenter) or acceptance radius (classifier).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    /// Output of constant scorers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
}

impl ScorerSpec {
    pub fn of(kind: ScorerKind) -> Self {
        Self {
            kind,
            command: None,
            sigma: None,
            value: None,
        }
    }

    fn validate(&self) -> Result<(), String> {
        match (self.kind, &self.command) {
            (ScorerKind::External, None) => return Err("external scorer needs a command".into()),
            (ScorerKind::External, Some(c)) if c.trim().is_empty() => return Err("empty scorer command".into()),
            (k, Some(_)) if k != ScorerKind::External => return Err("command is only valid for external scorers".into()),
            _ => {}
        }
        if let Some(s) = self.sigma {
            if self.kind != ScorerKind::Oracle || !(s > 0.0 && s.is_finite()) {
                return Err(format!("sigma {s} needs an oracle scorer and a positive value"));
            }
        }
        match (self.kind, self.value) {
            (ScorerKind::Constant, None) => Err("constant scorer needs a value".into()),
            (ScorerKind::Constant, Some(v)) if !(0.0..=1.0).contains(&v) => Err(format!("constant value {v} outside [0, 1]")),
            (k, Some(_)) if k != ScorerKind::Constant => Err("value is only valid for constant scorers".into()),
            _ => Ok(()),
        }
    }

    /// Instantiates the scorer; oracles read the image's ground truth.
    pub fn build(&self, mode: ScorerMode, gt: Option<&AnnotationSet>) -> Result<Box<dyn Scorer>, CliError> {
        Ok(match self.kind {
            ScorerKind::Oracle => {
                let gt = gt.ok_or_else(|| CliError::Usage("oracle scorers need --annotations".into()))?;
                match mode {
                    ScorerMode::Segmentation => Box::new(OracleScorer::new(gt, self.sigma.unwrap_or(ORACLE_SIGMA))?),
                    ScorerMode::Classification => {
                        Box::new(OracleClassifier::new(gt, self.sigma.unwrap_or(dataset::DISK_RADIUS)))
                    }
                }
            }
            ScorerKind::Classical => Box::new(ClassicalScorer::new(mode)),
            ScorerKind::Constant => Box::new(ConstantScorer::new(self.value.unwrap_or(0.0), mode)?),
            ScorerKind::External => {
                let command = self.command.clone().unwrap_or_default();
                Box::new(ExternalScorer::new("external", command, mode))
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub tile: usize,
    pub overlap: usize,
    pub threshold: f32,
    pub open_radius: usize,
    pub min_area: usize,
    pub patch: usize,
    pub accept: f64,
    pub match_radius_px: f64,
    pub tta: bool,
    pub seed: u64,
    pub disk_radius: f64,
    pub harvest_size: usize,
    pub harvest_stride: usize,
    pub harvest_margin: f64,
    pub segmenter: Vec<ScorerSpec>,
    /// Empty: candidates are reported unrefined, scored by segmentation.
    pub classifier: Vec<ScorerSpec>,
    /// Absent: the standard augmentation list.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub augment: Option<Vec<Augmentation>>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            tile: infer::DEFAULT_TILE,
            overlap: infer::DEFAULT_OVERLAP,
            threshold: postprocess::DEFAULT_THRESHOLD,
            open_radius: postprocess::DEFAULT_OPEN_RADIUS,
            min_area: postprocess::DEFAULT_MIN_AREA,
            patch: dataset::CLASSIFICATION_PATCH,
            accept: postprocess::DEFAULT_ACCEPT,
            match_radius_px: metrics::DEFAULT_MATCH_RADIUS_PX,
            tta: false,
            seed: 0,
            disk_radius: dataset::DISK_RADIUS,
            harvest_size: dataset::SEGMENTATION_PATCH,
            harvest_stride: dataset::HARVEST_STRIDE,
            harvest_margin: dataset::DISK_RADIUS,
            segmenter: vec![ScorerSpec::of(ScorerKind::Classical)],
            classifier: Vec::new(),
            augment: None,
        }
    }
}

/// Probability used by the standard augmentation list.
pub const STANDARD_AUGMENT_P: f64 = 0.5;

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Usage(format!("config: {msg}")));
        if self.tile < 16 || self.overlap >= self.tile {
            return bad(format!("need tile >= 16 and overlap < tile, got {} / {}", self.tile, self.overlap));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold {} not in (0, 1)", self.threshold));
        }
        if !(0.0..=1.0).contains(&self.accept) {
            return bad(format!("accept {} not in [0, 1]", self.accept));
        }
        if self.patch == 0 {
            return bad("patch must be positive".into());
        }
        if !(self.match_radius_px > 0.0 && self.match_radius_px.is_finite()) {
            return bad(format!("match_radius_px {}", self.match_radius_px));
        }
        if !(self.disk_radius >= 1.0 && self.disk_radius.is_finite()) {
            return bad(format!("disk_radius {} < 1", self.disk_radius));
        }
        if self.harvest_size == 0 || self.harvest_stride == 0 || self.harvest_stride > self.harvest_size {
            return bad("harvest stride must be in 1..=harvest_size".into());
        }
        if !(self.harvest_margin >= 0.0 && 2.0 * self.harvest_margin < self.harvest_size as f64) {
            return bad(format!("harvest_margin {}", self.harvest_margin));
        }
        if self.segmenter.is_empty() {
            return bad("at least one [[segmenter]] is required".into());
        }
        for s in self.segmenter.iter().chain(&self.classifier) {
            s.validate().or_else(bad)?;
        }
        self.augment_spec()?;
        Ok(())
    }

    pub fn augment_spec(&self) -> Result<AugmentSpec, CliError> {
        match &self.augment {
            None => Ok(AugmentSpec::standard(STANDARD_AUGMENT_P).expect("default ranges are valid")),
            Some(steps) => AugmentSpec::new(steps.clone()).map_err(|e| CliError::Usage(format!("config: {e}"))),
        }
    }

    pub fn extract_params(&self) -> postprocess::ExtractParams {
        postprocess::ExtractParams {
            threshold: self.threshold,
            open_radius: self.open_radius,
            min_area: self.min_area,
        }
    }

    pub fn refine_params(&self) -> postprocess::RefineParams {
        postprocess::RefineParams {
            patch: self.patch,
            accept: self.accept,
            tta: self.tta,
        }
    }

    pub fn uses_oracle(&self) -> bool {
        self.segmenter.iter().chain(&self.classifier).any(|s| s.kind == ScorerKind::Oracle)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use mitodet::augment::AugmentKind;

    #[test]
    fn empty_file_is_default() {
        assert_eq!(PipelineConfig::parse("").unwrap(), PipelineConfig::default());
    }

    #[test]
    fn round_trip() {
        let mut cfg = PipelineConfig {
            tta: true,
            threshold: 0.35,
            seed: 99,
            classifier: vec![ScorerSpec {
                command: Some("run-classifier --fast".into()),
                ..ScorerSpec::of(ScorerKind::External)
            }],
            augment: Some(vec![
                Augmentation::new(AugmentKind::FlipH, 0.5),
                Augmentation::new(AugmentKind::Stain, 0.9).with_range(0.0, 0.1),
            ]),
            ..Default::default()
        };
        cfg.segmenter.push(ScorerSpec {
            sigma: Some(4.0),
            ..ScorerSpec::of(ScorerKind::Oracle)
        });
        let text = cfg.to_toml();
        assert_eq!(PipelineConfig::parse(&text).unwrap(), cfg);
        let again = PipelineConfig::parse(&text).unwrap().to_toml();
        assert_eq!(again, text);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        for text in [
            "tiles = 512",
            "threshold = 1.5",
            "overlap = 600",
            "[[segmenter]]\nkind = \"external\"",
            "[[segmenter]]\nkind = \"classical\"\ncommand = \"x\"",
            "[[segmenter]]\nkind = \"oracle\"\nflavour = 1",
            "[[augment]]\nkind = \"flip_h\"\np = 2.0",
            "segmenter = []",
        ] {
            assert!(matches!(PipelineConfig::parse(text), Err(CliError::Usage(_))), "{text}");
        }
    }

    #[test]
    fn explicit_empty_augment_list_is_identity() {
        let cfg = PipelineConfig::parse("augment = []").unwrap();
        assert!(cfg.augment_spec().unwrap().steps().is_empty());
        assert!(!PipelineConfig::default().augment_spec().unwrap().steps().is_empty());
    }
}
