//! Browser demo: synthesize a slide, perturb its stain, run tiled detection.
//!
//! The exported methods are thin wrappers over `try_*` functions so the
//! logic stays testable off-wasm.

use mitodet::infer::{classical_scorer, plan_tiles, predict, Scorer, DEFAULT_OVERLAP, DEFAULT_TILE};
use mitodet::metrics::{self, MatchStrategy, DEFAULT_MATCH_RADIUS_PX};
use mitodet::postprocess::{candidates_to_detections, extract_candidates, ExtractParams};
use mitodet::synth::planted_image;
use mitodet::{stain, Error, ImageRgb, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

const MAX_SIDE: usize = 4096;

/// The classical scorer rescales by each tile's 99th percentile, so busy
/// background sits near 0.6-0.85 and only dense figures saturate.
#[wasm_bindgen(js_name = defaultThreshold)]
pub fn default_threshold() -> f32 {
    0.95
}

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Demo {
    original: ImageRgb,
    current: ImageRgb,
    truth: Vec<(f64, f64)>,
}

/// Detections plus their score against the planted figures.
#[wasm_bindgen]
#[derive(Clone, Debug)]
pub struct DetectionReport {
    points: Vec<f64>,
    tp: usize,
    fp: usize,
    fn_: usize,
}

#[wasm_bindgen]
impl DetectionReport {
    /// Flat `[x, y, score, ...]` triples.
    pub fn points(&self) -> Vec<f64> {
        self.points.clone()
    }

    pub fn tp(&self) -> usize {
        self.tp
    }

    pub fn fp(&self) -> usize {
        self.fp
    }

    #[wasm_bindgen(js_name = falseNegatives)]
    pub fn false_negatives(&self) -> usize {
        self.fn_
    }

    pub fn f1(&self) -> f64 {
        metrics::prf(self.tp, self.fp, self.fn_).2
    }
}

impl Demo {
    pub fn try_new(width: usize, height: usize, figures: usize, seed: u64) -> Result<Demo> {
        if !(64..=MAX_SIDE).contains(&width) || !(64..=MAX_SIDE).contains(&height) {
            return Err(Error::invalid("demo size", format!("{width}x{height} outside 64..={MAX_SIDE}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let planted = planted_image("demo", width, height, figures, 0, &mut rng);
        Ok(Demo {
            truth: planted.annotations.mitotic().map(|p| (p.x, p.y)).collect(),
            current: planted.image.clone(),
            original: planted.image,
        })
    }

    /// Re-draws the stain perturbation from the unperturbed slide.
    pub fn try_perturb_stain(&mut self, sigma: f64, seed: u64) -> Result<()> {
        self.current = if sigma == 0.0 {
            self.original.clone()
        } else {
            stain::augment_stain(&self.original, sigma, &mut ChaCha8Rng::seed_from_u64(seed))?
        };
        Ok(())
    }

    pub fn try_tile_plan(&self, tile: usize, overlap: usize) -> Result<Vec<u32>> {
        let plan = plan_tiles(self.current.width(), self.current.height(), tile, overlap)?;
        Ok(plan
            .windows
            .iter()
            .flat_map(|w| [w.x0, w.y0, w.w, w.h].map(|v| v as u32))
            .collect())
    }

    pub fn try_detect(&self, threshold: f32, normalize: bool) -> Result<DetectionReport> {
        let image = if normalize {
            stain::normalize_stain(&self.current, &stain::StainMatrix::reference())?
        } else {
            self.current.clone()
        };
        let scorer = classical_scorer();
        let map = predict(&image, &[&scorer as &dyn Scorer], false, DEFAULT_TILE, DEFAULT_OVERLAP)?;
        let params = ExtractParams {
            threshold,
            ..ExtractParams::default()
        };
        let dets = candidates_to_detections(&extract_candidates(&map, &params)?);
        let m = metrics::match_points(&dets, &self.truth, DEFAULT_MATCH_RADIUS_PX, MatchStrategy::Optimal)?;
        Ok(DetectionReport {
            points: dets.iter().flat_map(|d| [d.x(), d.y(), d.score()]).collect(),
            tp: m.tp,
            fp: m.fp,
            fn_: m.fn_,
        })
    }
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(width: usize, height: usize, figures: usize, seed: u32) -> std::result::Result<Demo, JsError> {
        Demo::try_new(width, height, figures, seed.into()).map_err(js)
    }

    pub fn width(&self) -> usize {
        self.current.width()
    }

    pub fn height(&self) -> usize {
        self.current.height()
    }

    /// Current slide as RGBA bytes for `ImageData`.
    pub fn rgba(&self) -> Vec<u8> {
        self.current.pixels().flat_map(|[r, g, b]| [r, g, b, 255]).collect()
    }

    /// Planted figure centres as flat `[x, y, ...]` pairs.
    pub fn truth(&self) -> Vec<f64> {
        self.truth.iter().flat_map(|&(x, y)| [x, y]).collect()
    }

    #[wasm_bindgen(js_name = perturbStain)]
    pub fn perturb_stain(&mut self, sigma: f64, seed: u32) -> std::result::Result<(), JsError> {
        self.try_perturb_stain(sigma, seed.into()).map_err(js)
    }

    /// Flat `[x0, y0, w, h, ...]` windows in padded-image coordinates.
    #[wasm_bindgen(js_name = tilePlan)]
    pub fn tile_plan(&self, tile: usize, overlap: usize) -> std::result::Result<Vec<u32>, JsError> {
        self.try_tile_plan(tile, overlap).map_err(js)
    }

    pub fn detect(&self, threshold: f32, normalize: bool) -> std::result::Result<DetectionReport, JsError> {
        self.try_detect(threshold, normalize).map_err(js)
    }
}
