//! Pseudo ground truth, training patch harvesting, balanced epoch sampling
//! and cross-validation folds.

use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{AnnotationSet, BinaryMask, Label};

/// Radius of the pseudo ground-truth disk drawn at each mitosis.
pub const DISK_RADIUS: f64 = 17.0;
pub const SEGMENTATION_PATCH: usize = 512;
pub const CLASSIFICATION_PATCH: usize = 128;
pub const HARVEST_STRIDE: usize = 256;

/// Union of radius-`radius` disks at the mitotic points; imposters draw
/// nothing.
pub fn disk_mask(ann: &AnnotationSet, width: usize, height: usize, radius: f64) -> Result<BinaryMask> {
    if !(radius >= 1.0) {
        return Err(Error::invalid("disk radius", format!("{radius} < 1")));
    }
    if width == 0 || height == 0 {
        return Err(Error::invalid("mask", format!("empty geometry {width}x{height}")));
    }
    let mut bits = vec![false; width * height];
    let r2 = radius * radius;
    for p in ann.mitotic() {
        let x0 = (p.x - radius).floor().max(0.0) as usize;
        let y0 = (p.y - radius).floor().max(0.0) as usize;
        let x1 = ((p.x + radius).ceil().max(0.0) as usize).min(width - 1);
        let y1 = ((p.y + radius).ceil().max(0.0) as usize).min(height - 1);
        for y in y0..=y1 {
            let dy = y as f64 - p.y;
            for x in x0..=x1 {
                let dx = x as f64 - p.x;
                if dx * dx + dy * dy <= r2 {
                    bits[y * width + x] = true;
                }
            }
        }
    }
    Ok(BinaryMask::from_raw(width, height, bits))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub fn as_str(self) -> &'static str {
        match self {
            Polarity::Positive => "positive",
            Polarity::Negative => "negative",
        }
    }
}

/// One training window: `size`x`size` pixels with top-left `(x0, y0)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PatchRecord {
    pub image_id: String,
    pub x0: i64,
    pub y0: i64,
    pub size: usize,
    pub polarity: Polarity,
}

/// Window origins along one axis: `0, stride, ...`, the last clamped to
/// `extent - size`, duplicates removed. A single origin 0 when the extent
/// is smaller than the window.
pub fn axis_origins(extent: usize, size: usize, stride: usize) -> Vec<usize> {
    assert!(size > 0 && stride > 0);
    if extent <= size {
        return vec![0];
    }
    let mut out = Vec::new();
    let mut o = 0;
    loop {
        if o + size >= extent {
            let last = extent - size;
            if out.last() != Some(&last) {
                out.push(last);
            }
            return out;
        }
        out.push(o);
        o += stride;
    }
}

/// Grid of training windows. A window is positive when a mitotic point lies
/// inside it shrunk by `margin` on every side.
pub fn harvest_patches(
    ann: &AnnotationSet,
    width: usize,
    height: usize,
    size: usize,
    stride: usize,
    margin: f64,
) -> Result<Vec<PatchRecord>> {
    if size == 0 || stride == 0 || stride > size {
        return Err(Error::invalid(
            "harvest",
            format!("size {size} and stride {stride} must satisfy 0 < stride <= size"),
        ));
    }
    let xs = axis_origins(width, size, stride);
    let ys = axis_origins(height, size, stride);
    let mut out = Vec::with_capacity(xs.len() * ys.len());
    for &y0 in &ys {
        for &x0 in &xs {
            let (lx, ly) = (x0 as f64 + margin, y0 as f64 + margin);
            let (hx, hy) = ((x0 + size) as f64 - margin, (y0 + size) as f64 - margin);
            let positive = ann
                .mitotic()
                .any(|p| p.x >= lx && p.x < hx && p.y >= ly && p.y < hy);
            out.push(PatchRecord {
                image_id: ann.image_id().to_string(),
                x0: x0 as i64,
                y0: y0 as i64,
                size,
                polarity: if positive { Polarity::Positive } else { Polarity::Negative },
            });
        }
    }
    Ok(out)
}

/// Classifier patches centred on every annotated point: mitoses positive,
/// imposters negative.
pub fn harvest_point_patches(ann: &AnnotationSet, size: usize) -> Vec<PatchRecord> {
    let half = (size / 2) as i64;
    ann.points()
        .iter()
        .map(|p| PatchRecord {
            image_id: ann.image_id().to_string(),
            x0: p.x.round() as i64 - half,
            y0: p.y.round() as i64 - half,
            size,
            polarity: match p.label {
                Label::Mitotic => Polarity::Positive,
                Label::Imposter => Polarity::Negative,
            },
        })
        .collect()
}

pub fn patches_to_csv(records: &[PatchRecord]) -> String {
    let mut out = String::from("image_id,x0,y0,size,polarity\n");
    for r in records {
        out.push_str(&format!("{},{},{},{},{}\n", r.image_id, r.x0, r.y0, r.size, r.polarity.as_str()));
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Epoch {
    pub records: Vec<PatchRecord>,
    /// Set when the pool holds no positives; the epoch is then empty.
    pub no_positives: bool,
}

/// All positives plus `min(round(ratio * P), N)` negatives drawn without
/// replacement, shuffled.
pub fn epoch_sample<R: Rng + ?Sized>(records: &[PatchRecord], ratio: f64, rng: &mut R) -> Epoch {
    let (pos, neg): (Vec<&PatchRecord>, Vec<&PatchRecord>) =
        records.iter().partition(|r| r.polarity == Polarity::Positive);
    if pos.is_empty() {
        return Epoch {
            records: Vec::new(),
            no_positives: true,
        };
    }
    let want = ((pos.len() as f64 * ratio.max(0.0)).round() as usize).min(neg.len());
    let mut out: Vec<PatchRecord> = pos.into_iter().cloned().collect();
    out.extend(index::sample(rng, neg.len(), want).into_iter().map(|i| neg[i].clone()));
    out.shuffle(rng);
    Epoch {
        records: out,
        no_positives: false,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub seed: u64,
    pub folds: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.folds.values() {
            sizes[f] += 1;
        }
        sizes
    }

    pub fn members(&self, fold: usize) -> impl Iterator<Item = &str> + '_ {
        self.folds
            .iter()
            .filter(move |(_, &f)| f == fold)
            .map(|(id, _)| id.as_str())
    }
}

/// Seeded shuffle of the sorted ids, then round-robin assignment.
pub fn make_folds(image_ids: &[String], k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::invalid("fold count", format!("k = {k} < 2")));
    }
    let mut ids: Vec<&String> = image_ids.iter().collect();
    ids.sort();
    ids.dedup();
    if ids.len() != image_ids.len() {
        return Err(Error::invalid("fold ids", "duplicate image id"));
    }
    if ids.len() < k {
        return Err(Error::TooFewIds { ids: ids.len(), k });
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let folds = ids
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id.clone(), i % k))
        .collect();
    Ok(FoldAssignment { k, seed, folds })
}
