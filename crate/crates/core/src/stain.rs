//! Beer–Lambert stain handling: optical density, Macenko stain-matrix
//! estimation, deconvolution into hematoxylin/eosin concentrations,
//! reconstruction, normalization and randomized stain augmentation.

use std::sync::OnceLock;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::ImageRgb;

/// Pixels with any channel below this optical density are treated as
/// transparent and ignored by the estimator.
pub const OD_THRESHOLD: f32 = 0.15;
/// Percentile (and its complement) of the polar angle taken as the stain
/// directions.
pub const ANGLE_PERCENTILE: f64 = 1.0;
pub const MIN_TISSUE_PIXELS: usize = 100;
/// Columns closer than this are rejected as one stain.
pub const MIN_STAIN_ANGLE_DEG: f64 = 1.0;

/// `-ln(max(i, 1) / 255)` for every 8-bit level.
fn od_table() -> &'static [f32; 256] {
    static TABLE: OnceLock<[f32; 256]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = [0f32; 256];
        for (i, v) in t.iter_mut().enumerate() {
            *v = -((i.max(1) as f64) / 255.0).ln() as f32;
        }
        t
    })
}

#[inline]
pub fn od_of(level: u8) -> f32 {
    od_table()[level as usize]
}

#[inline]
fn level_of(od: f32) -> u8 {
    (255.0 * (-od.max(0.0)).exp()).round().clamp(0.0, 255.0) as u8
}

/// Interleaved three-channel optical-density raster.
#[derive(Clone, Debug, PartialEq)]
pub struct OdField {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl OdField {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(Error::invalid(
                "OD field",
                format!("{} values for {width}x{height}x3", data.len()),
            ));
        }
        if data.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::invalid("OD field", "negative or NaN optical density"));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

pub fn rgb_to_od(image: &ImageRgb) -> OdField {
    OdField {
        width: image.width(),
        height: image.height(),
        data: image.data().iter().map(|&v| od_of(v)).collect(),
    }
}

/// `round(255 * exp(-od))` per channel, clamped to the 8-bit range.
pub fn od_to_rgb(od: &OdField) -> ImageRgb {
    ImageRgb::from_raw(od.width, od.height, od.data.iter().map(|&v| level_of(v)).collect())
}

/// Two unit optical-density stain vectors; column 0 hematoxylin, column 1 eosin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StainMatrix {
    h: [f64; 3],
    e: [f64; 3],
}

impl StainMatrix {
    /// Normalizes both columns and checks they are non-negative and not
    /// parallel.
    pub fn new(h: [f64; 3], e: [f64; 3]) -> Result<Self> {
        let h = unit_nonneg(h, "hematoxylin")?;
        let e = unit_nonneg(e, "eosin")?;
        let angle = angle_deg(&h, &e);
        if !(angle > MIN_STAIN_ANGLE_DEG) {
            return Err(Error::DegenerateStains { angle_deg: angle });
        }
        Ok(Self { h, e })
    }

    /// Conventional H&E optical-density pair.
    pub fn reference() -> Self {
        Self::new([0.65, 0.70, 0.29], [0.07, 0.99, 0.11]).expect("reference stains are valid")
    }

    pub fn hematoxylin(&self) -> [f64; 3] {
        self.h
    }

    pub fn eosin(&self) -> [f64; 3] {
        self.e
    }

    pub fn column(&self, i: usize) -> [f64; 3] {
        [self.h, self.e][i]
    }

    /// Angle between the two stain vectors in degrees.
    pub fn separation_deg(&self) -> f64 {
        angle_deg(&self.h, &self.e)
    }

    /// Optical density of concentrations `(ch, ce)`.
    #[inline]
    pub fn compose(&self, ch: f64, ce: f64) -> [f64; 3] {
        [
            self.h[0] * ch + self.e[0] * ce,
            self.h[1] * ch + self.e[1] * ce,
            self.h[2] * ch + self.e[2] * ce,
        ]
    }

    /// Rows of `(MᵀM)⁻¹Mᵀ`.
    fn pseudo_inverse(&self) -> [[f32; 3]; 2] {
        let hh = dot(&self.h, &self.h);
        let ee = dot(&self.e, &self.e);
        let he = dot(&self.h, &self.e);
        let det = hh * ee - he * he;
        let row = |a: f64, b: f64| -> [f32; 3] {
            std::array::from_fn(|k| ((a * self.h[k] + b * self.e[k]) / det) as f32)
        };
        [row(ee, -he), row(-he, hh)]
    }

    /// `{"h":[..],"e":[..]}` rounded to 9 significant digits.
    pub fn to_json(&self) -> String {
        let json = StainJson {
            h: self.h.map(round_sig9),
            e: self.e.map(round_sig9),
        };
        serde_json::to_string(&json).expect("stain JSON serialization")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let json: StainJson =
            serde_json::from_str(text).map_err(|e| Error::invalid("stain matrix JSON", e.to_string()))?;
        Self::new(json.h, json.e)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StainJson {
    h: [f64; 3],
    e: [f64; 3],
}

fn round_sig9(v: f64) -> f64 {
    format!("{v:.8e}").parse().expect("formatted float parses")
}

fn unit_nonneg(v: [f64; 3], name: &str) -> Result<[f64; 3]> {
    if v.iter().any(|c| !(*c >= 0.0) || !c.is_finite()) {
        return Err(Error::invalid("stain matrix", format!("{name} vector {v:?} has negative components")));
    }
    let n = dot(&v, &v).sqrt();
    if !(n > 1e-12) {
        return Err(Error::invalid("stain matrix", format!("{name} vector is zero")));
    }
    Ok(v.map(|c| c / n))
}

#[inline]
fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn angle_deg(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let c = dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt());
    c.clamp(-1.0, 1.0).acos().to_degrees()
}

/// Linear-interpolated percentile (`p` in `[0, 100]`). Reorders `values`.
pub(crate) fn percentile(values: &mut [f64], p: f64) -> f64 {
    assert!(!values.is_empty());
    let rank = p / 100.0 * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    let (_, lo_val, upper) = values.select_nth_unstable_by(lo, f64::total_cmp);
    let lo_val = *lo_val;
    if frac == 0.0 || upper.is_empty() {
        return lo_val;
    }
    let hi_val = upper.iter().copied().fold(f64::INFINITY, f64::min);
    lo_val + frac * (hi_val - lo_val)
}

/// Macenko estimation: transparent-pixel filtering, the dominant OD plane,
/// and the extreme polar-angle directions within it.
pub fn estimate_stain_matrix(image: &ImageRgb) -> Result<StainMatrix> {
    let table = od_table();
    let mut tissue: Vec<[f64; 3]> = Vec::new();
    let mut gram = Matrix3::<f64>::zeros();
    for px in image.data().chunks_exact(3) {
        let od = [table[px[0] as usize], table[px[1] as usize], table[px[2] as usize]];
        if od.iter().any(|&v| v < OD_THRESHOLD) {
            continue;
        }
        let v = od.map(|c| c as f64);
        let col = Vector3::from(v);
        gram += col * col.transpose();
        tissue.push(v);
    }
    if tissue.len() < MIN_TISSUE_PIXELS {
        return Err(Error::InsufficientTissue {
            found: tissue.len(),
            needed: MIN_TISSUE_PIXELS,
        });
    }

    let eig = SymmetricEigen::new(gram);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let axis = |i: usize| -> [f64; 3] {
        let c = eig.eigenvectors.column(order[i]);
        [c[0], c[1], c[2]]
    };
    let mut v1 = axis(0);
    let v2 = axis(1);
    if v1.iter().sum::<f64>() < 0.0 {
        v1 = v1.map(|c| -c);
    }

    let mut angles: Vec<f64> = tissue
        .iter()
        .map(|od| dot(od, &v2).atan2(dot(od, &v1)))
        .collect();
    let lo = percentile(&mut angles, ANGLE_PERCENTILE);
    let hi = percentile(&mut angles, 100.0 - ANGLE_PERCENTILE);
    let direction = |phi: f64| -> [f64; 3] {
        let (s, c) = phi.sin_cos();
        let mut v: [f64; 3] = std::array::from_fn(|k| v1[k] * c + v2[k] * s);
        if v.iter().sum::<f64>() < 0.0 {
            v = v.map(|x| -x);
        }
        v.map(|x| x.max(0.0))
    };
    let (a, b) = (direction(lo), direction(hi));
    let (h, e) = if a[0] >= b[0] { (a, b) } else { (b, a) };
    if dot(&h, &h) < 1e-24 || dot(&e, &e) < 1e-24 {
        return Err(Error::DegenerateStains { angle_deg: 0.0 });
    }
    StainMatrix::new(h, e)
}

/// Per-pixel hematoxylin and eosin concentrations.
#[derive(Clone, Debug, PartialEq)]
pub struct ConcentrationMap {
    width: usize,
    height: usize,
    h: Vec<f32>,
    e: Vec<f32>,
}

impl ConcentrationMap {
    pub fn new(width: usize, height: usize, h: Vec<f32>, e: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || h.len() != width * height || e.len() != h.len() {
            return Err(Error::invalid("concentration map", format!("channel lengths do not match {width}x{height}")));
        }
        if h.iter().chain(&e).any(|v| !(*v >= 0.0)) {
            return Err(Error::invalid("concentration map", "negative or NaN concentration"));
        }
        Ok(Self { width, height, h, e })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn hematoxylin(&self) -> &[f32] {
        &self.h
    }

    pub fn eosin(&self) -> &[f32] {
        &self.e
    }

    pub fn into_channels(self) -> (Vec<f32>, Vec<f32>) {
        (self.h, self.e)
    }
}

/// Least-squares concentrations via the pseudo-inverse, negatives clamped
/// to zero.
pub fn deconvolve(image: &ImageRgb, m: &StainMatrix) -> ConcentrationMap {
    let table = od_table();
    let ods = image
        .data()
        .chunks_exact(3)
        .map(|px| [table[px[0] as usize], table[px[1] as usize], table[px[2] as usize]]);
    solve_concentrations(image.width(), image.height(), ods, m)
}

/// [`deconvolve`] on an optical-density field.
pub fn deconvolve_od(od: &OdField, m: &StainMatrix) -> ConcentrationMap {
    let ods = od.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]]);
    solve_concentrations(od.width, od.height, ods, m)
}

fn solve_concentrations(
    width: usize,
    height: usize,
    ods: impl Iterator<Item = [f32; 3]>,
    m: &StainMatrix,
) -> ConcentrationMap {
    let [ph, pe] = m.pseudo_inverse();
    let n = width * height;
    let (mut h, mut e) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for od in ods {
        h.push((ph[0] * od[0] + ph[1] * od[1] + ph[2] * od[2]).max(0.0));
        e.push((pe[0] * od[0] + pe[1] * od[1] + pe[2] * od[2]).max(0.0));
    }
    ConcentrationMap { width, height, h, e }
}

pub fn reconstruct(c: &ConcentrationMap, m: &StainMatrix) -> ImageRgb {
    let h = m.h.map(|v| v as f32);
    let e = m.e.map(|v| v as f32);
    let mut data = Vec::with_capacity(c.h.len() * 3);
    for (&ch, &ce) in c.h.iter().zip(&c.e) {
        for k in 0..3 {
            data.push(level_of(h[k] * ch + e[k] * ce));
        }
    }
    ImageRgb::from_raw(c.width, c.height, data)
}

/// Random per-stain scale and shift of concentrations:
/// `c' = max(0, c * alpha + beta)`, `alpha ~ U[1 - sigma, 1 + sigma]`,
/// `beta ~ U[-sigma, sigma]`, drawn hematoxylin first.
pub fn augment_stain<R: Rng + ?Sized>(image: &ImageRgb, sigma: f64, rng: &mut R) -> Result<ImageRgb> {
    if !(0.0..=1.0).contains(&sigma) {
        return Err(Error::invalid("stain sigma", format!("{sigma} outside [0, 1]")));
    }
    let m = estimate_stain_matrix(image)?;
    let mut draw = |lo: f64, hi: f64| lo + (hi - lo) * rng.random::<f64>();
    let mut params = [(1.0f32, 0.0f32); 2];
    for p in &mut params {
        let alpha = draw(1.0 - sigma, 1.0 + sigma);
        let beta = draw(-sigma, sigma);
        *p = (alpha as f32, beta as f32);
    }
    let c = deconvolve(image, &m);
    let perturb = |v: Vec<f32>, (alpha, beta): (f32, f32)| -> Vec<f32> {
        v.into_iter().map(|x| (x * alpha + beta).max(0.0)).collect()
    };
    let (h, e) = c.into_channels();
    let shifted = ConcentrationMap {
        width: image.width(),
        height: image.height(),
        h: perturb(h, params[0]),
        e: perturb(e, params[1]),
    };
    Ok(reconstruct(&shifted, &m).same_mpp(image))
}

/// Re-renders `image` with the `target` stain vectors.
pub fn normalize_stain(image: &ImageRgb, target: &StainMatrix) -> Result<ImageRgb> {
    let own = estimate_stain_matrix(image)?;
    Ok(reconstruct(&deconvolve(image, &own), target).same_mpp(image))
}

/// Mean absolute per-channel OD difference between two equal-size images.
pub fn mean_od_error(a: &ImageRgb, b: &ImageRgb) -> f64 {
    assert_eq!((a.width(), a.height()), (b.width(), b.height()));
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (od_of(x) - od_of(y)).abs() as f64)
        .sum();
    sum / a.data().len() as f64
}
