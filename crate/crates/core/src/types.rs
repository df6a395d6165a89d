//! Pixel carriers and annotation records shared by every pipeline stage.

use std::collections::HashSet;

use crate::error::{Error, Result};

/// Scan resolution assumed when an image or annotation file carries none.
pub const DEFAULT_MPP: f64 = 0.25;

/// 8-bit RGB raster, row-major, with its physical pixel size.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRgb {
    width: usize,
    height: usize,
    data: Vec<u8>,
    mpp: f64,
}

impl ImageRgb {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("image", format!("empty geometry {width}x{height}")));
        }
        if data.len() != width * height * 3 {
            return Err(Error::invalid(
                "image",
                format!("{} bytes for {width}x{height} RGB", data.len()),
            ));
        }
        Ok(Self {
            width,
            height,
            data,
            mpp: DEFAULT_MPP,
        })
    }

    /// Builds an image from a per-pixel function of `(x, y)`.
    ///
    /// Panics on a zero dimension.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Self {
        assert!(width > 0 && height > 0, "empty image geometry");
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self::from_raw(width, height, data)
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        Self::from_fn(width, height, |_, _| rgb)
    }

    pub(crate) fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Self {
        debug_assert_eq!(data.len(), width * height * 3);
        Self {
            width,
            height,
            data,
            mpp: DEFAULT_MPP,
        }
    }

    pub fn with_mpp(mut self, mpp: f64) -> Result<Self> {
        if !(mpp > 0.0 && mpp.is_finite()) {
            return Err(Error::invalid("mpp", format!("{mpp} is not a positive length")));
        }
        self.mpp = mpp;
        Ok(self)
    }

    pub(crate) fn same_mpp(mut self, other: &ImageRgb) -> Self {
        self.mpp = other.mpp;
        self
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn mpp(&self) -> f64 {
        self.mpp
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_raw(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn pixels(&self) -> impl Iterator<Item = [u8; 3]> + '_ {
        self.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }

    /// Copies a `w`x`h` window whose top-left corner may lie outside the
    /// image; out-of-range samples are mirrored back in.
    pub fn crop_reflect(&self, x0: i64, y0: i64, w: usize, h: usize) -> ImageRgb {
        let mut data = Vec::with_capacity(w * h * 3);
        for j in 0..h {
            let sy = reflect_index(y0 + j as i64, self.height);
            let row = &self.data[sy * self.width * 3..(sy + 1) * self.width * 3];
            for i in 0..w {
                let sx = reflect_index(x0 + i as i64, self.width);
                data.extend_from_slice(&row[sx * 3..sx * 3 + 3]);
            }
        }
        ImageRgb::from_raw(w, h, data).same_mpp(self)
    }

    pub fn flipped(&self, horizontal: bool, vertical: bool) -> ImageRgb {
        let (w, h) = (self.width, self.height);
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..h {
            let sy = if vertical { h - 1 - y } else { y };
            for x in 0..w {
                let sx = if horizontal { w - 1 - x } else { x };
                let i = (sy * w + sx) * 3;
                data.extend_from_slice(&self.data[i..i + 3]);
            }
        }
        ImageRgb::from_raw(w, h, data).same_mpp(self)
    }
}

/// Mirror an index into `[0, n)` without repeating the edge sample
/// (`-1 -> 1`, `n -> n - 2`), folding as often as needed.
#[inline]
pub fn reflect_index(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as i64;
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// Per-pixel score grid in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    width: usize,
    height: usize,
    values: Vec<f32>,
}

impl ProbMap {
    pub fn new(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("probability map", format!("empty geometry {width}x{height}")));
        }
        if values.len() != width * height {
            return Err(Error::invalid(
                "probability map",
                format!("{} values for {width}x{height}", values.len()),
            ));
        }
        if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(
                "probability map",
                format!("value {v} at index {i} outside [0, 1]"),
            ));
        }
        Ok(Self { width, height, values })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        assert!(width > 0 && height > 0, "empty map geometry");
        Self {
            width,
            height,
            values: vec![value.clamp(0.0, 1.0); width * height],
        }
    }

    /// Builds a map from `f(x, y)`, clamping into `[0, 1]` (NaN becomes 0).
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        assert!(width > 0 && height > 0, "empty map geometry");
        let mut values = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                values.push(clamp_unit(f(x, y)));
            }
        }
        Self { width, height, values }
    }

    pub(crate) fn from_raw(width: usize, height: usize, values: Vec<f32>) -> Self {
        debug_assert!(values.iter().all(|v| (0.0..=1.0).contains(v)));
        Self { width, height, values }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }

    pub fn flipped(&self, horizontal: bool, vertical: bool) -> ProbMap {
        let (w, h) = (self.width, self.height);
        let values = (0..h)
            .flat_map(|y| {
                let sy = if vertical { h - 1 - y } else { y };
                (0..w).map(move |x| (if horizontal { w - 1 - x } else { x }, sy))
            })
            .map(|(sx, sy)| self.values[sy * w + sx])
            .collect();
        ProbMap::from_raw(w, h, values)
    }

    pub fn threshold(&self, thresh: f32) -> BinaryMask {
        BinaryMask::from_raw(
            self.width,
            self.height,
            self.values.iter().map(|&v| v >= thresh).collect(),
        )
    }
}

#[inline]
pub(crate) fn clamp_unit(v: f32) -> f32 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("mask", format!("empty geometry {width}x{height}")));
        }
        if bits.len() != width * height {
            return Err(Error::invalid("mask", format!("{} bits for {width}x{height}", bits.len())));
        }
        Ok(Self { width, height, bits })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        assert!(width > 0 && height > 0, "empty mask geometry");
        let bits = (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| f(x, y))
            .collect();
        Self { width, height, bits }
    }

    pub(crate) fn from_raw(width: usize, height: usize, bits: Vec<bool>) -> Self {
        debug_assert_eq!(bits.len(), width * height);
        Self { width, height, bits }
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self::from_fn(width, height, |_, _| false)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Mean `(x, y)` of the set pixels, if any.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        for (i, _) in self.bits.iter().enumerate().filter(|(_, &b)| b) {
            sx += (i % self.width) as f64;
            sy += (i / self.width) as f64;
            n += 1;
        }
        (n > 0).then(|| (sx / n as f64, sy / n as f64))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Mitotic,
    Imposter,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Mitotic => "mitotic",
            Label::Imposter => "imposter",
        }
    }
}

impl std::str::FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mitotic" => Ok(Label::Mitotic),
            "imposter" => Ok(Label::Imposter),
            other => Err(Error::UnknownLabel(other.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointAnnotation {
    pub x: f64,
    pub y: f64,
    pub label: Label,
}

impl PointAnnotation {
    pub fn mitotic(x: f64, y: f64) -> Self {
        Self { x, y, label: Label::Mitotic }
    }

    pub fn imposter(x: f64, y: f64) -> Self {
        Self { x, y, label: Label::Imposter }
    }
}

/// Labeled points for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationSet {
    image_id: String,
    points: Vec<PointAnnotation>,
    mpp: f64,
}

impl AnnotationSet {
    pub fn new(image_id: impl Into<String>, mpp: f64, points: Vec<PointAnnotation>) -> Result<Self> {
        let image_id = image_id.into();
        if image_id.is_empty() {
            return Err(Error::invalid("annotation set", "empty image id"));
        }
        if !(mpp > 0.0 && mpp.is_finite()) {
            return Err(Error::invalid("annotation set", format!("image {image_id:?}: mpp {mpp}")));
        }
        let mut seen = HashSet::with_capacity(points.len());
        for p in &points {
            if !(p.x.is_finite() && p.y.is_finite() && p.x >= 0.0 && p.y >= 0.0) {
                return Err(Error::invalid(
                    "annotation set",
                    format!("image {image_id:?}: point ({}, {}) has negative or non-finite coordinates", p.x, p.y),
                ));
            }
            if !seen.insert((p.x.to_bits(), p.y.to_bits(), p.label)) {
                return Err(Error::invalid(
                    "annotation set",
                    format!("image {image_id:?}: duplicate point ({}, {}, {})", p.x, p.y, p.label.as_str()),
                ));
            }
        }
        Ok(Self { image_id, points, mpp })
    }

    pub fn image_id(&self) -> &str {
        &self.image_id
    }

    pub fn points(&self) -> &[PointAnnotation] {
        &self.points
    }

    pub fn mpp(&self) -> f64 {
        self.mpp
    }

    pub fn mitotic(&self) -> impl Iterator<Item = &PointAnnotation> + '_ {
        self.points.iter().filter(|p| p.label == Label::Mitotic)
    }

    /// Rejects points outside a `width`x`height` image.
    pub fn check_bounds(&self, width: usize, height: usize) -> Result<()> {
        match self
            .points
            .iter()
            .find(|p| p.x >= width as f64 || p.y >= height as f64)
        {
            Some(p) => Err(Error::invalid(
                "annotation set",
                format!(
                    "image {:?}: point ({}, {}) outside {width}x{height}",
                    self.image_id, p.x, p.y
                ),
            )),
            None => Ok(()),
        }
    }
}

/// Candidate or final detection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    x: f64,
    y: f64,
    score: f64,
}

impl Detection {
    pub fn new(x: f64, y: f64, score: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::invalid("detection", format!("score {score} outside [0, 1]")));
        }
        if !(x.is_finite() && y.is_finite()) {
            return Err(Error::invalid("detection", format!("non-finite position ({x}, {y})")));
        }
        Ok(Self { x, y, score })
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn y(&self) -> f64 {
        self.y
    }

    pub fn score(&self) -> f64 {
        self.score
    }
}
