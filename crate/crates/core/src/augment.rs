//! Seed-driven geometric and photometric augmentation of training patches.
//!
//! Each [`Augmentation`] fires independently with its probability, in list
//! order. Geometric kinds move the image (bilinear) and the optional mask
//! (nearest neighbour) together; photometric kinds touch the image only.
//! Borders are reflect-padded.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{blur_plane, merge_planes, split_planes, to_u8};
use crate::stain::augment_stain;
use crate::types::{reflect_index, BinaryMask, ImageRgb};

/// Smoothing radius of the elastic displacement field.
pub const ELASTIC_SIGMA: f64 = 4.0;
/// Gaussian radius used by the `Sharpen` augmentation.
pub const SHARPEN_RADIUS: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    FlipH,
    FlipV,
    /// Quarter turns counter-clockwise; the range is rounded to integers.
    Rotate90,
    /// Degrees.
    RotateFree,
    /// Horizontal shear angle in degrees.
    Shear,
    Zoom,
    /// Displacement magnitude in pixels.
    Elastic,
    /// Additive levels.
    Brightness,
    /// Gain about the image mean.
    Contrast,
    /// Gaussian radius in pixels.
    Blur,
    /// Unsharp-mask amount.
    Sharpen,
    /// Additive levels drawn per channel.
    ColorJitter,
    Saturation,
    /// Stain perturbation sigma.
    Stain,
}

impl AugmentKind {
    pub const ALL: [AugmentKind; 14] = [
        AugmentKind::FlipH,
        AugmentKind::FlipV,
        AugmentKind::Rotate90,
        AugmentKind::RotateFree,
        AugmentKind::Shear,
        AugmentKind::Zoom,
        AugmentKind::Elastic,
        AugmentKind::Brightness,
        AugmentKind::Contrast,
        AugmentKind::Blur,
        AugmentKind::Sharpen,
        AugmentKind::ColorJitter,
        AugmentKind::Saturation,
        AugmentKind::Stain,
    ];

    /// Bounds any configured range must stay within.
    pub fn limits(self) -> (f64, f64) {
        use AugmentKind::*;
        match self {
            FlipH | FlipV => (0.0, 0.0),
            Rotate90 => (0.0, 3.0),
            RotateFree => (-180.0, 180.0),
            Shear => (-45.0, 45.0),
            Zoom => (0.25, 4.0),
            Elastic => (0.0, 100.0),
            Brightness | ColorJitter => (-255.0, 255.0),
            Contrast | Saturation => (0.0, 4.0),
            Blur => (0.0, 10.0),
            Sharpen => (0.0, 5.0),
            Stain => (0.0, 1.0),
        }
    }

    pub fn default_range(self) -> (f64, f64) {
        use AugmentKind::*;
        match self {
            FlipH | FlipV => (0.0, 0.0),
            Rotate90 => (0.0, 3.0),
            RotateFree => (-15.0, 15.0),
            Shear => (-10.0, 10.0),
            Zoom => (0.8, 1.2),
            Elastic => (0.0, 30.0),
            Brightness => (-25.0, 25.0),
            Contrast | Saturation => (0.75, 1.25),
            Blur => (0.0, 2.0),
            Sharpen => (0.0, 1.0),
            ColorJitter => (-10.0, 10.0),
            Stain => (0.0, 0.2),
        }
    }

    pub fn is_geometric(self) -> bool {
        use AugmentKind::*;
        matches!(self, FlipH | FlipV | Rotate90 | RotateFree | Shear | Zoom | Elastic)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Augmentation {
    pub kind: AugmentKind,
    pub p: f64,
    #[serde(default)]
    pub min: f64,
    #[serde(default)]
    pub max: f64,
}

impl Augmentation {
    pub fn new(kind: AugmentKind, p: f64) -> Self {
        let (min, max) = kind.default_range();
        Self { kind, p, min, max }
    }

    pub fn with_range(mut self, min: f64, max: f64) -> Self {
        self.min = min;
        self.max = max;
        self
    }

    fn validate(&self) -> Result<()> {
        let (lo, hi) = self.kind.limits();
        let name = format!("{:?}", self.kind);
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::invalid("augmentation", format!("{name}: probability {} outside [0, 1]", self.p)));
        }
        if !(self.min <= self.max) {
            return Err(Error::invalid("augmentation", format!("{name}: empty range [{}, {}]", self.min, self.max)));
        }
        if self.min < lo || self.max > hi {
            return Err(Error::invalid(
                "augmentation",
                format!("{name}: range [{}, {}] exceeds limits [{lo}, {hi}]", self.min, self.max),
            ));
        }
        if self.kind == AugmentKind::Rotate90 && self.min.ceil() > self.max.floor() {
            return Err(Error::invalid("augmentation", format!("{name}: no whole quarter turn in range")));
        }
        Ok(())
    }
}

/// Ordered augmentation list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Augmentation>", into = "Vec<Augmentation>")]
pub struct AugmentSpec {
    steps: Vec<Augmentation>,
}

impl AugmentSpec {
    pub fn new(steps: Vec<Augmentation>) -> Result<Self> {
        steps.iter().try_for_each(Augmentation::validate)?;
        Ok(Self { steps })
    }

    /// Every kind at probability `p` with its default range.
    pub fn standard(p: f64) -> Result<Self> {
        Self::new(AugmentKind::ALL.iter().map(|&k| Augmentation::new(k, p)).collect())
    }

    pub fn steps(&self) -> &[Augmentation] {
        &self.steps
    }
}

impl TryFrom<Vec<Augmentation>> for AugmentSpec {
    type Error = Error;

    fn try_from(steps: Vec<Augmentation>) -> Result<Self> {
        Self::new(steps)
    }
}

impl From<AugmentSpec> for Vec<Augmentation> {
    fn from(spec: AugmentSpec) -> Self {
        spec.steps
    }
}

/// Runs `spec` over `image` and, when given, its mask.
pub fn apply<R: Rng + ?Sized>(
    image: &ImageRgb,
    mask: Option<&BinaryMask>,
    spec: &AugmentSpec,
    rng: &mut R,
) -> Result<(ImageRgb, Option<BinaryMask>)> {
    if let Some(m) = mask {
        if (m.width(), m.height()) != (image.width(), image.height()) {
            return Err(Error::GeometryMismatch {
                left_w: image.width(),
                left_h: image.height(),
                right_w: m.width(),
                right_h: m.height(),
            });
        }
    }
    let mut img = image.clone();
    let mut mask = mask.cloned();
    for step in &spec.steps {
        if rng.random::<f64>() >= step.p {
            continue;
        }
        let draw = |rng: &mut R| step.min + (step.max - step.min) * rng.random::<f64>();
        use AugmentKind::*;
        match step.kind {
            FlipH | FlipV => {
                let h = step.kind == FlipH;
                img = img.flipped(h, !h);
                mask = mask.map(|m| flip_mask(&m, h, !h));
            }
            Rotate90 => {
                let (lo, hi) = (step.min.ceil() as u32, step.max.floor() as u32);
                let turns = rng.random_range(lo..=hi);
                img = rotate90(&img, turns);
                mask = mask.map(|m| rotate90_mask(&m, turns));
            }
            RotateFree | Shear | Zoom => {
                let v = draw(rng);
                let affine = match step.kind {
                    RotateFree => Affine::rotation(v.to_radians()),
                    Shear => Affine::shear(v.to_radians()),
                    _ => Affine::zoom(v),
                };
                let inv = affine.inverse_about(img.width(), img.height());
                img = warp_image(&img, |x, y| inv.apply(x, y));
                mask = mask.map(|m| warp_mask(&m, |x, y| inv.apply(x, y)));
            }
            Elastic => {
                let alpha = draw(rng);
                let field = DisplacementField::random(img.width(), img.height(), alpha, ELASTIC_SIGMA, rng);
                img = field.warp_image(&img);
                mask = mask.map(|m| field.warp_mask(&m));
            }
            Brightness => {
                let b = draw(rng) as f32;
                img = map_levels(&img, |_, v| v + b);
            }
            Contrast => {
                let gain = draw(rng) as f32;
                let mean = img.data().iter().map(|&v| v as f64).sum::<f64>() / img.data().len() as f64;
                let mean = mean as f32;
                img = map_levels(&img, |_, v| mean + gain * (v - mean));
            }
            Blur => {
                let sigma = draw(rng);
                img = gaussian_blur(&img, sigma);
            }
            Sharpen => {
                let amount = draw(rng);
                img = unsharp(&img, amount, SHARPEN_RADIUS);
            }
            ColorJitter => {
                let offsets = [draw(rng) as f32, draw(rng) as f32, draw(rng) as f32];
                img = map_levels(&img, |c, v| v + offsets[c]);
            }
            Saturation => {
                let s = draw(rng) as f32;
                img = saturate(&img, s);
            }
            Stain => {
                let sigma = draw(rng);
                if let Ok(out) = augment_stain(&img, sigma, rng) {
                    img = out;
                }
            }
        }
    }
    Ok((img, mask))
}

fn map_levels(image: &ImageRgb, f: impl Fn(usize, f32) -> f32) -> ImageRgb {
    let data = image
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| to_u8(f(i % 3, v as f32)))
        .collect();
    ImageRgb::from_raw(image.width(), image.height(), data).same_mpp(image)
}

fn saturate(image: &ImageRgb, s: f32) -> ImageRgb {
    let mut data = Vec::with_capacity(image.data().len());
    for px in image.data().chunks_exact(3) {
        let [r, g, b] = [px[0] as f32, px[1] as f32, px[2] as f32];
        let luma = 0.299 * r + 0.587 * g + 0.114 * b;
        data.extend([r, g, b].map(|v| to_u8(luma + s * (v - luma))));
    }
    ImageRgb::from_raw(image.width(), image.height(), data).same_mpp(image)
}

pub fn gaussian_blur(image: &ImageRgb, sigma: f64) -> ImageRgb {
    let (w, h) = (image.width(), image.height());
    let mut planes = split_planes(image.data());
    for p in &mut planes {
        blur_plane(p, w, h, sigma);
    }
    ImageRgb::from_raw(w, h, merge_planes(&planes)).same_mpp(image)
}

/// `I + amount * (I - blur(I))` on one float plane, unclamped.
pub(crate) fn unsharp_plane(plane: &[f32], w: usize, h: usize, amount: f64, radius: f64) -> Vec<f32> {
    let mut blurred = plane.to_vec();
    blur_plane(&mut blurred, w, h, radius);
    let a = amount as f32;
    plane.iter().zip(&blurred).map(|(&v, &b)| v + a * (v - b)).collect()
}

/// Unsharp masking, clamped to 8 bits.
///
/// Panics if `radius <= 0` or `amount < 0`.
pub fn unsharp(image: &ImageRgb, amount: f64, radius: f64) -> ImageRgb {
    assert!(radius > 0.0, "unsharp radius must be positive");
    assert!(amount >= 0.0, "unsharp amount must be non-negative");
    if amount == 0.0 {
        return image.clone();
    }
    let (w, h) = (image.width(), image.height());
    let planes = split_planes(image.data()).map(|p| unsharp_plane(&p, w, h, amount, radius));
    ImageRgb::from_raw(w, h, merge_planes(&planes)).same_mpp(image)
}

fn flip_mask(m: &BinaryMask, horizontal: bool, vertical: bool) -> BinaryMask {
    let (w, h) = (m.width(), m.height());
    BinaryMask::from_fn(w, h, |x, y| {
        m.get(if horizontal { w - 1 - x } else { x }, if vertical { h - 1 - y } else { y })
    })
}

/// Source pixel of output `(x, y)` after `turns` counter-clockwise quarter
/// turns of a `w`x`h` raster, plus the output geometry.
fn rot90_source(w: usize, h: usize, turns: u32) -> (usize, usize, impl Fn(usize, usize) -> (usize, usize)) {
    let turns = turns % 4;
    let (ow, oh) = if turns % 2 == 1 { (h, w) } else { (w, h) };
    let src = move |x: usize, y: usize| match turns {
        0 => (x, y),
        1 => (w - 1 - y, x),
        2 => (w - 1 - x, h - 1 - y),
        _ => (y, h - 1 - x),
    };
    (ow, oh, src)
}

pub fn rotate90(image: &ImageRgb, turns: u32) -> ImageRgb {
    let (ow, oh, src) = rot90_source(image.width(), image.height(), turns);
    ImageRgb::from_fn(ow, oh, |x, y| {
        let (sx, sy) = src(x, y);
        image.pixel(sx, sy)
    })
    .same_mpp(image)
}

fn rotate90_mask(mask: &BinaryMask, turns: u32) -> BinaryMask {
    let (ow, oh, src) = rot90_source(mask.width(), mask.height(), turns);
    BinaryMask::from_fn(ow, oh, |x, y| {
        let (sx, sy) = src(x, y);
        mask.get(sx, sy)
    })
}

/// 2x2 linear map applied about the raster centre.
#[derive(Clone, Copy, Debug)]
struct Affine {
    m: [[f64; 2]; 2],
}

/// Output-to-source mapping of an [`Affine`] about a fixed centre.
#[derive(Clone, Copy, Debug)]
struct CenteredMap {
    inv: [[f64; 2]; 2],
    cx: f64,
    cy: f64,
}

impl Affine {
    fn rotation(theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Self { m: [[c, -s], [s, c]] }
    }

    fn shear(phi: f64) -> Self {
        Self { m: [[1.0, phi.tan()], [0.0, 1.0]] }
    }

    fn zoom(s: f64) -> Self {
        Self { m: [[s, 0.0], [0.0, s]] }
    }

    fn inverse_about(&self, w: usize, h: usize) -> CenteredMap {
        let [[a, b], [c, d]] = self.m;
        let det = a * d - b * c;
        CenteredMap {
            inv: [[d / det, -b / det], [-c / det, a / det]],
            cx: (w as f64 - 1.0) / 2.0,
            cy: (h as f64 - 1.0) / 2.0,
        }
    }
}

impl CenteredMap {
    #[inline]
    fn apply(&self, x: usize, y: usize) -> (f64, f64) {
        let (dx, dy) = (x as f64 - self.cx, y as f64 - self.cy);
        (
            self.cx + self.inv[0][0] * dx + self.inv[0][1] * dy,
            self.cy + self.inv[1][0] * dx + self.inv[1][1] * dy,
        )
    }
}

/// Resamples with `out(x, y) = in(src(x, y))`, bilinear, reflect borders.
fn warp_image(image: &ImageRgb, src: impl Fn(usize, usize) -> (f64, f64)) -> ImageRgb {
    let (w, h) = (image.width(), image.height());
    let data = image.data();
    ImageRgb::from_fn(w, h, |x, y| {
        let (fx, fy) = src(x, y);
        let (x0, y0) = (fx.floor(), fy.floor());
        let (tx, ty) = ((fx - x0) as f32, (fy - y0) as f32);
        let (x0, y0) = (x0 as i64, y0 as i64);
        let xs = [reflect_index(x0, w), reflect_index(x0 + 1, w)];
        let ys = [reflect_index(y0, h), reflect_index(y0 + 1, h)];
        let at = |xi: usize, yi: usize, c: usize| data[(ys[yi] * w + xs[xi]) * 3 + c] as f32;
        std::array::from_fn(|c| {
            let top = at(0, 0, c) * (1.0 - tx) + at(1, 0, c) * tx;
            let bottom = at(0, 1, c) * (1.0 - tx) + at(1, 1, c) * tx;
            to_u8(top * (1.0 - ty) + bottom * ty)
        })
    })
    .same_mpp(image)
}

fn warp_mask(mask: &BinaryMask, src: impl Fn(usize, usize) -> (f64, f64)) -> BinaryMask {
    let (w, h) = (mask.width(), mask.height());
    BinaryMask::from_fn(w, h, |x, y| {
        let (fx, fy) = src(x, y);
        mask.get(reflect_index(fx.round() as i64, w), reflect_index(fy.round() as i64, h))
    })
}

/// Smoothed random per-pixel displacements.
struct DisplacementField {
    w: usize,
    dx: Vec<f32>,
    dy: Vec<f32>,
}

impl DisplacementField {
    fn random<R: Rng + ?Sized>(w: usize, h: usize, alpha: f64, sigma: f64, rng: &mut R) -> Self {
        let mut component = || {
            let mut v: Vec<f32> = (0..w * h).map(|_| rng.random_range(-1.0f32..=1.0)).collect();
            blur_plane(&mut v, w, h, sigma);
            v.iter_mut().for_each(|d| *d *= alpha as f32);
            v
        };
        let dx = component();
        let dy = component();
        Self { w, dx, dy }
    }

    fn source(&self, x: usize, y: usize) -> (f64, f64) {
        let i = y * self.w + x;
        (x as f64 + self.dx[i] as f64, y as f64 + self.dy[i] as f64)
    }

    fn warp_image(&self, image: &ImageRgb) -> ImageRgb {
        warp_image(image, |x, y| self.source(x, y))
    }

    fn warp_mask(&self, mask: &BinaryMask) -> BinaryMask {
        warp_mask(mask, |x, y| self.source(x, y))
    }
}

/// Random elastic deformation: uniform `[-1, 1]` displacements smoothed by a
/// Gaussian of radius `sigma_s` and scaled by `alpha` pixels.
pub fn elastic_deform<R: Rng + ?Sized>(image: &ImageRgb, alpha: f64, sigma_s: f64, rng: &mut R) -> Result<ImageRgb> {
    if !(alpha >= 0.0) || !(sigma_s > 0.0) {
        return Err(Error::invalid(
            "elastic deformation",
            format!("alpha {alpha} must be >= 0 and sigma {sigma_s} > 0"),
        ));
    }
    Ok(DisplacementField::random(image.width(), image.height(), alpha, sigma_s, rng).warp_image(image))
}
