//! Overlap-tiled inference: tile planning, the [`Scorer`] plug-in
//! interface, aggregation, test-time augmentation and ensembling.

use crate::dataset::axis_origins;
use crate::error::{Error, Result, ScorerError};
use crate::filter::blur_plane;
use crate::stain::{deconvolve, estimate_stain_matrix, StainMatrix};
use crate::types::{clamp_unit, AnnotationSet, ImageRgb, ProbMap};

#[cfg(feature = "fs")]
mod external;
#[cfg(feature = "fs")]
pub use external::ExternalScorer;

pub const DEFAULT_TILE: usize = 512;
pub const DEFAULT_OVERLAP: usize = 75;
/// Tiles scored per parallel round; bounds peak memory.
const TILE_CHUNK: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
}

/// Square windows over an image, reflect-padded up to one tile when the
/// image is smaller than a tile.
#[derive(Clone, Debug, PartialEq)]
pub struct TilePlan {
    pub width: usize,
    pub height: usize,
    pub padded_width: usize,
    pub padded_height: usize,
    pub tile: usize,
    pub overlap: usize,
    pub windows: Vec<Window>,
}

impl TilePlan {
    pub fn is_padded(&self) -> bool {
        self.padded_width != self.width || self.padded_height != self.height
    }
}

/// Origins at multiples of `tile - overlap`, the last clamped to the edge.
pub fn plan_tiles(width: usize, height: usize, tile: usize, overlap: usize) -> Result<TilePlan> {
    if tile == 0 || overlap >= tile {
        return Err(Error::invalid("tile plan", format!("need tile > overlap, got {tile} and {overlap}")));
    }
    if width == 0 || height == 0 {
        return Err(Error::invalid("tile plan", format!("empty image {width}x{height}")));
    }
    let stride = tile - overlap;
    let xs = axis_origins(width, tile, stride);
    let ys = axis_origins(height, tile, stride);
    let windows = ys
        .iter()
        .flat_map(|&y0| xs.iter().map(move |&x0| Window { x0, y0, w: tile, h: tile }))
        .collect();
    Ok(TilePlan {
        width,
        height,
        padded_width: width.max(tile),
        padded_height: height.max(tile),
        tile,
        overlap,
        windows,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScorerMode {
    Segmentation,
    Classification,
}

/// Affine map from tile pixel coordinates to source-image coordinates:
/// `x = sx * px + tx`, `y = sy * py + ty` with `sx, sy` of ±1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Placement {
    pub sx: f64,
    pub tx: f64,
    pub sy: f64,
    pub ty: f64,
}

impl Placement {
    pub fn offset(x0: f64, y0: f64) -> Self {
        Self { sx: 1.0, tx: x0, sy: 1.0, ty: y0 }
    }

    #[inline]
    pub fn to_image(&self, px: f64, py: f64) -> (f64, f64) {
        (self.sx * px + self.tx, self.sy * py + self.ty)
    }

    /// Placement of the tile flipped within itself.
    pub fn flipped(&self, w: usize, h: usize, horizontal: bool, vertical: bool) -> Self {
        let mut p = *self;
        if horizontal {
            p.tx += p.sx * (w as f64 - 1.0);
            p.sx = -p.sx;
        }
        if vertical {
            p.ty += p.sy * (h as f64 - 1.0);
            p.sy = -p.sy;
        }
        p
    }
}

/// A patch handed to a scorer, with its top-left corner in the frame it was
/// cut from and its placement in the original image.
#[derive(Clone, Debug)]
pub struct Tile {
    pub image: ImageRgb,
    pub origin: (i64, i64),
    pub placement: Placement,
}

impl Tile {
    /// Centre of the tile in original-image coordinates.
    pub fn center(&self) -> (f64, f64) {
        self.placement.to_image(
            (self.image.width() as f64 - 1.0) / 2.0,
            (self.image.height() as f64 - 1.0) / 2.0,
        )
    }
}

/// Failure of one tile inside a batch.
#[derive(Debug)]
pub struct BatchError {
    pub index: usize,
    pub error: ScorerError,
}

/// Tile scorer: a segmenter returning a map per tile or a classifier
/// returning one score per patch.
///
/// Implementations either override the per-tile methods or, for scorers
/// with expensive setup such as an external process, the batch methods.
pub trait Scorer: Send + Sync {
    fn id(&self) -> &str;

    fn mode(&self) -> ScorerMode;

    /// `false` makes the runner call the scorer from one thread, with the
    /// whole tile list as a single batch.
    fn parallel_safe(&self) -> bool {
        true
    }

    fn segment_tile(&self, _tile: &Tile) -> std::result::Result<ProbMap, ScorerError> {
        Err(ScorerError::Mode("segmentation"))
    }

    fn classify_tile(&self, _tile: &Tile) -> std::result::Result<f64, ScorerError> {
        Err(ScorerError::Mode("classification"))
    }

    fn segment(&self, tiles: &[Tile]) -> std::result::Result<Vec<ProbMap>, BatchError> {
        tiles
            .iter()
            .enumerate()
            .map(|(index, t)| self.segment_tile(t).map_err(|error| BatchError { index, error }))
            .collect()
    }

    fn classify(&self, tiles: &[Tile]) -> std::result::Result<Vec<f64>, BatchError> {
        tiles
            .iter()
            .enumerate()
            .map(|(index, t)| self.classify_tile(t).map_err(|error| BatchError { index, error }))
            .collect()
    }
}

/// Scores `tiles` with `f` in parallel chunks when the scorer allows it.
pub(crate) fn score_tiles<T: Send>(
    scorer: &dyn Scorer,
    tiles: &[Tile],
    f: impl Fn(&[Tile]) -> std::result::Result<Vec<T>, BatchError> + Sync,
) -> std::result::Result<Vec<T>, BatchError> {
    if !scorer.parallel_safe() || tiles.len() < 2 {
        return f(tiles);
    }
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        let parts: Vec<_> = tiles
            .par_iter()
            .enumerate()
            .map(|(i, t)| {
                f(std::slice::from_ref(t)).map_err(|e| BatchError { index: i, error: e.error })
            })
            .collect();
        let mut out = Vec::with_capacity(tiles.len());
        for part in parts {
            out.extend(part?);
        }
        Ok(out)
    }
    #[cfg(not(feature = "parallel"))]
    f(tiles)
}

/// Frame of a TTA variant: how its pixels map back onto the original.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Frame {
    flip_h: bool,
    flip_v: bool,
}

/// Sliding-window segmentation; each pixel is the mean of the scores of
/// the windows covering it.
pub fn run_tiled(image: &ImageRgb, scorer: &dyn Scorer, plan: &TilePlan) -> Result<ProbMap> {
    run_tiled_in_frame(image, scorer, plan, Frame { flip_h: false, flip_v: false })
}

fn run_tiled_in_frame(image: &ImageRgb, scorer: &dyn Scorer, plan: &TilePlan, frame: Frame) -> Result<ProbMap> {
    let (w, h) = (image.width(), image.height());
    if (plan.width, plan.height) != (w, h) {
        return Err(Error::GeometryMismatch {
            left_w: w,
            left_h: h,
            right_w: plan.width,
            right_h: plan.height,
        });
    }
    let mut sum = vec![0f64; w * h];
    let mut count = vec![0u32; w * h];
    for windows in plan.windows.chunks(TILE_CHUNK) {
        let tiles: Vec<Tile> = windows
            .iter()
            .map(|win| {
                let pixels = image.crop_reflect(win.x0 as i64, win.y0 as i64, win.w, win.h);
                let (mut sx, mut tx) = (1.0, win.x0 as f64);
                let (mut sy, mut ty) = (1.0, win.y0 as f64);
                if frame.flip_h {
                    (sx, tx) = (-1.0, (w - 1) as f64 - tx);
                }
                if frame.flip_v {
                    (sy, ty) = (-1.0, (h - 1) as f64 - ty);
                }
                Tile {
                    image: pixels,
                    origin: (win.x0 as i64, win.y0 as i64),
                    placement: Placement { sx, tx, sy, ty },
                }
            })
            .collect();
        let tile_error = |index: usize, source: ScorerError| Error::Tile {
            scorer: scorer.id().to_string(),
            x: tiles[index].origin.0,
            y: tiles[index].origin.1,
            source,
        };
        let maps = score_tiles(scorer, &tiles, |batch| scorer.segment(batch))
            .map_err(|e| tile_error(e.index, e.error))?;
        if maps.len() != tiles.len() {
            return Err(tile_error(
                0,
                ScorerError::Protocol(format!("{} maps for {} tiles", maps.len(), tiles.len())),
            ));
        }
        for (i, (win, map)) in windows.iter().zip(&maps).enumerate() {
            if (map.width(), map.height()) != (win.w, win.h) {
                return Err(tile_error(
                    i,
                    ScorerError::Geometry {
                        expected_w: win.w,
                        expected_h: win.h,
                        got_w: map.width(),
                        got_h: map.height(),
                    },
                ));
            }
            let (xe, ye) = ((win.x0 + win.w).min(w), (win.y0 + win.h).min(h));
            for y in win.y0..ye {
                let src = &map.values()[(y - win.y0) * win.w..];
                let row = y * w;
                for x in win.x0..xe {
                    sum[row + x] += src[x - win.x0] as f64;
                    count[row + x] += 1;
                }
            }
        }
    }
    let values = sum
        .iter()
        .zip(&count)
        .map(|(&s, &c)| clamp_unit((s / c as f64) as f32))
        .collect();
    Ok(ProbMap::from_raw(w, h, values))
}

/// One test-time variant of an image.
#[derive(Clone, Debug)]
pub struct TtaVariant {
    pub image: ImageRgb,
    pub flip_h: bool,
    pub flip_v: bool,
    pub sharpened: bool,
}

impl TtaVariant {
    /// Maps a score map of this variant back into the original frame.
    pub fn pull_back(&self, map: &ProbMap) -> ProbMap {
        if self.flip_h || self.flip_v {
            map.flipped(self.flip_h, self.flip_v)
        } else {
            map.clone()
        }
    }

    /// Inverse coordinate transform for a pixel of this variant.
    pub fn pull_back_point(&self, x: usize, y: usize) -> (usize, usize) {
        let (w, h) = (self.image.width(), self.image.height());
        (
            if self.flip_h { w - 1 - x } else { x },
            if self.flip_v { h - 1 - y } else { y },
        )
    }
}

pub const TTA_SHARPEN_AMOUNT: f64 = 0.5;
pub const TTA_SHARPEN_RADIUS: f64 = 1.0;

/// Identity, horizontal flip, vertical flip, both flips, unsharp mask.
pub fn tta_expand(image: &ImageRgb) -> Vec<TtaVariant> {
    let flips = [(false, false), (true, false), (false, true), (true, true)];
    let mut out: Vec<TtaVariant> = flips
        .iter()
        .map(|&(h, v)| TtaVariant {
            image: if h || v { image.flipped(h, v) } else { image.clone() },
            flip_h: h,
            flip_v: v,
            sharpened: false,
        })
        .collect();
    out.push(TtaVariant {
        image: crate::augment::unsharp(image, TTA_SHARPEN_AMOUNT, TTA_SHARPEN_RADIUS),
        flip_h: false,
        flip_v: false,
        sharpened: true,
    });
    out
}

/// Mean of the tiled maps of every scorer over every TTA variant, pulled
/// back to the original frame.
pub fn predict(image: &ImageRgb, scorers: &[&dyn Scorer], tta: bool, tile: usize, overlap: usize) -> Result<ProbMap> {
    if scorers.is_empty() {
        return Err(Error::invalid("ensemble", "no scorers"));
    }
    let plan = plan_tiles(image.width(), image.height(), tile, overlap)?;
    let variants = if tta {
        tta_expand(image)
    } else {
        vec![TtaVariant {
            image: image.clone(),
            flip_h: false,
            flip_v: false,
            sharpened: false,
        }]
    };
    let n = image.width() * image.height();
    let mut total = vec![0f64; n];
    for scorer in scorers {
        let mut maps = Vec::with_capacity(variants.len());
        for v in &variants {
            let frame = Frame { flip_h: v.flip_h, flip_v: v.flip_v };
            let map = run_tiled_in_frame(&v.image, *scorer, &plan, frame)?;
            maps.push(v.pull_back(&map));
        }
        // flip partners are summed pairwise so mirror-symmetric inputs give
        // bit-identical mirror-symmetric sums
        for i in 0..n {
            let at = |k: usize| maps[k].values()[i] as f64;
            let s = if maps.len() == 5 {
                ((at(0) + at(1)) + (at(2) + at(3))) + at(4)
            } else {
                maps.iter().map(|m| m.values()[i] as f64).sum()
            };
            total[i] += s;
        }
    }
    let denom = (scorers.len() * variants.len()) as f64;
    let values = total.iter().map(|&s| clamp_unit((s / denom) as f32)).collect();
    Ok(ProbMap::from_raw(image.width(), image.height(), values))
}

/// Test double for a trained segmenter: a Gaussian bump of radius
/// `sigma` around every mitotic ground-truth point.
pub struct OracleScorer {
    points: Vec<(f64, f64)>,
    sigma: f64,
}

/// Gaussian tails beyond this many sigmas are dropped (below 1e-14).
const ORACLE_CUTOFF_SIGMAS: f64 = 8.0;

impl OracleScorer {
    pub fn new(gt: &AnnotationSet, sigma: f64) -> Result<Self> {
        Self::from_points(gt.mitotic().map(|p| (p.x, p.y)).collect(), sigma)
    }

    pub fn from_points(points: Vec<(f64, f64)>, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::invalid("oracle sigma", format!("{sigma}")));
        }
        Ok(Self { points, sigma })
    }
}

pub fn oracle_scorer(gt: &AnnotationSet, sigma: f64) -> Result<OracleScorer> {
    OracleScorer::new(gt, sigma)
}

impl Scorer for OracleScorer {
    fn id(&self) -> &str {
        "oracle"
    }

    fn mode(&self) -> ScorerMode {
        ScorerMode::Segmentation
    }

    fn segment_tile(&self, tile: &Tile) -> std::result::Result<ProbMap, ScorerError> {
        let (w, h) = (tile.image.width(), tile.image.height());
        let p = tile.placement;
        let (ax, ay) = p.to_image(0.0, 0.0);
        let (bx, by) = p.to_image((w - 1) as f64, (h - 1) as f64);
        let reach = ORACLE_CUTOFF_SIGMAS * self.sigma;
        let near: Vec<(f64, f64)> = self
            .points
            .iter()
            .copied()
            .filter(|&(x, y)| {
                x >= ax.min(bx) - reach && x <= ax.max(bx) + reach && y >= ay.min(by) - reach && y <= ay.max(by) + reach
            })
            .collect();
        if near.is_empty() {
            return Ok(ProbMap::filled(w, h, 0.0));
        }
        let inv = 1.0 / (2.0 * self.sigma * self.sigma);
        Ok(ProbMap::from_fn(w, h, |px, py| {
            let (x, y) = p.to_image(px as f64, py as f64);
            let d2 = near
                .iter()
                .map(|&(gx, gy)| (x - gx).powi(2) + (y - gy).powi(2))
                .fold(f64::INFINITY, f64::min);
            if d2 > reach * reach {
                0.0
            } else {
                (-d2 * inv).exp() as f32
            }
        }))
    }
}

/// Test double for a trained classifier: 1 when a mitotic ground-truth
/// point lies within `radius` of the patch centre, else 0.
pub struct OracleClassifier {
    points: Vec<(f64, f64)>,
    radius: f64,
}

impl OracleClassifier {
    pub fn new(gt: &AnnotationSet, radius: f64) -> Self {
        Self::from_points(gt.mitotic().map(|p| (p.x, p.y)).collect(), radius)
    }

    pub fn from_points(points: Vec<(f64, f64)>, radius: f64) -> Self {
        Self { points, radius }
    }
}

impl Scorer for OracleClassifier {
    fn id(&self) -> &str {
        "oracle-classifier"
    }

    fn mode(&self) -> ScorerMode {
        ScorerMode::Classification
    }

    fn classify_tile(&self, tile: &Tile) -> std::result::Result<f64, ScorerError> {
        let (cx, cy) = tile.center();
        let hit = self
            .points
            .iter()
            .any(|&(x, y)| (x - cx).powi(2) + (y - cy).powi(2) <= self.radius * self.radius);
        Ok(if hit { 1.0 } else { 0.0 })
    }
}

/// Scorer returning one fixed value, in either mode.
pub struct ConstantScorer {
    value: f64,
    mode: ScorerMode,
}

impl ConstantScorer {
    pub fn new(value: f64, mode: ScorerMode) -> Result<Self> {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::invalid("constant score", format!("{value} outside [0, 1]")));
        }
        Ok(Self { value, mode })
    }
}

impl Scorer for ConstantScorer {
    fn id(&self) -> &str {
        "constant"
    }

    fn mode(&self) -> ScorerMode {
        self.mode
    }

    fn segment_tile(&self, tile: &Tile) -> std::result::Result<ProbMap, ScorerError> {
        Ok(ProbMap::filled(tile.image.width(), tile.image.height(), self.value as f32))
    }

    fn classify_tile(&self, _tile: &Tile) -> std::result::Result<f64, ScorerError> {
        Ok(self.value)
    }
}

/// Non-learned baseline: hematoxylin concentration normalized by its 99th
/// percentile and Gaussian-smoothed. Falls back to the reference stain
/// matrix when a tile holds too little tissue for estimation.
///
/// In classification mode the score is the mean of that map over a disk of
/// `classify_radius` around the patch centre.
pub struct ClassicalScorer {
    mode: ScorerMode,
    smoothing: f64,
    classify_radius: f64,
    fallback: StainMatrix,
}

pub const CLASSICAL_SMOOTHING: f64 = 2.0;

impl ClassicalScorer {
    pub fn new(mode: ScorerMode) -> Self {
        Self {
            mode,
            smoothing: CLASSICAL_SMOOTHING,
            classify_radius: crate::dataset::DISK_RADIUS,
            fallback: StainMatrix::reference(),
        }
    }

    pub fn hematoxylin_map(&self, image: &ImageRgb) -> ProbMap {
        let (w, h) = (image.width(), image.height());
        let m = estimate_stain_matrix(image).unwrap_or(self.fallback);
        let (mut hem, _) = deconvolve(image, &m).into_channels();
        let mut sorted = hem.clone();
        let rank = ((sorted.len() - 1) as f64 * 0.99).round() as usize;
        let (_, p99, _) = sorted.select_nth_unstable_by(rank, f32::total_cmp);
        let p99 = *p99;
        if !(p99 > 1e-6) {
            return ProbMap::filled(w, h, 0.0);
        }
        hem.iter_mut().for_each(|v| *v /= p99);
        blur_plane(&mut hem, w, h, self.smoothing);
        hem.iter_mut().for_each(|v| *v = clamp_unit(*v));
        ProbMap::from_raw(w, h, hem)
    }
}

pub fn classical_scorer() -> ClassicalScorer {
    ClassicalScorer::new(ScorerMode::Segmentation)
}

impl Scorer for ClassicalScorer {
    fn id(&self) -> &str {
        "classical"
    }

    fn mode(&self) -> ScorerMode {
        self.mode
    }

    fn segment_tile(&self, tile: &Tile) -> std::result::Result<ProbMap, ScorerError> {
        Ok(self.hematoxylin_map(&tile.image))
    }

    fn classify_tile(&self, tile: &Tile) -> std::result::Result<f64, ScorerError> {
        let map = self.hematoxylin_map(&tile.image);
        let (cx, cy) = ((map.width() as f64 - 1.0) / 2.0, (map.height() as f64 - 1.0) / 2.0);
        let r2 = self.classify_radius * self.classify_radius;
        let (mut s, mut n) = (0.0, 0usize);
        for y in 0..map.height() {
            for x in 0..map.width() {
                if (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= r2 {
                    s += map.get(x, y) as f64;
                    n += 1;
                }
            }
        }
        Ok(if n == 0 { 0.0 } else { (s / n as f64).clamp(0.0, 1.0) })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::PointAnnotation;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn origins(plan: &TilePlan) -> (Vec<usize>, Vec<usize>) {
        let mut xs: Vec<_> = plan.windows.iter().map(|w| w.x0).collect();
        let mut ys: Vec<_> = plan.windows.iter().map(|w| w.y0).collect();
        xs.sort();
        xs.dedup();
        ys.sort();
        ys.dedup();
        (xs, ys)
    }

    #[test]
    fn plan_examples() {
        let p = plan_tiles(512, 512, 512, 75).unwrap();
        assert_eq!(p.windows, [Window { x0: 0, y0: 0, w: 512, h: 512 }]);

        let p = plan_tiles(949, 949, 512, 75).unwrap();
        assert_eq!(p.windows.len(), 4);
        assert_eq!(origins(&p), (vec![0, 437], vec![0, 437]));

        let p = plan_tiles(1000, 512, 512, 75).unwrap();
        assert_eq!(origins(&p).0, [0, 437, 488]);
        assert_eq!(p.windows.len(), 3);

        let small = plan_tiles(100, 700, 512, 75).unwrap();
        assert!(small.is_padded());
        assert_eq!((small.padded_width, small.padded_height), (512, 700));

        assert!(plan_tiles(10, 10, 75, 75).is_err());
    }

    proptest! {
        #[test]
        fn plan_covers_with_overlap(w in 1usize..=4096, h in 1usize..=4096) {
            let p = plan_tiles(w, h, 512, 75).unwrap();
            let (xs, ys) = origins(&p);
            prop_assert!(p.windows.iter().all(|win| win.w == 512 && win.h == 512));
            prop_assert!(p.windows.iter().all(|win| win.x0 + 512 <= p.padded_width && win.y0 + 512 <= p.padded_height));
            for axis in [(&xs, w), (&ys, h)] {
                let (o, extent) = axis;
                prop_assert_eq!(o[0], 0);
                prop_assert!(o.last().unwrap() + 512 >= extent);
                for pair in o.windows(2) {
                    prop_assert!(pair[0] + 512 >= pair[1] + 75);
                }
            }
        }
    }

    #[test]
    fn constant_scorer_averages_to_itself() {
        let img = ImageRgb::filled(1000, 700, [200, 150, 200]);
        let s = ConstantScorer::new(0.7, ScorerMode::Segmentation).unwrap();
        let plan = plan_tiles(1000, 700, 512, 75).unwrap();
        let map = run_tiled(&img, &s, &plan).unwrap();
        assert!(map.values().iter().all(|&v| (v - 0.7).abs() < 1e-6));
    }

    /// 0 on tiles starting at x = 0, 1 elsewhere.
    struct LeftRight;

    impl Scorer for LeftRight {
        fn id(&self) -> &str {
            "left-right"
        }
        fn mode(&self) -> ScorerMode {
            ScorerMode::Segmentation
        }
        fn segment_tile(&self, t: &Tile) -> std::result::Result<ProbMap, ScorerError> {
            let v = if t.origin.0 == 0 { 0.0 } else { 1.0 };
            Ok(ProbMap::filled(t.image.width(), t.image.height(), v))
        }
    }

    #[test]
    fn two_tile_overlap_strip_is_half() {
        let img = ImageRgb::filled(949, 512, [255; 3]);
        let map = run_tiled(&img, &LeftRight, &plan_tiles(949, 512, 512, 75).unwrap()).unwrap();
        for x in [0, 436, 437, 511, 512, 948] {
            let expected = if x < 437 { 0.0 } else if x < 512 { 0.5 } else { 1.0 };
            assert_eq!(map.get(x, 100), expected, "x = {x}");
        }
    }

    struct Failing;

    impl Scorer for Failing {
        fn id(&self) -> &str {
            "failing"
        }
        fn mode(&self) -> ScorerMode {
            ScorerMode::Segmentation
        }
        fn segment_tile(&self, t: &Tile) -> std::result::Result<ProbMap, ScorerError> {
            if t.origin == (437, 437) {
                Err(ScorerError::Other("boom".into()))
            } else {
                Ok(ProbMap::filled(t.image.width(), t.image.height(), 0.0))
            }
        }
    }

    #[test]
    fn failing_tile_is_named() {
        let img = ImageRgb::filled(949, 949, [255; 3]);
        let err = run_tiled(&img, &Failing, &plan_tiles(949, 949, 512, 75).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Tile { x: 437, y: 437, .. }), "{err}");
        assert!(err.to_string().contains("(437, 437)"));
    }

    fn gt(points: &[(f64, f64)]) -> AnnotationSet {
        AnnotationSet::new("g", 0.25, points.iter().map(|&(x, y)| PointAnnotation::mitotic(x, y)).collect()).unwrap()
    }

    #[test]
    fn oracle_examples() {
        let s = oracle_scorer(&gt(&[(300.0, 300.0)]), 6.0).unwrap();
        let far = Tile {
            image: ImageRgb::filled(64, 64, [255; 3]),
            origin: (0, 0),
            placement: Placement::offset(0.0, 0.0),
        };
        let m = s.segment_tile(&far).unwrap();
        assert!(m.values().iter().all(|&v| v < 0.0004));

        let at = Tile {
            image: ImageRgb::filled(64, 64, [255; 3]),
            origin: (280, 280),
            placement: Placement::offset(280.0, 280.0),
        };
        assert_eq!(s.segment_tile(&at).unwrap().get(20, 20), 1.0);

        let pair = oracle_scorer(&gt(&[(20.0, 20.0), (22.0, 20.0)]), 6.0).unwrap();
        let m = pair.segment_tile(&far).unwrap();
        let max = m.values().iter().cloned().fold(0.0, f32::max);
        assert_eq!(max, 1.0);
        // one blob: the midpoint stays high
        assert!(m.get(21, 20) > 0.9);
        assert!(oracle_scorer(&gt(&[]), 0.0).is_err());
    }

    #[test]
    fn oracle_map_peaks_at_ground_truth() {
        let pts = [(100.0, 120.0), (600.0, 450.0), (900.0, 60.0)];
        let s = oracle_scorer(&gt(&pts), 6.0).unwrap();
        let img = ImageRgb::filled(1000, 700, [230, 200, 230]);
        let map = run_tiled(&img, &s, &plan_tiles(1000, 700, 512, 75).unwrap()).unwrap();
        for (gx, gy) in pts {
            let (mut best, mut at) = (0.0f32, (0, 0));
            for y in (gy as usize - 10)..(gy as usize + 10) {
                for x in (gx as usize - 10)..(gx as usize + 10) {
                    if map.get(x, y) > best {
                        best = map.get(x, y);
                        at = (x, y);
                    }
                }
            }
            assert!(((at.0 as f64 - gx).powi(2) + (at.1 as f64 - gy).powi(2)).sqrt() <= 1.0);
        }
    }

    #[test]
    fn classical_blank_tile_is_zero() {
        let s = classical_scorer();
        let m = s.hematoxylin_map(&ImageRgb::filled(128, 128, [255; 3]));
        assert!(m.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn classical_peaks_on_hematoxylin_blob() {
        let m = StainMatrix::reference();
        let (cx, cy) = (70.0, 50.0);
        let img = crate::synth::compose(&m, 160, 128, |x, y| {
            let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
            if d <= 8.0 {
                (2.0 - 0.1 * d, 0.1)
            } else {
                (0.3, 1.0 + 0.002 * ((x * 7 + y * 13) % 100) as f64)
            }
        });
        let map = classical_scorer().hematoxylin_map(&img);
        let max = map.values().iter().cloned().fold(0.0, f32::max);
        assert!(map.values().iter().all(|v| (0.0..=1.0).contains(v)));
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
        for y in 0..map.height() {
            for x in 0..map.width() {
                if map.get(x, y) == max {
                    sx += x as f64;
                    sy += y as f64;
                    n += 1.0;
                }
            }
        }
        let (px, py) = (sx / n, sy / n);
        assert!(((px - cx).powi(2) + (py - cy).powi(2)).sqrt() <= 2.0, "peak at ({px}, {py})");
    }

    #[test]
    fn tta_variants_and_inverses() {
        let img = ImageRgb::from_fn(5, 3, |x, y| [x as u8 * 40, y as u8 * 80, 9]);
        let vars = tta_expand(&img);
        assert_eq!(vars.len(), 5);
        let kinds: Vec<_> = vars.iter().map(|v| (v.flip_h, v.flip_v, v.sharpened)).collect();
        assert_eq!(
            kinds,
            [(false, false, false), (true, false, false), (false, true, false), (true, true, false), (false, false, true)]
        );
        for v in &vars {
            for y in 0..3 {
                for x in 0..5 {
                    let (ox, oy) = v.pull_back_point(x, y);
                    if !v.sharpened {
                        assert_eq!(v.image.pixel(x, y), img.pixel(ox, oy));
                    }
                    let fwd = v.pull_back_point(ox, oy);
                    assert_eq!(fwd, (x, y));
                }
            }
        }
        let flat = ImageRgb::filled(6, 6, [10, 20, 30]);
        let vars = tta_expand(&flat);
        assert!(vars[..4].iter().all(|v| v.image == flat));
    }

    #[test]
    fn predict_examples() {
        let img = crate::synth::tissue_image(&StainMatrix::reference(), 600, 530, &mut ChaCha8Rng::seed_from_u64(1));
        let s = classical_scorer();
        let plan = plan_tiles(600, 530, 512, 75).unwrap();
        let single = run_tiled(&img, &s, &plan).unwrap();
        assert_eq!(predict(&img, &[&s], false, 512, 75).unwrap(), single);
        assert_eq!(predict(&img, &[&s, &s, &s], false, 512, 75).unwrap(), single);

        let c: Vec<ConstantScorer> = [0.2, 0.4, 0.6]
            .iter()
            .map(|&v| ConstantScorer::new(v, ScorerMode::Segmentation).unwrap())
            .collect();
        let refs: Vec<&dyn Scorer> = c.iter().map(|s| s as &dyn Scorer).collect();
        let m = predict(&img, &refs, true, 512, 75).unwrap();
        assert!(m.values().iter().all(|&v| (v - 0.4).abs() < 1e-6));
        assert!(predict(&img, &[], false, 512, 75).is_err());
    }

    /// Pointwise darkness score.
    struct Darkness;

    impl Scorer for Darkness {
        fn id(&self) -> &str {
            "darkness"
        }
        fn mode(&self) -> ScorerMode {
            ScorerMode::Segmentation
        }
        fn segment_tile(&self, t: &Tile) -> std::result::Result<ProbMap, ScorerError> {
            let img = &t.image;
            Ok(ProbMap::from_fn(img.width(), img.height(), |x, y| {
                let p = img.pixel(x, y);
                1.0 - (p[0] as f32 + p[1] as f32 + p[2] as f32) / 765.0
            }))
        }
    }

    #[test]
    fn flip_tta_keeps_mirror_symmetry() {
        let half = crate::synth::tissue_image(&StainMatrix::reference(), 500, 600, &mut ChaCha8Rng::seed_from_u64(8));
        let w = 1000;
        let img = ImageRgb::from_fn(w, 600, |x, y| half.pixel(if x < 500 { x } else { w - 1 - x }, y));
        for scorer in [&Darkness as &dyn Scorer, &classical_scorer()] {
            let map = predict(&img, &[scorer], true, 512, 75).unwrap();
            let sym = (0..600).all(|y| (0..w).all(|x| map.get(x, y) == map.get(w - 1 - x, y)));
            if scorer.id() == "darkness" {
                assert!(sym, "pointwise scorer under flip TTA must stay symmetric");
            }
        }
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_matches_serial() {
        struct Serial(ClassicalScorer);
        impl Scorer for Serial {
            fn id(&self) -> &str {
                "serial"
            }
            fn mode(&self) -> ScorerMode {
                ScorerMode::Segmentation
            }
            fn parallel_safe(&self) -> bool {
                false
            }
            fn segment_tile(&self, t: &Tile) -> std::result::Result<ProbMap, ScorerError> {
                self.0.segment_tile(t)
            }
        }
        let img = crate::synth::tissue_image(&StainMatrix::reference(), 1100, 900, &mut ChaCha8Rng::seed_from_u64(2));
        let plan = plan_tiles(1100, 900, 512, 75).unwrap();
        let par = run_tiled(&img, &classical_scorer(), &plan).unwrap();
        let ser = run_tiled(&img, &Serial(classical_scorer()), &plan).unwrap();
        assert!(par.values().iter().zip(ser.values()).all(|(a, b)| (a - b).abs() <= 1e-6));
    }
}
