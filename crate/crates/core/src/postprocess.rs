//! From score maps to detections: threshold, disk opening, 8-connected
//! components, area filter, centroids, then classifier refinement.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infer::{score_tiles, Placement, Scorer, ScorerMode, Tile};
use crate::types::{BinaryMask, Detection, ImageRgb, ProbMap};

pub const DEFAULT_THRESHOLD: f32 = 0.5;
pub const DEFAULT_OPEN_RADIUS: usize = 2;
pub const DEFAULT_MIN_AREA: usize = 60;
pub const DEFAULT_ACCEPT: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub x: f64,
    pub y: f64,
    pub area: usize,
    pub seg_score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExtractParams {
    pub threshold: f32,
    pub open_radius: usize,
    pub min_area: usize,
}

impl Default for ExtractParams {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            open_radius: DEFAULT_OPEN_RADIUS,
            min_area: DEFAULT_MIN_AREA,
        }
    }
}

/// Half-widths of a digital disk, one per row offset `-r..=r`.
fn disk_rows(radius: usize) -> Vec<usize> {
    let r = radius as i64;
    (-r..=r)
        .map(|dy| {
            let mut hw = 0;
            while (hw + 1) * (hw + 1) + dy * dy <= r * r {
                hw += 1;
            }
            hw as usize
        })
        .collect()
}

/// Per-row prefix counts of set pixels; `out[y * (w + 1) + x]` counts
/// columns `< x`.
fn row_prefix(mask: &BinaryMask) -> Vec<u32> {
    let (w, h) = (mask.width(), mask.height());
    let mut out = vec![0u32; (w + 1) * h];
    for y in 0..h {
        let base = y * (w + 1);
        for x in 0..w {
            out[base + x + 1] = out[base + x] + mask.get(x, y) as u32;
        }
    }
    out
}

/// Erosion by a disk; pixels outside the image count as background.
pub fn erode(mask: &BinaryMask, radius: usize) -> BinaryMask {
    if radius == 0 {
        return mask.clone();
    }
    let (w, h) = (mask.width(), mask.height());
    let rows = disk_rows(radius);
    let pre = row_prefix(mask);
    let r = radius as i64;
    BinaryMask::from_fn(w, h, |x, y| {
        mask.get(x, y)
            && rows.iter().enumerate().all(|(k, &hw)| {
                let yy = y as i64 + k as i64 - r;
                let (x0, x1) = (x as i64 - hw as i64, x as i64 + hw as i64);
                if yy < 0 || yy >= h as i64 || x0 < 0 || x1 >= w as i64 {
                    return false;
                }
                let base = yy as usize * (w + 1);
                (pre[base + x1 as usize + 1] - pre[base + x0 as usize]) as i64 == x1 - x0 + 1
            })
    })
}

/// Dilation by a disk.
pub fn dilate(mask: &BinaryMask, radius: usize) -> BinaryMask {
    if radius == 0 {
        return mask.clone();
    }
    let (w, h) = (mask.width(), mask.height());
    let rows = disk_rows(radius);
    let pre = row_prefix(mask);
    let r = radius as i64;
    BinaryMask::from_fn(w, h, |x, y| {
        rows.iter().enumerate().any(|(k, &hw)| {
            let yy = y as i64 + k as i64 - r;
            if yy < 0 || yy >= h as i64 {
                return false;
            }
            let x0 = (x as i64 - hw as i64).max(0) as usize;
            let x1 = (x + hw).min(w - 1);
            let base = yy as usize * (w + 1);
            pre[base + x1 + 1] > pre[base + x0]
        })
    })
}

pub fn opening(mask: &BinaryMask, radius: usize) -> BinaryMask {
    dilate(&erode(mask, radius), radius)
}

/// 8-connected component labels (0 = background, components numbered
/// from 1 in raster order of their first pixel) and the component count.
pub fn label_components(mask: &BinaryMask) -> (Vec<u32>, usize) {
    let (w, h) = (mask.width(), mask.height());
    let mut parent: Vec<u32> = vec![0];
    let mut labels = vec![0u32; w * h];

    fn find(parent: &mut [u32], mut a: u32) -> u32 {
        while parent[a as usize] != a {
            parent[a as usize] = parent[parent[a as usize] as usize];
            a = parent[a as usize];
        }
        a
    }

    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            let mut neighbours = [0u32; 4];
            if x > 0 {
                neighbours[0] = labels[y * w + x - 1];
            }
            if y > 0 {
                let up = (y - 1) * w;
                if x > 0 {
                    neighbours[1] = labels[up + x - 1];
                }
                neighbours[2] = labels[up + x];
                if x + 1 < w {
                    neighbours[3] = labels[up + x + 1];
                }
            }
            let mut current = 0;
            for n in neighbours.into_iter().filter(|&n| n != 0) {
                let rn = find(&mut parent, n);
                if current == 0 {
                    current = rn;
                } else if rn != current {
                    let (lo, hi) = (rn.min(current), rn.max(current));
                    parent[hi as usize] = lo;
                    current = lo;
                }
            }
            if current == 0 {
                current = parent.len() as u32;
                parent.push(current);
            }
            labels[y * w + x] = current;
        }
    }

    // roots are the smallest provisional label of their set, so renumbering
    // roots in increasing order follows raster order of first pixels
    let mut compact = vec![0u32; parent.len()];
    let mut count = 0u32;
    for l in 1..parent.len() as u32 {
        let root = find(&mut parent, l);
        if root == l {
            count += 1;
            compact[l as usize] = count;
        }
    }
    for v in labels.iter_mut().filter(|v| **v != 0) {
        *v = compact[find(&mut parent, *v) as usize];
    }
    (labels, count as usize)
}

/// Candidate objects of a score map.
pub fn extract_candidates(map: &ProbMap, params: &ExtractParams) -> Result<Vec<Candidate>> {
    if !(params.threshold > 0.0 && params.threshold < 1.0) {
        return Err(Error::invalid("threshold", format!("{} not in (0, 1)", params.threshold)));
    }
    let mask = opening(&map.threshold(params.threshold), params.open_radius);
    let (labels, n) = label_components(&mask);
    let w = map.width();
    let mut acc = vec![(0.0f64, 0.0f64, 0usize, 0.0f64); n];
    for (i, &l) in labels.iter().enumerate() {
        if l != 0 {
            let a = &mut acc[l as usize - 1];
            a.0 += (i % w) as f64;
            a.1 += (i / w) as f64;
            a.2 += 1;
            a.3 += map.values()[i] as f64;
        }
    }
    Ok(acc
        .into_iter()
        .filter(|a| a.2 >= params.min_area.max(1))
        .map(|(sx, sy, area, ss)| {
            let n = area as f64;
            Candidate {
                x: sx / n,
                y: sy / n,
                area,
                seg_score: (ss / n).clamp(0.0, 1.0),
            }
        })
        .collect())
}

/// Candidates passed through unrefined, scored by their segmentation score.
pub fn candidates_to_detections(candidates: &[Candidate]) -> Vec<Detection> {
    candidates
        .iter()
        .map(|c| Detection::new(c.x, c.y, c.seg_score).expect("candidate fields are validated"))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RefineParams {
    pub patch: usize,
    pub accept: f64,
    pub tta: bool,
}

impl Default for RefineParams {
    fn default() -> Self {
        Self {
            patch: crate::dataset::CLASSIFICATION_PATCH,
            accept: DEFAULT_ACCEPT,
            tta: false,
        }
    }
}

/// Patch of `size` centred on `(x, y)` rounded to the pixel grid.
pub fn candidate_patch(image: &ImageRgb, x: f64, y: f64, size: usize) -> Tile {
    let x0 = x.round() as i64 - (size / 2) as i64;
    let y0 = y.round() as i64 - (size / 2) as i64;
    Tile {
        image: image.crop_reflect(x0, y0, size, size),
        origin: (x0, y0),
        placement: Placement::offset(x0 as f64, y0 as f64),
    }
}

const FLIPS: [(bool, bool); 4] = [(false, false), (true, false), (false, true), (true, true)];

/// Scores each candidate with every classifier (over flip variants when
/// `tta` is set), keeping the ones whose mean score reaches `accept`.
pub fn refine(
    image: &ImageRgb,
    candidates: &[Candidate],
    classifiers: &[&dyn Scorer],
    params: &RefineParams,
) -> Result<Vec<Detection>> {
    if classifiers.is_empty() {
        return Err(Error::invalid("refinement", "no classifiers"));
    }
    if let Some(s) = classifiers.iter().find(|s| s.mode() != ScorerMode::Classification) {
        return Err(Error::invalid("refinement", format!("scorer {} is not a classifier", s.id())));
    }
    if params.patch == 0 || !(0.0..=1.0).contains(&params.accept) {
        return Err(Error::invalid("refinement", format!("patch {} accept {}", params.patch, params.accept)));
    }
    let flips: &[(bool, bool)] = if params.tta { &FLIPS } else { &FLIPS[..1] };
    let tiles: Vec<Tile> = candidates
        .iter()
        .flat_map(|c| {
            let base = candidate_patch(image, c.x, c.y, params.patch);
            flips.iter().map(move |&(h, v)| Tile {
                image: if h || v { base.image.flipped(h, v) } else { base.image.clone() },
                origin: base.origin,
                placement: base.placement.flipped(params.patch, params.patch, h, v),
            })
        })
        .collect();

    let mut sums = vec![0f64; candidates.len()];
    for scorer in classifiers {
        let scores = score_tiles(*scorer, &tiles, |b| scorer.classify(b)).map_err(|e| {
            let index = e.index / flips.len();
            Error::Candidate {
                scorer: scorer.id().to_string(),
                index,
                x: candidates[index].x,
                y: candidates[index].y,
                source: e.error,
            }
        })?;
        for (i, s) in scores.iter().enumerate() {
            if !(0.0..=1.0).contains(s) {
                let index = i / flips.len();
                return Err(Error::Candidate {
                    scorer: scorer.id().to_string(),
                    index,
                    x: candidates[index].x,
                    y: candidates[index].y,
                    source: crate::error::ScorerError::Range(*s),
                });
            }
            sums[i / flips.len()] += s;
        }
    }
    let denom = (classifiers.len() * flips.len()) as f64;
    Ok(candidates
        .iter()
        .zip(sums)
        .map(|(c, s)| (c, (s / denom).clamp(0.0, 1.0)))
        .filter(|&(_, s)| s >= params.accept)
        .map(|(c, s)| Detection::new(c.x, c.y, s).expect("validated score"))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::infer::{ConstantScorer, OracleClassifier};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn disk_map(w: usize, h: usize, cx: f64, cy: f64, r: f64, v: f32) -> ProbMap {
        ProbMap::from_fn(w, h, |x, y| {
            if (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= r * r {
                v
            } else {
                0.0
            }
        })
    }

    fn random_mask(rng: &mut ChaCha8Rng, max: usize) -> BinaryMask {
        let w = rng.random_range(1..=max);
        let h = rng.random_range(1..=max);
        let density = rng.random_range(0.1..0.9);
        BinaryMask::from_fn(w, h, |_, _| rng.random_bool(density))
    }

    /// Brute-force erosion/dilation straight from the definitions.
    fn brute_erode(m: &BinaryMask, r: usize) -> BinaryMask {
        let r = r as i64;
        BinaryMask::from_fn(m.width(), m.height(), |x, y| {
            (-r..=r).all(|dy| {
                (-r..=r).all(|dx| {
                    if dx * dx + dy * dy > r * r {
                        return true;
                    }
                    let (xx, yy) = (x as i64 + dx, y as i64 + dy);
                    xx >= 0
                        && yy >= 0
                        && xx < m.width() as i64
                        && yy < m.height() as i64
                        && m.get(xx as usize, yy as usize)
                })
            })
        })
    }

    fn brute_dilate(m: &BinaryMask, r: usize) -> BinaryMask {
        let r = r as i64;
        BinaryMask::from_fn(m.width(), m.height(), |x, y| {
            (-r..=r).any(|dy| {
                (-r..=r).any(|dx| {
                    let (xx, yy) = (x as i64 + dx, y as i64 + dy);
                    dx * dx + dy * dy <= r * r
                        && xx >= 0
                        && yy >= 0
                        && xx < m.width() as i64
                        && yy < m.height() as i64
                        && m.get(xx as usize, yy as usize)
                })
            })
        })
    }

    /// Flood-fill labelling in raster order.
    fn flood_labels(m: &BinaryMask) -> (Vec<u32>, usize) {
        let (w, h) = (m.width(), m.height());
        let mut labels = vec![0u32; w * h];
        let mut n = 0;
        for start in 0..w * h {
            if !m.bits()[start] || labels[start] != 0 {
                continue;
            }
            n += 1;
            let mut stack = vec![start];
            labels[start] = n;
            while let Some(i) = stack.pop() {
                let (x, y) = ((i % w) as i64, (i / w) as i64);
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (xx, yy) = (x + dx, y + dy);
                        if xx < 0 || yy < 0 || xx >= w as i64 || yy >= h as i64 {
                            continue;
                        }
                        let j = yy as usize * w + xx as usize;
                        if m.bits()[j] && labels[j] == 0 {
                            labels[j] = n;
                            stack.push(j);
                        }
                    }
                }
            }
        }
        (labels, n as usize)
    }

    #[test]
    fn components_match_flood_fill() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..300 {
            let m = random_mask(&mut rng, 64);
            assert_eq!(label_components(&m), flood_labels(&m));
        }
    }

    #[test]
    fn morphology_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            let m = random_mask(&mut rng, 32);
            let r = rng.random_range(0..=4);
            assert_eq!(erode(&m, r), brute_erode(&m, r));
            assert_eq!(dilate(&m, r), brute_dilate(&m, r));
        }
    }

    #[test]
    fn opening_is_anti_extensive_and_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let m = random_mask(&mut rng, 48);
            let r = rng.random_range(0..=3);
            let o = opening(&m, r);
            assert!(o.bits().iter().zip(m.bits()).all(|(&a, &b)| !a || b));
            assert_eq!(opening(&o, r), o);
        }
    }

    #[test]
    fn extraction_examples() {
        let p = ExtractParams::default();
        assert!(extract_candidates(&ProbMap::filled(100, 100, 0.0), &p).unwrap().is_empty());

        let map = disk_map(100, 100, 50.0, 50.0, 10.0, 0.9);
        let c = extract_candidates(&map, &p).unwrap();
        assert_eq!(c.len(), 1);
        let brute = map.values().iter().filter(|&&v| v > 0.0).count();
        assert_eq!(brute, 317);
        assert!((c[0].x - 50.0).abs() <= 0.5 && (c[0].y - 50.0).abs() <= 0.5);
        // opening by radius 2 leaves a radius-10 disk nearly intact
        assert!(c[0].area <= brute && c[0].area + 12 >= brute, "area {}", c[0].area);
        assert!((c[0].seg_score - 0.9).abs() < 1e-6);

        let small = disk_map(100, 100, 50.0, 50.0, 3.0, 0.9);
        assert!(extract_candidates(&small, &p).unwrap().is_empty());
        // with no opening or area floor the radius-3 disk is the 29-pixel lattice disk
        let raw = ExtractParams { open_radius: 0, min_area: 1, ..p };
        assert_eq!(extract_candidates(&small, &raw).unwrap()[0].area, 29);

        assert!(extract_candidates(&map, &ExtractParams { threshold: 1.0, ..p }).is_err());
    }

    /// Separated radially decreasing bumps: superlevel sets never split.
    fn bump_map(rng: &mut ChaCha8Rng) -> ProbMap {
        let n = rng.random_range(0..6);
        let centers: Vec<(f64, f64, f64, f64)> = (0..n)
            .map(|i| (20.0 + 40.0 * i as f64, rng.random_range(20.0..60.0), rng.random_range(3.0..12.0), rng.random_range(0.3..1.0)))
            .collect();
        ProbMap::from_fn(260, 80, |x, y| {
            centers
                .iter()
                .map(|&(cx, cy, s, a)| {
                    let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    if d2 > 18.0 * 18.0 {
                        0.0
                    } else {
                        a * (-d2 / (2.0 * s * s)).exp()
                    }
                })
                .fold(0.0, f64::max) as f32
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn counts_fall_with_threshold_and_area(seed in any::<u64>(), t1 in 0.05f32..0.95, t2 in 0.05f32..0.95, a1 in 1usize..200, a2 in 1usize..200) {
            let map = bump_map(&mut ChaCha8Rng::seed_from_u64(seed));
            let count = |t: f32, a: usize| extract_candidates(&map, &ExtractParams { threshold: t, open_radius: 2, min_area: a }).unwrap().len();
            let (tl, th) = (t1.min(t2), t1.max(t2));
            let (al, ah) = (a1.min(a2), a1.max(a2));
            prop_assert!(count(th, 60) <= count(tl, 60));
            prop_assert!(count(0.5, ah) <= count(0.5, al));
        }

        #[test]
        fn candidates_are_inside_and_scored(seed in any::<u64>()) {
            let map = bump_map(&mut ChaCha8Rng::seed_from_u64(seed));
            for c in extract_candidates(&map, &ExtractParams { min_area: 1, ..Default::default() }).unwrap() {
                prop_assert!(c.x >= 0.0 && c.x <= 259.0 && c.y >= 0.0 && c.y <= 79.0);
                prop_assert!((0.0..=1.0).contains(&c.seg_score) && c.area >= 1);
            }
        }
    }

    #[test]
    fn threshold_can_split_a_dumbbell() {
        // two plateaus joined by a lower bridge: one component at 0.5,
        // two at 0.8, so counts are not monotone for arbitrary maps
        let map = ProbMap::from_fn(60, 20, |x, y| {
            if !(5..15).contains(&y) {
                0.0
            } else if !(25..35).contains(&x) {
                0.9
            } else {
                0.6
            }
        });
        let p = |t| ExtractParams { threshold: t, open_radius: 0, min_area: 1 };
        assert_eq!(extract_candidates(&map, &p(0.5)).unwrap().len(), 1);
        assert_eq!(extract_candidates(&map, &p(0.8)).unwrap().len(), 2);
    }

    fn cands() -> Vec<Candidate> {
        vec![
            Candidate { x: 10.0, y: 10.0, area: 100, seg_score: 0.7 },
            Candidate { x: 150.0, y: 90.0, area: 80, seg_score: 0.6 },
        ]
    }

    #[test]
    fn refine_with_constant_classifiers() {
        let img = ImageRgb::filled(200, 100, [200, 160, 200]);
        let one = ConstantScorer::new(1.0, ScorerMode::Classification).unwrap();
        let zero = ConstantScorer::new(0.0, ScorerMode::Classification).unwrap();
        let kept = refine(&img, &cands(), &[&one], &RefineParams::default()).unwrap();
        assert_eq!(kept.len(), 2);
        assert!(kept.iter().all(|d| d.score() == 1.0));
        assert_eq!((kept[1].x(), kept[1].y()), (150.0, 90.0));
        assert!(refine(&img, &cands(), &[&zero], &RefineParams { tta: true, ..Default::default() }).unwrap().is_empty());
        // ensemble mean 0.5 meets the default acceptance threshold
        assert_eq!(refine(&img, &cands(), &[&one, &zero], &RefineParams::default()).unwrap().len(), 2);
        let seg = ConstantScorer::new(1.0, ScorerMode::Segmentation).unwrap();
        assert!(refine(&img, &cands(), &[&seg], &RefineParams::default()).is_err());
    }

    #[test]
    fn oracle_classifier_survives_flip_tta() {
        let img = ImageRgb::filled(200, 100, [200, 160, 200]);
        let oracle = OracleClassifier::from_points(vec![(152.0, 88.0)], 17.0);
        let params = RefineParams { tta: true, ..Default::default() };
        let kept = refine(&img, &cands(), &[&oracle], &params).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!((kept[0].x(), kept[0].y(), kept[0].score()), (150.0, 90.0, 1.0));
    }

    struct Broken;

    impl Scorer for Broken {
        fn id(&self) -> &str {
            "broken"
        }
        fn mode(&self) -> ScorerMode {
            ScorerMode::Classification
        }
        fn classify_tile(&self, t: &Tile) -> std::result::Result<f64, crate::ScorerError> {
            if t.center().0 > 100.0 {
                Err(crate::ScorerError::Other("nope".into()))
            } else {
                Ok(0.9)
            }
        }
    }

    #[test]
    fn classifier_failure_names_the_candidate() {
        let img = ImageRgb::filled(200, 100, [200, 160, 200]);
        let err = refine(&img, &cands(), &[&Broken], &RefineParams::default()).unwrap_err();
        assert!(matches!(err, Error::Candidate { index: 1, .. }), "{err}");
    }
}
