//! Distance-thresholded detection matching, precision/recall/F1 and the
//! Jaccard index.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{BinaryMask, Detection};

/// 7.5 µm at 0.25 µm/px.
pub const DEFAULT_MATCH_RADIUS_PX: f64 = 30.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchStrategy {
    /// Maximum-cardinality, minimum-total-distance assignment.
    #[default]
    Optimal,
    /// Detections in descending score order each take their nearest free
    /// ground-truth point.
    Greedy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// `(detection index, gt index, distance)`, sorted by detection index.
    pub pairs: Vec<(usize, usize, f64)>,
}

impl MatchResult {
    pub fn total_distance(&self) -> f64 {
        self.pairs.iter().map(|p| p.2).sum()
    }
}

/// Minimum-cost assignment of every row of a `rows x cols` matrix
/// (`rows <= cols`) to a distinct column. Returns the column of each row.
///
/// Shortest augmenting paths with row/column potentials, O(rows² · cols).
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    assert!(n <= m, "hungarian needs rows <= cols");
    // 1-based with a virtual column 0
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=m {
        if owner[j] != 0 {
            assignment[owner[j] - 1] = j - 1;
        }
    }
    assignment
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).hypot(a.1 - b.1)
}

/// One-to-one matching of detections to ground-truth points within
/// `radius_px`.
pub fn match_points(dets: &[Detection], gts: &[(f64, f64)], radius_px: f64, strategy: MatchStrategy) -> Result<MatchResult> {
    if !(radius_px > 0.0 && radius_px.is_finite()) {
        return Err(Error::invalid("matching radius", format!("{radius_px}")));
    }
    let pos: Vec<(f64, f64)> = dets.iter().map(|d| (d.x(), d.y())).collect();
    let mut pairs = match strategy {
        MatchStrategy::Optimal => optimal_pairs(&pos, gts, radius_px),
        MatchStrategy::Greedy => greedy_pairs(dets, gts, radius_px),
    };
    pairs.sort_by_key(|p| (p.0, p.1));
    let tp = pairs.len();
    Ok(MatchResult {
        tp,
        fp: dets.len() - tp,
        fn_: gts.len() - tp,
        pairs,
    })
}

fn optimal_pairs(dets: &[(f64, f64)], gts: &[(f64, f64)], radius: f64) -> Vec<(usize, usize, f64)> {
    if dets.is_empty() || gts.is_empty() {
        return Vec::new();
    }
    let transpose = dets.len() > gts.len();
    let (rows, cols) = if transpose { (gts, dets) } else { (dets, gts) };
    // an unmatched slot costs more than any feasible set of real pairs,
    // so cardinality is maximized before distance is minimized
    let forbidden = 2.0 * radius * (rows.len() as f64 + 1.0);
    let cost: Vec<Vec<f64>> = rows
        .iter()
        .map(|&r| {
            cols.iter()
                .map(|&c| {
                    let d = dist(r, c);
                    if d <= radius {
                        d
                    } else {
                        forbidden
                    }
                })
                .collect()
        })
        .collect();
    hungarian(&cost)
        .into_iter()
        .enumerate()
        .filter(|&(r, c)| cost[r][c] < forbidden)
        .map(|(r, c)| {
            let (di, gi) = if transpose { (c, r) } else { (r, c) };
            (di, gi, dist(dets[di], gts[gi]))
        })
        .collect()
}

fn greedy_pairs(dets: &[Detection], gts: &[(f64, f64)], radius: f64) -> Vec<(usize, usize, f64)> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score().total_cmp(&dets[a].score()).then(a.cmp(&b)));
    let mut taken = vec![false; gts.len()];
    let mut pairs = Vec::new();
    for di in order {
        let p = (dets[di].x(), dets[di].y());
        let best = gts
            .iter()
            .enumerate()
            .filter(|(gi, _)| !taken[*gi])
            .map(|(gi, &g)| (gi, dist(p, g)))
            .filter(|&(_, d)| d <= radius)
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        if let Some((gi, d)) = best {
            taken[gi] = true;
            pairs.push((di, gi, d));
        }
    }
    pairs
}

/// `(precision, recall, f1)`, with every `0/0` taken as 0.
pub fn prf(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let p = ratio(tp, tp + fp);
    let r = ratio(tp, tp + fn_);
    (p, r, f1_score(p, r))
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub image_id: String,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub radius_px: f64,
    pub per_image: Vec<ImageScore>,
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization")
    }

    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<24} {:>5} {:>5} {:>5} {:>9} {:>9} {:>9}\n",
            "image", "tp", "fp", "fn", "precision", "recall", "f1"
        );
        let mut row = |id: &str, tp, fp, fn_, p: f64, r: f64, f: f64| {
            out.push_str(&format!("{id:<24} {tp:>5} {fp:>5} {fn_:>5} {p:>9.4} {r:>9.4} {f:>9.4}\n"));
        };
        for s in &self.per_image {
            row(&s.image_id, s.tp, s.fp, s.fn_, s.precision, s.recall, s.f1);
        }
        row("ALL (micro)", self.tp, self.fp, self.fn_, self.precision, self.recall, self.f1);
        out
    }
}

/// Micro-averaged metrics over images. Images present on only one side are
/// scored against an empty list on the other.
pub fn evaluate_run(
    dets: &[(String, Vec<Detection>)],
    gts: &[(String, Vec<(f64, f64)>)],
    radius_px: f64,
    strategy: MatchStrategy,
) -> Result<Report> {
    let mut by_image: BTreeMap<&str, (&[Detection], &[(f64, f64)])> = BTreeMap::new();
    let mut seen = HashSet::new();
    for (id, d) in dets {
        if !seen.insert(id.as_str()) {
            return Err(Error::DuplicateImageId(id.clone()));
        }
        by_image.entry(id).or_insert((&[], &[])).0 = d;
    }
    seen.clear();
    for (id, g) in gts {
        if !seen.insert(id.as_str()) {
            return Err(Error::DuplicateImageId(id.clone()));
        }
        by_image.entry(id).or_insert((&[], &[])).1 = g;
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    let mut per_image = Vec::with_capacity(by_image.len());
    for (id, (d, g)) in by_image {
        let m = match_points(d, g, radius_px, strategy)?;
        tp += m.tp;
        fp += m.fp;
        fn_ += m.fn_;
        let (precision, recall, f1) = prf(m.tp, m.fp, m.fn_);
        per_image.push(ImageScore {
            image_id: id.to_string(),
            tp: m.tp,
            fp: m.fp,
            fn_: m.fn_,
            precision,
            recall,
            f1,
        });
    }
    let (precision, recall, f1) = prf(tp, fp, fn_);
    Ok(Report {
        precision,
        recall,
        f1,
        tp,
        fp,
        fn_,
        radius_px,
        per_image,
    })
}

/// `|a ∩ b| / |a ∪ b|`, 1 when both masks are empty.
pub fn jaccard(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(Error::GeometryMismatch {
            left_w: a.width(),
            left_h: a.height(),
            right_w: b.width(),
            right_h: b.height(),
        });
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.bits().iter().zip(b.bits()) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}
