//! Synthetic H&E-like rasters composed with the Beer–Lambert model, for
//! fixtures, demos and oracle tests.

use rand::Rng;

use crate::stain::StainMatrix;
use crate::types::{AnnotationSet, ImageRgb, PointAnnotation};

/// Renders concentrations `f(x, y) = (hematoxylin, eosin)` through `m`.
pub fn compose(
    m: &StainMatrix,
    width: usize,
    height: usize,
    mut f: impl FnMut(usize, usize) -> (f64, f64),
) -> ImageRgb {
    ImageRgb::from_fn(width, height, |x, y| {
        let (ch, ce) = f(x, y);
        m.compose(ch.max(0.0), ce.max(0.0))
            .map(|od| (255.0 * (-od).exp()).round().clamp(0.0, 255.0) as u8)
    })
}

/// Concentration field of stroma, scattered nuclei and a few empty lumens.
struct TissueField {
    width: usize,
    height: usize,
    h: Vec<f64>,
    e: Vec<f64>,
}

impl TissueField {
    fn new<R: Rng + ?Sized>(width: usize, height: usize, rng: &mut R) -> Self {
        let n = width * height;
        let mut h = Vec::with_capacity(n);
        let mut e = Vec::with_capacity(n);
        for _ in 0..n {
            h.push(rng.random_range(0.05..0.15));
            e.push(rng.random_range(0.5..1.8));
        }
        let mut field = Self { width, height, h, e };

        let lumens = (n / 40_000).max(1);
        for _ in 0..lumens {
            let (cx, cy) = field.random_center(rng);
            let r = rng.random_range(6.0..20.0);
            field.paint_disk(cx, cy, r, |_| (0.01, 0.02));
        }
        let nuclei = n / 500;
        for _ in 0..nuclei {
            let (cx, cy) = field.random_center(rng);
            let r = rng.random_range(3.0..7.0);
            let ch = rng.random_range(0.7..1.4);
            let ce = rng.random_range(0.05..0.3);
            field.paint_disk(cx, cy, r, |_| (ch, ce));
        }
        field
    }

    fn random_center<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64) {
        (
            rng.random_range(0.0..self.width as f64),
            rng.random_range(0.0..self.height as f64),
        )
    }

    /// Overwrites pixels within `r` of `(cx, cy)`; `f` receives the distance.
    fn paint_disk(&mut self, cx: f64, cy: f64, r: f64, mut f: impl FnMut(f64) -> (f64, f64)) {
        let x0 = (cx - r).floor().max(0.0) as usize;
        let y0 = (cy - r).floor().max(0.0) as usize;
        let x1 = ((cx + r).ceil() as usize).min(self.width - 1);
        let y1 = ((cy + r).ceil() as usize).min(self.height - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                if d <= r {
                    let (ch, ce) = f(d);
                    self.h[y * self.width + x] = ch;
                    self.e[y * self.width + x] = ce;
                }
            }
        }
    }

    fn render(&self, m: &StainMatrix) -> ImageRgb {
        compose(m, self.width, self.height, |x, y| {
            let i = y * self.width + x;
            (self.h[i], self.e[i])
        })
    }
}

/// Random tissue-like two-stain image.
pub fn tissue_image<R: Rng + ?Sized>(m: &StainMatrix, width: usize, height: usize, rng: &mut R) -> ImageRgb {
    TissueField::new(width, height, rng).render(m)
}

/// Tissue with dense hematoxylin figures of radius `blob_radius` painted
/// at `points`.
pub fn tissue_with_figures<R: Rng + ?Sized>(
    m: &StainMatrix,
    width: usize,
    height: usize,
    points: &[(f64, f64)],
    blob_radius: f64,
    rng: &mut R,
) -> ImageRgb {
    let mut field = TissueField::new(width, height, rng);
    for &(cx, cy) in points {
        field.paint_disk(cx, cy, blob_radius, |d| (2.2 - 0.6 * d / blob_radius, 0.1));
    }
    field.render(m)
}

/// Rejection-samples `n` points at least `min_separation` apart and
/// `margin` from every border. Returns fewer if the area is too crowded.
pub fn scatter_points<R: Rng + ?Sized>(
    width: usize,
    height: usize,
    n: usize,
    min_separation: f64,
    margin: f64,
    rng: &mut R,
) -> Vec<(f64, f64)> {
    let mut pts: Vec<(f64, f64)> = Vec::with_capacity(n);
    let (xmax, ymax) = (width as f64 - margin, height as f64 - margin);
    if xmax <= margin || ymax <= margin {
        return pts;
    }
    let mut attempts = 0;
    while pts.len() < n && attempts < 10_000 * n.max(1) {
        attempts += 1;
        let p = (rng.random_range(margin..xmax), rng.random_range(margin..ymax));
        if pts
            .iter()
            .all(|q| (p.0 - q.0).powi(2) + (p.1 - q.1).powi(2) >= min_separation * min_separation)
        {
            pts.push(p);
        }
    }
    pts
}

/// A synthetic annotated image: tissue, planted mitotic figures, and
/// imposter points that carry no figure.
pub struct PlantedImage {
    pub image: ImageRgb,
    pub annotations: AnnotationSet,
}

pub fn planted_image<R: Rng + ?Sized>(
    id: &str,
    width: usize,
    height: usize,
    mitoses: usize,
    imposters: usize,
    rng: &mut R,
) -> PlantedImage {
    let m = StainMatrix::reference();
    let pts = scatter_points(width, height, mitoses + imposters, 48.0, 24.0, rng);
    let (mitotic, other) = pts.split_at(mitoses.min(pts.len()));
    let image = tissue_with_figures(&m, width, height, mitotic, 7.0, rng);
    let points = mitotic
        .iter()
        .map(|&(x, y)| PointAnnotation::mitotic(x, y))
        .chain(other.iter().map(|&(x, y)| PointAnnotation::imposter(x, y)))
        .collect();
    PlantedImage {
        image,
        annotations: AnnotationSet::new(id, image_mpp(), points).expect("planted points are valid"),
    }
}

fn image_mpp() -> f64 {
    crate::types::DEFAULT_MPP
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn scattered_points_respect_spacing() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = scatter_points(400, 300, 12, 40.0, 20.0, &mut rng);
        assert_eq!(pts.len(), 12);
        for (i, a) in pts.iter().enumerate() {
            assert!(a.0 >= 20.0 && a.0 < 380.0 && a.1 >= 20.0 && a.1 < 280.0);
            for b in &pts[i + 1..] {
                assert!(((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt() >= 40.0);
            }
        }
    }

    #[test]
    fn planted_image_is_deterministic() {
        let a = planted_image("x", 200, 200, 3, 1, &mut ChaCha8Rng::seed_from_u64(9));
        let b = planted_image("x", 200, 200, 3, 1, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a.image, b.image);
        assert_eq!(a.annotations, b.annotations);
        assert_eq!(a.annotations.mitotic().count(), 3);
    }
}
