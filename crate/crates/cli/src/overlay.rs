//! Detection markers drawn over the input image.

use mitodet::{Detection, ImageRgb};

/// Marker radius, the same as the pseudo ground-truth disk.
pub const MARKER_RADIUS: f64 = 17.0;
const RING_HALF_WIDTH: f64 = 1.0;

/// Red for score 0 through green for score 1.
pub fn score_color(score: f64) -> [u8; 3] {
    let s = score.clamp(0.0, 1.0);
    [(255.0 * (1.0 - s)).round() as u8, (255.0 * s).round() as u8, 0]
}

/// Circles of [`MARKER_RADIUS`] around each detection, colored by score.
pub fn draw_detections(image: &ImageRgb, dets: &[Detection]) -> ImageRgb {
    let (w, h) = (image.width(), image.height());
    let mut data = image.data().to_vec();
    let reach = MARKER_RADIUS + RING_HALF_WIDTH;
    for d in dets {
        let color = score_color(d.score());
        let (x0, x1) = ((d.x() - reach).floor().max(0.0) as usize, ((d.x() + reach).ceil() as usize).min(w - 1));
        let (y0, y1) = ((d.y() - reach).floor().max(0.0) as usize, ((d.y() + reach).ceil() as usize).min(h - 1));
        for y in y0..=y1 {
            for x in x0..=x1 {
                let r = (x as f64 - d.x()).hypot(y as f64 - d.y());
                if (r - MARKER_RADIUS).abs() <= RING_HALF_WIDTH {
                    let i = (y * w + x) * 3;
                    data[i..i + 3].copy_from_slice(&color);
                }
            }
        }
    }
    ImageRgb::new(w, h, data).expect("same geometry")
}
