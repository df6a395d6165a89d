//! Separable Gaussian filtering on float planes with reflect borders.

use crate::types::reflect_index;

/// Normalized Gaussian taps for standard deviation `sigma`, truncated at
/// `ceil(3 * sigma)` samples each side. `sigma <= 0` yields the identity tap.
pub fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let half = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-half..=half)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| (t / sum) as f32).collect()
}

/// Blurs a row-major `w`x`h` plane in place.
pub fn blur_plane(plane: &mut [f32], w: usize, h: usize, sigma: f64) {
    let kernel = gaussian_kernel(sigma);
    if kernel.len() == 1 {
        return;
    }
    let half = (kernel.len() / 2) as i64;
    let mut tmp = vec![0f32; w * h];
    let mut line = Vec::with_capacity(w.max(h) + kernel.len());

    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        line.clear();
        line.extend((-half..w as i64 + half).map(|i| row[reflect_index(i, w)]));
        for x in 0..w {
            tmp[y * w + x] = dot(&line[x..x + kernel.len()], &kernel);
        }
    }
    for x in 0..w {
        line.clear();
        line.extend((-half..h as i64 + half).map(|j| tmp[reflect_index(j, h) * w + x]));
        for y in 0..h {
            plane[y * w + x] = dot(&line[y..y + kernel.len()], &kernel);
        }
    }
}

/// Symmetric-kernel dot product, summed outward in mirrored pairs so that
/// mirrored inputs give bit-identical results.
#[inline]
fn dot(a: &[f32], k: &[f32]) -> f32 {
    let c = k.len() / 2;
    let mut s = a[c] * k[c];
    for i in 1..=c {
        s += k[c + i] * (a[c - i] + a[c + i]);
    }
    s
}

/// Splits interleaved RGB bytes into three float planes.
pub(crate) fn split_planes(data: &[u8]) -> [Vec<f32>; 3] {
    let n = data.len() / 3;
    let mut planes = [Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n)];
    for px in data.chunks_exact(3) {
        for c in 0..3 {
            planes[c].push(px[c] as f32);
        }
    }
    planes
}

#[inline]
pub(crate) fn to_u8(v: f32) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

pub(crate) fn merge_planes(planes: &[Vec<f32>; 3]) -> Vec<u8> {
    let n = planes[0].len();
    let mut out = Vec::with_capacity(n * 3);
    for i in 0..n {
        for plane in planes {
            out.push(to_u8(plane[i]));
        }
    }
    out
}
