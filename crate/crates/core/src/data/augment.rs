//! Label-preserving image perturbations and bilinear resampling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPolicy {
    pub horizontal_flip_prob: f64,
    pub rotation_max_deg: f64,
    pub crop_fraction: f64,
    pub enabled: bool,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            horizontal_flip_prob: 0.5,
            rotation_max_deg: 15.0,
            crop_fraction: 0.9,
            enabled: true,
        }
    }
}

impl AugmentPolicy {
    pub fn disabled() -> Self {
        AugmentPolicy {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.horizontal_flip_prob) {
            return Err(Error::InvalidConfig(format!(
                "horizontal_flip_prob {} outside [0, 1]",
                self.horizontal_flip_prob
            )));
        }
        if self.rotation_max_deg.is_nan() || self.rotation_max_deg < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "rotation_max_deg {} must be non-negative",
                self.rotation_max_deg
            )));
        }
        if !(self.crop_fraction > 0.0 && self.crop_fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "crop_fraction {} outside (0, 1]",
                self.crop_fraction
            )));
        }
        Ok(())
    }
}

/// Applies, in order: horizontal flip, rotation about the centre (bilinear,
/// edge-replicated), random crop resized back to the input size.
///
/// Output has the input's shape, and every value is a convex combination of
/// input values so the `[min, max]` envelope is preserved.
pub fn augment<R: Rng + ?Sized>(image: &Tensor<f32>, policy: &AugmentPolicy, rng: &mut R) -> Tensor<f32> {
    if !policy.enabled {
        return image.clone();
    }
    let mut out = image.clone();
    if policy.horizontal_flip_prob > 0.0 && rng.gen::<f64>() < policy.horizontal_flip_prob {
        out = flip_horizontal(&out);
    }
    if policy.rotation_max_deg > 0.0 {
        let deg = rng.gen_range(-policy.rotation_max_deg..=policy.rotation_max_deg);
        out = rotate(&out, deg.to_radians());
    }
    if policy.crop_fraction < 1.0 {
        let [h, w, _] = dims(&out);
        let ch = ((h as f64 * policy.crop_fraction).round() as usize).clamp(1, h);
        let cw = ((w as f64 * policy.crop_fraction).round() as usize).clamp(1, w);
        let top = rng.gen_range(0..=h - ch);
        let left = rng.gen_range(0..=w - cw);
        out = resize_region(&out, top, left, ch, cw, h, w);
    }
    out
}

fn dims(image: &Tensor<f32>) -> [usize; 3] {
    <[usize; 3]>::try_from(image.shape()).expect("images are H x W x C")
}

/// Mirrors columns: `[[a, b], [c, d]] -> [[b, a], [d, c]]`.
pub fn flip_horizontal(image: &Tensor<f32>) -> Tensor<f32> {
    let [h, w, c] = dims(image);
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for y in 0..h {
        for x in (0..w).rev() {
            let at = (y * w + x) * c;
            out.extend_from_slice(&src[at..at + c]);
        }
    }
    Tensor::new(image.shape().to_vec(), out).expect("same shape")
}

/// Bilinear sample at a fractional position, coordinates clamped to the
/// image (edge replication).
fn sample(image: &[f32], h: usize, w: usize, c: usize, y: f64, x: f64, out: &mut [f32]) {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
    for ch in 0..c {
        let p = |yy: usize, xx: usize| image[(yy * w + xx) * c + ch];
        let top = p(y0, x0) + (p(y0, x1) - p(y0, x0)) * fx;
        let bottom = p(y1, x0) + (p(y1, x1) - p(y1, x0)) * fx;
        // Clamp guards the rounding of the lerps against the envelope.
        let lo = p(y0, x0).min(p(y0, x1)).min(p(y1, x0)).min(p(y1, x1));
        let hi = p(y0, x0).max(p(y0, x1)).max(p(y1, x0)).max(p(y1, x1));
        out[ch] = (top + (bottom - top) * fy).clamp(lo, hi);
    }
}

/// Rotation by `radians` about the image centre.
pub fn rotate(image: &Tensor<f32>, radians: f64) -> Tensor<f32> {
    let [h, w, c] = dims(image);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = radians.sin_cos();
    let mut out = vec![0.0; image.len()];
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let sx = cos * dx + sin * dy + cx;
            let sy = -sin * dx + cos * dy + cy;
            let at = (y * w + x) * c;
            sample(image.data(), h, w, c, sy, sx, &mut out[at..at + c]);
        }
    }
    Tensor::new(image.shape().to_vec(), out).expect("same shape")
}

/// Bilinear resize of the `rows x cols` window at (`top`, `left`) to
/// `out_h x out_w`, using pixel-centre alignment.
fn resize_region(
    image: &Tensor<f32>,
    top: usize,
    left: usize,
    rows: usize,
    cols: usize,
    out_h: usize,
    out_w: usize,
) -> Tensor<f32> {
    let [h, w, c] = dims(image);
    let (sy, sx) = (rows as f64 / out_h as f64, cols as f64 / out_w as f64);
    let mut out = vec![0.0; out_h * out_w * c];
    for y in 0..out_h {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (rows - 1) as f64) + top as f64;
        for x in 0..out_w {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (cols - 1) as f64) + left as f64;
            let at = (y * out_w + x) * c;
            sample(image.data(), h, w, c, fy, fx, &mut out[at..at + c]);
        }
    }
    Tensor::new(vec![out_h, out_w, c], out).expect("shape computed")
}

/// Bilinear resize of a whole image.
pub fn resize_bilinear(image: &Tensor<f32>, out_h: usize, out_w: usize) -> Tensor<f32> {
    let [h, w, _] = dims(image);
    if (h, w) == (out_h, out_w) {
        return image.clone();
    }
    resize_region(image, 0, 0, h, w, out_h, out_w)
}
