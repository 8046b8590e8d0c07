//! Seeded "textured blob" image families.
//!
//! Every class is a point in a small generative-parameter space (blob and
//! background colour, size, stripe frequency and orientation, aspect). All
//! classes of one call are offsets from a shared base point, and the offset
//! length scales with `1 - similarity`, so `similarity -> 1` makes the
//! classes collapse onto each other. Individual images add position, size,
//! colour and pixel jitter.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{derive_seed, encode_ppm, Dataset, Item};
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

const DIMS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    /// `[height, width]`.
    pub size: [usize; 2],
    pub similarity: f64,
    /// Index of the first image of each class. Sets drawn with the same
    /// seed and disjoint index ranges share classes but not images.
    #[serde(default)]
    pub first_index: usize,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.per_class == 0 {
            return Err(Error::InvalidConfig(
                "classes and per_class must be at least 1".into(),
            ));
        }
        if self.size[0] < 16 || self.size[1] < 16 {
            return Err(Error::InvalidConfig(format!(
                "image size {:?} is below 16x16",
                self.size
            )));
        }
        if !(0.0..=1.0).contains(&self.similarity) {
            return Err(Error::InvalidConfig(format!(
                "similarity {} outside [0, 1]",
                self.similarity
            )));
        }
        Ok(())
    }
}

pub fn class_name(class: usize) -> String {
    format!("class{class:02}")
}

/// Folds any real onto `[0, 1]` by reflection.
fn reflect(v: f64) -> f64 {
    let m = v.rem_euclid(2.0);
    if m > 1.0 {
        2.0 - m
    } else {
        m
    }
}

/// Generative parameters of every class, each in `[0, 1]^DIMS`.
fn class_params(spec: &SyntheticSpec, seed: u64) -> Vec<[f64; DIMS]> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0xC1A5]));
    let base: [f64; DIMS] = std::array::from_fn(|_| rng.gen::<f64>());
    let spread = 1.0 - spec.similarity;
    (0..spec.classes)
        .map(|_| {
            let offset: [f64; DIMS] = std::array::from_fn(|_| rng.gen_range(-1.0..=1.0));
            std::array::from_fn(|d| reflect(base[d] + spread * offset[d]))
        })
        .collect()
}

/// Renders one image of a class. Pixel values are integers in 0-255, the
/// same values a PPM round trip yields.
fn render(params: &[f64; DIMS], h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let colour = |u: f64| 30.0 + 195.0 * u;
    let mut jitter = |c: f64| c + rng.gen_range(-10.0..=10.0);
    let fg = [colour(params[0]), colour(params[1]), colour(params[2])].map(&mut jitter);
    let bg = [colour(params[3]), colour(params[4]), colour(params[5])].map(&mut jitter);
    let side = h.min(w) as f64;
    let radius = side * (0.18 + 0.22 * params[6]) * rng.gen_range(0.9..=1.1);
    let cycles = 1.0 + 4.0 * params[7];
    // The sign is drawn per image so every class is closed under
    // horizontal flips, which the training augmentation applies.
    let mirror = if rng.gen_bool(0.5) { -1.0 } else { 1.0 };
    let stripe_angle = mirror * FRAC_PI_2 * params[8];
    let aspect = 0.55 + 0.45 * params[9];
    let tilt = stripe_angle + rng.gen_range(-0.3..=0.3);
    let cy = (h as f64 - 1.0) / 2.0 + side * rng.gen_range(-0.12..=0.12);
    let cx = (w as f64 - 1.0) / 2.0 + side * rng.gen_range(-0.12..=0.12);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let (ss, sc) = stripe_angle.sin_cos();
    let (ts, tc) = tilt.sin_cos();

    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            // Elliptical radius in the blob's tilted frame.
            let u = tc * dx + ts * dy;
            let v = -ts * dx + tc * dy;
            let r = ((u / radius).powi(2) + (v / (radius * aspect)).powi(2)).sqrt();
            let alpha = ((1.0 - r) * radius / 1.5 + 0.5).clamp(0.0, 1.0);
            let along = sc * dx + ss * dy;
            let stripe = 1.0 + 0.35 * (2.0 * PI * cycles * along / (2.0 * radius) + phase).sin();
            // Approximately Gaussian pixel noise with sigma ~ 6.
            let noise: f64 = (0..3).map(|_| rng.gen_range(-6.0..=6.0)).sum::<f64>();
            for c in 0..3 {
                let value = alpha * fg[c] * stripe + (1.0 - alpha) * bg[c] + noise;
                data.push(value.round().clamp(0.0, 255.0) as f32);
            }
        }
    }
    Tensor::new(vec![h, w, 3], data).expect("shape computed")
}

/// Builds the dataset in memory. Items are ordered by (class, index) and
/// named `classNN/IIIII.ppm`, matching what [`generate_synthetic`] writes.
pub fn synthesize(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let params = class_params(spec, seed);
    let [h, w] = spec.size;
    let jobs: Vec<(usize, usize)> = (0..spec.classes)
        .flat_map(|c| (spec.first_index..spec.first_index + spec.per_class).map(move |i| (c, i)))
        .collect();
    let images = par::map(&jobs, |&(c, i)| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0x1AA6E, c as u64, i as u64]));
        render(&params[c], h, w, &mut rng)
    });
    let items = jobs
        .iter()
        .zip(images)
        .map(|(&(c, i), image)| Item {
            id: format!("{}/{i:05}.ppm", class_name(c)),
            image,
            label: c,
        })
        .collect();
    Dataset::new(items, (0..spec.classes).map(class_name).collect())
}

/// Writes `<out>/<classNN>/<IIIII>.ppm`. Byte-deterministic in (spec, seed).
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64, out: impl AsRef<Path>) -> Result<()> {
    let out = out.as_ref();
    let ds = synthesize(spec, seed)?;
    for name in &ds.class_names {
        let dir = out.join(name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for item in &ds.items {
        let path = out.join(&item.id);
        fs::write(&path, encode_ppm(&item.image)?).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
