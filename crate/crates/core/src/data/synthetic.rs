//! Procedural datasets standing in for natural-image corpora.
//!
//! Class `c` draws from pattern family `c % 5` (horizontal stripes, vertical
//! stripes, checkerboard, concentric rings, dot lattice) at frequency level
//! `c / 5`. Instances vary in phase, small rotation, frequency, and colors,
//! and carry additive noise; colors carry no class information.
//!
//! Adjacent frequency levels are a factor 3 apart, wider than the up to
//! 2.2x rescaling a random resized crop at scale 0.2 can apply, so the
//! classes stay distinct under the augmentation pipeline.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::image::{Image, LabeledImageSet, MIN_SIDE};
use crate::error::{invalid, Result};

const FAMILIES: usize = 5;
const FAMILY_NAMES: [&str; FAMILIES] = ["hstripes", "vstripes", "checker", "rings", "dots"];

fn check_counts(n_classes: usize, per_class: usize, size: usize) -> Result<()> {
    if n_classes == 0 || per_class == 0 {
        return Err(invalid("n_classes and per_class must be at least 1"));
    }
    if size < MIN_SIDE {
        return Err(invalid(format!("image size must be at least {MIN_SIDE}")));
    }
    Ok(())
}

fn class_names(n_classes: usize) -> Vec<String> {
    (0..n_classes)
        .map(|c| format!("{}_f{}", FAMILY_NAMES[c % FAMILIES], c / FAMILIES))
        .collect()
}

/// Pattern intensity in `[0, 1]` at normalized coordinates `(u, v)` in
/// `[-0.5, 0.5]`.
fn pattern(family: usize, freq: f64, phase: f64, u: f64, v: f64) -> f64 {
    let w = 2.0 * PI * freq;
    match family {
        0 => 0.5 + 0.5 * (w * v + phase).sin(),
        1 => 0.5 + 0.5 * (w * u + phase).sin(),
        2 => 0.5 + 0.5 * ((w * u + phase).sin() * (w * v + phase).sin()).signum() * 0.9,
        3 => 0.5 + 0.5 * (w * (u * u + v * v).sqrt() + phase).sin(),
        _ => ((w * u + phase).cos() * (w * v + phase).cos())
            .max(0.0)
            .powi(2),
    }
}

fn render_instance(
    class: usize,
    size: usize,
    rng: &mut ChaCha8Rng,
    noise: &Normal<f64>,
    id: String,
) -> Image {
    let family = class % FAMILIES;
    let level = class / FAMILIES;
    let freq = 1.5 * 3f64.powi(level as i32) * rng.random_range(0.9..1.1);
    let phase = rng.random_range(0.0..2.0 * PI);
    let angle: f64 = rng.random_range(-0.15..0.15);
    let (cx, cy) = (rng.random_range(-0.12..0.12), rng.random_range(-0.12..0.12));
    let bg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..0.4));
    let fg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.6..1.0));
    let (sin, cos) = angle.sin_cos();
    let mut pixels = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let u0 = (x as f64 + 0.5) / size as f64 - 0.5 - cx;
            let v0 = (y as f64 + 0.5) / size as f64 - 0.5 - cy;
            let u = cos * u0 - sin * v0;
            let v = sin * u0 + cos * v0;
            let t = pattern(family, freq, phase, u, v);
            for ch in 0..3 {
                let val = bg[ch] + (fg[ch] - bg[ch]) * t + noise.sample(rng);
                pixels.push(val.clamp(0.0, 1.0));
            }
        }
    }
    Image::raw(size, size, 3, pixels, id)
}

/// `n_classes * per_class` RGB images of side `size`, grouped by class.
/// Identical arguments produce bit-identical output.
pub fn make_synthetic_dataset(
    n_classes: usize,
    per_class: usize,
    size: usize,
    seed: u64,
) -> Result<LabeledImageSet> {
    check_counts(n_classes, per_class, size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.04).unwrap();
    let mut images = Vec::with_capacity(n_classes * per_class);
    let mut labels = Vec::with_capacity(n_classes * per_class);
    for class in 0..n_classes {
        for i in 0..per_class {
            images.push(render_instance(
                class,
                size,
                &mut rng,
                &noise,
                format!("synthetic/{seed}/{class}/{i}"),
            ));
            labels.push(class);
        }
    }
    LabeledImageSet::new(images, labels, Some(class_names(n_classes)))
}

/// Images of i.i.d. uniform noise with arbitrary class labels: nothing in the
/// pixels predicts the label.
pub fn make_noise_dataset(
    n_classes: usize,
    per_class: usize,
    size: usize,
    seed: u64,
) -> Result<LabeledImageSet> {
    check_counts(n_classes, per_class, size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n_classes * per_class);
    let mut labels = Vec::with_capacity(n_classes * per_class);
    for class in 0..n_classes {
        for i in 0..per_class {
            let pixels = (0..size * size * 3).map(|_| rng.random::<f64>()).collect();
            images.push(Image::raw(
                size,
                size,
                3,
                pixels,
                format!("noise/{seed}/{class}/{i}"),
            ));
            labels.push(class);
        }
    }
    LabeledImageSet::new(images, labels, None)
}
