//! Staged augmentation pipeline producing query/key views.
//!
//! Stages are cumulative: 1 flip, 2 + random resized crop, 3 + color jitter,
//! 4 + random grayscale, 5 + Gaussian blur. Transforms run in that order.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::image::{Image, MIN_SIDE};
use crate::error::{invalid, Result};

pub const DEFAULT_OUTPUT_SIZE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainMode {
    Supervised,
    Unsupervised,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropParams {
    pub scale_min: f64,
    pub scale_max: f64,
    pub ratio_min: f64,
    pub ratio_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterParams {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    /// Probability that the jitter block is applied at all.
    pub p: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlurParams {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub p: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    HorizontalFlip,
    ResizedCrop,
    ColorJitter,
    Grayscale,
    GaussianBlur,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPipeline {
    pub stage: u8,
    pub flip_p: f64,
    pub crop: Option<CropParams>,
    pub jitter: Option<JitterParams>,
    pub grayscale_p: Option<f64>,
    pub blur: Option<BlurParams>,
    pub output_size: usize,
}

/// Pipeline for row `level` (1..=5) of the cumulative augmentation table.
pub fn pipeline_stage(level: u8, mode: PretrainMode) -> Result<AugmentationPipeline> {
    if !(1..=5).contains(&level) {
        return Err(invalid(format!("augmentation level {level} outside 1..=5")));
    }
    let scale_min = match mode {
        PretrainMode::Supervised => 0.08,
        PretrainMode::Unsupervised => 0.2,
    };
    Ok(AugmentationPipeline {
        stage: level,
        flip_p: 0.5,
        crop: (level >= 2).then_some(CropParams {
            scale_min,
            scale_max: 1.0,
            ratio_min: 3.0 / 4.0,
            ratio_max: 4.0 / 3.0,
        }),
        jitter: (level >= 3).then_some(JitterParams {
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
            p: 0.8,
        }),
        grayscale_p: (level >= 4).then_some(0.2),
        blur: (level >= 5).then_some(BlurParams {
            sigma_min: 0.1,
            sigma_max: 2.0,
            p: 0.5,
        }),
        output_size: DEFAULT_OUTPUT_SIZE,
    })
}

impl AugmentationPipeline {
    pub fn with_output_size(mut self, size: usize) -> Self {
        self.output_size = size;
        self
    }

    pub fn enabled_transforms(&self) -> Vec<Transform> {
        let mut t = vec![Transform::HorizontalFlip];
        if self.crop.is_some() {
            t.push(Transform::ResizedCrop);
        }
        if self.jitter.is_some() {
            t.push(Transform::ColorJitter);
        }
        if self.grayscale_p.is_some() {
            t.push(Transform::Grayscale);
        }
        if self.blur.is_some() {
            t.push(Transform::GaussianBlur);
        }
        t
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64, what: &str| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(invalid(format!("{what} probability {p} outside [0,1]")))
            }
        };
        prob(self.flip_p, "flip")?;
        if let Some(c) = &self.crop {
            if !(c.scale_min > 0.0 && c.scale_min <= c.scale_max && c.scale_max <= 1.0) {
                return Err(invalid("crop scale must satisfy 0 < min <= max <= 1"));
            }
            if !(c.ratio_min > 0.0 && c.ratio_min <= c.ratio_max) {
                return Err(invalid("crop ratio bounds must be positive and ordered"));
            }
        }
        if let Some(j) = &self.jitter {
            prob(j.p, "jitter")?;
            if j.brightness < 0.0
                || j.contrast < 0.0
                || j.saturation < 0.0
                || !(0.0..=0.5).contains(&j.hue)
            {
                return Err(invalid(
                    "jitter strengths must be non-negative, hue at most 0.5",
                ));
            }
        }
        if let Some(p) = self.grayscale_p {
            prob(p, "grayscale")?;
        }
        if let Some(b) = &self.blur {
            prob(b.p, "blur")?;
            if !(b.sigma_min > 0.0 && b.sigma_min <= b.sigma_max) {
                return Err(invalid("blur sigma bounds must be positive and ordered"));
            }
        }
        if self.output_size < MIN_SIDE {
            return Err(invalid(format!("output size must be at least {MIN_SIDE}")));
        }
        Ok(())
    }
}

/// Which random branches one [`augment`] call took.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AugmentTrace {
    pub flipped: bool,
    /// `(top, left, height, width)` of the crop in source pixels.
    pub crop: Option<(usize, usize, usize, usize)>,
    pub jittered: bool,
    pub grayscale: bool,
    pub blur_sigma: Option<f64>,
}

pub fn augment<R: Rng + ?Sized>(
    image: &Image,
    pipeline: &AugmentationPipeline,
    rng: &mut R,
) -> Result<Image> {
    augment_traced(image, pipeline, rng).map(|(img, _)| img)
}

pub fn augment_traced<R: Rng + ?Sized>(
    image: &Image,
    pipeline: &AugmentationPipeline,
    rng: &mut R,
) -> Result<(Image, AugmentTrace)> {
    if image.height < MIN_SIDE || image.width < MIN_SIDE {
        return Err(invalid(format!(
            "image {} is {}x{}, smaller than the minimum croppable size {MIN_SIDE}",
            image.source, image.height, image.width
        )));
    }
    let mut trace = AugmentTrace::default();

    let mut img = image.clone();
    if rng.random::<f64>() < pipeline.flip_p {
        img = hflip(&img);
        trace.flipped = true;
    }

    let (top, left, h, w) = match &pipeline.crop {
        Some(c) => {
            let r = sample_crop(img.height, img.width, c, rng);
            trace.crop = Some(r);
            r
        }
        None => (0, 0, img.height, img.width),
    };
    img = resized_crop(&img, top, left, h, w, pipeline.output_size);

    if let Some(j) = &pipeline.jitter {
        if rng.random::<f64>() < j.p {
            color_jitter(&mut img, j, rng);
            trace.jittered = true;
        }
    }
    if let Some(p) = pipeline.grayscale_p {
        if rng.random::<f64>() < p {
            to_grayscale(&mut img);
            trace.grayscale = true;
        }
    }
    if let Some(b) = &pipeline.blur {
        if rng.random::<f64>() < b.p {
            let sigma = rng.random_range(b.sigma_min..=b.sigma_max);
            img = gaussian_blur(&img, sigma);
            trace.blur_sigma = Some(sigma);
        }
    }
    for v in &mut img.pixels {
        *v = v.clamp(0.0, 1.0);
    }
    Ok((img, trace))
}

/// Two independent draws of the same pipeline: the query and key views.
pub fn make_two_views<R: Rng + ?Sized>(
    image: &Image,
    pipeline: &AugmentationPipeline,
    rng: &mut R,
) -> Result<(Image, Image)> {
    let q = augment(image, pipeline, rng)?;
    let k = augment(image, pipeline, rng)?;
    Ok((q, k))
}

pub fn hflip(img: &Image) -> Image {
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            for c in 0..img.channels {
                out.set(y, x, c, img.get(y, img.width - 1 - x, c));
            }
        }
    }
    out
}

fn sample_crop<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    c: &CropParams,
    rng: &mut R,
) -> (usize, usize, usize, usize) {
    let area = (height * width) as f64;
    let (log_lo, log_hi) = (c.ratio_min.ln(), c.ratio_max.ln());
    for _ in 0..10 {
        let target = area * rng.random_range(c.scale_min..=c.scale_max);
        let aspect = if log_lo < log_hi {
            rng.random_range(log_lo..log_hi).exp()
        } else {
            c.ratio_min
        };
        let w = (target * aspect).sqrt().round() as usize;
        let h = (target / aspect).sqrt().round() as usize;
        if w > 0 && h > 0 && w <= width && h <= height {
            let top = rng.random_range(0..=height - h);
            let left = rng.random_range(0..=width - w);
            return (top, left, h, w);
        }
    }
    // center crop at the nearest admissible aspect ratio
    let in_ratio = width as f64 / height as f64;
    let (h, w) = if in_ratio < c.ratio_min {
        ((width as f64 / c.ratio_min).round() as usize, width)
    } else if in_ratio > c.ratio_max {
        (height, (height as f64 * c.ratio_max).round() as usize)
    } else {
        (height, width)
    };
    ((height - h) / 2, (width - w) / 2, h, w)
}

/// Bilinear resampling of the `h x w` window at `(top, left)` to a square
/// of side `size` (half-pixel centers, edge clamping).
fn resized_crop(img: &Image, top: usize, left: usize, h: usize, w: usize, size: usize) -> Image {
    let c = img.channels;
    let mut pixels = vec![0.0; size * size * c];
    let sy = h as f64 / size as f64;
    let sx = w as f64 / size as f64;
    for oy in 0..size {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for ox in 0..size {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            for ch in 0..c {
                let p00 = img.get(top + y0, left + x0, ch);
                let p01 = img.get(top + y0, left + x1, ch);
                let p10 = img.get(top + y1, left + x0, ch);
                let p11 = img.get(top + y1, left + x1, ch);
                let top_row = p00 + (p01 - p00) * tx;
                let bottom_row = p10 + (p11 - p10) * tx;
                pixels[(oy * size + ox) * c + ch] = top_row + (bottom_row - top_row) * ty;
            }
        }
    }
    Image::raw(size, size, c, pixels, img.source.clone())
}

/// Resize the whole image to `size x size`.
pub fn resize(img: &Image, size: usize) -> Image {
    resized_crop(img, 0, 0, img.height, img.width, size)
}

fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn to_grayscale(img: &mut Image) {
    if img.channels != 3 {
        return;
    }
    for px in img.pixels.chunks_mut(3) {
        let y = luma(px[0], px[1], px[2]);
        px.fill(y);
    }
}

fn factor<R: Rng + ?Sized>(strength: f64, rng: &mut R) -> f64 {
    let lo = (1.0 - strength).max(0.0);
    let hi = 1.0 + strength;
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        1.0
    }
}

fn color_jitter<R: Rng + ?Sized>(img: &mut Image, j: &JitterParams, rng: &mut R) {
    let mut order = [0usize, 1, 2, 3];
    order.shuffle(rng);
    let b = factor(j.brightness, rng);
    let c = factor(j.contrast, rng);
    let s = factor(j.saturation, rng);
    let h = if j.hue > 0.0 {
        rng.random_range(-j.hue..j.hue)
    } else {
        0.0
    };
    let rgb = img.channels == 3;
    for op in order {
        match op {
            0 => img
                .pixels
                .iter_mut()
                .for_each(|v| *v = (*v * b).clamp(0.0, 1.0)),
            1 => {
                let mean = if rgb {
                    img.pixels
                        .chunks(3)
                        .map(|p| luma(p[0], p[1], p[2]))
                        .sum::<f64>()
                        / (img.height * img.width) as f64
                } else {
                    img.pixels.iter().sum::<f64>() / img.pixels.len() as f64
                };
                img.pixels
                    .iter_mut()
                    .for_each(|v| *v = (c * *v + (1.0 - c) * mean).clamp(0.0, 1.0));
            }
            2 if rgb => {
                for px in img.pixels.chunks_mut(3) {
                    let g = luma(px[0], px[1], px[2]);
                    px.iter_mut()
                        .for_each(|v| *v = (s * *v + (1.0 - s) * g).clamp(0.0, 1.0));
                }
            }
            3 if rgb => {
                for px in img.pixels.chunks_mut(3) {
                    let (hh, ss, vv) = rgb_to_hsv(px[0], px[1], px[2]);
                    let (r, g, bl) = hsv_to_rgb((hh + h).rem_euclid(1.0), ss, vv);
                    px[0] = r;
                    px[1] = g;
                    px[2] = bl;
                }
            }
            _ => {}
        }
    }
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match (i as i64).rem_euclid(6) {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    while i < 0 || i >= n {
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * (n - 1) - i;
        }
    }
    i as usize
}

/// Separable Gaussian blur with reflect padding, radius `ceil(3 sigma)`.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    let radius = ((3.0 * sigma).ceil() as usize).max(1);
    let kernel: Vec<f64> = (-(radius as isize)..=radius as isize)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let (h, w, c) = (img.height, img.width, img.channels);
    let r = radius as isize;
    let mut tmp = vec![0.0; h * w * c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                tmp[(y * w + x) * c + ch] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| kv * img.get(y, reflect(x as isize + k as isize - r, w), ch))
                    .sum();
            }
        }
    }
    let mut out = vec![0.0; h * w * c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out[(y * w + x) * c + ch] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| {
                        kv * tmp[(reflect(y as isize + k as isize - r, h) * w + x) * c + ch]
                    })
                    .sum();
            }
        }
    }
    Image::raw(h, w, c, out, img.source.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::make_synthetic_dataset;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_image() -> Image {
        make_synthetic_dataset(3, 1, 32, 5)
            .unwrap()
            .images
            .remove(2)
    }

    #[test]
    fn stage_table() {
        let p = pipeline_stage(5, PretrainMode::Unsupervised).unwrap();
        assert_eq!(p.crop.unwrap().scale_min, 0.2);
        assert_eq!(p.grayscale_p, Some(0.2));
        let blur = p.blur.unwrap();
        assert_eq!((blur.sigma_min, blur.sigma_max), (0.1, 2.0));

        let p1 = pipeline_stage(1, PretrainMode::Supervised).unwrap();
        assert_eq!(p1.enabled_transforms(), vec![Transform::HorizontalFlip]);
        assert_eq!(p1.flip_p, 0.5);

        let p2 = pipeline_stage(2, PretrainMode::Supervised).unwrap();
        assert_eq!(p2.crop.unwrap().scale_min, 0.08);

        let j = pipeline_stage(3, PretrainMode::Supervised)
            .unwrap()
            .jitter
            .unwrap();
        assert_eq!(
            (j.brightness, j.contrast, j.saturation, j.hue),
            (0.4, 0.4, 0.4, 0.1)
        );

        assert!(pipeline_stage(0, PretrainMode::Supervised).is_err());
        assert!(pipeline_stage(6, PretrainMode::Unsupervised).is_err());
    }

    #[test]
    fn stages_are_strictly_cumulative_in_table_order() {
        for mode in [PretrainMode::Supervised, PretrainMode::Unsupervised] {
            let mut prev: Vec<Transform> = Vec::new();
            for level in 1..=5 {
                let cur = pipeline_stage(level, mode).unwrap().enabled_transforms();
                assert_eq!(cur.len(), prev.len() + 1);
                assert_eq!(&cur[..prev.len()], &prev[..]);
                // row order equals enum order
                assert!(cur.windows(2).all(|w| w[0] < w[1]));
                prev = cur;
            }
        }
    }

    #[test]
    fn flip_is_an_involution() {
        let img = sample_image();
        let mut p = pipeline_stage(1, PretrainMode::Supervised).unwrap();
        p.flip_p = 1.0;
        p.output_size = 32;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let once = augment(&img, &p, &mut rng).unwrap();
        assert_ne!(once.pixels, img.pixels);
        let twice = augment(&once, &p, &mut rng).unwrap();
        assert_eq!(twice.pixels, img.pixels);
    }

    #[test]
    fn grayscale_branch_equalizes_channels() {
        let img = sample_image();
        let mut p = pipeline_stage(4, PretrainMode::Unsupervised).unwrap();
        p.grayscale_p = Some(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (out, trace) = augment_traced(&img, &p, &mut rng).unwrap();
        assert!(trace.grayscale);
        for px in out.pixels.chunks(3) {
            assert_eq!(px[0], px[1]);
            assert_eq!(px[1], px[2]);
        }
    }

    #[test]
    fn fixed_seed_is_byte_identical() {
        let img = sample_image();
        let p = pipeline_stage(5, PretrainMode::Unsupervised).unwrap();
        let a = augment(&img, &p, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let b = augment(&img, &p, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(a.pixels, b.pixels);
    }

    #[test]
    fn output_shape_and_range() {
        let img = sample_image();
        let p = pipeline_stage(5, PretrainMode::Supervised)
            .unwrap()
            .with_output_size(16);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let out = augment(&img, &p, &mut rng).unwrap();
            assert_eq!((out.height, out.width, out.channels), (16, 16, 3));
            assert!(out.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn too_small_image_rejected() {
        let img = Image::raw(4, 4, 1, vec![0.5; 16], "tiny".into());
        let p = pipeline_stage(2, PretrainMode::Supervised).unwrap();
        assert!(augment(&img, &p, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn deterministic_views_without_randomness() {
        let img = sample_image();
        let mut p = pipeline_stage(1, PretrainMode::Supervised).unwrap();
        p.flip_p = 0.0;
        p.output_size = 16;
        let (q, k) = make_two_views(&img, &p, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let resized = resize(&img, 16);
        assert_eq!(q, resized);
        assert_eq!(k, resized);
    }

    #[test]
    fn view_pairs_follow_seeds() {
        let img = sample_image();
        let p = pipeline_stage(5, PretrainMode::Unsupervised).unwrap();
        let a = make_two_views(&img, &p, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = make_two_views(&img, &p, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let c = make_two_views(&img, &p, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a.0, a.1);
    }

    /// 1000 view pairs at stage 4: the per-view grayscale rate must lie in
    /// 0.2 +- 0.04 (the 99.5% binomial band is +- 0.033 at n = 1000).
    #[test]
    fn grayscale_frequency_per_view() {
        let img = sample_image();
        let p = pipeline_stage(4, PretrainMode::Unsupervised)
            .unwrap()
            .with_output_size(8);
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let (mut gq, mut gk) = (0, 0);
        for _ in 0..1000 {
            let (_, tq) = augment_traced(&img, &p, &mut rng).unwrap();
            let (_, tk) = augment_traced(&img, &p, &mut rng).unwrap();
            gq += tq.grayscale as usize;
            gk += tk.grayscale as usize;
        }
        for g in [gq, gk] {
            let f = g as f64 / 1000.0;
            assert!((f - 0.2).abs() <= 0.04, "grayscale frequency {f}");
        }
    }

    #[test]
    fn blur_preserves_constant_image() {
        let img = Image::raw(9, 9, 1, vec![0.3; 81], "c".into());
        let out = gaussian_blur(&img, 2.0);
        assert!(out.pixels.iter().all(|v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn hsv_round_trip() {
        for &(r, g, b) in &[
            (0.1, 0.5, 0.9),
            (0.9, 0.2, 0.2),
            (0.3, 0.3, 0.3),
            (0.0, 1.0, 0.5),
        ] {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-12 && (g - g2).abs() < 1e-12 && (b - b2).abs() < 1e-12);
        }
    }
}
