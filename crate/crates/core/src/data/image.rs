use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

pub const MIN_SIDE: usize = 8;

/// An `h x w x c` image with values in `[0, 1]`, stored row-major with
/// interleaved channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f64>,
    /// Where the image came from (file path or synthetic id).
    pub source: String,
}

impl Image {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        pixels: Vec<f64>,
        source: impl Into<String>,
    ) -> Result<Self> {
        let img = Image {
            height,
            width,
            channels,
            pixels,
            source: source.into(),
        };
        img.validate()?;
        Ok(img)
    }

    /// Builds an image without validating the invariants. Callers must
    /// guarantee them.
    pub(crate) fn raw(
        height: usize,
        width: usize,
        channels: usize,
        pixels: Vec<f64>,
        source: String,
    ) -> Self {
        debug_assert_eq!(pixels.len(), height * width * channels);
        Image {
            height,
            width,
            channels,
            pixels,
            source,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < MIN_SIDE || self.width < MIN_SIDE {
            return Err(invalid(format!(
                "image {} is {}x{}, both sides must be at least {MIN_SIDE}",
                self.source, self.height, self.width
            )));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(invalid(format!(
                "image {} has {} channels, expected 1 or 3",
                self.source, self.channels
            )));
        }
        if self.pixels.len() != self.height * self.width * self.channels {
            return Err(invalid(format!(
                "image {} has wrong pixel count",
                self.source
            )));
        }
        if let Some(v) = self.pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(invalid(format!(
                "image {} has value {v} outside [0,1]",
                self.source
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.pixels[(y * self.width + x) * self.channels + c] = v;
    }

    /// Channel-first single-sample tensor.
    pub fn to_tensor(&self) -> Tensor {
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut t = Tensor::zeros(1, c, h, w);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    t.data[(ch * h + y) * w + x] = self.get(y, x, ch);
                }
            }
        }
        t
    }

    /// Inverse of [`Image::to_tensor`] for sample `n`; values are clamped.
    pub fn from_tensor(t: &Tensor, n: usize, source: impl Into<String>) -> Self {
        let (h, w, c) = (t.h, t.w, t.c);
        let mut pixels = vec![0.0; h * w * c];
        let s = t.sample(n);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    pixels[(y * w + x) * c + ch] = s[(ch * h + y) * w + x].clamp(0.0, 1.0);
                }
            }
        }
        Image::raw(h, w, c, pixels, source.into())
    }

    /// Quantize to 8 bits per channel.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }
}

/// Batch images of identical shape into one NCHW tensor.
pub fn batch_tensor(images: &[&Image]) -> Tensor {
    let ts: Vec<Tensor> = images.iter().map(|i| i.to_tensor()).collect();
    Tensor::stack(&ts)
}

/// Peak signal-to-noise ratio in dB for images with unit peak.
pub fn psnr(a: &Image, b: &Image) -> f64 {
    assert_eq!(a.pixels.len(), b.pixels.len());
    let mse = a
        .pixels
        .iter()
        .zip(&b.pixels)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.pixels.len() as f64;
    -10.0 * mse.log10()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledImageSet {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub class_names: Option<Vec<String>>,
}

impl LabeledImageSet {
    pub fn new(
        images: Vec<Image>,
        labels: Vec<usize>,
        class_names: Option<Vec<String>>,
    ) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(invalid(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(names) = &class_names {
            if let Some(&bad) = labels.iter().find(|&&l| l >= names.len()) {
                return Err(invalid(format!(
                    "label {bad} out of range for {} classes",
                    names.len()
                )));
            }
        }
        Ok(LabeledImageSet {
            images,
            labels,
            class_names,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        match &self.class_names {
            Some(n) => n.len(),
            None => self.labels.iter().max().map_or(0, |m| m + 1),
        }
    }

    /// Indices of the items of each class, in dataset order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by = vec![Vec::new(); self.num_classes()];
        for (i, &l) in self.labels.iter().enumerate() {
            by[l].push(i);
        }
        by
    }

    /// Subset keeping only the listed classes; labels are kept unchanged.
    pub fn filter_classes(&self, keep: impl Fn(usize) -> bool) -> LabeledImageSet {
        let (images, labels) = self
            .images
            .iter()
            .zip(&self.labels)
            .filter(|(_, &l)| keep(l))
            .map(|(i, &l)| (i.clone(), l))
            .unzip();
        LabeledImageSet {
            images,
            labels,
            class_names: self.class_names.clone(),
        }
    }
}
