//! Fixed-encoder perceptual distance and the per-image reconstruction report.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::invert::{invert_features, EncoderFeatures, InversionConfig};
use crate::contrast::Encoder;
use crate::data::Image;
use crate::error::{invalid, Error, Result};
use crate::nn::Layer;

/// Sum over the trunk's ReLU outputs of the mean squared activation
/// difference, each layer averaged over channels and positions so that
/// layers of different size weigh alike.
pub fn perceptual_distance(a: &Image, b: &Image, encoder: &Encoder, params: &[f64]) -> Result<f64> {
    if (a.height, a.width, a.channels) != (b.height, b.width, b.channels) {
        return Err(Error::ShapeMismatch(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.height, a.width, a.channels, b.height, b.width, b.channels
        )));
    }
    let ta = encoder.trunk_forward(params, &a.to_tensor())?;
    let tb = encoder.trunk_forward(params, &b.to_tensor())?;
    let mut total = 0.0;
    for (i, layer) in encoder.trunk().layers().iter().enumerate() {
        if *layer != Layer::Relu {
            continue;
        }
        let (fa, fb) = (ta.activation(i), tb.activation(i));
        let msd = fa
            .data
            .iter()
            .zip(&fb.data)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / fa.data.len() as f64;
        total += msd;
    }
    Ok(total)
}

/// An encoder whose features are inverted, under a display name.
#[derive(Debug, Clone, Copy)]
pub struct NamedEncoder<'a> {
    pub name: &'a str,
    pub encoder: &'a Encoder,
    pub params: &'a [f64],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub image: String,
    pub encoder: String,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub rows: Vec<ReportRow>,
    /// Per-encoder mean distance, in encoder order.
    pub means: Vec<(String, f64)>,
    /// Reconstructions in row order.
    pub reconstructions: Vec<Image>,
}

impl ReconstructionReport {
    /// `image,encoder,distance` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["image", "encoder", "distance"])?;
        for r in &self.rows {
            w.write_record([
                r.image.as_str(),
                r.encoder.as_str(),
                &r.distance.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Per-encoder means as `encoder,mean_distance`.
    pub fn write_means_csv(&self, path: &Path) -> Result<()> {
        let mut text = String::from("encoder,mean_distance\n");
        for (name, m) in &self.means {
            text.push_str(&format!("{name},{m}\n"));
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

fn image_id(i: usize, img: &Image) -> String {
    if img.source.is_empty() {
        format!("image{i}")
    } else {
        img.source.clone()
    }
}

/// Inverts every image through every encoder and scores each reconstruction
/// against its original with the metric encoder. Pairs run in parallel.
pub fn reconstruction_report(
    images: &[Image],
    encoders: &[NamedEncoder<'_>],
    metric: (&Encoder, &[f64]),
    config: &InversionConfig,
) -> Result<ReconstructionReport> {
    if images.is_empty() || encoders.is_empty() {
        return Err(invalid("report needs at least one image and one encoder"));
    }
    let pairs: Vec<(usize, usize)> = (0..images.len())
        .flat_map(|i| (0..encoders.len()).map(move |e| (i, e)))
        .collect();
    let done: Vec<(ReportRow, Image)> = pairs
        .par_iter()
        .map(|&(i, e)| {
            let ne = &encoders[e];
            let f = EncoderFeatures {
                encoder: ne.encoder,
                params: ne.params,
            };
            let rec = invert_features(&f, &images[i], config)?;
            let distance = perceptual_distance(&rec.image, &images[i], metric.0, metric.1)?;
            let row = ReportRow {
                image: image_id(i, &images[i]),
                encoder: ne.name.to_string(),
                distance,
            };
            Ok((row, rec.image))
        })
        .collect::<Result<_>>()?;
    let (rows, reconstructions): (Vec<_>, Vec<_>) = done.into_iter().unzip();
    let means = encoders
        .iter()
        .map(|ne| {
            let ds: Vec<f64> = rows
                .iter()
                .filter(|r| r.encoder == ne.name)
                .map(|r| r.distance)
                .collect();
            (
                ne.name.to_string(),
                ds.iter().sum::<f64>() / ds.len() as f64,
            )
        })
        .collect();
    Ok(ReconstructionReport {
        rows,
        means,
        reconstructions,
    })
}
