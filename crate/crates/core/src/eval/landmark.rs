//! Landmark regression on top of encoder feature maps, scored by error
//! normalized with the inter-ocular distance.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::contrast::train::stream_rng;
use crate::contrast::Encoder;
use crate::data::{batch_tensor, Image};
use crate::error::{invalid, Error, Result};
use crate::nn::optim::Adam;
use crate::nn::{Layer, Sequential, Tape};
use crate::tensor::Tensor;

pub const DEFAULT_LANDMARKS: usize = 5;

/// Landmark coordinates in pixels plus the normalizing inter-ocular distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub coords: Vec<[f64; 2]>,
    pub inter_ocular: f64,
}

impl LandmarkSet {
    pub fn new(coords: Vec<[f64; 2]>, inter_ocular: f64) -> Result<Self> {
        if !(inter_ocular > 0.0) || !inter_ocular.is_finite() {
            return Err(invalid(format!(
                "inter-ocular distance must be positive, got {inter_ocular}"
            )));
        }
        Ok(LandmarkSet {
            coords,
            inter_ocular,
        })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Mean Euclidean landmark distance divided by the ground-truth
/// inter-ocular distance.
pub fn landmark_error(pred: &LandmarkSet, gt: &LandmarkSet) -> Result<f64> {
    if !(gt.inter_ocular > 0.0) {
        return Err(invalid(format!(
            "inter-ocular distance must be positive, got {}",
            gt.inter_ocular
        )));
    }
    if pred.len() != gt.len() || gt.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} predicted landmarks, {} ground truth",
            pred.len(),
            gt.len()
        )));
    }
    let total: f64 = pred
        .coords
        .iter()
        .zip(&gt.coords)
        .map(|(p, g)| (p[0] - g[0]).hypot(p[1] - g[1]))
        .sum();
    Ok(total / gt.len() as f64 / gt.inter_ocular)
}

pub fn mean_landmark_error(preds: &[LandmarkSet], gts: &[LandmarkSet]) -> Result<f64> {
    if preds.len() != gts.len() || gts.is_empty() {
        return Err(invalid(
            "prediction and ground-truth lists must be non-empty and equally long",
        ));
    }
    let mut sum = 0.0;
    for (p, g) in preds.iter().zip(gts) {
        sum += landmark_error(p, g)?;
    }
    Ok(sum / gts.len() as f64)
}

/// 1x1 conv to `hidden` channels, leaky ReLU, batch norm, then a fully
/// connected layer to `2L` coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkHead {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub n_landmarks: usize,
    pub hidden: usize,
    net: Sequential,
}

impl LandmarkHead {
    pub fn new(
        in_channels: usize,
        height: usize,
        width: usize,
        n_landmarks: usize,
        hidden: usize,
    ) -> Result<Self> {
        if in_channels == 0 || height == 0 || width == 0 || n_landmarks == 0 || hidden == 0 {
            return Err(invalid("landmark head dimensions must be positive"));
        }
        let net = Sequential::new(vec![
            Layer::Conv2d {
                in_ch: in_channels,
                out_ch: hidden,
                kernel: 1,
                stride: 1,
            },
            Layer::LeakyRelu { slope: 0.2 },
            Layer::BatchNorm { channels: hidden },
            Layer::Linear {
                input: hidden * height * width,
                output: 2 * n_landmarks,
            },
        ]);
        Ok(LandmarkHead {
            in_channels,
            height,
            width,
            n_landmarks,
            hidden,
            net,
        })
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.net.init_params(rng)
    }

    pub fn init_buffers(&self) -> Vec<f64> {
        self.net.init_buffers()
    }

    /// Range of the final layer's weights and bias within the parameter vector.
    pub fn final_layer_range(&self) -> std::ops::Range<usize> {
        let n = self.param_count();
        n - (2 * self.n_landmarks * (self.hidden * self.height * self.width + 1))..n
    }

    fn check(&self, params: &[f64], x: &Tensor) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::ShapeMismatch(format!(
                "landmark head needs {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        if (x.c, x.h, x.w) != (self.in_channels, self.height, self.width) {
            return Err(Error::ShapeMismatch(format!(
                "feature map is {}x{}x{}, head expects {}x{}x{}",
                x.c, x.h, x.w, self.in_channels, self.height, self.width
            )));
        }
        Ok(())
    }

    /// Training-mode forward (batch statistics). Output is `n x 2L`.
    pub fn forward(&self, params: &[f64], x: &Tensor) -> Result<Tape> {
        self.check(params, x)?;
        Ok(self.net.forward(params, x))
    }

    /// Accumulates parameter gradients into `grads`; returns the gradient
    /// with respect to the feature map.
    pub fn backward(
        &self,
        params: &[f64],
        tape: &Tape,
        grad_out: Tensor,
        grads: &mut [f64],
    ) -> Tensor {
        self.net
            .backward(params, tape, grad_out, grads, true)
            .expect("input gradient requested")
    }

    /// Inference with running normalization statistics.
    pub fn predict(&self, params: &[f64], buffers: &[f64], x: &Tensor) -> Result<Tensor> {
        self.check(params, x)?;
        Ok(self.net.forward_eval(params, buffers, x))
    }

    pub fn update_running_stats(&self, buffers: &mut [f64], tape: &Tape) {
        self.net.update_running_stats(buffers, tape, 0.1);
    }
}

/// Inference on one feature map: `L` coordinate pairs.
pub fn landmark_head_forward(
    head: &LandmarkHead,
    params: &[f64],
    buffers: &[f64],
    feature_map: &Tensor,
) -> Result<Vec<[f64; 2]>> {
    if feature_map.n != 1 {
        return Err(Error::ShapeMismatch("expected a single feature map".into()));
    }
    let out = head.predict(params, buffers, feature_map)?;
    Ok(out.data.chunks(2).map(|p| [p[0], p[1]]).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Keep encoder weights fixed; otherwise the trunk is finetuned too.
    pub freeze_backbone: bool,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for LandmarkConfig {
    fn default() -> Self {
        LandmarkConfig {
            epochs: 60,
            batch_size: 32,
            lr: 1e-3,
            freeze_backbone: true,
            hidden: 128,
            seed: 0,
        }
    }
}

/// A trained head together with the (possibly finetuned) backbone weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkModel {
    pub head: LandmarkHead,
    pub params: Vec<f64>,
    pub buffers: Vec<f64>,
    pub backbone: Vec<f64>,
    /// Head outputs are coordinates divided by this (the image side).
    pub scale: f64,
    pub losses: Vec<f64>,
}

impl LandmarkModel {
    pub fn predict(&self, encoder: &Encoder, images: &[Image]) -> Result<Vec<LandmarkSet>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let refs: Vec<&Image> = chunk.iter().collect();
            let fmap = encoder.feature_map(&self.backbone, &batch_tensor(&refs))?;
            let y = self.head.predict(&self.params, &self.buffers, &fmap)?;
            for row in y.data.chunks(2 * self.head.n_landmarks) {
                let coords: Vec<[f64; 2]> = row
                    .chunks(2)
                    .map(|p| [p[0] * self.scale, p[1] * self.scale])
                    .collect();
                let iod = (coords[0][0] - coords[1][0])
                    .hypot(coords[0][1] - coords[1][1])
                    .max(f64::MIN_POSITIVE);
                out.push(LandmarkSet::new(coords, iod)?);
            }
        }
        Ok(out)
    }
}

/// Fits a landmark head with mean-squared error on coordinates scaled to
/// the unit square, using Adam.
pub fn train_landmark_head(
    encoder: &Encoder,
    encoder_params: &[f64],
    images: &[Image],
    targets: &[LandmarkSet],
    config: &LandmarkConfig,
) -> Result<LandmarkModel> {
    if images.is_empty() || images.len() != targets.len() {
        return Err(invalid(
            "landmark training needs equally many images and targets",
        ));
    }
    if config.batch_size == 0 || !(config.lr > 0.0) {
        return Err(invalid("batch size and learning rate must be positive"));
    }
    let n_landmarks = targets[0].len();
    if targets.iter().any(|t| t.len() != n_landmarks) || n_landmarks == 0 {
        return Err(invalid(
            "every target must have the same, non-zero number of landmarks",
        ));
    }
    let scale = images[0].width as f64;
    let probe = encoder.feature_map(encoder_params, &images[0].to_tensor())?;
    let head = LandmarkHead::new(probe.c, probe.h, probe.w, n_landmarks, config.hidden)?;
    let mut params = head.init_params(&mut stream_rng(config.seed, u64::MAX));
    let mut buffers = head.init_buffers();
    let mut backbone = encoder_params.to_vec();
    let mut adam_head = Adam::new(params.len());
    let mut adam_backbone = Adam::new(if config.freeze_backbone {
        0
    } else {
        backbone.len()
    });

    let frozen_maps: Option<Vec<Tensor>> = if config.freeze_backbone {
        let mut maps = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let refs: Vec<&Image> = chunk.iter().collect();
            let m = encoder.feature_map(&backbone, &batch_tensor(&refs))?;
            maps.extend((0..m.n).map(|i| Tensor::from_vec(1, m.c, m.h, m.w, m.sample(i).to_vec())));
        }
        Some(maps)
    } else {
        None
    };
    let target_rows: Vec<Vec<f64>> = targets
        .iter()
        .map(|t| {
            t.coords
                .iter()
                .flat_map(|p| [p[0] / scale, p[1] / scale])
                .collect()
        })
        .collect();

    let mut losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..images.len()).collect();
        order.shuffle(&mut stream_rng(config.seed, epoch as u64));
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let backbone_pass = if let Some(maps) = &frozen_maps {
                let picked: Vec<Tensor> = chunk.iter().map(|&i| maps[i].clone()).collect();
                (Tensor::stack(&picked), None)
            } else {
                let refs: Vec<&Image> = chunk.iter().map(|&i| &images[i]).collect();
                let tape = encoder.trunk_forward(&backbone, &batch_tensor(&refs))?;
                (tape.output.clone(), Some(tape))
            };
            let (fmap, trunk_tape) = backbone_pass;
            let tape = head.forward(&params, &fmap)?;
            let out = &tape.output;
            let count = out.data.len() as f64;
            let mut grad = Tensor::zeros(out.n, out.c, 1, 1);
            let mut loss = 0.0;
            for (j, &i) in chunk.iter().enumerate() {
                for (k, (&y, &t)) in out.sample(j).iter().zip(&target_rows[i]).enumerate() {
                    let d = y - t;
                    loss += d * d / count;
                    grad.sample_mut(j)[k] = 2.0 * d / count;
                }
            }
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: 0 });
            }
            epoch_loss += loss * chunk.len() as f64;
            let mut g_head = vec![0.0; params.len()];
            let g_map = head.backward(&params, &tape, grad, &mut g_head);
            head.update_running_stats(&mut buffers, &tape);
            adam_head.step(&mut params, &g_head, config.lr);
            if let Some(trunk_tape) = trunk_tape {
                let (g_backbone, _) = encoder.trunk_backward(&backbone, &trunk_tape, g_map);
                adam_backbone.step(&mut backbone, &g_backbone, config.lr);
            }
        }
        losses.push(epoch_loss / images.len() as f64);
    }
    Ok(LandmarkModel {
        head,
        params,
        buffers,
        backbone,
        scale,
        losses,
    })
}

/// Synthetic "faces": a bright ellipse with two dark eyes, a nose and a
/// mouth, under random placement, size and in-plane rotation. Landmarks are
/// left eye, right eye, nose tip, left and right mouth corner.
pub fn make_landmark_dataset(
    n: usize,
    size: usize,
    seed: u64,
) -> Result<(Vec<Image>, Vec<LandmarkSet>)> {
    if n == 0 || size < crate::data::image::MIN_SIDE {
        return Err(invalid(
            "landmark dataset needs n >= 1 and a valid image size",
        ));
    }
    const CANON: [[f64; 2]; 5] = [
        [-0.2, -0.12],
        [0.2, -0.12],
        [0.0, 0.06],
        [-0.15, 0.24],
        [0.15, 0.24],
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.02).unwrap();
    let sz = size as f64;
    let mut images = Vec::with_capacity(n);
    let mut sets = Vec::with_capacity(n);
    for idx in 0..n {
        let s = rng.random_range(0.55..0.75) * sz;
        let cx = sz / 2.0 + rng.random_range(-0.1..0.1) * sz;
        let cy = sz / 2.0 + rng.random_range(-0.1..0.1) * sz;
        let theta: f64 = rng.random_range(-0.25..0.25);
        let (sin, cos) = theta.sin_cos();
        let place = |p: [f64; 2]| {
            [
                cx + s * (cos * p[0] - sin * p[1]),
                cy + s * (sin * p[0] + cos * p[1]),
            ]
        };
        let coords: Vec<[f64; 2]> = CANON.iter().map(|&p| place(p)).collect();
        let bg: f64 = rng.random_range(0.0..0.3);
        let skin: [f64; 3] = [
            rng.random_range(0.7..0.95),
            rng.random_range(0.55..0.8),
            rng.random_range(0.45..0.7),
        ];
        let mut pixels = Vec::with_capacity(size * size * 3);
        for y in 0..size {
            for x in 0..size {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                // back to face-local coordinates
                let (dx, dy) = ((px - cx) / s, (py - cy) / s);
                let (u, v) = (cos * dx + sin * dy, -sin * dx + cos * dy);
                let inside = (u / 0.4).powi(2) + (v / 0.5).powi(2) <= 1.0;
                let near = |p: [f64; 2], r: f64| (u - p[0]).hypot(v - p[1]) <= r;
                let on_mouth = (-0.15..=0.15).contains(&u) && (v - 0.24).abs() <= 0.03;
                let mut c = if inside { skin } else { [bg; 3] };
                if inside && (near(CANON[0], 0.06) || near(CANON[1], 0.06) || on_mouth) {
                    c = [0.05; 3];
                } else if inside && near(CANON[2], 0.04) {
                    c = [skin[0] * 0.6, skin[1] * 0.6, skin[2] * 0.6];
                }
                for ch in c {
                    pixels.push((ch + noise.sample(&mut rng)).clamp(0.0, 1.0));
                }
            }
        }
        images.push(Image::new(
            size,
            size,
            3,
            pixels,
            format!("landmark/{seed}/{idx}"),
        )?);
        sets.push(LandmarkSet::new(coords, 0.4 * s)?);
    }
    Ok((images, sets))
}

/// Parses a ground-truth file of `path x1 y1 ... xL yL iod` lines.
pub fn read_landmark_file(path: &Path) -> Result<Vec<(String, LandmarkSet)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let nums = fields[1..]
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| parse_err(format!("not a number: {f:?}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if nums.len() < 3 || nums.len() % 2 == 0 {
            return Err(parse_err(format!(
                "expected a path, coordinate pairs and an inter-ocular distance, got {} numbers",
                nums.len()
            )));
        }
        let (xy, iod) = nums.split_at(nums.len() - 1);
        let coords = xy.chunks(2).map(|p| [p[0], p[1]]).collect();
        let set = LandmarkSet::new(coords, iod[0]).map_err(|e| parse_err(e.to_string()))?;
        out.push((fields[0].to_string(), set));
    }
    Ok(out)
}

pub fn write_landmark_file(path: &Path, rows: &[(String, LandmarkSet)]) -> Result<()> {
    let mut text = String::new();
    for (name, set) in rows {
        text.push_str(name);
        for p in &set.coords {
            let _ = write!(text, " {} {}", p[0], p[1]);
        }
        let _ = writeln!(text, " {}", set.inter_ocular);
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(coords: &[[f64; 2]], iod: f64) -> LandmarkSet {
        LandmarkSet::new(coords.to_vec(), iod).unwrap()
    }

    #[test]
    fn error_definition() {
        let gt = set(&[[10.0, 10.0], [30.0, 10.0], [20.0, 20.0]], 20.0);
        assert_eq!(landmark_error(&gt, &gt).unwrap(), 0.0);
        let shifted = set(&[[30.0, 10.0], [30.0, 30.0], [20.0, 0.0]], 20.0);
        assert_eq!(landmark_error(&shifted, &gt).unwrap(), 1.0);
        assert!(LandmarkSet::new(vec![[0.0, 0.0]], 0.0).is_err());
        let bad = LandmarkSet {
            coords: vec![[0.0, 0.0]],
            inter_ocular: -1.0,
        };
        assert!(landmark_error(&bad, &bad).is_err());
    }

    #[test]
    fn zero_input_gives_final_bias() {
        let head = LandmarkHead::new(3, 2, 2, 5, 8).unwrap();
        let mut params = head.init_params(&mut ChaCha8Rng::seed_from_u64(1));
        let r = head.final_layer_range();
        let bias_start = r.end - 10;
        for (k, p) in params[r.clone()].iter_mut().enumerate() {
            *p = if r.start + k >= bias_start {
                k as f64 * 0.5
            } else {
                0.0
            };
        }
        let bias: Vec<f64> = params[bias_start..].to_vec();
        let out = landmark_head_forward(
            &head,
            &params,
            &head.init_buffers(),
            &Tensor::zeros(1, 3, 2, 2),
        )
        .unwrap();
        assert_eq!(out.len(), 5);
        let flat: Vec<f64> = out.iter().flat_map(|p| [p[0], p[1]]).collect();
        assert_eq!(flat, bias);
    }

    #[test]
    fn gt_file_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("gt.txt");
        let rows = vec![
            (
                "a.png".to_string(),
                set(
                    &[[1.0, 2.0], [3.5, 4.0], [5.0, 6.0], [7.0, 8.0], [9.0, 10.25]],
                    2.5,
                ),
            ),
            ("b.png".to_string(), set(&[[0.0; 2]; 5], 1.0)),
        ];
        write_landmark_file(&path, &rows).unwrap();
        assert_eq!(read_landmark_file(&path).unwrap(), rows);
        fs::write(&path, "a.png 1 2 3\nb.png 1 2 x 4 5\n").unwrap();
        let err = read_landmark_file(&path).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn synthetic_faces_are_deterministic() {
        let (a, la) = make_landmark_dataset(4, 16, 3).unwrap();
        let (b, lb) = make_landmark_dataset(4, 16, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert!(la.iter().all(|s| s.len() == 5 && s.inter_ocular > 0.0));
    }
}
