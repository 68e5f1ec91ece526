//! Momentum-contrast training loop shared by the three objectives.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::encoder::{Encoder, EncoderConfig};
use super::loss::{
    cross_entropy_with_grad, exemplar_loss, infonce_loss, l2_normalize, l2_normalize_backward,
};
use super::momentum::EncoderPair;
use super::queue::MemoryQueue;
use crate::data::{batch_tensor, make_two_views, AugmentationPipeline, Image, LabeledImageSet};
use crate::error::{invalid, Error, Result};
use crate::nn::optim::{cosine_lr, Sgd};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Instance discrimination against every queued key.
    Moco,
    /// Label-filtered negatives.
    Exemplar,
    /// Plain supervised classification; the queue is not used.
    CrossEntropy,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Moco => "moco",
            Variant::Exemplar => "exemplar",
            Variant::CrossEntropy => "cross_entropy",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "moco" => Some(Variant::Moco),
            "exemplar" => Some(Variant::Exemplar),
            "cross_entropy" | "supervised" => Some(Variant::CrossEntropy),
            _ => None,
        }
    }

    pub fn is_contrastive(self) -> bool {
        self != Variant::CrossEntropy
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastConfig {
    pub variant: Variant,
    pub tau: f64,
    pub queue_capacity: usize,
    /// Key-encoder averaging coefficient.
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub cosine: bool,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
}

impl ContrastConfig {
    pub fn moco_v1() -> Self {
        ContrastConfig {
            variant: Variant::Moco,
            tau: 0.07,
            cosine: false,
            ..Self::exemplar_v2()
        }
    }

    pub fn moco_v2() -> Self {
        ContrastConfig {
            variant: Variant::Moco,
            tau: 0.2,
            ..Self::exemplar_v2()
        }
    }

    pub fn exemplar_v1() -> Self {
        ContrastConfig {
            tau: 0.07,
            cosine: false,
            ..Self::exemplar_v2()
        }
    }

    pub fn exemplar_v2() -> Self {
        ContrastConfig {
            variant: Variant::Exemplar,
            tau: 0.1,
            queue_capacity: 4096,
            momentum: 0.999,
            epochs: 200,
            batch_size: 256,
            lr: 0.03,
            cosine: true,
            sgd_momentum: 0.9,
            weight_decay: 1e-4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(invalid(format!("tau must be positive, got {}", self.tau)));
        }
        if self.queue_capacity == 0 {
            return Err(invalid("queue capacity must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(invalid(format!("momentum {} outside [0,1]", self.momentum)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(invalid("epochs and batch size must be at least 1"));
        }
        if self.variant.is_contrastive() && self.batch_size > self.queue_capacity {
            return Err(invalid(format!(
                "batch size {} exceeds queue capacity {}",
                self.batch_size, self.queue_capacity
            )));
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.sgd_momentum) {
            return Err(invalid(
                "lr must be positive, weight decay non-negative, sgd momentum in [0,1)",
            ));
        }
        Ok(())
    }
}

impl Default for ContrastConfig {
    fn default() -> Self {
        Self::exemplar_v2()
    }
}

/// Everything a training run mutates. Single owner.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub encoder: Encoder,
    pub pair: EncoderPair,
    pub queue: MemoryQueue,
    pub optimizer: Sgd,
    pub seed: u64,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
}

const INIT_STREAM: u64 = u64::MAX;

/// Independent random stream `stream` of the run seeded with `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn shuffle_stream(epoch: usize) -> u64 {
    u64::MAX - 1 - epoch as u64
}

fn view_stream(epoch: usize, position: usize) -> u64 {
    ((epoch as u64) << 32) | position as u64
}

impl TrainState {
    pub fn new(encoder_config: EncoderConfig, config: &ContrastConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.variant == Variant::CrossEntropy && encoder_config.n_classes.is_none() {
            return Err(invalid(
                "cross-entropy training needs a classifier (n_classes)",
            ));
        }
        let encoder = Encoder::new(encoder_config)?;
        let params = encoder.init_params(&mut stream_rng(seed, INIT_STREAM));
        let n = params.len();
        Ok(TrainState {
            queue: MemoryQueue::new(config.queue_capacity, encoder.embed_dim())?,
            pair: EncoderPair::new(params, config.momentum)?,
            optimizer: Sgd::new(n, config.sgd_momentum, config.weight_decay),
            encoder,
            seed,
            epoch: 0,
            step: 0,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub step_losses: Vec<f64>,
    /// Training images per second of wall-clock time.
    pub throughput: f64,
}

fn views_for_batch(
    dataset: &LabeledImageSet,
    indices: &[usize],
    first_position: usize,
    pipeline: &AugmentationPipeline,
    seed: u64,
    epoch: usize,
) -> Result<(Vec<Image>, Vec<Image>)> {
    let pairs: Vec<(Image, Image)> = indices
        .par_iter()
        .enumerate()
        .map(|(j, &idx)| {
            let mut rng = stream_rng(seed, view_stream(epoch, first_position + j));
            make_two_views(&dataset.images[idx], pipeline, &mut rng)
        })
        .collect::<Result<_>>()?;
    Ok(pairs.into_iter().unzip())
}

fn to_tensor(images: &[Image]) -> Tensor {
    let refs: Vec<&Image> = images.iter().collect();
    batch_tensor(&refs)
}

/// One pass over `dataset`. Query parameters get an SGD step per batch; for
/// the contrastive variants the key encoder is then averaged toward the
/// query and the batch keys are enqueued with their labels.
pub fn train_epoch(
    state: &mut TrainState,
    dataset: &LabeledImageSet,
    pipeline: &AugmentationPipeline,
    config: &ContrastConfig,
) -> Result<EpochMetrics> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(invalid("training dataset is empty"));
    }
    let started = Instant::now();
    let epoch = state.epoch;
    let lr = if config.cosine {
        cosine_lr(config.lr, epoch, config.epochs)
    } else {
        config.lr
    };
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut stream_rng(state.seed, shuffle_stream(epoch)));

    let mut step_losses = Vec::new();
    for (b, chunk) in order.chunks(config.batch_size).enumerate() {
        let (qv, kv) = views_for_batch(
            dataset,
            chunk,
            b * config.batch_size,
            pipeline,
            state.seed,
            epoch,
        )?;
        let labels: Vec<usize> = chunk.iter().map(|&i| dataset.labels[i]).collect();
        let loss = match config.variant {
            Variant::CrossEntropy => supervised_step(state, &to_tensor(&qv), &labels, lr)?,
            v => contrastive_step(
                state,
                v,
                config.tau,
                &to_tensor(&qv),
                &to_tensor(&kv),
                &labels,
                lr,
            )?,
        };
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: b });
        }
        step_losses.push(loss);
        state.step += 1;
    }
    state.epoch += 1;
    let elapsed = started.elapsed().as_secs_f64().max(1e-9);
    Ok(EpochMetrics {
        epoch,
        steps: step_losses.len(),
        lr,
        mean_loss: step_losses.iter().sum::<f64>() / step_losses.len() as f64,
        step_losses,
        throughput: dataset.len() as f64 / elapsed,
    })
}

fn supervised_step(state: &mut TrainState, x: &Tensor, labels: &[usize], lr: f64) -> Result<f64> {
    let enc = &state.encoder;
    let pass = enc.forward_train(&state.pair.query, x)?;
    let logits = pass
        .logits()
        .ok_or_else(|| invalid("encoder has no classifier"))?;
    let (loss, grad) = cross_entropy_with_grad(&logits.data, logits.c, labels)?;
    if !loss.is_finite() {
        return Ok(loss);
    }
    let g = Tensor::from_rows(logits.n, logits.c, grad);
    let grads = enc.backward(&state.pair.query, &pass, None, Some(g));
    state.optimizer.step(&mut state.pair.query, &grads, lr);
    Ok(loss)
}

fn contrastive_step(
    state: &mut TrainState,
    variant: Variant,
    tau: f64,
    xq: &Tensor,
    xk: &Tensor,
    labels: &[usize],
    lr: f64,
) -> Result<f64> {
    let enc = &state.encoder;
    let pass = enc.forward_train(&state.pair.query, xq)?;
    let raw = pass.embedding();
    // stop-gradient: keys come from the averaged encoder and are never differentiated
    let keys = enc.encode(&state.pair.key, xk, true)?;
    let n = raw.n;
    let mut grad = Tensor::zeros(n, raw.c, 1, 1);
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let v = raw.sample(i);
        let u = l2_normalize(v)?;
        let lg = match variant {
            Variant::Exemplar => exemplar_loss(&u, keys.row(i), &state.queue, label, tau)?,
            _ => infonce_loss(&u, keys.row(i), &state.queue, tau)?,
        };
        total += lg.loss;
        let gv = l2_normalize_backward(v, &u, &lg.grad_q);
        for (dst, g) in grad.sample_mut(i).iter_mut().zip(gv) {
            *dst = g / n as f64;
        }
    }
    let loss = total / n as f64;
    if !loss.is_finite() {
        return Ok(loss);
    }
    let grads = enc.backward(&state.pair.query, &pass, Some(grad), None);
    state.optimizer.step(&mut state.pair.query, &grads, lr);
    state.pair.momentum_update()?;
    state.queue.enqueue(&keys, labels)?;
    Ok(loss)
}

/// Runs `config.epochs` epochs from a fresh state, reporting each epoch to
/// `on_epoch`.
pub fn pretrain(
    dataset: &LabeledImageSet,
    pipeline: &AugmentationPipeline,
    encoder_config: EncoderConfig,
    config: &ContrastConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<(TrainState, Vec<EpochMetrics>)> {
    let mut encoder_config = encoder_config;
    if config.variant == Variant::CrossEntropy && encoder_config.n_classes.is_none() {
        encoder_config.n_classes = Some(dataset.num_classes());
    }
    let mut state = TrainState::new(encoder_config, config, seed)?;
    let mut history = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let m = train_epoch(&mut state, dataset, pipeline, config)?;
        on_epoch(&m);
        history.push(m);
    }
    Ok((state, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic_dataset, pipeline_stage, PretrainMode};

    fn tiny_encoder() -> EncoderConfig {
        EncoderConfig {
            image_size: 8,
            channels: vec![4, 8],
            strides: vec![2, 2],
            hidden_dim: 8,
            embed_dim: 8,
            n_classes: None,
            ..EncoderConfig::default()
        }
    }

    fn tiny_config(variant: Variant) -> ContrastConfig {
        ContrastConfig {
            variant,
            queue_capacity: 16,
            momentum: 0.9,
            epochs: 2,
            batch_size: 4,
            lr: 0.05,
            ..ContrastConfig::default()
        }
    }

    #[test]
    fn step_count_is_ceil_n_over_b() {
        let data = make_synthetic_dataset(2, 5, 8, 1).unwrap();
        let pipe = pipeline_stage(2, PretrainMode::Unsupervised)
            .unwrap()
            .with_output_size(8);
        let cfg = tiny_config(Variant::Moco);
        let mut state = TrainState::new(tiny_encoder(), &cfg, 3).unwrap();
        let m = train_epoch(&mut state, &data, &pipe, &cfg).unwrap();
        assert_eq!(m.steps, 3);
        assert_eq!(state.step, 3);
        assert_eq!(state.queue.filled(), 10);
        assert!(m.mean_loss.is_finite());
        // first batch sees an empty queue
        assert_eq!(m.step_losses[0], 0.0);
    }

    #[test]
    fn cross_entropy_leaves_queue_and_key_encoder_alone() {
        let data = make_synthetic_dataset(3, 4, 8, 1).unwrap();
        let pipe = pipeline_stage(3, PretrainMode::Supervised)
            .unwrap()
            .with_output_size(8);
        let cfg = tiny_config(Variant::CrossEntropy);
        let enc = EncoderConfig {
            n_classes: Some(3),
            ..tiny_encoder()
        };
        let mut state = TrainState::new(enc, &cfg, 3).unwrap();
        let before_queue = state.queue.clone();
        let before_key = state.pair.key.clone();
        let before_query = state.pair.query.clone();
        train_epoch(&mut state, &data, &pipe, &cfg).unwrap();
        assert_eq!(state.queue, before_queue);
        assert_eq!(state.pair.key, before_key);
        assert_ne!(state.pair.query, before_query);
    }

    #[test]
    fn same_seed_same_trajectory() {
        let data = make_synthetic_dataset(2, 6, 8, 1).unwrap();
        let pipe = pipeline_stage(5, PretrainMode::Unsupervised)
            .unwrap()
            .with_output_size(8);
        let cfg = tiny_config(Variant::Exemplar);
        let run = || pretrain(&data, &pipe, tiny_encoder(), &cfg, 11, |_| {}).unwrap();
        let (a, ha) = run();
        let (b, hb) = run();
        assert_eq!(a.pair, b.pair);
        assert_eq!(
            ha.iter().map(|m| m.step_losses.clone()).collect::<Vec<_>>(),
            hb.iter().map(|m| m.step_losses.clone()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn nan_loss_aborts_with_batch_index() {
        let data = make_synthetic_dataset(2, 4, 8, 1).unwrap();
        let pipe = pipeline_stage(1, PretrainMode::Unsupervised)
            .unwrap()
            .with_output_size(8);
        let cfg = tiny_config(Variant::Moco);
        let mut state = TrainState::new(tiny_encoder(), &cfg, 3).unwrap();
        state.pair.query.iter_mut().for_each(|p| *p = f64::NAN);
        let err = train_epoch(&mut state, &data, &pipe, &cfg).unwrap_err();
        // NaN embeddings fail normalization or produce a NaN loss on batch 0
        assert!(
            matches!(
                err,
                Error::NonFiniteLoss { batch: 0, .. } | Error::ZeroVector
            ),
            "{err}"
        );
    }

    #[test]
    fn config_validation() {
        let mut c = ContrastConfig::default();
        c.tau = 0.0;
        assert!(c.validate().is_err());
        let mut c = ContrastConfig::default();
        c.batch_size = c.queue_capacity + 1;
        assert!(c.validate().is_err());
        assert_eq!(ContrastConfig::exemplar_v1().tau, 0.07);
        assert_eq!(ContrastConfig::exemplar_v2().tau, 0.1);
        assert_eq!(ContrastConfig::moco_v1().tau, 0.07);
        assert_eq!(ContrastConfig::moco_v2().tau, 0.2);
    }
}
