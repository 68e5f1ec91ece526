//! N-way K-shot episodes scored by a linear classifier on frozen features.

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::probe::{fit_linear, ProbeConfig, ProbeOptimizer};
use super::stats::{confidence_interval, EvalResult};
use crate::contrast::train::stream_rng;
use crate::contrast::Encoder;
use crate::data::{batch_tensor, Image, LabeledImageSet};
use crate::error::{invalid, Result};

/// Dataset indices of one episode. Way labels are `0..n_way`, assigned in
/// ascending order of the original class ids in `classes`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub classes: Vec<usize>,
    pub support: Vec<usize>,
    pub support_labels: Vec<usize>,
    pub query: Vec<usize>,
    pub query_labels: Vec<usize>,
}

impl Episode {
    pub fn support_images<'a>(&self, dataset: &'a LabeledImageSet) -> Vec<&'a Image> {
        self.support.iter().map(|&i| &dataset.images[i]).collect()
    }

    pub fn query_images<'a>(&self, dataset: &'a LabeledImageSet) -> Vec<&'a Image> {
        self.query.iter().map(|&i| &dataset.images[i]).collect()
    }
}

/// Samples an episode from a label vector.
pub fn sample_episode_from_labels<R: Rng + ?Sized>(
    labels: &[usize],
    n_way: usize,
    k_shot: usize,
    n_query: usize,
    rng: &mut R,
) -> Result<Episode> {
    if n_way == 0 || k_shot == 0 || n_query == 0 {
        return Err(invalid("n_way, k_shot and n_query must be at least 1"));
    }
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class = vec![Vec::new(); n_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let need = k_shot + n_query;
    let eligible: Vec<usize> = (0..n_classes)
        .filter(|&c| by_class[c].len() >= need)
        .collect();
    if eligible.len() < n_way {
        return Err(invalid(format!(
            "{n_way}-way episodes with {need} items per class need {n_way} such classes, found {}",
            eligible.len()
        )));
    }
    let mut classes: Vec<usize> = index::sample(rng, eligible.len(), n_way)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    classes.sort_unstable();
    let mut ep = Episode {
        classes: classes.clone(),
        support: Vec::with_capacity(n_way * k_shot),
        support_labels: Vec::with_capacity(n_way * k_shot),
        query: Vec::with_capacity(n_way * n_query),
        query_labels: Vec::with_capacity(n_way * n_query),
    };
    for (way, &c) in classes.iter().enumerate() {
        let members = &by_class[c];
        let picked = index::sample(rng, members.len(), need).into_vec();
        for (j, &p) in picked.iter().enumerate() {
            if j < k_shot {
                ep.support.push(members[p]);
                ep.support_labels.push(way);
            } else {
                ep.query.push(members[p]);
                ep.query_labels.push(way);
            }
        }
    }
    Ok(ep)
}

pub fn sample_episode<R: Rng + ?Sized>(
    dataset: &LabeledImageSet,
    n_way: usize,
    k_shot: usize,
    n_query: usize,
    rng: &mut R,
) -> Result<Episode> {
    sample_episode_from_labels(&dataset.labels, n_way, k_shot, n_query, rng)
}

/// Anything that maps images to fixed-length feature vectors.
pub trait FeatureExtractor: Sync {
    fn dim(&self) -> usize;
    /// Row-major `images.len() x dim`.
    fn extract(&self, images: &[&Image]) -> Result<Vec<f64>>;
}

/// Pooled trunk features of a frozen encoder.
#[derive(Debug, Clone, Copy)]
pub struct FrozenEncoder<'a> {
    pub encoder: &'a Encoder,
    pub params: &'a [f64],
}

impl FeatureExtractor for FrozenEncoder<'_> {
    fn dim(&self) -> usize {
        self.encoder.feature_dim()
    }

    fn extract(&self, images: &[&Image]) -> Result<Vec<f64>> {
        let chunks: Vec<Vec<f64>> = images
            .par_chunks(64)
            .map(|c| self.encoder.features(self.params, &batch_tensor(c)))
            .collect::<Result<_>>()?;
        Ok(chunks.concat())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
    /// Full-batch gradient steps on the support set.
    pub rounds: usize,
    /// Candidate learning rates, chosen on separate validation episodes.
    pub lr_grid: Vec<f64>,
    pub validation_episodes: usize,
    pub seed: u64,
}

impl Default for FewShotConfig {
    fn default() -> Self {
        FewShotConfig {
            n_way: 5,
            k_shot: 1,
            n_query: 15,
            rounds: 100,
            lr_grid: vec![0.001, 0.01, 0.1, 1.0, 10.0],
            validation_episodes: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotOutcome {
    pub result: EvalResult,
    pub lr: f64,
    pub accuracies: Vec<f64>,
}

const VALIDATION_STREAM: u64 = 1 << 40;

fn gather(feats: &[f64], dim: usize, idx: &[usize]) -> Vec<f64> {
    idx.iter()
        .flat_map(|&i| feats[i * dim..(i + 1) * dim].iter().copied())
        .collect()
}

fn episode_accuracy(
    feats: &[f64],
    dim: usize,
    ep: &Episode,
    n_way: usize,
    rounds: usize,
    lr: f64,
) -> Result<f64> {
    let cfg = ProbeConfig {
        epochs: rounds,
        lr,
        weight_decay: 0.0,
        standardize: false,
        optimizer: ProbeOptimizer::Gd,
    };
    let clf = fit_linear(
        &gather(feats, dim, &ep.support),
        &ep.support_labels,
        dim,
        n_way,
        &cfg,
    )?;
    Ok(clf.accuracy(&gather(feats, dim, &ep.query), &ep.query_labels))
}

fn run_episodes(
    feats: &[f64],
    dim: usize,
    labels: &[usize],
    config: &FewShotConfig,
    streams: Vec<u64>,
    lr: f64,
) -> Result<Vec<f64>> {
    streams
        .into_par_iter()
        .map(|s| {
            let ep = sample_episode_from_labels(
                labels,
                config.n_way,
                config.k_shot,
                config.n_query,
                &mut stream_rng(config.seed, s),
            )?;
            episode_accuracy(feats, dim, &ep, config.n_way, config.rounds, lr)
        })
        .collect()
}

/// Few-shot evaluation on precomputed features, `labels.len() x dim`.
pub fn few_shot_eval_features(
    feats: &[f64],
    dim: usize,
    labels: &[usize],
    n_episodes: usize,
    config: &FewShotConfig,
) -> Result<FewShotOutcome> {
    if feats.len() != labels.len() * dim {
        return Err(invalid("feature matrix does not match label count"));
    }
    if config.lr_grid.is_empty() || config.rounds == 0 {
        return Err(invalid(
            "few-shot evaluation needs a learning-rate grid and at least one round",
        ));
    }
    let mut lr = config.lr_grid[0];
    if config.lr_grid.len() > 1 && config.validation_episodes > 0 {
        let mut best = f64::NEG_INFINITY;
        for &cand in &config.lr_grid {
            let streams = (0..config.validation_episodes as u64)
                .map(|v| VALIDATION_STREAM | v)
                .collect();
            // a rate that diverges on any validation episode is out of the running
            let Ok(accs) = run_episodes(feats, dim, labels, config, streams, cand) else {
                continue;
            };
            let mean = accs.iter().sum::<f64>() / accs.len() as f64;
            if mean > best {
                best = mean;
                lr = cand;
            }
        }
    }
    let accuracies = run_episodes(
        feats,
        dim,
        labels,
        config,
        (0..n_episodes as u64).collect(),
        lr,
    )?;
    Ok(FewShotOutcome {
        result: confidence_interval(&accuracies)?,
        lr,
        accuracies,
    })
}

/// Embeds the whole dataset once with the frozen extractor, then scores
/// `n_episodes` independent episodes.
pub fn few_shot_eval(
    extractor: &dyn FeatureExtractor,
    dataset: &LabeledImageSet,
    n_episodes: usize,
    config: &FewShotConfig,
) -> Result<FewShotOutcome> {
    let images: Vec<&Image> = dataset.images.iter().collect();
    let feats = extractor.extract(&images)?;
    few_shot_eval_features(&feats, extractor.dim(), &dataset.labels, n_episodes, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn counts_and_determinism() {
        let labels: Vec<usize> = (0..200).map(|i| i / 20).collect();
        let ep = sample_episode_from_labels(&labels, 5, 1, 15, &mut stream_rng(1, 0)).unwrap();
        assert_eq!(ep.support.len(), 5);
        assert_eq!(ep.query.len(), 75);
        let again = sample_episode_from_labels(&labels, 5, 1, 15, &mut stream_rng(1, 0)).unwrap();
        assert_eq!(ep, again);
        let s: HashSet<_> = ep.support.iter().collect();
        assert!(ep.query.iter().all(|q| !s.contains(q)));
        for (i, &l) in ep.support.iter().zip(&ep.support_labels) {
            assert_eq!(labels[*i], ep.classes[l]);
        }
        assert!(ep.classes.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn too_few_items_is_an_error() {
        let labels: Vec<usize> = (0..50).map(|i| i / 10).collect();
        assert!(sample_episode_from_labels(&labels, 5, 5, 6, &mut stream_rng(1, 0)).is_err());
        assert!(sample_episode_from_labels(&labels, 6, 1, 1, &mut stream_rng(1, 0)).is_err());
    }

    #[test]
    fn one_hot_features_score_perfectly() {
        let labels: Vec<usize> = (0..160).map(|i| i / 16).collect();
        let feats: Vec<f64> = labels
            .iter()
            .flat_map(|&l| (0..10).map(move |j| if j == l { 1.0 } else { 0.0 }))
            .collect();
        let out =
            few_shot_eval_features(&feats, 10, &labels, 30, &FewShotConfig::default()).unwrap();
        assert_eq!(out.result.mean, 1.0);
        assert_eq!(out.result.half_width, 0.0);
    }
}
