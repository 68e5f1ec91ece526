//! Linear readout on frozen features.

use serde::{Deserialize, Serialize};

use crate::contrast::loss::cross_entropy_with_grad;
use crate::error::{invalid, Error, Result};
use crate::nn::gemm;
use crate::nn::optim::Adam;

/// Multinomial logistic regression `logits = W x + b` on (optionally
/// standardized) features. Weights are stored row-major, `n_classes x dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifier {
    pub dim: usize,
    pub n_classes: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    /// Per-dimension shift and scale applied before the affine map.
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl LinearClassifier {
    pub fn zeros(dim: usize, n_classes: usize) -> Self {
        LinearClassifier {
            dim,
            n_classes,
            weights: vec![0.0; dim * n_classes],
            bias: vec![0.0; n_classes],
            shift: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    fn prepare(&self, feats: &[f64]) -> Vec<f64> {
        feats
            .chunks(self.dim)
            .flat_map(|row| {
                row.iter()
                    .zip(&self.shift)
                    .zip(&self.scale)
                    .map(|((x, m), s)| (x - m) * s)
            })
            .collect()
    }

    fn logits_of_prepared(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len() / self.dim;
        let mut out: Vec<f64> = (0..n).flat_map(|_| self.bias.iter().copied()).collect();
        gemm(
            n,
            self.dim,
            self.n_classes,
            1.0,
            x,
            false,
            &self.weights,
            true,
            1.0,
            &mut out,
        );
        out
    }

    pub fn logits(&self, feats: &[f64]) -> Vec<f64> {
        self.logits_of_prepared(&self.prepare(feats))
    }

    /// Arg-max class per row; ties go to the lowest class id.
    pub fn predict(&self, feats: &[f64]) -> Vec<usize> {
        self.logits(feats)
            .chunks(self.n_classes)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                        if v > best.1 {
                            (i, v)
                        } else {
                            best
                        }
                    })
                    .0
            })
            .collect()
    }

    pub fn accuracy(&self, feats: &[f64], labels: &[usize]) -> f64 {
        let pred = self.predict(feats);
        let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
        hits as f64 / labels.len() as f64
    }

    /// Mean cross-entropy on prepared features and gradients for
    /// `[weights | bias]`.
    fn loss_grad(&self, x: &[f64], labels: &[usize]) -> Result<(f64, Vec<f64>)> {
        let n = labels.len();
        let logits = self.logits_of_prepared(x);
        let (loss, g) = cross_entropy_with_grad(&logits, self.n_classes, labels)?;
        let mut grad = vec![0.0; self.weights.len() + self.n_classes];
        let (gw, gb) = grad.split_at_mut(self.weights.len());
        gemm(
            self.n_classes,
            n,
            self.dim,
            1.0,
            &g,
            true,
            x,
            false,
            0.0,
            gw,
        );
        for row in g.chunks(self.n_classes) {
            for (b, v) in gb.iter_mut().zip(row) {
                *b += v;
            }
        }
        Ok((loss, grad))
    }

    fn apply(&mut self, step: impl FnOnce(&mut [f64])) {
        let mut flat: Vec<f64> = self.weights.iter().chain(&self.bias).copied().collect();
        step(&mut flat);
        let (w, b) = flat.split_at(self.weights.len());
        self.weights.copy_from_slice(w);
        self.bias.copy_from_slice(b);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ProbeOptimizer {
    Adam,
    /// Plain full-batch gradient descent.
    Gd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Standardize each feature dimension with training-set statistics.
    pub standardize: bool,
    pub optimizer: ProbeOptimizer,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 300,
            lr: 0.05,
            weight_decay: 0.0,
            standardize: true,
            optimizer: ProbeOptimizer::Adam,
        }
    }
}

fn check_split(feats: &[f64], labels: &[usize], dim: usize, what: &str) -> Result<()> {
    if labels.is_empty() {
        return Err(invalid(format!("{what} split is empty")));
    }
    if dim == 0 || feats.len() != labels.len() * dim {
        return Err(Error::ShapeMismatch(format!(
            "{what} features hold {} values for {} labels of dimension {dim}",
            feats.len(),
            labels.len()
        )));
    }
    Ok(())
}

/// Full-batch training from zero weights; deterministic.
pub fn fit_linear(
    feats: &[f64],
    labels: &[usize],
    dim: usize,
    n_classes: usize,
    config: &ProbeConfig,
) -> Result<LinearClassifier> {
    check_split(feats, labels, dim, "training")?;
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(invalid(format!(
            "label {bad} out of range for {n_classes} classes"
        )));
    }
    if !(config.lr > 0.0) {
        return Err(invalid("probe learning rate must be positive"));
    }
    let mut clf = LinearClassifier::zeros(dim, n_classes);
    if config.standardize {
        let n = labels.len() as f64;
        for j in 0..dim {
            let col = feats.iter().skip(j).step_by(dim);
            let mean = col.clone().sum::<f64>() / n;
            let var = col.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            clf.shift[j] = mean;
            clf.scale[j] = if var > 1e-24 { 1.0 / var.sqrt() } else { 1.0 };
        }
    }
    let x = clf.prepare(feats);
    let n_params = clf.weights.len() + n_classes;
    let mut adam = Adam::new(n_params);
    for _ in 0..config.epochs {
        let (loss, mut grad) = clf.loss_grad(&x, labels)?;
        if !loss.is_finite() {
            return Err(invalid("probe loss diverged"));
        }
        for (g, w) in grad.iter_mut().zip(&clf.weights) {
            *g += config.weight_decay * w;
        }
        match config.optimizer {
            ProbeOptimizer::Adam => clf.apply(|p| adam.step(p, &grad, config.lr)),
            ProbeOptimizer::Gd => clf.apply(|p| {
                for (p, g) in p.iter_mut().zip(&grad) {
                    *p -= config.lr * g;
                }
            }),
        }
    }
    Ok(clf)
}

/// Trains a linear classifier on frozen training features and returns its
/// test accuracy.
pub fn linear_probe(
    train_feats: &[f64],
    train_labels: &[usize],
    test_feats: &[f64],
    test_labels: &[usize],
    dim: usize,
    config: &ProbeConfig,
) -> Result<f64> {
    check_split(test_feats, test_labels, dim, "test")?;
    let n_classes = train_labels
        .iter()
        .chain(test_labels)
        .max()
        .map_or(0, |m| m + 1);
    let clf = fit_linear(train_feats, train_labels, dim, n_classes, config)?;
    Ok(clf.accuracy(test_feats, test_labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn one_hot_features_are_perfect() {
        let labels: Vec<usize> = (0..12).map(|i| i % 4).collect();
        let feats: Vec<f64> = labels
            .iter()
            .flat_map(|&l| (0..4).map(move |j| if j == l { 1.0 } else { 0.0 }))
            .collect();
        let acc =
            linear_probe(&feats, &labels, &feats, &labels, 4, &ProbeConfig::default()).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut clf = LinearClassifier::zeros(3, 4);
        clf.weights
            .iter_mut()
            .for_each(|w| *w = rng.random_range(-1.0..1.0));
        let x: Vec<f64> = (0..15).map(|_| rng.random_range(-1.0..1.0)).collect();
        let labels = [0, 3, 1, 2, 2];
        let (_, g) = clf.loss_grad(&x, &labels).unwrap();
        for i in 0..clf.weights.len() {
            let h = 1e-5;
            let mut a = clf.clone();
            a.weights[i] += h;
            let mut b = clf.clone();
            b.weights[i] -= h;
            let fd = (a.loss_grad(&x, &labels).unwrap().0 - b.loss_grad(&x, &labels).unwrap().0)
                / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-8, "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let cfg = ProbeConfig::default();
        assert!(linear_probe(&[], &[], &[1.0], &[0], 1, &cfg).is_err());
        assert!(linear_probe(&[1.0, 2.0], &[0], &[1.0], &[0], 1, &cfg).is_err());
    }
}
