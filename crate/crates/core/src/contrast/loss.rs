//! Contrastive objectives and their analytic gradients w.r.t. the query.

use serde::{Deserialize, Serialize};

use super::queue::MemoryQueue;
use crate::error::{invalid, Error, Result};

/// Rows of embeddings, `rows x dim`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingBatch {
    pub rows: usize,
    pub dim: usize,
    pub vectors: Vec<f64>,
    pub normalized: bool,
}

pub const UNIT_NORM_TOL: f64 = 1e-6;

impl EmbeddingBatch {
    pub fn new(rows: usize, dim: usize, vectors: Vec<f64>) -> Self {
        assert_eq!(vectors.len(), rows * dim);
        EmbeddingBatch {
            rows,
            dim,
            vectors,
            normalized: false,
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    /// L2-normalizes every row in place.
    pub fn normalize(mut self) -> Result<Self> {
        for row in self.vectors.chunks_mut(self.dim) {
            let n = norm(row);
            if n == 0.0 {
                return Err(Error::ZeroVector);
            }
            row.iter_mut().for_each(|v| *v /= n);
        }
        self.normalized = true;
        Ok(self)
    }

    pub fn rows_are_unit(&self) -> bool {
        self.vectors
            .chunks(self.dim)
            .all(|r| (norm(r) - 1.0).abs() <= UNIT_NORM_TOL)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::ZeroVector);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Pulls a gradient w.r.t. `u = v / |v|` back to `v`.
pub fn l2_normalize_backward(v: &[f64], u: &[f64], grad_u: &[f64]) -> Vec<f64> {
    let n = norm(v);
    let ug = dot(u, grad_u);
    grad_u
        .iter()
        .zip(u)
        .map(|(g, ui)| (g - ui * ug) / n)
        .collect()
}

/// Loss value and gradient w.r.t. the query vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad_q: Vec<f64>,
}

/// Softmax cross-entropy with the positive at index 0 of
/// `[k_pos, negatives...]`, logits `q . k / tau`.
fn contrast_against<'a>(
    q: &[f64],
    k_pos: &[f64],
    negatives: impl Iterator<Item = &'a [f64]> + Clone,
    tau: f64,
) -> Result<LossGrad> {
    if !(tau > 0.0) {
        return Err(invalid(format!("temperature must be positive, got {tau}")));
    }
    if q.len() != k_pos.len() {
        return Err(Error::ShapeMismatch(format!(
            "query has {} dims, positive key {}",
            q.len(),
            k_pos.len()
        )));
    }
    let l_pos = dot(q, k_pos) / tau;
    let logits: Vec<f64> = negatives.clone().map(|k| dot(q, k) / tau).collect();
    let max = logits.iter().copied().fold(l_pos, f64::max);
    let mut denom = (l_pos - max).exp();
    for &l in &logits {
        denom += (l - max).exp();
    }
    let loss = max + denom.ln() - l_pos;

    // dL/dq = (sum_i p_i k_i - k_pos) / tau
    let p_pos = (l_pos - max).exp() / denom;
    let mut grad_q: Vec<f64> = k_pos.iter().map(|k| (p_pos - 1.0) * k / tau).collect();
    for (k, &l) in negatives.zip(&logits) {
        let p = (l - max).exp() / denom;
        for (g, kv) in grad_q.iter_mut().zip(k) {
            *g += p * kv / tau;
        }
    }
    Ok(LossGrad { loss, grad_q })
}

/// Instance discrimination: every filled queue row is a negative.
pub fn infonce_loss(q: &[f64], k_pos: &[f64], queue: &MemoryQueue, tau: f64) -> Result<LossGrad> {
    check_dim(q, queue)?;
    contrast_against(q, k_pos, queue.entries().map(|(k, _)| k), tau)
}

/// Exemplar objective: queue rows sharing the query's label are dropped from
/// the negative set; positives are otherwise unconstrained.
pub fn exemplar_loss(
    q: &[f64],
    k_pos: &[f64],
    queue: &MemoryQueue,
    label: usize,
    tau: f64,
) -> Result<LossGrad> {
    check_dim(q, queue)?;
    contrast_against(
        q,
        k_pos,
        queue
            .entries()
            .filter(move |&(_, y)| y != label)
            .map(|(k, _)| k),
        tau,
    )
}

fn check_dim(q: &[f64], queue: &MemoryQueue) -> Result<()> {
    if q.len() != queue.dim() {
        return Err(Error::ShapeMismatch(format!(
            "query has {} dims, queue {}",
            q.len(),
            queue.dim()
        )));
    }
    Ok(())
}

/// Mean over rows of `-log softmax(logits)[label]`, with the gradient
/// w.r.t. the logits of that mean.
pub fn cross_entropy_with_grad(
    logits: &[f64],
    n_classes: usize,
    labels: &[usize],
) -> Result<(f64, Vec<f64>)> {
    if n_classes == 0 || logits.len() != labels.len() * n_classes {
        return Err(Error::ShapeMismatch(format!(
            "{} logits for {} labels over {n_classes} classes",
            logits.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(invalid("cross-entropy over an empty batch"));
    }
    let b = labels.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for ((row, g), &y) in logits
        .chunks(n_classes)
        .zip(grad.chunks_mut(n_classes))
        .zip(labels)
    {
        if y >= n_classes {
            return Err(invalid(format!(
                "label {y} out of range for {n_classes} classes"
            )));
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|l| (l - max).exp()).sum();
        loss += max + denom.ln() - row[y];
        for (gi, l) in g.iter_mut().zip(row) {
            *gi = (l - max).exp() / denom / b;
        }
        g[y] -= 1.0 / b;
    }
    Ok((loss / b, grad))
}

pub fn cross_entropy_loss(logits: &[f64], n_classes: usize, labels: &[usize]) -> Result<f64> {
    cross_entropy_with_grad(logits, n_classes, labels).map(|(l, _)| l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contrast::queue::MemoryQueue;

    fn queue_of(dim: usize, rows: &[(&[f64], usize)]) -> MemoryQueue {
        let mut q = MemoryQueue::new(rows.len().max(1), dim).unwrap();
        let vectors: Vec<f64> = rows.iter().flat_map(|(v, _)| v.iter().copied()).collect();
        let labels: Vec<usize> = rows.iter().map(|(_, l)| *l).collect();
        if !rows.is_empty() {
            let mut batch = EmbeddingBatch::new(rows.len(), dim, vectors);
            batch.normalized = true;
            q.enqueue(&batch, &labels).unwrap();
        }
        q
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(l2_normalize(&[3.0, 4.0]).unwrap(), vec![0.6, 0.8]);
        let u = l2_normalize(&[0.6, 0.8]).unwrap();
        assert!((u[0] - 0.6).abs() < 1e-15 && (u[1] - 0.8).abs() < 1e-15);
        let err = l2_normalize(&[0.0, 0.0]).unwrap_err();
        assert_eq!(err.to_string(), "cannot normalize zero vector");
    }

    #[test]
    fn infonce_symmetric_negative_is_ln2() {
        let q = [1.0, 0.0];
        let k = [0.6, 0.8];
        let queue = queue_of(2, &[(&[0.6, -0.8], 0)]);
        for tau in [0.07, 0.2, 1.0, 3.0] {
            let l = infonce_loss(&q, &k, &queue, tau).unwrap().loss;
            assert!((l - 2f64.ln()).abs() < 1e-12, "{tau}: {l}");
        }
    }

    #[test]
    fn infonce_orthogonal_negative() {
        // log(1 + e^-1)
        let queue = queue_of(2, &[(&[0.0, 1.0], 0)]);
        let l = infonce_loss(&[1.0, 0.0], &[1.0, 0.0], &queue, 1.0)
            .unwrap()
            .loss;
        assert!((l - 0.313_261_687_518_222_8).abs() < 1e-12);
    }

    #[test]
    fn empty_queue_gives_zero_loss_and_gradient() {
        let queue = MemoryQueue::new(4, 2).unwrap();
        let lg = infonce_loss(&[1.0, 0.0], &[0.0, 1.0], &queue, 0.1).unwrap();
        assert_eq!(lg.loss, 0.0);
        assert!(lg.grad_q.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn exemplar_filters_same_label() {
        let queue = queue_of(2, &[(&[0.0, 1.0], 3), (&[-1.0, 0.0], 1)]);
        let l = exemplar_loss(&[1.0, 0.0], &[1.0, 0.0], &queue, 3, 1.0)
            .unwrap()
            .loss;
        // -log(e / (e + e^-1))
        assert!((l - 0.126_928_011_042_972_5).abs() < 1e-12);
    }

    #[test]
    fn exemplar_all_same_label_is_zero() {
        let queue = queue_of(2, &[(&[0.0, 1.0], 2), (&[-1.0, 0.0], 2)]);
        let lg = exemplar_loss(&[1.0, 0.0], &[0.0, 1.0], &queue, 2, 0.07).unwrap();
        assert_eq!(lg.loss, 0.0);
    }

    #[test]
    fn nonpositive_temperature_rejected() {
        let queue = queue_of(2, &[(&[0.0, 1.0], 0)]);
        assert!(infonce_loss(&[1.0, 0.0], &[1.0, 0.0], &queue, 0.0).is_err());
        assert!(exemplar_loss(&[1.0, 0.0], &[1.0, 0.0], &queue, 0, -1.0).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let n = 7;
        let l = cross_entropy_loss(&vec![0.3; n], n, &[4]).unwrap();
        assert!((l - (n as f64).ln()).abs() < 1e-12);
        let l = cross_entropy_loss(&[1.0, 0.0], 2, &[0]).unwrap();
        assert!((l - 0.313_261_687_518_222_8).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for mag in [1.0, 5.0, 20.0, 100.0] {
            let l = cross_entropy_loss(&[mag, 0.0, 0.0], 3, &[0]).unwrap();
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-40);
        assert!(cross_entropy_loss(&[1.0, 0.0], 2, &[2]).is_err());
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let logits = vec![0.3, -1.2, 2.0, 0.5, 0.1, -0.4];
        let labels = [2, 0];
        let (_, g) = cross_entropy_with_grad(&logits, 3, &labels).unwrap();
        for i in 0..logits.len() {
            let mut p = logits.clone();
            p[i] += 1e-6;
            let fp = cross_entropy_loss(&p, 3, &labels).unwrap();
            p[i] -= 2e-6;
            let fm = cross_entropy_loss(&p, 3, &labels).unwrap();
            assert!(((fp - fm) / 2e-6 - g[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn normalize_backward_matches_finite_differences() {
        let v = [0.3, -1.1, 0.7];
        let g = [0.2, 0.5, -0.9];
        let u = l2_normalize(&v).unwrap();
        let analytic = l2_normalize_backward(&v, &u, &g);
        for i in 0..3 {
            let mut p = v;
            p[i] += 1e-6;
            let fp = dot(&l2_normalize(&p).unwrap(), &g);
            p[i] -= 2e-6;
            let fm = dot(&l2_normalize(&p).unwrap(), &g);
            assert!(((fp - fm) / 2e-6 - analytic[i]).abs() < 1e-8);
        }
    }
}
