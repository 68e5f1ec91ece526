use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Normal-approximation 95% quantile.
pub const Z95: f64 = 1.96;

/// Mean with a confidence half-width, reported as `mean ± half_width`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub mean: f64,
    pub half_width: f64,
    pub n: usize,
}

impl std::fmt::Display for EvalResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:.4} ± {:.4} (n={})",
            self.mean, self.half_width, self.n
        )
    }
}

/// `z * s / sqrt(n)` with the unbiased sample standard deviation `s`.
pub fn confidence_interval(samples: &[f64]) -> Result<EvalResult> {
    let n = samples.len();
    if n < 2 {
        return Err(invalid(format!(
            "confidence interval needs at least 2 samples, got {n}"
        )));
    }
    if samples.iter().all(|&x| x == samples[0]) {
        // summation rounding would otherwise leave a spurious nonzero width
        return Ok(EvalResult {
            mean: samples[0],
            half_width: 0.0,
            n,
        });
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    Ok(EvalResult {
        mean,
        half_width: Z95 * var.sqrt() / (n as f64).sqrt(),
        n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_and_binary_samples() {
        let c = confidence_interval(&[0.7; 10]).unwrap();
        assert_eq!(c.half_width, 0.0);
        assert!((c.mean - 0.7).abs() < 1e-15);

        let mut s = vec![0.0; 500];
        s.extend(vec![1.0; 500]);
        let r = confidence_interval(&s).unwrap();
        assert_eq!(r.mean, 0.5);
        // unbiased variance: 250 / 999
        let oracle = 1.96 * (250.0f64 / 999.0).sqrt() / 1000f64.sqrt();
        assert!((r.half_width - oracle).abs() < 1e-15);
        assert!((r.half_width - 0.031).abs() < 1e-3);
        assert!(confidence_interval(&[1.0]).is_err());
    }
}
