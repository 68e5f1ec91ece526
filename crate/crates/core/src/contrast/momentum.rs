use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Query and key parameter vectors of identical layout; the key side is an
/// exponential moving average of the query side and never sees gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderPair {
    pub query: Vec<f64>,
    pub key: Vec<f64>,
    pub momentum: f64,
}

impl EncoderPair {
    /// Both encoders start from the same parameters.
    pub fn new(params: Vec<f64>, momentum: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(invalid(format!("momentum {momentum} outside [0,1]")));
        }
        Ok(EncoderPair {
            key: params.clone(),
            query: params,
            momentum,
        })
    }

    /// `key <- m * key + (1 - m) * query`, elementwise.
    pub fn momentum_update(&mut self) -> Result<()> {
        momentum_update(&mut self.key, &self.query, self.momentum)
    }
}

pub fn momentum_update(key: &mut [f64], query: &[f64], m: f64) -> Result<()> {
    if key.len() != query.len() {
        return Err(Error::ShapeMismatch(format!(
            "key has {} parameters, query {}",
            key.len(),
            query.len()
        )));
    }
    if !(0.0..=1.0).contains(&m) {
        return Err(invalid(format!("momentum {m} outside [0,1]")));
    }
    for (k, &q) in key.iter_mut().zip(query) {
        // anchor on the nearer endpoint so m = 0 and m = 1 are exact
        let v = if m <= 0.5 {
            q + m * (*k - q)
        } else {
            *k + (1.0 - m) * (q - *k)
        };
        *k = v.clamp(k.min(q), k.max(q));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_midpoint() {
        let mut k = vec![0.3, -2.0];
        momentum_update(&mut k, &[1.7, 5.0], 1.0).unwrap();
        assert_eq!(k, vec![0.3, -2.0]);
        momentum_update(&mut k, &[1.7, 5.0], 0.0).unwrap();
        assert_eq!(k, vec![1.7, 5.0]);
        let mut k = vec![0.0];
        momentum_update(&mut k, &[1.0], 0.5).unwrap();
        assert_eq!(k, vec![0.5]);
    }

    #[test]
    fn query_is_untouched_and_shapes_checked() {
        let mut pair = EncoderPair::new(vec![1.0, 2.0], 0.9).unwrap();
        pair.query = vec![3.0, 4.0];
        pair.momentum_update().unwrap();
        assert_eq!(pair.query, vec![3.0, 4.0]);
        assert!((pair.key[0] - 1.2).abs() < 1e-12);
        let mut k = vec![0.0; 3];
        assert!(momentum_update(&mut k, &[0.0; 2], 0.5).is_err());
        assert!(EncoderPair::new(vec![0.0], 1.5).is_err());
    }
}
