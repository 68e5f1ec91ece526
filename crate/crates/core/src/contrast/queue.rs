use serde::{Deserialize, Serialize};

use super::loss::{norm, EmbeddingBatch, UNIT_NORM_TOL};
use crate::error::{invalid, Error, Result};

/// Fixed-capacity FIFO of unit-norm keys, each tagged with a class label.
///
/// Rows `0..filled` are live. Writes go to `write_ptr` and wrap, so once the
/// queue is full the oldest row sits at `write_ptr`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryQueue {
    capacity: usize,
    dim: usize,
    keys: Vec<f64>,
    labels: Vec<usize>,
    write_ptr: usize,
    filled: usize,
}

impl MemoryQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(invalid("queue capacity and dimension must be at least 1"));
        }
        Ok(MemoryQueue {
            capacity,
            dim,
            keys: vec![0.0; capacity * dim],
            labels: vec![0; capacity],
            write_ptr: 0,
            filled: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn filled(&self) -> usize {
        self.filled
    }

    pub fn write_ptr(&self) -> usize {
        self.write_ptr
    }

    pub fn is_empty(&self) -> bool {
        self.filled == 0
    }

    /// Live `(key, label)` rows in storage order.
    pub fn entries(&self) -> impl Iterator<Item = (&[f64], usize)> + Clone {
        self.keys
            .chunks(self.dim)
            .zip(self.labels.iter().copied())
            .take(self.filled)
    }

    /// Live rows from oldest to newest.
    pub fn ordered(&self) -> Vec<(&[f64], usize)> {
        let start = if self.filled < self.capacity {
            0
        } else {
            self.write_ptr
        };
        (0..self.filled)
            .map(|i| {
                let r = (start + i) % self.capacity;
                (&self.keys[r * self.dim..(r + 1) * self.dim], self.labels[r])
            })
            .collect()
    }

    pub fn enqueue(&mut self, keys: &EmbeddingBatch, labels: &[usize]) -> Result<()> {
        if keys.dim != self.dim {
            return Err(Error::ShapeMismatch(format!(
                "keys have {} dims, queue {}",
                keys.dim, self.dim
            )));
        }
        if keys.rows != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} keys but {} labels",
                keys.rows,
                labels.len()
            )));
        }
        if keys.rows > self.capacity {
            return Err(invalid(format!(
                "batch of {} exceeds queue capacity {}",
                keys.rows, self.capacity
            )));
        }
        if let Some(i) = (0..keys.rows).find(|&i| (norm(keys.row(i)) - 1.0).abs() > UNIT_NORM_TOL) {
            return Err(invalid(format!("key row {i} is not unit norm")));
        }
        if !keys.normalized {
            return Err(invalid("keys must be L2-normalized before enqueue"));
        }
        for (i, &label) in labels.iter().enumerate() {
            let r = self.write_ptr;
            self.keys[r * self.dim..(r + 1) * self.dim].copy_from_slice(keys.row(i));
            self.labels[r] = label;
            self.write_ptr = (self.write_ptr + 1) % self.capacity;
        }
        self.filled = (self.filled + keys.rows).min(self.capacity);
        Ok(())
    }

    /// Raw storage for checkpointing: `(keys, labels, write_ptr, filled)`.
    pub fn raw_parts(&self) -> (&[f64], &[usize], usize, usize) {
        (&self.keys, &self.labels, self.write_ptr, self.filled)
    }

    pub fn from_raw_parts(
        capacity: usize,
        dim: usize,
        keys: Vec<f64>,
        labels: Vec<usize>,
        write_ptr: usize,
        filled: usize,
    ) -> Result<Self> {
        if keys.len() != capacity * dim
            || labels.len() != capacity
            || write_ptr >= capacity
            || filled > capacity
        {
            return Err(invalid("inconsistent queue state"));
        }
        Ok(MemoryQueue {
            capacity,
            dim,
            keys,
            labels,
            write_ptr,
            filled,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_batch(tags: &[usize]) -> EmbeddingBatch {
        // key i is the basis vector e_(tag mod 3)
        let mut v = vec![0.0; tags.len() * 3];
        for (i, t) in tags.iter().enumerate() {
            v[i * 3 + t % 3] = 1.0;
        }
        EmbeddingBatch {
            rows: tags.len(),
            dim: 3,
            vectors: v,
            normalized: true,
        }
    }

    #[test]
    fn fifo_eviction() {
        let mut q = MemoryQueue::new(4, 3).unwrap();
        q.enqueue(&unit_batch(&[10, 11, 12]), &[10, 11, 12])
            .unwrap();
        assert_eq!(q.filled(), 3);
        q.enqueue(&unit_batch(&[20, 21, 22]), &[20, 21, 22])
            .unwrap();
        assert_eq!(q.filled(), 4);
        let labels: Vec<usize> = q.ordered().iter().map(|(_, l)| *l).collect();
        assert_eq!(labels, vec![12, 20, 21, 22]);
    }

    #[test]
    fn rejects_unnormalized_and_oversized() {
        let mut q = MemoryQueue::new(2, 3).unwrap();
        let mut bad = unit_batch(&[0]);
        bad.vectors[0] = 2.0;
        assert!(q.enqueue(&bad, &[0]).is_err());
        assert!(q.enqueue(&unit_batch(&[0, 1, 2]), &[0, 1, 2]).is_err());
        let mut flagless = unit_batch(&[0]);
        flagless.normalized = false;
        assert!(q.enqueue(&flagless, &[0]).is_err());
        assert_eq!(q.filled(), 0);
    }
}
