//! On-disk training state: a JSON manifest plus little-endian f32 arrays.
//!
//! Arrays are stored in single precision, so a save after a load writes the
//! same bytes as the save before it, while the in-memory f64 state is
//! rounded once on the first save.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::encoder::{Encoder, EncoderConfig};
use super::momentum::EncoderPair;
use super::queue::MemoryQueue;
use super::train::{ContrastConfig, TrainState};
use crate::error::{invalid, Error, Result};
use crate::nn::optim::Sgd;

pub const MANIFEST: &str = "manifest.json";
const FORMAT: &str = "contrastkit-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub file: String,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamShape {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Training RNG position. All randomness is drawn from streams keyed by
/// `(seed, epoch, batch position)`, so these three numbers are the whole state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub algorithm: String,
    pub seed: u64,
    pub epoch: usize,
    pub step: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueMeta {
    pub capacity: usize,
    pub dim: usize,
    pub write_ptr: usize,
    pub filled: usize,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub encoder: EncoderConfig,
    pub contrast: ContrastConfig,
    pub rng: RngState,
    pub params: Vec<ParamShape>,
    pub query: ArrayEntry,
    pub key: ArrayEntry,
    pub velocity: ArrayEntry,
    pub queue_keys: ArrayEntry,
    pub queue: QueueMeta,
}

fn write_f32(path: &Path, data: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for &x in data {
        bytes.extend_from_slice(&(x as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_f32(path: &Path, len: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != len * 4 {
        return Err(invalid(format!(
            "{} holds {} bytes, expected {}",
            path.display(),
            bytes.len(),
            len * 4
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

/// Writes `state` into directory `dir` (created if needed). Returns the
/// manifest path.
pub fn save_checkpoint(
    dir: &Path,
    state: &TrainState,
    config: &ContrastConfig,
) -> Result<std::path::PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let entry = |file: &str, len| ArrayEntry {
        file: file.to_string(),
        len,
    };
    let (qkeys, qlabels, write_ptr, filled) = state.queue.raw_parts();
    let manifest = Manifest {
        format: FORMAT.to_string(),
        version: VERSION,
        encoder: state.encoder.config().clone(),
        contrast: config.clone(),
        rng: RngState {
            algorithm: "chacha8".to_string(),
            seed: state.seed,
            epoch: state.epoch,
            step: state.step,
        },
        params: state
            .encoder
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| ParamShape { name, shape })
            .collect(),
        query: entry("query.f32", state.pair.query.len()),
        key: entry("key.f32", state.pair.key.len()),
        velocity: entry("velocity.f32", state.optimizer.velocity.len()),
        queue_keys: entry("queue_keys.f32", qkeys.len()),
        queue: QueueMeta {
            capacity: state.queue.capacity(),
            dim: state.queue.dim(),
            write_ptr,
            filled,
            labels: qlabels.to_vec(),
        },
    };
    write_f32(&dir.join(&manifest.query.file), &state.pair.query)?;
    write_f32(&dir.join(&manifest.key.file), &state.pair.key)?;
    write_f32(
        &dir.join(&manifest.velocity.file),
        &state.optimizer.velocity,
    )?;
    write_f32(&dir.join(&manifest.queue_keys.file), qkeys)?;
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Reads a checkpoint directory back into a training state and its config.
pub fn load_checkpoint(dir: &Path) -> Result<(TrainState, ContrastConfig)> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.format != FORMAT || m.version != VERSION {
        return Err(invalid(format!(
            "{}: unsupported checkpoint format",
            path.display()
        )));
    }
    let encoder = Encoder::new(m.encoder.clone())?;
    let shapes: Vec<ParamShape> = encoder
        .param_shapes()
        .into_iter()
        .map(|(name, shape)| ParamShape { name, shape })
        .collect();
    if shapes != m.params {
        return Err(Error::ShapeMismatch(format!(
            "{}: parameter shapes do not match the encoder config",
            path.display()
        )));
    }
    let n = encoder.param_count();
    for a in [&m.query, &m.key, &m.velocity] {
        if a.len != n {
            return Err(Error::ShapeMismatch(format!(
                "{} has {} values, encoder needs {n}",
                a.file, a.len
            )));
        }
    }
    let query = read_f32(&dir.join(&m.query.file), n)?;
    let key = read_f32(&dir.join(&m.key.file), n)?;
    let velocity = read_f32(&dir.join(&m.velocity.file), n)?;
    let qkeys = read_f32(&dir.join(&m.queue_keys.file), m.queue_keys.len)?;
    let queue = MemoryQueue::from_raw_parts(
        m.queue.capacity,
        m.queue.dim,
        qkeys,
        m.queue.labels,
        m.queue.write_ptr,
        m.queue.filled,
    )?;
    let mut optimizer = Sgd::new(n, m.contrast.sgd_momentum, m.contrast.weight_decay);
    optimizer.velocity = velocity;
    let mut pair = EncoderPair::new(query, m.contrast.momentum)?;
    pair.key = key;
    let state = TrainState {
        encoder,
        pair,
        queue,
        optimizer,
        seed: m.rng.seed,
        epoch: m.rng.epoch,
        step: m.rng.step,
    };
    Ok((state, m.contrast))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contrast::train::{train_epoch, Variant};
    use crate::data::{make_synthetic_dataset, pipeline_stage, PretrainMode};

    fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut out: Vec<_> = fs::read_dir(dir)
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (
                    e.file_name().to_string_lossy().into_owned(),
                    fs::read(e.path()).unwrap(),
                )
            })
            .collect();
        out.sort();
        out
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let enc = EncoderConfig {
            image_size: 8,
            channels: vec![4, 4],
            strides: vec![1, 2],
            hidden_dim: 8,
            embed_dim: 8,
            ..EncoderConfig::default()
        };
        let cfg = ContrastConfig {
            variant: Variant::Exemplar,
            queue_capacity: 8,
            batch_size: 4,
            epochs: 1,
            ..ContrastConfig::default()
        };
        let data = make_synthetic_dataset(2, 5, 8, 2).unwrap();
        let pipe = pipeline_stage(2, PretrainMode::Supervised)
            .unwrap()
            .with_output_size(8);
        let mut state = TrainState::new(enc, &cfg, 5).unwrap();
        train_epoch(&mut state, &data, &pipe, &cfg).unwrap();

        let tmp = tempfile::tempdir().unwrap();
        let a = tmp.path().join("a");
        let b = tmp.path().join("b");
        save_checkpoint(&a, &state, &cfg).unwrap();
        let (loaded, lcfg) = load_checkpoint(&a).unwrap();
        assert_eq!(lcfg, cfg);
        assert_eq!(loaded.queue.filled(), state.queue.filled());
        assert_eq!(loaded.epoch, 1);
        save_checkpoint(&b, &loaded, &lcfg).unwrap();
        assert_eq!(dir_bytes(&a), dir_bytes(&b));
        let (again, _) = load_checkpoint(&b).unwrap();
        assert_eq!(again, loaded);
    }

    #[test]
    fn truncated_array_is_rejected() {
        let cfg = ContrastConfig {
            queue_capacity: 4,
            batch_size: 2,
            ..ContrastConfig::default()
        };
        let enc = EncoderConfig {
            image_size: 8,
            channels: vec![2],
            strides: vec![1],
            hidden_dim: 4,
            embed_dim: 4,
            ..EncoderConfig::default()
        };
        let state = TrainState::new(enc, &cfg, 1).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        save_checkpoint(tmp.path(), &state, &cfg).unwrap();
        fs::write(tmp.path().join("key.f32"), [0u8; 6]).unwrap();
        assert!(load_checkpoint(tmp.path()).is_err());
    }
}
