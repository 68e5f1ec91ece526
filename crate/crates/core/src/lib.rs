//! Contrastive and exemplar pretraining at desk scale.
//!
//! The crate bundles the training core (momentum encoders, a labeled memory
//! queue and the instance / exemplar / cross-entropy objectives), a staged
//! augmentation pipeline, transfer-evaluation protocols, deep-image-prior
//! feature inversion, and a false-positive taxonomy for detection output.

pub mod contrast;
pub mod data;
pub mod diagnose;
pub mod error;
pub mod eval;
pub mod harness;
pub mod inversion;
pub mod nn;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
