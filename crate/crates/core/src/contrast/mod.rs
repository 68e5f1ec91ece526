//! Momentum contrast with a labeled memory queue.

pub mod checkpoint;
pub mod encoder;
pub mod loss;
pub mod momentum;
pub mod queue;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use encoder::{Encoder, EncoderConfig, EncoderPass};
pub use loss::{
    cross_entropy_loss, cross_entropy_with_grad, exemplar_loss, infonce_loss, l2_normalize,
    EmbeddingBatch, LossGrad,
};
pub use momentum::{momentum_update, EncoderPair};
pub use queue::MemoryQueue;
pub use train::{pretrain, train_epoch, ContrastConfig, EpochMetrics, TrainState, Variant};
