//! Transfer evaluation: linear readout, few-shot episodes, landmarks.

pub mod fewshot;
pub mod landmark;
pub mod probe;
pub mod stats;

pub use fewshot::{
    few_shot_eval, few_shot_eval_features, sample_episode, sample_episode_from_labels, Episode,
    FeatureExtractor, FewShotConfig, FewShotOutcome, FrozenEncoder,
};
pub use landmark::{
    landmark_error, landmark_head_forward, make_landmark_dataset, mean_landmark_error,
    read_landmark_file, train_landmark_head, write_landmark_file, LandmarkConfig, LandmarkHead,
    LandmarkModel, LandmarkSet,
};
pub use probe::{fit_linear, linear_probe, LinearClassifier, ProbeConfig, ProbeOptimizer};
pub use stats::{confidence_interval, EvalResult};
