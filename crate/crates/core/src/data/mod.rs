//! Images, datasets, and the augmentation pipeline.

pub mod augment;
pub mod image;
pub mod io;
pub mod synthetic;

pub use augment::{
    augment, augment_traced, make_two_views, pipeline_stage, AugmentTrace, AugmentationPipeline,
    PretrainMode, Transform,
};
pub use image::{batch_tensor, psnr, Image, LabeledImageSet};
pub use io::{load_dataset, read_image, write_png, DatasetFormat};
pub use synthetic::{make_noise_dataset, make_synthetic_dataset};
