//! Feature inversion through a deep-image-prior reconstructor.

pub mod invert;
pub mod perceptual;
pub mod spec;

pub use invert::{
    invert_features, Distance, EncoderFeatures, FeatureTarget, IdentityFeatures, InversionConfig,
    ReconstructionResult,
};
pub use perceptual::{
    perceptual_distance, reconstruction_report, NamedEncoder, ReconstructionReport, ReportRow,
};
pub use spec::{build_reconstructor, Block, BlockKind, Reconstructor, ReconstructorSpec};
