//! Differentiable fusion of paired feature streams with a thresholded
//! cross-correlation penalty that decorrelates them during training.
//!
//! The pipeline mirrors a speech frontend: two pre-extracted feature
//! streams are aligned in time, optionally projected to a common width,
//! mean-normalized and fused, then mapped to the downstream width. A
//! refinement loss on the correlation between the projected streams pushes
//! them apart while a task loss trains the whole frontend.

pub mod error;
pub mod features;
pub mod fusion;
pub mod gradcheck;
pub mod io;
pub mod refine;
pub mod synth;
pub mod task_loss;
pub mod trainer;

pub use error::{Error, Result};
pub use features::{
    align_pair, downsample, mean_normalize, mean_var_normalize, FeatureMatrix, Resample,
};
pub use fusion::{
    fuse_concat, fuse_linear_projection, fuse_weighted_sum, AffineProjection, FusionConfig,
    FusionMethod, FusionModel, ProjectionInit, ScalarGate,
};
pub use refine::{
    batch_refine_loss, combined_loss, cross_correlation, refine_loss, refine_loss_backward,
    CorrelationMatrix, LossBreakdown,
};
pub use synth::{generate_pair, SynthSpec};
pub use task_loss::{MseLoss, TaskLoss};
pub use trainer::{lr_schedule, train, Example, OptimizerKind, TrainConfig, TrainReport};
