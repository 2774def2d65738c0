//! Unsupervised part segmentation by disentangling shape from appearance.
//!
//! A shape encoder and mask decoder produce a soft part segmentation that is
//! regularized by a GMRF smoothness prior and an entropy prior; per-part
//! appearance codes pooled from a second view of the same instance are
//! spread back over the segmentation and decoded into an image. An
//! adversarial estimate of the shape/appearance dependence keeps the two
//! codes apart.

pub mod archive;
pub mod autograd;
pub mod config;
pub mod error;
pub mod eval;
pub mod imageio;
pub mod mi;
pub mod nets;
pub mod pipeline;
pub mod priors;
pub mod synth_data;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use eval::{CalibrationMapping, IouReport, LabeledSet};
pub use mi::{AdaptiveAdv, MiEstimate};
pub use nets::{LatentCodes, Model, NetConfig, NetGroup};
pub use pipeline::{ForwardResult, PipelineOptions, ReconMode};
pub use priors::SegmentationMap;
pub use synth_data::{DataConfig, ImagePairs, PairDataset, Sample, SpriteSpec, TpsParams};
pub use tensor::{Array, Real};
pub use train::{TrainConfig, TrainState};
