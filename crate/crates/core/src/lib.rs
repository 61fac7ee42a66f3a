//! Stereo disparity estimation for scenes with transparent objects.
//!
//! A hierarchical transformer backbone extracts features from both views.
//! Left-image features additionally feed per-resolution context that is
//! fused into a three-level convolutional GRU refining disparity over a
//! 1D correlation pyramid. The crate also provides the evaluation metrics,
//! file formats, stereo geometry and a procedural transparent-scene
//! generator used for training and testing.

pub mod backbone;
pub mod checkpoint;
pub mod context;
pub mod correlation;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod refinement;
pub mod train;

pub use backbone::{Backbone, BackboneConfig, FeaturePyramid};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use context::{ContextBundle, ContextEncoder};
pub use correlation::{build_pyramid, lookup, CorrelationPyramid};
pub use error::{Error, Result};
pub use metrics::{evaluate, format_table, EvalReport, PixelDomain};
pub use model::{sequence_loss, ModelConfig, ModelOutput, StereoModel};
pub use refinement::{FusionMode, Refinement, RefinementConfig};
pub use train::{train_loop, Schedule, TrainEvent};

pub use candle_core::{DType, Device, Tensor};
