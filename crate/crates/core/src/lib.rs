//! Interaction reasoning network for hand-object interaction recognition.
//!
//! Detections of the two hands and their active objects are pooled from a
//! video backbone into per-role trajectories, summed with a learned spatial
//! position encoding, and reasoned over by pairwise attention encoders and
//! a decoder that refines the clip-level action representation.

pub mod augment;
pub mod backbone;
pub mod config;
pub mod detections;
pub mod error;
pub mod gradcheck;
pub mod interaction;
pub mod model;
pub mod nn;
pub mod spe;
pub mod synthdata;
pub mod tensor;
pub mod train;

pub use augment::AugmentSpec;
pub use backbone::{Backbone, FeatureVolume, VideoClip};
pub use config::{
    ActionRep, AugmentMode, DetectionRep, ExperimentConfig, FusionMode, OptimizerSpec, PairMask, TrajMode,
};
pub use detections::{BoundingBox, DetectionRecord, Role, RoleTracks};
pub use error::{IrnError, Result};
pub use model::{IrnModel, ModelInput};
pub use synthdata::{ClipData, Dataset, NoiseSpec, RenderSpec};
pub use tensor::{Graph, ParamStore, Tensor};
pub use train::{EvalOptions, EvalReport, MetricsRecord};
