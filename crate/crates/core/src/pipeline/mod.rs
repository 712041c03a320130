//! Toy one-stage panoptic pipeline.

pub mod ablation;
pub mod config;
pub mod fusion;
pub mod infer;
pub mod loss;
pub mod model;
pub mod nms;
pub mod pq;
pub mod train;

/// Category id of unlabelled pixels.
pub const VOID: u8 = 255;

pub use config::{ModelConfig, Positional, TrainConfig, Variant};
pub use fusion::{fuse_panoptic, FusionConfig, FusionInstance, PanopticSegmentation};
pub use infer::{infer, Inference, InstancePrediction};
pub use model::{Branch, Model};
pub use pq::{compute_pq, PqAccumulator, PqResult};
