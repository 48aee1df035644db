//! Attribute-assisted weakly supervised lesion detection on chest
//! radiographs: data model and synthetic corpus, a residual backbone with a
//! feature pyramid, attribute blocks, cross-attention fusion, a two-stage
//! detector, joint training and evaluation.

pub mod attention;
pub mod attribute;
pub mod backbone;
pub mod config;
pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod train;

pub use backbone::{FeatureMap, FeaturePyramid};
pub use config::RunConfig;
pub use data::{AttributeLabelVector, BoundingBox, DatasetManifest, XrayRecord};
pub use detector::{Detection, Proposal};
pub use error::{Error, Result};
pub use eval::{EvalReport, RunMetrics};
pub use model::{Ablation, AttrNet, ModelConfig, ScaleMode};
pub use train::{LossBreakdown, TrainConfig, Trainer};
pub use candle_core::DType;
