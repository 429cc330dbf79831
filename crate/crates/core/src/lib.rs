//! Tri-modal (slide, genes, report) pretraining engine: encoders with
//! token aggregation, shared-attention fusion with per-modality experts,
//! masked/contrastive/triplet objectives, and survival, classification and
//! report-generation heads, all on a small f64 autodiff core.

pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod pretrain;
pub mod tasks;

pub use config::{Config, ModelConfig, TrainConfig};
pub use error::{Error, Result};
pub use fusion::{Modality, ModalitySet};
pub use model::{AlterModel, SampleInput};
pub use numerics::{Graph, ParamStore, Tensor, Var};
