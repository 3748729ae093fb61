//! Knowledge-fused generative retrieval over semantic IDs.

pub mod checkpoint;
pub mod config;
pub mod constrained_trainer;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod fusion;
pub mod gr_backbone;
pub mod item_tokenizer;
pub mod knowledge_source;
pub mod nn;
pub mod numerics;
pub mod policy;
pub mod scalar;
pub mod serving;
pub mod soft_instruction;

pub use error::{LwgrError, Result};
pub use scalar::Scalar;

pub type Tensor64 = numerics::Tensor<f64>;
pub type Tensor32 = numerics::Tensor<f32>;
