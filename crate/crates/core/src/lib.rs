//! Referring segmentation with bidirectional vision-language alignment.
//!
//! Images and expressions pass through small encoders; at each of four
//! stages an alignment block refreshes the text features from learnable
//! query tokens and aligns a pyramid of pooled visual maps with the text.
//! A text-conditioned aggregator mixes channels and positions across stages
//! before a top-down decoder predicts a binary mask.

pub mod ablation;
pub mod bam;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoders;
mod error;
pub mod gradcheck;
pub mod grid;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod tcsa;
pub mod trainer;

pub use config::ModelConfig;
pub use error::{CoreError, Result};
pub use model::Model;
pub use params::{Ctx, ParamId, ParamStore};
