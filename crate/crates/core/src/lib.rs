//! Cross-modal object segmentation at desk scale: a dual-stream conv
//! encoder, attentive fusion that splits features into shared (mean) and
//! specific (variance) parts, a coarse-to-fine decoder with masked channel
//! attention, and cross-layer consistency losses — all running on a minimal
//! reverse-mode autodiff engine with an Adam optimizer, synthetic multimodal
//! data generation, and the standard saliency metrics.

pub mod adam;
pub mod blocks;
pub mod checkpoint;
pub mod data;
pub mod dataset;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod params;
pub mod registry;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use error::{Result, XmsError};
pub use params::{Init, ParamBuilder, ParamSet, Parameter};
pub use scalar::{Dtype, Scalar};
pub use tape::{NodeId, Tape, ALL_DIFFERENTIABLE_OPS};
pub use tensor::Tensor;
