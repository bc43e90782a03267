//! Variable-input-size ViT segmentation with a positional encoding generator,
//! a spatial-multiscale adapter and CNN feature fusion, plus the training,
//! data and cost-model tooling around it.
//!
//! All math is `f64`. Kernels run on rayon when the `parallel` feature is on
//! and [`Exec::Parallel`] is selected; results are bit-identical either way.

pub mod adapter;
pub mod autograd;
pub mod checkpoint;
pub mod cnn;
pub mod data;
pub mod encoder;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod layers;
pub mod macs;
pub mod model;
pub mod nn;
pub mod params;
pub mod peg;
pub mod tensor;
pub mod train;

pub use adapter::{ablation_variant, ablation_variants, AblationVariant, AdapterConfig, AdapterLayer, Branch};
pub use cnn::{CnnConfig, CnnEncoder};
pub use encoder::{apply_freeze, EncoderConfig, FreezePolicy, ImageEncoder};
pub use error::{Error, Result};
pub use exec::Exec;
pub use macs::{count_macs, size_sweep, CostReport};
pub use model::{Model, ModelConfig, ModelGraph, SegLogits};
pub use params::ParamRegistry;
pub use peg::PegLayer;
pub use tensor::{FeatureMap, Tensor, TokenGrid};
pub use train::{cosine_lr, train, TrainConfig, TrainLog};
