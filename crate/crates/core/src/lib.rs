//! Dual-stream EEG motor-imagery decoder: six parallel temporal convolution
//! branches and a single-block Transformer encoder over time-step tokens, fused
//! and followed by EEGNet-style spatial/separable processing.
//!
//! Everything runs on a small tape-based reverse-mode autodiff engine
//! ([`autodiff`], [`ops`], [`layers`]) so gradients for training and for
//! Gradient×Input attribution come from the same code path.

pub mod autodiff;
mod binary;
pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod interpret;
pub mod layers;
pub mod model;
pub mod ops;
pub mod params;
pub mod tensor;
pub mod training;
pub mod verify;

pub use autodiff::{Gradients, Graph, ParamId, Var};
pub use data::TrialSet;
pub use error::{Error, Result};
pub use model::{build_ablation, build_model, Model, ModelConfig, Variant};
pub use params::{Param, ParamStore};
pub use tensor::{DType, Scalar, Tensor};
