//! Multi-task binary attribute classifier with grouped channel attention.
//!
//! A shared backbone feeds one weight-shared convolution stack; each attribute
//! group gates it with its own channel attention, the gated features are fused
//! across groups, and every attribute gets a two-way softmax head. Task losses
//! are focal losses, balanced per epoch by dynamic weighting.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the common choices.

pub mod data;
pub mod dws;
pub mod error;
pub mod gradcheck;
pub mod grouping;
pub mod losses;
pub mod model;
pub mod ops;
pub mod persist;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use grouping::AttributeGrouping;
pub use model::{Mode, Model, ModelConfig};
pub use scalar::Scalar;
pub use tape::{Gradients, ParamSet, Tape, Var};
pub use tensor::Tensor;
pub use train::TrainConfig;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type ParamSet64 = ParamSet<f64>;
pub type ParamSet32 = ParamSet<f32>;
pub type Dataset64 = data::Dataset<f64>;
pub type Dataset32 = data::Dataset<f32>;
pub type Tape64<'a> = Tape<'a, f64>;
pub type Tape32<'a> = Tape<'a, f32>;
