//! Detail-oriented capsule network library: a tensor autodiff core,
//! matrix-pose capsule layers with inverted dynamic routing, spread loss,
//! activation-guided (peekaboo) training, and the supporting data/metrics
//! plumbing. The numeric core is generic over the scalar type; the aliases
//! below fix the default 64-bit instantiation used by the CLI and tests.

pub mod capsule;
pub mod checkpoint;
pub mod config;
pub mod dataio;
pub mod loss;
pub mod model;
pub mod metrics;
pub mod optim;
pub mod peekaboo;
pub mod pnm;
pub mod raster;
pub mod rng;
pub mod routing;
pub mod scalar;
pub mod tensor;

pub use scalar::Scalar;
pub use tensor::{Tensor as TensorBase, TensorError, TensorResult};

/// Default 64-bit tensor used throughout training and evaluation.
pub type Tensor = tensor::Tensor<f64>;
/// Single-precision variant.
pub type Tensor32 = tensor::Tensor<f32>;
