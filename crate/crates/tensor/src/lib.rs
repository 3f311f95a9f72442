//! Dense tensors with tape-based reverse-mode differentiation, the layer
//! primitives of a SqueezeNet-style CNN, classification losses and the Adam
//! / cosine-schedule / SWA training machinery.
//!
//! Everything is generic over [`Scalar`]: training runs in `f32`, gradient
//! checks run in an `f64` shadow.

pub mod error;
pub mod gradcheck;
pub mod ops;
pub mod optim;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, numeric_check, GradCheckConfig, GradCheckReport};
pub use optim::{AdamConfig, CosineSchedule, OptimState, SwaAccumulator, SwaOutcome};
pub use scalar::Scalar;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
