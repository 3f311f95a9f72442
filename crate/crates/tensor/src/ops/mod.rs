//! Slice-level kernels behind the [`Tape`](crate::Tape) operations.

pub mod activation;
pub mod conv;
pub mod loss;
pub mod pool;
