//! End-to-end character-level decoding of binned intracortical features.
//!
//! The pipeline is: per-session affine alignment, strided temporal patch
//! embedding with sinusoidal positions, a stack of Macaron-style Conformer
//! blocks and a two-layer character head trained with CTC plus an output
//! entropy term. Everything is generic over [`Scalar`] (`f32`, `f64`).

pub mod numcore;
pub mod augment;
pub mod ctc;
pub mod dataio;
pub mod evalreport;
pub mod model;
pub mod textcodec;
pub mod training;

pub use numcore::{DType, Mode, RngStream, Scalar, Tape, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
