//! Minimal dense-tensor engine with reverse-mode differentiation.

pub mod gradcheck;
pub mod ops;
mod rng;
mod scalar;
mod tape;
mod tensor;

pub use gradcheck::{gradient_check, gradient_check_multi};
pub use ops::{patch_count, same_padding, sigmoid, silu, BatchNormState, BatchStats};
pub use rng::{RngState, RngStream};
pub use scalar::{DType, Scalar};
pub use tape::{BackwardCtx, BackwardFn, Gradients, Mode, Tape, Var};
pub use tensor::{NumError, NumResult, Tensor};
