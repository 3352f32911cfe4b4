//! Differentiable primitives, each recorded on a [`Tape`](super::Tape).

mod activation;
mod conv;
mod linalg;
mod norm;
mod shape;

pub use activation::{sigmoid, silu};
pub use conv::same_padding;
pub use norm::{BatchNormState, BatchStats};
pub use shape::patch_count;
