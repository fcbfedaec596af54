//! Dense f64 tensors with tape-based reverse-mode differentiation.

pub mod memory;
mod params;
mod tape;
mod tensor;

pub use params::ParamStore;
pub use tape::{gelu, AttentionProbs, Gradients, Tape, Var, IGNORE_INDEX};
pub use tensor::Tensor;
