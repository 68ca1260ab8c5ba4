//! Reverse-mode automatic differentiation over dense tensors.

pub mod gradcheck;
pub mod kernels;
mod params;
mod tape;
mod tensor;

pub use params::{Gradients, Param, ParamId, ParamStore};
pub use tape::{gelu, layer_norm_rows, softmax_in_place, ElementQuantizer, OpKind, SteMode, Tape, Var};
pub use tensor::Tensor;
