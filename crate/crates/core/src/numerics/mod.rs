//! Dense tensors, the handful of ops the model needs, and reverse-mode
//! differentiation over them.

mod conv;
mod finite_diff;
mod tape;
mod tensor;

pub use conv::{conv2d_same, masked_conv2d_same, ConvPlan};
pub(crate) use conv::conv_pixel;
pub use finite_diff::{finite_diff_gradient, max_relative_error};
pub(crate) use tape::relu;
pub use tape::{elementwise, Elementwise, Tape, Var};
pub use tensor::{ParamSet, Real, Tensor};
