//! Dense tensors and reverse-mode differentiation.

pub mod checkpoint;
pub mod conv;
pub mod norm;
pub mod ops;
pub mod param;
pub mod tape;
pub mod tensor;

pub use conv::{conv2d_onehot, conv_output_len, OneHotMap};
pub use norm::{NormKind, NORM_EPSILON};
pub use param::{adam_step, AdamConfig, Bound, ParamId, ParamSet, Parameter, INIT_STD};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// Slope of the leaky rectifier used by the discriminator and encoder.
pub const LEAKY_SLOPE: f64 = 0.2;
