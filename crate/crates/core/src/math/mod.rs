//! Dense matrices, a reverse-mode differentiation tape with
//! gradient-of-gradient support, parameter sets, the Adam optimizer and a
//! finite-difference gradient checker.

mod adam;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::{finite_diff_check, relative_error, GradCheckConfig, GradCheckReport};
pub use params::{Layer, LayerVars, ParamSet};
pub use tape::{GradOrder, Tape, Var};
pub use tensor::{affine_forward, relu, Tensor2};
