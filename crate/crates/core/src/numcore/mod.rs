//! Dense arrays, a recording tape with reverse-mode gradients, and the
//! finite-difference harness that verifies them.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{
    check_tape_gradients, finite_diff_check, relative_error, zero_gradient_params, GradCheckReport, GroupCheck,
    MIN_SAMPLED_COORDS,
};
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Mode, Tape, Var, PROB_FLOOR};
pub use tensor::{argmax, Real, Tensor};
