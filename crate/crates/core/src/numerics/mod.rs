//! Dense matrices, a reverse-mode tape, and a finite-difference oracle.

mod gradcheck;
mod matrix;
mod params;
mod tape;

pub use gradcheck::{grad_check, relative_error, GradReport, GradSample, ParamCheck, SAMPLES_PER_PARAM};
pub use matrix::{sigmoid, topk_indices, Axis, Matrix};
pub use params::{ParamGrads, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
