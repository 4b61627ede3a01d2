//! Reverse-mode differentiation over the kernel set.

pub mod gradcheck;
mod tape;

pub use gradcheck::{check_piecewise, check_tensors, finite_diff_check, finite_diff_check_many, relative_error, FdConfig, FdReport};
pub use tape::{Tape, Var};
