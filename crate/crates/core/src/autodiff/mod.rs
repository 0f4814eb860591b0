//! Minimal reverse-mode differentiation over dense `f64` arrays.

mod array;
mod gradcheck;
mod tape;

pub use array::Array;
pub use gradcheck::{compare_with_analytic, finite_difference_check, Coordinates, GradientReport, ParamCheck};
pub use tape::{Selections, Tape, Var};
