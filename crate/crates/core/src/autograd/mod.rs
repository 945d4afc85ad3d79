//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! Backward rules are themselves recorded, so `grad` of a `grad` works. The
//! inversion attack relies on this: the distance between a victim gradient
//! and a dummy gradient is differentiated with respect to the dummy input.

mod check;
mod tape;

pub use check::{finite_difference_check, FdProbes};
pub use tape::{Primitive, Tape, Var};
