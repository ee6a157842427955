//! Dense single-precision arrays with reverse-mode differentiation.

mod array;
mod check;
mod params;
mod rng;
mod scalar;
mod tape;

pub use array::Array;
pub use check::{finite_diff_check, FD_STEP};
pub use params::{xavier, Bound, ParamSet};
pub use rng::Rng;
pub use scalar::Scalar;
pub use tape::{Tape, Var};

#[cfg(test)]
mod tests;
