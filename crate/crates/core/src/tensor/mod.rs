//! Dense linear algebra and reverse-mode differentiation.

pub mod linalg;
mod matrix;
mod tape;

pub use matrix::Matrix;
pub use tape::{sigmoid, Tape, Var};
