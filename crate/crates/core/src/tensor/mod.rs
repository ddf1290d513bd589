//! Dense linear algebra and the reverse-mode gradient tape.

mod eig;
pub mod gradcheck;
mod matrix;
mod tape;

pub use eig::{regularized_inverse, sym_eig, SymEig};
pub use gradcheck::{finite_diff_gradcheck, GradCheckReport};
pub use matrix::Matrix;
pub use tape::{GradTape, Gradients, ParamId, Var};
