//! Dense f64 tensors, seeded RNG, and reverse-mode autodiff.

pub mod gradcheck;
pub mod ops;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use rng::Rng;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
