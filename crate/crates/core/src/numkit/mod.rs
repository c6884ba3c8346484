//! Numeric substrate: dense matrices, a counter-based RNG, a symmetric
//! eigensolver, reverse-mode differentiation and small MLPs on top of it.

mod eig;
mod matrix;
pub mod nn;
mod rng;
pub mod tape;

pub use eig::{sym_eig, sym_sqrt};
pub use matrix::{Fnv, Matrix};
pub use nn::{Linear, Mlp, MlpVars, Optimizer, OptimizerKind};
pub use rng::{gauss, RngStream};
pub use tape::{Gradients, Tape, Var};
