//! Reverse-mode differentiation over dense feedforward networks, plus Adam.

mod adam;
mod matrix;
mod nn;
mod tape;

pub use adam::{AdamConfig, AdamState};
pub use matrix::Matrix;
pub use nn::{BoundNetwork, NetworkParams};
pub use tape::{Gradients, Tape, Var};
