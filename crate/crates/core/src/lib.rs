//! Deep solvers for McKean–Vlasov forward-backward SDEs.
//!
//! The crate is organized bottom-up: [`autodiff`] provides a batched reverse-mode
//! tape, small MLPs and Adam; [`sde`] the time grid, random streams and Euler
//! steps; [`meanfield`] the estimators of the law term; [`models`] the benchmark
//! problems and their reference values; [`solvers`] the training schemes.

pub mod autodiff;
pub mod error;
pub mod meanfield;
pub mod models;
pub mod sde;
pub mod solvers;

pub use error::{Error, Result};
