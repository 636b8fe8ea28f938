//! Training schemes.
//!
//! The three global schemes ([`solve_direct`], [`solve_dynamic`],
//! [`solve_expectation`]) train `Y_0 = Y(X_0)` and `Z = Z(t, X)` by
//! simulating whole paths and penalizing the terminal mismatch; they differ
//! only in how the law term is estimated. [`solve_local`] instead fits one
//! pair of networks per time step by backward regression.

mod config;
mod global;
mod local;
mod report;
mod sweep;

pub use config::{Scheme, SolverConfig};
pub use global::{solve, solve_direct, solve_dynamic, solve_expectation, train_global, GlobalOutcome};
pub use local::{forward_stats, solve_local, train_local, ForwardStats, LocalNetworks};
pub use report::{CoordinateSummary, LawPoint, RunReport, Status};
pub use sweep::{
    forward_sweep, simulate, BoundPair, Feedback, FeedbackSource, FnFeedback, LawSource, NetworkPair, Phase,
    Simulation, Sweep,
};
