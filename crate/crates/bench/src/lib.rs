//! Command-line harness around `mkv_core`: experiment configs, report files,
//! table reproduction and reference oracles.

pub mod config;
pub mod experiment;
pub mod oracle;
pub mod tables;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const CONFIG: i32 = 1;
    pub const DIVERGED: i32 = 2;
    pub const TOLERANCE: i32 = 3;
}
