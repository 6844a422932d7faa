//! Batch experiment harness: JSON configs in, solution CSVs, verification
//! reports and a run manifest out.

pub mod config;
pub mod expr;
pub mod run;

pub use config::{ExperimentConfig, Kind, Tolerances};
pub use expr::Expr;
pub use run::{run_experiment, Check, Outcome, Report};

/// Process exit codes.
pub mod exit {
    pub const PASS: i32 = 0;
    pub const VERIFICATION_FAILED: i32 = 1;
    pub const CONFIG_ERROR: i32 = 2;
}
