//! Discrete-time solvers for BSDEs, reflected BSDEs and doubly reflected
//! BSDEs on binomial lattices and simulated paths, with verifiers for the
//! associated optimal stopping and Dynkin game identities.

// `!(a < b)` is used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bsde;
pub mod drbsde;
pub mod dynkin;
pub mod error;
pub mod fixtures;
pub mod generator;
pub mod io;
pub mod lattice;
pub mod mc;
pub mod rbsde;
pub mod scheme;

pub use bsde::{
    g_evaluate, martingale_represent, read_at, reconstruct, sample_axiom_cases, solve_bsde, verify_evaluation_axioms,
    Axiom, AxiomCase, AxiomReport, AxiomResult, Solution, SolutionKind, SolverMeta,
};
pub use drbsde::{
    cross_validate, double_penalization, pasting_construct, penalization_squeeze, solve_drbsde, CrossValidationReport,
    Direction, DoublePenalizationReport, DynkinGame, PastingLedger, PastingSegment, SqueezeReport,
};
pub use dynkin::{
    count_stopping_rules, enumerate_stopping_rules, game_value_oracle, payoff_r, strategy_value, verify_saddle,
    GameReport, PairTable, StoppingRule,
};
pub use error::{Error, Result};
pub use generator::{
    check_hypotheses, Constants, Generator, Guard, HBound, Hypothesis, HypothesisReport, Penalty, Point,
    SamplingBox, Side, Traits, Verdict,
};
pub use generator::registry::{resolve, TabulatedDriver};
pub use lattice::{AdaptedProcess, Lattice, Mode, TerminalPayoff};
pub use mc::{simulate_paths, solve_mc, McOptions, McProblem, McSolution, PathBundle, RegressionBasis};
pub use rbsde::{
    first_hitting, penalization_run, reward, solve_rbsde, verify_snell, PenalizationReport, SnellMode, SnellReport,
};
pub use scheme::Scheme;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
