//! Chance-constrained optimization over finite scenario sets by a quantile penalty, solved
//! with a minibatch projected gradient method that keeps delayed constraint values and an
//! incrementally maintained empirical quantile.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the `f64` instantiations
//! used by the harness are aliased below.

pub mod adjoint;
pub mod apps;
pub mod error;
pub mod io;
pub mod problem;
pub mod quantile;
pub mod scalar;
pub mod solver;

pub use error::{Error, Result};
pub use problem::{
    empirical_failure_level, mean_objective, penalty_derivative, penalty_value, project_box, BoxSet,
    ChanceProblem, PenaltyFunction, ProblemInstance, ScenarioModel, ScenarioSet,
};
pub use quantile::{naive_quantile, quantile_index, MinibatchBlock, SortedQuantileState};
pub use scalar::Scalar;
pub use solver::{
    batch_gradient, batch_step, quantile_gap_audit, run_batch, run_continuation, run_penalized, sgd_step,
    AuditPolicy, ContinuationOptions, ContinuationSchedule, IterateState, SolverConfig, StepSchedule,
};

pub type FishingProblem = apps::fishing::FishingProblem<f64>;
pub type SeparatorProblem = apps::separator::SeparatorProblem<f64>;
pub type GasProblem = apps::gas::GasProblem<f64>;
pub type QuantileTracker = SortedQuantileState<f64>;
pub type Iterate = IterateState<f64>;
