//! Chance-constrained Gaussian belief-space trajectory optimization.
//!
//! The planner (CILQG) linearizes a nonlinear stochastic system around a
//! nominal trajectory, propagates the Gaussian belief with a Kalman
//! recursion, transforms nonlinear chance constraints into tightened linear
//! constraints, and optimizes controls with an ILQR inner loop inside a
//! log-barrier outer loop. Baseline modes (deterministic CILQR, soft-penalty
//! GBSP, open-loop CILQG) share the pipeline for comparison studies.
//!
//! Modules:
//! - [`types`]: beliefs, covariances, trajectories, confidence ellipses.
//! - [`models`]: the stochastic-model interface and the kinematic bicycle.
//! - [`belief`]: Kalman prior/measurement updates and variance propagation.
//! - [`constraints`]: chance-constraint transform and collision geometry.
//! - [`ilqr`]: the inner-loop trajectory optimizer.
//! - [`solver`]: the outer loop and the solver modes.
//! - [`scenario`]: scenario files, validation and built-in fixtures.
//! - [`reference`]: reference-trajectory generators.
//! - [`montecarlo`]: closed-loop Monte Carlo validation.

pub mod belief;
pub mod constraints;
pub mod error;
pub mod ilqr;
pub mod models;
pub mod montecarlo;
pub mod reference;
pub mod scenario;
pub mod solver;
pub mod types;

pub use belief::{
    measurement_update, prior_update, propagate_mean, propagate_variance, KalmanStep,
    PropagationOptions, VarianceSequence,
};
pub use constraints::{
    compute_gamma, control_chance_constraints, convex_feasible_set, linearize_constraint,
    obstacle_uncertainty_constraint, polygon_distance, signed_distance, transform_chance_constraint,
    ConstraintKind, ConstraintSource, ControlBox, ConvexPolygonObstacle, LinearChanceConstraint,
    UncertainObstacleState,
};
pub use error::{CilqgError, Result};
pub use ilqr::{
    backward_pass, forward_rollout, line_search, quadratize, BackwardPassResult, CostModel,
    IlqrSettings, QuadratizedCost, Regularizer,
};
pub use models::{
    sample_gaussian, BicycleModel, BicycleParams, LinearModel, StochasticModel,
};
pub use montecarlo::{monte_carlo_validate, rollout, RolloutRecord, ValidationStatistics};
pub use reference::{generate_reference, ReferenceSpec};
pub use scenario::{
    builtin_document, builtin_names, builtin_scenarios, load_builtin, load_scenario, Scenario,
};
pub use solver::{
    augment_barrier, solve, solve_baseline_cilqr, solve_baseline_gbsp, solve_baseline_open,
    solve_problem, ConstraintRecord, ConstraintSchedule, PlanResult, Problem, SolverMode,
    SolverSettings, StateConstraintSpec, TrackingCost,
};
pub use types::{
    chi2_quantile_2dof, confidence_ellipse, make_covariance, Belief, ConfidenceEllipse,
    CovarianceMatrix, LinearizedStep, Matrix, NominalTrajectory, Vector,
};
