//! Outer loop of the chance-constrained planner: variance propagation,
//! chance-constraint transformation, log-barrier augmentation and the inner
//! ILQR solve, reiterated on a growing barrier weight. The baseline modes
//! (deterministic CILQR, soft-penalty GBSP, open-loop CILQG) share this
//! pipeline and differ only in how covariances and constraints are treated.

use std::time::Instant;

use nalgebra::RowDVector;
use serde::{Deserialize, Serialize};

use crate::belief::{propagate_variance, PropagationOptions, VarianceSequence};
use crate::constraints::{
    control_chance_constraints, obstacle_uncertainty_constraint, polygon_chance_constraint,
    signed_distance, ConstraintKind, ConstraintSource, ControlBox, ConvexPolygonObstacle,
    LinearChanceConstraint, UncertainObstacleState,
};
use crate::error::{CilqgError, Result};
use crate::ilqr::{ilqr_minimize, CostModel, IlqrSettings, QuadratizedCost, Regularizer};
use crate::models::StochasticModel;
use crate::types::{Belief, CovarianceMatrix, Matrix, NominalTrajectory, Vector};

/// Solver operating mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverMode {
    /// Chance-constrained ILQG: closed-loop belief propagation, tightened
    /// constraints, log-barrier outer loop.
    Cilqg,
    /// Deterministic baseline: covariances forced to zero, so all gammas
    /// vanish and the barrier acts on the raw linearized constraints.
    Cilqr,
    /// Soft-constraint baseline: same beliefs as CILQG, constraints turned
    /// into quadratic penalties.
    Gbsp,
    /// Open-loop variant: measurement updates disabled in the variance
    /// recursion.
    OpenCilqg,
}

impl SolverMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cilqg" => Ok(Self::Cilqg),
            "cilqr" => Ok(Self::Cilqr),
            "gbsp" => Ok(Self::Gbsp),
            "open" | "opencilqg" | "open-cilqg" => Ok(Self::OpenCilqg),
            other => Err(CilqgError::BadParams(format!("unknown mode `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Cilqg => "cilqg",
            Self::Cilqr => "cilqr",
            Self::Gbsp => "gbsp",
            Self::OpenCilqg => "open",
        }
    }

    fn deterministic(&self) -> bool {
        matches!(self, Self::Cilqr)
    }
}

/// Solver configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverSettings {
    /// Chance-constraint threshold `p` in (0.5, 1).
    pub chance_threshold: f64,
    /// Planning horizon N (number of control steps).
    pub horizon: usize,
    /// Initial barrier weight `t0 > 0`.
    pub barrier_init: f64,
    /// Barrier growth `mu > 1`.
    pub barrier_growth: f64,
    /// Outer convergence: (#constraints)/t below this bound.
    pub outer_tolerance: f64,
    /// Inner convergence: relative cost decrease below this bound.
    pub inner_tolerance: f64,
    pub max_outer_iterations: usize,
    pub max_inner_iterations: usize,
    /// Quadratic penalty weight for GBSP mode.
    pub penalty_weight: f64,
    pub mode: SolverMode,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            chance_threshold: 0.98,
            horizon: 50,
            barrier_init: 1.0,
            barrier_growth: 10.0,
            outer_tolerance: 1e-3,
            inner_tolerance: 1e-4,
            max_outer_iterations: 20,
            max_inner_iterations: 100,
            penalty_weight: 1e3,
            mode: SolverMode::Cilqg,
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.chance_threshold > 0.5 && self.chance_threshold < 1.0) {
            return Err(CilqgError::BadProbability {
                p: self.chance_threshold,
                range: "(0.5, 1)",
            });
        }
        if self.barrier_init <= 0.0 {
            return Err(CilqgError::BadParams("barrier_init must be positive".into()));
        }
        if self.barrier_growth <= 1.0 {
            return Err(CilqgError::BadParams("barrier_growth must exceed 1".into()));
        }
        if self.horizon == 0 {
            return Err(CilqgError::BadParams("horizon must be positive".into()));
        }
        Ok(())
    }
}

/// A state constraint attached to every timestep of the horizon.
#[derive(Debug, Clone)]
pub enum StateConstraintSpec {
    /// Keep the planar position outside a convex polygon (plus inflation).
    Polygon(ConvexPolygonObstacle),
    /// Keep a safety margin to a moving obstacle with per-step Gaussian
    /// state estimates (one entry per timestep, index 0 = initial time).
    Moving {
        states: Vec<UncertainObstacleState>,
        safety_margin: f64,
    },
    /// Fixed linear constraint `row . x + offset <= 0`.
    Linear { row: RowDVector<f64>, offset: f64 },
}

/// Solver-facing problem description, independent of any file format.
#[derive(Debug, Clone)]
pub struct Problem<M> {
    pub model: M,
    pub initial_belief: Belief,
    /// Feasible seed control sequence, length N.
    pub initial_controls: Vec<Vector>,
    pub cost: TrackingCost,
    pub state_constraints: Vec<StateConstraintSpec>,
    pub control_box: Option<ControlBox>,
    /// Control noise covariance used only for tightening the control box.
    pub control_noise_cov: CovarianceMatrix,
    /// Indices of the planar position inside the state vector.
    pub position_indices: (usize, usize),
}

/// Quadratic reference-tracking cost
/// `(x - r_k)^T Q (x - r_k) + u^T R u` with terminal weight `Qf`.
#[derive(Debug, Clone)]
pub struct TrackingCost {
    pub state_weights: Matrix,
    pub control_weights: Matrix,
    pub terminal_weights: Matrix,
    pub reference: Vec<Vector>,
}

impl TrackingCost {
    pub fn stage(&self, k: usize, x: &Vector, u: &Vector) -> f64 {
        let dx = x - &self.reference[k];
        (dx.transpose() * &self.state_weights * &dx)[0]
            + (u.transpose() * &self.control_weights * u)[0]
    }

    pub fn terminal(&self, k: usize, x: &Vector) -> f64 {
        let dx = x - &self.reference[k];
        (dx.transpose() * &self.terminal_weights * &dx)[0]
    }
}

/// Transformed constraints for one timestep.
#[derive(Debug, Clone, Default)]
pub struct TimestepConstraints {
    pub state: Vec<LinearChanceConstraint>,
    pub control: Vec<LinearChanceConstraint>,
}

/// Constraints along the whole horizon; `steps[k]` holds the constraints on
/// `x_k` (empty at k = 0, where the state is fixed) and on `u_k` (empty at
/// k = N, where no control exists).
#[derive(Debug, Clone)]
pub struct ConstraintSchedule {
    pub steps: Vec<TimestepConstraints>,
}

impl ConstraintSchedule {
    pub fn total_count(&self) -> usize {
        self.steps.iter().map(|s| s.state.len() + s.control.len()).sum()
    }

    /// Largest tightened constraint value along a trajectory (negative means
    /// strictly feasible everywhere).
    pub fn max_value(&self, traj: &NominalTrajectory) -> f64 {
        let mut worst = f64::NEG_INFINITY;
        for (k, step) in self.steps.iter().enumerate() {
            for c in &step.state {
                worst = worst.max(c.value(&traj.states[k]));
            }
            if k < traj.horizon() {
                for c in &step.control {
                    worst = worst.max(c.value(&traj.controls[k]));
                }
            }
        }
        worst
    }

    pub fn is_strictly_feasible(&self, traj: &NominalTrajectory) -> bool {
        self.max_value(traj) < 0.0
    }
}

/// One evaluated constraint, for diagnostics and artifact output.
#[derive(Debug, Clone, Serialize)]
pub struct ConstraintRecord {
    pub step: usize,
    pub label: String,
    pub kind: ConstraintKind,
    /// Tightened left-hand side `G z + m + gamma`.
    pub value: f64,
    pub gamma: f64,
    /// Raw linearized value `G z + m`.
    pub raw_value: f64,
}

/// Planner output: optimal controls, belief trajectory, execution policy
/// and diagnostics.
#[derive(Debug, Clone)]
pub struct PlanResult {
    pub mode: SolverMode,
    /// Belief means; the converged nominal states.
    pub states: Vec<Vector>,
    /// Optimal control sequence, length N.
    pub controls: Vec<Vector>,
    /// Mode-internal covariance sequence (all zero in CILQR mode).
    pub variances: VarianceSequence,
    /// Feedback gains of the final backward pass, for closed-loop execution.
    pub feedback_gains: Vec<Matrix>,
    /// Final transformed constraints.
    pub schedule: ConstraintSchedule,
    /// Un-augmented tracking cost of the returned trajectory.
    pub true_cost: f64,
    pub diagnostics: SolveDiagnostics,
}

#[derive(Debug, Clone, Default)]
pub struct SolveDiagnostics {
    pub converged: bool,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub final_barrier_weight: f64,
    /// Wall-clock solve time; measurement output, excluded from determinism
    /// comparisons.
    pub solve_time_ms: f64,
    /// True (un-augmented) cost after each outer iteration.
    pub cost_history: Vec<f64>,
    /// Largest tightened constraint value on the returned trajectory.
    pub max_constraint_value: f64,
}

impl PlanResult {
    pub fn trajectory(&self) -> NominalTrajectory {
        NominalTrajectory::new(self.states.clone(), self.controls.clone())
            .expect("plan lengths are consistent")
    }

    /// Evaluate every transformed constraint along the plan.
    pub fn constraint_records(&self) -> Vec<ConstraintRecord> {
        let mut out = Vec::new();
        for (k, step) in self.schedule.steps.iter().enumerate() {
            for c in &step.state {
                out.push(ConstraintRecord {
                    step: k,
                    label: c.source.label(),
                    kind: c.kind,
                    value: c.value(&self.states[k]),
                    gamma: c.gamma,
                    raw_value: c.raw_value(&self.states[k]),
                });
            }
            if k < self.controls.len() {
                for c in &step.control {
                    out.push(ConstraintRecord {
                        step: k,
                        label: c.source.label(),
                        kind: c.kind,
                        value: c.value(&self.controls[k]),
                        gamma: c.gamma,
                        raw_value: c.raw_value(&self.controls[k]),
                    });
                }
            }
        }
        out
    }
}

/// How the constraint terms enter the augmented cost.
#[derive(Debug, Clone, Copy)]
pub enum Augmentation {
    /// Pure tracking cost.
    None,
    /// Log barrier `-(1/t) ln(-value)`.
    Barrier { t: f64 },
    /// Quadratic hinge `w max(0, value + margin)^2`.
    Penalty { weight: f64, margin: f64 },
}

/// Tracking cost augmented with constraint terms from a schedule.
pub struct AugmentedCost<'a> {
    base: &'a TrackingCost,
    schedule: &'a ConstraintSchedule,
    horizon: usize,
    augmentation: Augmentation,
    /// Scale on the base tracking cost (lowered during feasibility recovery).
    base_scale: f64,
}

/// Attach log-barrier terms with weight `t` to a tracking cost.
pub fn augment_barrier<'a>(
    base: &'a TrackingCost,
    schedule: &'a ConstraintSchedule,
    horizon: usize,
    t: f64,
) -> AugmentedCost<'a> {
    AugmentedCost {
        base,
        schedule,
        horizon,
        augmentation: Augmentation::Barrier { t },
        base_scale: 1.0,
    }
}

impl<'a> AugmentedCost<'a> {
    pub fn new(
        base: &'a TrackingCost,
        schedule: &'a ConstraintSchedule,
        horizon: usize,
        augmentation: Augmentation,
    ) -> Self {
        Self {
            base,
            schedule,
            horizon,
            augmentation,
            base_scale: 1.0,
        }
    }

    fn with_base_scale(mut self, scale: f64) -> Self {
        self.base_scale = scale;
        self
    }

    fn constraint_value_term(&self, value: f64) -> Result<f64> {
        match self.augmentation {
            Augmentation::None => Ok(0.0),
            Augmentation::Barrier { t } => {
                if value >= 0.0 {
                    return Err(CilqgError::BarrierDomain { value });
                }
                Ok(-(-value).ln() / t)
            }
            Augmentation::Penalty { weight, margin } => {
                let v = value + margin;
                Ok(if v > 0.0 { weight * v * v } else { 0.0 })
            }
        }
    }

    /// Add the gradient/Hessian contribution of one constraint to `(grad, hess)`.
    fn accumulate_terms(
        &self,
        c: &LinearChanceConstraint,
        z: &Vector,
        grad: &mut Vector,
        hess: &mut Matrix,
    ) -> Result<f64> {
        let value = c.value(z);
        match self.augmentation {
            Augmentation::None => Ok(0.0),
            Augmentation::Barrier { t } => {
                if value >= 0.0 {
                    return Err(CilqgError::BarrierDomain { value });
                }
                let s = -value;
                let row_t = c.row.transpose();
                *grad += &row_t * (1.0 / (t * s));
                *hess += &row_t * &c.row * (1.0 / (t * s * s));
                Ok(-s.ln() / t)
            }
            Augmentation::Penalty { weight, margin } => {
                let v = value + margin;
                if v > 0.0 {
                    let row_t = c.row.transpose();
                    *grad += &row_t * (2.0 * weight * v);
                    *hess += &row_t * &c.row * (2.0 * weight);
                    Ok(weight * v * v)
                } else {
                    Ok(0.0)
                }
            }
        }
    }
}

impl CostModel for AugmentedCost<'_> {
    fn stage_value(&self, k: usize, x: &Vector, u: &Vector) -> Result<f64> {
        let mut total = self.base_scale * self.base.stage(k, x, u);
        let step = &self.schedule.steps[k];
        for c in &step.state {
            total += self.constraint_value_term(c.value(x))?;
        }
        for c in &step.control {
            total += self.constraint_value_term(c.value(u))?;
        }
        Ok(total)
    }

    fn terminal_value(&self, x: &Vector) -> Result<f64> {
        let mut total = self.base_scale * self.base.terminal(self.horizon, x);
        for c in &self.schedule.steps[self.horizon].state {
            total += self.constraint_value_term(c.value(x))?;
        }
        Ok(total)
    }

    fn quadratize_stage(&self, k: usize, x: &Vector, u: &Vector) -> Result<QuadratizedCost> {
        let dx = x - &self.base.reference[k];
        let s = self.base_scale;
        let mut l0 = s * self.base.stage(k, x, u);
        let mut l_x = 2.0 * s * &self.base.state_weights * dx;
        let mut l_xx = 2.0 * s * self.base.state_weights.clone();
        let mut l_u = 2.0 * s * &self.base.control_weights * u;
        let mut l_uu = 2.0 * s * self.base.control_weights.clone();
        let step = &self.schedule.steps[k];
        for c in &step.state {
            l0 += self.accumulate_terms(c, x, &mut l_x, &mut l_xx)?;
        }
        for c in &step.control {
            l0 += self.accumulate_terms(c, u, &mut l_u, &mut l_uu)?;
        }
        Ok(QuadratizedCost {
            l0,
            l_x,
            l_u,
            l_xx,
            l_uu,
            l_ux: Matrix::zeros(u.len(), x.len()),
        })
    }

    fn quadratize_terminal(&self, x: &Vector) -> Result<QuadratizedCost> {
        let dx = x - &self.base.reference[self.horizon];
        let s = self.base_scale;
        let mut l0 = s * self.base.terminal(self.horizon, x);
        let mut l_x = 2.0 * s * &self.base.terminal_weights * dx;
        let mut l_xx = 2.0 * s * self.base.terminal_weights.clone();
        for c in &self.schedule.steps[self.horizon].state {
            l0 += self.accumulate_terms(c, x, &mut l_x, &mut l_xx)?;
        }
        Ok(QuadratizedCost::terminal(l0, l_x, l_xx))
    }
}

/// Context shared by one solve.
struct SolveContext<'a, M: StochasticModel> {
    problem: &'a Problem<M>,
    settings: &'a SolverSettings,
}

impl<M: StochasticModel> SolveContext<'_, M> {
    fn horizon(&self) -> usize {
        self.settings.horizon
    }

    fn rollout(&self, controls: &[Vector]) -> Result<NominalTrajectory> {
        let zero_noise = Vector::zeros(self.problem.model.process_noise_dim());
        let mut states = Vec::with_capacity(controls.len() + 1);
        states.push(self.problem.initial_belief.mean.clone());
        for u in controls {
            let next = self.problem.model.step(states.last().unwrap(), u, &zero_noise)?;
            states.push(next);
        }
        NominalTrajectory::new(states, controls.to_vec())
    }

    /// Covariance sequence for the current mode.
    fn variances(&self, nominal: &NominalTrajectory) -> Result<VarianceSequence> {
        match self.settings.mode {
            SolverMode::Cilqr => Ok(VarianceSequence {
                covariances: vec![
                    CovarianceMatrix::zeros(self.problem.model.state_dim());
                    nominal.horizon() + 1
                ],
            }),
            SolverMode::OpenCilqg => propagate_variance(
                &self.problem.model,
                nominal,
                &self.problem.initial_belief,
                PropagationOptions {
                    open_loop: true,
                    ..Default::default()
                },
            ),
            SolverMode::Cilqg | SolverMode::Gbsp => propagate_variance(
                &self.problem.model,
                nominal,
                &self.problem.initial_belief,
                PropagationOptions::default(),
            ),
        }
    }

    /// Build the transformed constraints for the whole horizon around a
    /// nominal trajectory. With `allow_inside`, a nominal position inside a
    /// polygon linearizes the (violated) constraint instead of erroring, so
    /// the recovery phase can push back out.
    fn build_schedule(
        &self,
        nominal: &NominalTrajectory,
        variances: &VarianceSequence,
        allow_inside: bool,
    ) -> Result<ConstraintSchedule> {
        let n_steps = nominal.horizon();
        let p = self.settings.chance_threshold;
        let deterministic = self.settings.mode.deterministic();
        let pos_idx = self.problem.position_indices;
        let state_dim = self.problem.model.state_dim();
        let zero_state_cov = CovarianceMatrix::zeros(state_dim);
        let zero_obs_cov = CovarianceMatrix::zeros(2);

        let control_constraints = match &self.problem.control_box {
            Some(bounds) => {
                let noise = if deterministic {
                    CovarianceMatrix::zeros(bounds.dim())
                } else {
                    self.problem.control_noise_cov.clone()
                };
                control_chance_constraints(bounds, &noise, p)?
            }
            None => Vec::new(),
        };

        let mut steps = Vec::with_capacity(n_steps + 1);
        for k in 0..=n_steps {
            let mut state = Vec::new();
            if k > 0 {
                let cov = if deterministic {
                    &zero_state_cov
                } else {
                    &variances.covariances[k]
                };
                for (i, spec) in self.problem.state_constraints.iter().enumerate() {
                    match spec {
                        StateConstraintSpec::Polygon(poly) => {
                            let position =
                                [nominal.states[k][pos_idx.0], nominal.states[k][pos_idx.1]];
                            let (phi, grad) = signed_distance(poly, position);
                            if phi <= 0.0 && !allow_inside {
                                return Err(CilqgError::NominalInsideObstacle { index: i, phi });
                            }
                            if phi <= 0.0 {
                                // Violated linearization for recovery.
                                let mut row = RowDVector::zeros(state_dim);
                                row[pos_idx.0] = -grad[0];
                                row[pos_idx.1] = -grad[1];
                                let g0 = poly.inflation - phi;
                                let offset = g0 - (&row * &nominal.states[k])[0];
                                state.push(LinearChanceConstraint {
                                    row,
                                    offset,
                                    gamma: 0.0,
                                    kind: ConstraintKind::State,
                                    source: ConstraintSource::StaticObstacle(i),
                                });
                            } else {
                                state.push(polygon_chance_constraint(
                                    poly,
                                    &nominal.states[k],
                                    pos_idx,
                                    cov,
                                    p,
                                    i,
                                )?);
                            }
                        }
                        StateConstraintSpec::Moving {
                            states: obs_states,
                            safety_margin,
                        } => {
                            let obs = &obs_states[k];
                            let obs_for_mode = if deterministic {
                                UncertainObstacleState {
                                    mean: obs.mean,
                                    covariance: zero_obs_cov.clone(),
                                }
                            } else {
                                obs.clone()
                            };
                            state.push(obstacle_uncertainty_constraint(
                                &nominal.states[k],
                                &obs_for_mode,
                                *safety_margin,
                                pos_idx,
                                cov,
                                p,
                                k,
                                i,
                            )?);
                        }
                        StateConstraintSpec::Linear { row, offset } => {
                            let gamma = crate::constraints::compute_gamma(row, cov, p)?;
                            state.push(LinearChanceConstraint {
                                row: row.clone(),
                                offset: *offset,
                                gamma,
                                kind: ConstraintKind::State,
                                source: ConstraintSource::Custom(format!("linear_{i}")),
                            });
                        }
                    }
                }
            }
            let control = if k < n_steps {
                control_constraints.clone()
            } else {
                Vec::new()
            };
            steps.push(TimestepConstraints { state, control });
        }
        Ok(ConstraintSchedule { steps })
    }

    fn ilqr_settings(&self) -> IlqrSettings {
        IlqrSettings {
            max_iterations: self.settings.max_inner_iterations,
            tolerance: self.settings.inner_tolerance,
            regularizer: Regularizer::default(),
        }
    }

    /// Rebuild covariances and constraints at a trajectory (tolerating
    /// nominal points inside obstacles).
    fn rebuild(&self, nominal: &NominalTrajectory) -> Result<(VarianceSequence, ConstraintSchedule)> {
        let variances = self.variances(nominal)?;
        let schedule = self.build_schedule(nominal, &variances, true)?;
        Ok((variances, schedule))
    }

    /// Feasibility recovery: minimize the hinge penalty of the transformed
    /// constraints (with a feasibility margin) while keeping a whisper of
    /// the tracking objective for conditioning.
    fn recover_feasible_seed(
        &self,
        mut nominal: NominalTrajectory,
    ) -> Result<(NominalTrajectory, usize)> {
        const RECOVERY_ROUNDS: usize = 24;
        const RECOVERY_MARGIN: f64 = 1e-3;
        let mut inner_total = 0;
        for round in 0..RECOVERY_ROUNDS {
            let (_, schedule) = self.rebuild(&nominal)?;
            if schedule.max_value(&nominal) < -RECOVERY_MARGIN / 2.0 {
                return Ok((nominal, inner_total));
            }
            let weight = 1e3 * 10f64.powi(round.min(4) as i32);
            let cost = AugmentedCost::new(
                &self.problem.cost,
                &schedule,
                self.horizon(),
                Augmentation::Penalty {
                    weight,
                    margin: RECOVERY_MARGIN,
                },
            )
            .with_base_scale(1e-3);
            let sol = ilqr_minimize(&self.problem.model, &cost, nominal, &self.ilqr_settings())?;
            inner_total += sol.iterations;
            nominal = sol.trajectory;
        }
        // Final check against freshly built constraints.
        let (_, schedule) = self.rebuild(&nominal)?;
        let worst = schedule.max_value(&nominal);
        if worst < 0.0 {
            Ok((nominal, inner_total))
        } else {
            Err(CilqgError::InfeasibleStart(format!(
                "worst tightened constraint value {worst:.4e} after recovery"
            )))
        }
    }

    /// Backward-pass gains around a fixed nominal for the given cost, used
    /// to publish an execution policy consistent with the returned plan.
    fn policy_gains(&self, nominal: &NominalTrajectory, cost: &AugmentedCost) -> Result<Vec<Matrix>> {
        let horizon = nominal.horizon();
        let mut dynamics = Vec::with_capacity(horizon);
        let mut stage_costs = Vec::with_capacity(horizon);
        for k in 0..horizon {
            let (a, b, _) = self
                .problem
                .model
                .linearize_dynamics(&nominal.states[k], &nominal.controls[k])?;
            dynamics.push((a, b));
            stage_costs.push(crate::ilqr::quadratize(
                cost,
                k,
                &nominal.states[k],
                &nominal.controls[k],
            )?);
        }
        let terminal = cost.quadratize_terminal(&nominal.states[horizon])?;
        let mut reg = Regularizer::default();
        loop {
            match crate::ilqr::backward_pass(&dynamics, &stage_costs, &terminal, reg.rho) {
                Ok(pass) => return Ok(pass.feedback),
                Err(CilqgError::NotPositiveDefinite { .. }) => reg.increase()?,
                Err(e) => return Err(e),
            }
        }
    }

    /// Safeguarded acceptance of an inner-loop candidate: the constraints
    /// are rebuilt at the candidate and, if the candidate violates its own
    /// rebuilt tightening (the covariances depend on the trajectory), the
    /// step is blended back toward the previous self-consistent nominal.
    /// Returns the accepted trajectory with its rebuilt schedule, or `None`
    /// when no damped step stays feasible.
    fn accept_candidate(
        &self,
        previous: &NominalTrajectory,
        candidate: NominalTrajectory,
    ) -> Result<Option<(NominalTrajectory, VarianceSequence, ConstraintSchedule)>> {
        let (var, sched) = self.rebuild(&candidate)?;
        if sched.is_strictly_feasible(&candidate) {
            return Ok(Some((candidate, var, sched)));
        }
        let mut beta = 0.5;
        for _ in 0..8 {
            let blended_controls: Vec<Vector> = previous
                .controls
                .iter()
                .zip(&candidate.controls)
                .map(|(prev, cand)| prev * (1.0 - beta) + cand * beta)
                .collect();
            let blended = self.rollout(&blended_controls)?;
            let (var, sched) = self.rebuild(&blended)?;
            if sched.is_strictly_feasible(&blended) {
                return Ok(Some((blended, var, sched)));
            }
            beta *= 0.5;
        }
        Ok(None)
    }
}

/// Solve a planning problem with the configured mode.
pub fn solve_problem<M: StochasticModel>(
    problem: &Problem<M>,
    settings: &SolverSettings,
) -> Result<PlanResult> {
    settings.validate()?;
    let n = settings.horizon;
    if problem.initial_controls.len() != n {
        return Err(CilqgError::BadParams(format!(
            "initial control sequence has {} steps, horizon is {n}",
            problem.initial_controls.len()
        )));
    }
    if problem.cost.reference.len() < n + 1 {
        return Err(CilqgError::BadParams(format!(
            "reference has {} states, need at least {}",
            problem.cost.reference.len(),
            n + 1
        )));
    }
    for spec in &problem.state_constraints {
        if let StateConstraintSpec::Moving { states, .. } = spec {
            if states.len() < n + 1 {
                return Err(CilqgError::BadParams(format!(
                    "moving obstacle trajectory has {} steps, need {}",
                    states.len(),
                    n + 1
                )));
            }
        }
    }

    let started = Instant::now();
    let ctx = SolveContext { problem, settings };

    let mut nominal = ctx.rollout(&problem.initial_controls)?;
    let mut inner_iterations = 0usize;

    // Seed feasibility (not needed for the soft-constrained mode).
    if settings.mode != SolverMode::Gbsp {
        let variances = ctx.variances(&nominal)?;
        let schedule = ctx.build_schedule(&nominal, &variances, true)?;
        if !schedule.is_strictly_feasible(&nominal) {
            let (recovered, iters) = ctx.recover_feasible_seed(nominal)?;
            nominal = recovered;
            inner_iterations += iters;
        }
    }

    let mut t = settings.barrier_init;
    let mut outer_iterations = 0usize;
    let mut converged = false;
    let mut cost_history = Vec::new();
    let mut stagnant_rounds = 0usize;
    // Invariant for the barrier modes: `nominal` is strictly feasible for
    // the constraints rebuilt at `nominal` (checked/recovered above).
    let (mut variances, mut schedule) = ctx.rebuild(&nominal)?;
    let mut last_sol: Option<crate::ilqr::IlqrSolution> = None;
    let mut previous_cost = f64::INFINITY;

    while outer_iterations < settings.max_outer_iterations {
        outer_iterations += 1;
        let augmentation = match settings.mode {
            SolverMode::Gbsp => Augmentation::Penalty {
                weight: settings.penalty_weight,
                margin: 0.0,
            },
            _ => Augmentation::Barrier { t },
        };
        let cost = AugmentedCost::new(&problem.cost, &schedule, n, augmentation);
        let sol = ilqr_minimize(&problem.model, &cost, nominal.clone(), &ctx.ilqr_settings())?;
        inner_iterations += sol.iterations;
        let inner_converged = sol.converged;

        if settings.mode == SolverMode::Gbsp {
            // Soft mode: accept unconditionally, rebuild at the new nominal.
            nominal = sol.trajectory.clone();
            let rebuilt = ctx.rebuild(&nominal)?;
            variances = rebuilt.0;
            schedule = rebuilt.1;
            last_sol = Some(sol);
            let current = true_cost(&problem.cost, &nominal, n);
            cost_history.push(current);
            let settled = (previous_cost - current).abs()
                <= settings.inner_tolerance * (1.0 + current.abs());
            previous_cost = current;
            if inner_converged && settled {
                converged = true;
                break;
            }
            continue;
        }

        // Barrier modes: the tightenings depend on the trajectory, so the
        // candidate must stay feasible against constraints rebuilt at
        // itself; otherwise blend back toward the previous nominal.
        match ctx.accept_candidate(&nominal, sol.trajectory.clone())? {
            Some((accepted, var, sched)) => {
                stagnant_rounds = 0;
                nominal = accepted;
                variances = var;
                schedule = sched;
            }
            None => {
                // Keep the previous nominal; the barrier weight still grows,
                // but repeated rejections mean the alternation is stuck.
                stagnant_rounds += 1;
                if stagnant_rounds >= 3 {
                    break;
                }
            }
        }
        last_sol = Some(sol);
        cost_history.push(true_cost(&problem.cost, &nominal, n));

        let gap = schedule.total_count() as f64 / t;
        if inner_converged && stagnant_rounds == 0 && gap < settings.outer_tolerance {
            converged = true;
            break;
        }
        t *= settings.barrier_growth;
    }

    if last_sol.is_none() {
        return Err(CilqgError::NoProgress {
            reason: "outer loop never ran".into(),
            best: Box::new(empty_plan(settings.mode)),
        });
    }

    // Publish gains computed around the accepted nominal with the final
    // augmented cost, so the execution policy matches the returned plan.
    let final_augmentation = match settings.mode {
        SolverMode::Gbsp => Augmentation::Penalty {
            weight: settings.penalty_weight,
            margin: 0.0,
        },
        _ => Augmentation::Barrier { t },
    };
    let final_cost = AugmentedCost::new(&problem.cost, &schedule, n, final_augmentation);
    let feedback_gains = ctx.policy_gains(&nominal, &final_cost)?;

    let max_constraint_value = schedule.max_value(&nominal);
    let solve_time_ms = started.elapsed().as_secs_f64() * 1e3;
    let plan = PlanResult {
        mode: settings.mode,
        states: nominal.states.clone(),
        controls: nominal.controls.clone(),
        variances,
        feedback_gains,
        schedule,
        true_cost: true_cost(&problem.cost, &nominal, n),
        diagnostics: SolveDiagnostics {
            converged,
            outer_iterations,
            inner_iterations,
            final_barrier_weight: t,
            solve_time_ms,
            cost_history,
            max_constraint_value,
        },
    };

    if !converged {
        return Err(CilqgError::NoProgress {
            reason: format!(
                "outer loop exhausted {} iterations (max constraint value {max_constraint_value:.4e})",
                settings.max_outer_iterations
            ),
            best: Box::new(plan),
        });
    }
    Ok(plan)
}

fn true_cost(cost: &TrackingCost, traj: &NominalTrajectory, horizon: usize) -> f64 {
    let mut total = 0.0;
    for k in 0..traj.horizon() {
        total += cost.stage(k, &traj.states[k], &traj.controls[k]);
    }
    total + cost.terminal(horizon, &traj.states[traj.horizon()])
}

fn empty_plan(mode: SolverMode) -> PlanResult {
    PlanResult {
        mode,
        states: Vec::new(),
        controls: Vec::new(),
        variances: VarianceSequence { covariances: Vec::new() },
        feedback_gains: Vec::new(),
        schedule: ConstraintSchedule { steps: Vec::new() },
        true_cost: f64::NAN,
        diagnostics: SolveDiagnostics::default(),
    }
}

/// Solve with the full chance-constrained pipeline.
pub fn solve<M: StochasticModel>(problem: &Problem<M>, settings: &SolverSettings) -> Result<PlanResult> {
    let mut s = settings.clone();
    s.mode = SolverMode::Cilqg;
    solve_problem(problem, &s)
}

/// Deterministic baseline: zero covariances, zero gammas.
pub fn solve_baseline_cilqr<M: StochasticModel>(
    problem: &Problem<M>,
    settings: &SolverSettings,
) -> Result<PlanResult> {
    let mut s = settings.clone();
    s.mode = SolverMode::Cilqr;
    solve_problem(problem, &s)
}

/// Soft-constraint baseline: quadratic penalties instead of barriers.
pub fn solve_baseline_gbsp<M: StochasticModel>(
    problem: &Problem<M>,
    settings: &SolverSettings,
) -> Result<PlanResult> {
    let mut s = settings.clone();
    s.mode = SolverMode::Gbsp;
    solve_problem(problem, &s)
}

/// Open-loop baseline: no measurement updates in the variance recursion.
pub fn solve_baseline_open<M: StochasticModel>(
    problem: &Problem<M>,
    settings: &SolverSettings,
) -> Result<PlanResult> {
    let mut s = settings.clone();
    s.mode = SolverMode::OpenCilqg;
    solve_problem(problem, &s)
}
