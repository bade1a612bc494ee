//! Inner-loop trajectory optimizer: cost quadratization, regularized
//! backward pass, forward rollout and backtracking line search.
//!
//! This is the Gauss-Newton ILQR variant: dynamics Hessians are dropped
//! and `Q_uu` is kept invertible by a scalar regularizer that grows on
//! factorization or line-search failures.

use crate::error::{CilqgError, Result};
use crate::models::StochasticModel;
use crate::types::{Matrix, NominalTrajectory, Vector};

/// Second-order expansion of a stage cost at a nominal point. `l_xx` and
/// `l_uu` are full Hessians (no implicit 1/2), matching
/// `l(x,u) ~ l0 + l_x dx + l_u du + dx l_xx dx / 2 + du l_uu du / 2 + du l_ux dx`.
#[derive(Debug, Clone)]
pub struct QuadratizedCost {
    pub l0: f64,
    pub l_x: Vector,
    pub l_u: Vector,
    pub l_xx: Matrix,
    pub l_uu: Matrix,
    pub l_ux: Matrix,
}

impl QuadratizedCost {
    pub fn terminal(l0: f64, l_x: Vector, l_xx: Matrix) -> Self {
        let n = l_x.len();
        Self {
            l0,
            l_x,
            l_u: Vector::zeros(0),
            l_xx,
            l_uu: Matrix::zeros(0, 0),
            l_ux: Matrix::zeros(0, n),
        }
    }

    fn symmetrize(mut self) -> Self {
        self.l_xx = (&self.l_xx + self.l_xx.transpose()) * 0.5;
        if self.l_uu.nrows() > 0 {
            self.l_uu = (&self.l_uu + self.l_uu.transpose()) * 0.5;
        }
        self
    }

    fn check_finite(&self) -> Result<()> {
        let finite = self.l0.is_finite()
            && self.l_x.iter().all(|v| v.is_finite())
            && self.l_u.iter().all(|v| v.is_finite())
            && self.l_xx.iter().all(|v| v.is_finite())
            && self.l_uu.iter().all(|v| v.is_finite())
            && self.l_ux.iter().all(|v| v.is_finite());
        if finite {
            Ok(())
        } else {
            Err(CilqgError::NonFiniteDerivative)
        }
    }
}

/// Cost over a trajectory: stage terms `l^k(x, u)` plus a terminal term.
/// Values may fail (e.g. a log barrier evaluated outside its domain).
pub trait CostModel {
    fn stage_value(&self, k: usize, x: &Vector, u: &Vector) -> Result<f64>;
    fn terminal_value(&self, x: &Vector) -> Result<f64>;
    fn quadratize_stage(&self, k: usize, x: &Vector, u: &Vector) -> Result<QuadratizedCost>;
    fn quadratize_terminal(&self, x: &Vector) -> Result<QuadratizedCost>;

    fn trajectory_value(&self, traj: &NominalTrajectory) -> Result<f64> {
        let mut total = 0.0;
        for k in 0..traj.horizon() {
            total += self.stage_value(k, &traj.states[k], &traj.controls[k])?;
        }
        total += self.terminal_value(&traj.states[traj.horizon()])?;
        Ok(total)
    }
}

/// Quadratize and symmetrize a stage cost, validating finiteness.
pub fn quadratize<C: CostModel>(
    cost: &C,
    k: usize,
    x: &Vector,
    u: &Vector,
) -> Result<QuadratizedCost> {
    let q = cost.quadratize_stage(k, x, u)?.symmetrize();
    q.check_finite()?;
    Ok(q)
}

/// Feedforward/feedback policy terms and value expansion from one backward
/// pass.
#[derive(Debug, Clone)]
pub struct BackwardPassResult {
    pub feedforward: Vec<Vector>,
    pub feedback: Vec<Matrix>,
    pub value_x: Vec<Vector>,
    pub value_xx: Vec<Matrix>,
    /// Linear term of the expected cost reduction: `sum k^T Q_u`.
    pub reduction_linear: f64,
    /// Quadratic term: `sum k^T Q_uu k / 2`.
    pub reduction_quadratic: f64,
}

impl BackwardPassResult {
    /// Model-predicted cost reduction for a step scale `alpha`.
    pub fn expected_reduction(&self, alpha: f64) -> f64 {
        -(alpha * self.reduction_linear + alpha * alpha * self.reduction_quadratic)
    }

    pub fn max_feedforward_norm(&self) -> f64 {
        self.feedforward
            .iter()
            .map(|k| k.amax())
            .fold(0.0, f64::max)
    }
}

/// Scalar regularization schedule for `Q_uu`.
#[derive(Debug, Clone)]
pub struct Regularizer {
    pub rho: f64,
    pub growth: f64,
    pub shrink: f64,
    pub rho_min: f64,
    pub rho_max: f64,
}

impl Default for Regularizer {
    fn default() -> Self {
        Self {
            rho: 0.0,
            growth: 10.0,
            shrink: 0.5,
            rho_min: 1e-6,
            rho_max: 1e10,
        }
    }
}

impl Regularizer {
    /// Raise the regularization after a failure; errors out past `rho_max`.
    pub fn increase(&mut self) -> Result<()> {
        self.rho = self.rho.max(self.rho_min) * self.growth;
        if self.rho > self.rho_max {
            return Err(CilqgError::NotPositiveDefinite { rho: self.rho });
        }
        Ok(())
    }

    /// Relax after a successful step, flooring at zero.
    pub fn decrease(&mut self) {
        self.rho *= self.shrink;
        if self.rho < self.rho_min {
            self.rho = 0.0;
        }
    }
}

/// Backward Riccati-style recursion over the quadratized problem.
///
/// Per step: `Q_x = l_x + A^T V_x`, `Q_u = l_u + B^T V_x`,
/// `Q_xx = l_xx + A^T V_xx A`, `Q_ux = l_ux + B^T V_xx A`,
/// `Q_uu = l_uu + B^T V_xx B + rho I`; gains `k = -Q_uu^{-1} Q_u`,
/// `K = -Q_uu^{-1} Q_ux`; value terms
/// `V_x = Q_x - Q_ux^T Q_uu^{-1} Q_u`, `V_xx = Q_xx - Q_ux^T Q_uu^{-1} Q_ux`.
pub fn backward_pass(
    dynamics: &[(Matrix, Matrix)],
    stage_costs: &[QuadratizedCost],
    terminal_cost: &QuadratizedCost,
    rho: f64,
) -> Result<BackwardPassResult> {
    let horizon = dynamics.len();
    assert_eq!(stage_costs.len(), horizon, "one quadratized cost per step");
    let m = if horizon > 0 { dynamics[0].1.ncols() } else { 0 };

    let mut feedforward = vec![Vector::zeros(m); horizon];
    let mut feedback = vec![Matrix::zeros(0, 0); horizon];
    let mut value_x = vec![Vector::zeros(0); horizon + 1];
    let mut value_xx = vec![Matrix::zeros(0, 0); horizon + 1];
    value_x[horizon] = terminal_cost.l_x.clone();
    value_xx[horizon] = terminal_cost.l_xx.clone();
    let mut reduction_linear = 0.0;
    let mut reduction_quadratic = 0.0;

    for k in (0..horizon).rev() {
        let (a, b) = &dynamics[k];
        let cost = &stage_costs[k];
        let vx_next = &value_x[k + 1];
        let vxx_next = &value_xx[k + 1];

        let q_x = &cost.l_x + a.transpose() * vx_next;
        let q_u = &cost.l_u + b.transpose() * vx_next;
        let q_xx = &cost.l_xx + a.transpose() * vxx_next * a;
        let q_ux = &cost.l_ux + b.transpose() * vxx_next * a;
        let q_uu = &cost.l_uu
            + b.transpose() * vxx_next * b
            + Matrix::identity(b.ncols(), b.ncols()) * rho;

        let chol = q_uu
            .clone()
            .cholesky()
            .ok_or(CilqgError::NotPositiveDefinite { rho })?;
        let k_ff = -chol.solve(&q_u);
        let k_fb = -chol.solve(&q_ux);

        reduction_linear += k_ff.dot(&q_u);
        reduction_quadratic += 0.5 * (k_ff.transpose() * &q_uu * &k_ff)[0];

        let vx = &q_x + q_ux.transpose() * &k_ff;
        let vxx = &q_xx + q_ux.transpose() * &k_fb;
        value_x[k] = vx;
        value_xx[k] = (&vxx + vxx.transpose()) * 0.5;
        feedforward[k] = k_ff;
        feedback[k] = k_fb;
    }

    Ok(BackwardPassResult {
        feedforward,
        feedback,
        value_x,
        value_xx,
        reduction_linear,
        reduction_quadratic,
    })
}

/// Roll the policy out through the noiseless nonlinear dynamics:
/// `u_k = u_k_nom + alpha k_k + K_k (x_k - x_k_nom)`.
pub fn forward_rollout<M, C>(
    model: &M,
    cost: &C,
    nominal: &NominalTrajectory,
    pass: &BackwardPassResult,
    alpha: f64,
) -> Result<(NominalTrajectory, f64)>
where
    M: StochasticModel,
    C: CostModel,
{
    let horizon = nominal.horizon();
    let zero_noise = Vector::zeros(model.process_noise_dim());
    let mut states = Vec::with_capacity(horizon + 1);
    let mut controls = Vec::with_capacity(horizon);
    states.push(nominal.states[0].clone());
    for k in 0..horizon {
        let u = &nominal.controls[k]
            + &pass.feedforward[k] * alpha
            + &pass.feedback[k] * (&states[k] - &nominal.states[k]);
        let next = model.step(&states[k], &u, &zero_noise)?;
        controls.push(u);
        states.push(next);
    }
    let traj = NominalTrajectory::new(states, controls)?;
    let total = cost.trajectory_value(&traj)?;
    Ok((traj, total))
}

/// Outcome of one accepted line-search step.
#[derive(Debug, Clone)]
pub struct LineSearchStep {
    pub trajectory: NominalTrajectory,
    pub cost: f64,
    pub alpha: f64,
}

pub const LINE_SEARCH_BACKTRACK: f64 = 0.5;
pub const LINE_SEARCH_MAX_TRIALS: usize = 10;

/// Backtracking line search over `alpha in {1, beta, beta^2, ...}`. A trial
/// is accepted when the rollout strictly decreases the cost; evaluations
/// outside a barrier domain (or outside the model domain) reject the trial.
/// When the backward pass predicts no improvement the nominal is returned
/// unchanged.
pub fn line_search<M, C>(
    model: &M,
    cost: &C,
    nominal: &NominalTrajectory,
    nominal_cost: f64,
    pass: &BackwardPassResult,
) -> Result<LineSearchStep>
where
    M: StochasticModel,
    C: CostModel,
{
    if pass.expected_reduction(1.0).abs() < 1e-14 && pass.max_feedforward_norm() < 1e-12 {
        return Ok(LineSearchStep {
            trajectory: nominal.clone(),
            cost: nominal_cost,
            alpha: 0.0,
        });
    }
    let mut alpha = 1.0;
    for _ in 0..LINE_SEARCH_MAX_TRIALS {
        match forward_rollout(model, cost, nominal, pass, alpha) {
            Ok((traj, total)) if total < nominal_cost => {
                return Ok(LineSearchStep {
                    trajectory: traj,
                    cost: total,
                    alpha,
                });
            }
            // Cost increase, barrier domain exit or model domain error all
            // shrink the step.
            Ok(_) | Err(CilqgError::BarrierDomain { .. }) | Err(CilqgError::Domain(_)) => {}
            Err(e) => return Err(e),
        }
        alpha *= LINE_SEARCH_BACKTRACK;
    }
    Err(CilqgError::LineSearchFailed {
        trials: LINE_SEARCH_MAX_TRIALS,
    })
}

/// Convergence settings for [`ilqr_minimize`].
#[derive(Debug, Clone)]
pub struct IlqrSettings {
    pub max_iterations: usize,
    /// Relative decrease of the cost below which the loop stops.
    pub tolerance: f64,
    pub regularizer: Regularizer,
}

impl Default for IlqrSettings {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            tolerance: 1e-4,
            regularizer: Regularizer::default(),
        }
    }
}

/// Result of a full inner-loop minimization.
#[derive(Debug, Clone)]
pub struct IlqrSolution {
    pub trajectory: NominalTrajectory,
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
    pub pass: BackwardPassResult,
}

/// Run ILQR to convergence on a fixed cost model: repeatedly linearize,
/// quadratize, solve the backward pass and line-search the rollout.
pub fn ilqr_minimize<M, C>(
    model: &M,
    cost: &C,
    initial: NominalTrajectory,
    settings: &IlqrSettings,
) -> Result<IlqrSolution>
where
    M: StochasticModel,
    C: CostModel,
{
    let mut nominal = initial;
    let mut current_cost = cost.trajectory_value(&nominal)?;
    let mut reg = settings.regularizer.clone();
    let mut converged = false;
    let mut iterations = 0;
    let mut last_pass: Option<BackwardPassResult> = None;

    while iterations < settings.max_iterations {
        iterations += 1;
        let horizon = nominal.horizon();
        let mut dynamics = Vec::with_capacity(horizon);
        let mut stage_costs = Vec::with_capacity(horizon);
        for k in 0..horizon {
            let (a, b, _) = model.linearize_dynamics(&nominal.states[k], &nominal.controls[k])?;
            dynamics.push((a, b));
            stage_costs.push(quadratize(cost, k, &nominal.states[k], &nominal.controls[k])?);
        }
        let terminal = cost
            .quadratize_terminal(&nominal.states[horizon])?
            .symmetrize();
        terminal.check_finite()?;

        let pass = loop {
            match backward_pass(&dynamics, &stage_costs, &terminal, reg.rho) {
                Ok(p) => break p,
                Err(CilqgError::NotPositiveDefinite { .. }) => reg.increase()?,
                Err(e) => return Err(e),
            }
        };

        // The quadratic model already predicts no useful improvement.
        if pass.expected_reduction(1.0) <= settings.tolerance * (1.0 + current_cost.abs()) {
            converged = true;
            last_pass = Some(pass);
            break;
        }

        match line_search(model, cost, &nominal, current_cost, &pass) {
            Ok(step) => {
                let improvement = current_cost - step.cost;
                let stalled = step.alpha == 0.0;
                nominal = step.trajectory;
                current_cost = step.cost;
                last_pass = Some(pass);
                reg.decrease();
                if stalled || improvement <= settings.tolerance * (1.0 + current_cost.abs()) {
                    converged = true;
                    break;
                }
            }
            Err(CilqgError::LineSearchFailed { .. }) => {
                last_pass = Some(pass);
                if reg.increase().is_err() {
                    break;
                }
            }
            Err(e) => return Err(e),
        }
    }

    let pass = match last_pass {
        Some(p) => p,
        None => {
            // No iteration ran; produce gains for the nominal as-is.
            let horizon = nominal.horizon();
            let mut dynamics = Vec::with_capacity(horizon);
            let mut stage_costs = Vec::with_capacity(horizon);
            for k in 0..horizon {
                let (a, b, _) =
                    model.linearize_dynamics(&nominal.states[k], &nominal.controls[k])?;
                dynamics.push((a, b));
                stage_costs.push(quadratize(cost, k, &nominal.states[k], &nominal.controls[k])?);
            }
            let terminal = cost
                .quadratize_terminal(&nominal.states[horizon])?
                .symmetrize();
            backward_pass(&dynamics, &stage_costs, &terminal, reg.rho.max(reg.rho_min))?
        }
    };

    Ok(IlqrSolution {
        trajectory: nominal,
        cost: current_cost,
        iterations,
        converged,
        pass,
    })
}
