//! Closed-loop Monte Carlo validation of a plan: simulate the true
//! stochastic system, execute the plan's feedback policy with an EKF in the
//! loop, and count raw constraint violations per step.
//!
//! Rollouts are independent given per-rollout seeds derived from the master
//! seed, so they parallelize freely and reduce deterministically in rollout
//! order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::constraints::signed_distance;
use crate::error::{CilqgError, Result};
use crate::models::{sample_gaussian, StochasticModel};
use crate::solver::{PlanResult, Problem, StateConstraintSpec};
use crate::types::{Belief, CovarianceMatrix, Matrix, Vector};

/// One simulated closed-loop execution.
#[derive(Debug, Clone)]
pub struct RolloutRecord {
    pub seed: u64,
    pub true_states: Vec<Vector>,
    pub estimated_means: Vec<Vector>,
    pub controls: Vec<Vector>,
    /// Worst raw constraint value per step (`> 0` means violated).
    pub worst_raw_value: Vec<f64>,
    pub collided: bool,
}

/// Aggregated validation statistics.
#[derive(Debug, Clone)]
pub struct ValidationStatistics {
    pub trials: usize,
    /// Fraction of rollouts violating any raw state constraint, per step.
    pub violation_rate: Vec<f64>,
    /// Binomial standard error of each per-step estimate.
    pub std_err: Vec<f64>,
    pub collision_rate: f64,
    pub mean_cost: f64,
}

impl ValidationStatistics {
    pub fn max_violation_rate(&self) -> f64 {
        self.violation_rate.iter().copied().fold(0.0, f64::max)
    }
}

/// Raw (untightened, untransformed) state constraint values at one step.
/// For polygons this is `inflation - signed_distance`; for moving obstacles
/// `margin - distance` against a sampled obstacle position; linear
/// constraints evaluate directly.
fn raw_state_values<M: StochasticModel>(
    problem: &Problem<M>,
    x: &Vector,
    step: usize,
    obstacle_samples: &[Option<[f64; 2]>],
) -> (f64, bool) {
    let (ix, iy) = problem.position_indices;
    let pos = [x[ix], x[iy]];
    let mut worst = f64::NEG_INFINITY;
    let mut collided = false;
    for (i, spec) in problem.state_constraints.iter().enumerate() {
        match spec {
            StateConstraintSpec::Polygon(poly) => {
                let (phi, _) = signed_distance(poly, pos);
                worst = worst.max(poly.inflation - phi);
                if phi <= 0.0 {
                    collided = true;
                }
            }
            StateConstraintSpec::Moving { states, safety_margin } => {
                let center = obstacle_samples[i].unwrap_or(states[step].mean);
                let d = ((pos[0] - center[0]).powi(2) + (pos[1] - center[1]).powi(2)).sqrt();
                worst = worst.max(safety_margin - d);
                if d < *safety_margin {
                    collided = true;
                }
            }
            StateConstraintSpec::Linear { row, offset } => {
                let v = (row * x)[0] + offset;
                worst = worst.max(v);
                if v > 0.0 {
                    collided = true;
                }
            }
        }
    }
    (worst, collided)
}

/// Execute one closed-loop rollout with the plan's feedback policy and an
/// EKF state estimator.
pub fn rollout<M: StochasticModel>(
    problem: &Problem<M>,
    plan: &PlanResult,
    seed: u64,
) -> Result<RolloutRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = &problem.model;
    let horizon = plan.controls.len();
    let n = model.state_dim();

    // True initial state drawn from the initial belief.
    let mut x_true =
        &problem.initial_belief.mean + sample_gaussian(&mut rng, &problem.initial_belief.covariance);
    let mut estimate = problem.initial_belief.clone();

    let mut true_states = Vec::with_capacity(horizon + 1);
    let mut estimated_means = Vec::with_capacity(horizon + 1);
    let mut controls = Vec::with_capacity(horizon);
    let mut worst_raw_value = Vec::with_capacity(horizon + 1);
    let mut collided = false;

    // Per-step obstacle position samples (shared by constraint evaluation
    // at that step).
    let sample_obstacles = |rng: &mut ChaCha8Rng, step: usize| -> Vec<Option<[f64; 2]>> {
        problem
            .state_constraints
            .iter()
            .map(|spec| match spec {
                StateConstraintSpec::Moving { states, .. } => {
                    let s = &states[step];
                    let noise = sample_gaussian(rng, &s.covariance);
                    Some([s.mean[0] + noise[0], s.mean[1] + noise[1]])
                }
                _ => None,
            })
            .collect()
    };

    let obs0 = sample_obstacles(&mut rng, 0);
    let (w0, c0) = raw_state_values(problem, &x_true, 0, &obs0);
    worst_raw_value.push(w0);
    collided |= c0;
    true_states.push(x_true.clone());
    estimated_means.push(estimate.mean.clone());

    for k in 0..horizon {
        // Policy around the plan, saturated at the raw control box.
        let mut u =
            &plan.controls[k] + &plan.feedback_gains[k] * (&estimate.mean - &plan.states[k]);
        if let Some(bounds) = &problem.control_box {
            u = bounds.clamp(&u);
        }

        // True system step with sampled process noise.
        let w = sample_gaussian(&mut rng, model.process_noise_cov());
        x_true = model.step(&x_true, &u, &w)?;

        // Measurement of the true state with sampled noise.
        let v = sample_gaussian(&mut rng, model.measurement_noise_cov());
        let y = model.measure(&x_true, &v);

        // EKF predict at the current estimate.
        let (a, _, w_jac) = model.linearize_dynamics(&estimate.mean, &u)?;
        let mean_pred = model.step(&estimate.mean, &u, &Vector::zeros(model.process_noise_dim()))?;
        let cov_pred = &a * estimate.covariance.matrix() * a.transpose()
            + &w_jac * model.process_noise_cov().matrix() * w_jac.transpose();
        // EKF update at the predicted mean.
        let (h, v_jac) = model.linearize_measurement(&mean_pred);
        let r = h.nrows();
        let innovation_cov = &h * &cov_pred * h.transpose()
            + &v_jac * model.measurement_noise_cov().matrix() * v_jac.transpose();
        let gain = match innovation_cov.clone().cholesky() {
            Some(chol) => &cov_pred * h.transpose() * chol.inverse(),
            None => {
                let jittered = innovation_cov + Matrix::identity(r, r) * 1e-12;
                match jittered.cholesky() {
                    Some(chol) => &cov_pred * h.transpose() * chol.inverse(),
                    None => Matrix::zeros(n, r),
                }
            }
        };
        let predicted_measurement = model.measure(&mean_pred, &Vector::zeros(model.measurement_noise_dim()));
        let mean_new = &mean_pred + &gain * (y - predicted_measurement);
        let cov_new = (Matrix::identity(n, n) - &gain * &h) * cov_pred;
        let cov_new = (&cov_new + cov_new.transpose()) * 0.5;
        estimate = Belief::new(mean_new, CovarianceMatrix::trusted(cov_new))?;

        let obs = sample_obstacles(&mut rng, k + 1);
        let (wv, cv) = raw_state_values(problem, &x_true, k + 1, &obs);
        worst_raw_value.push(wv);
        collided |= cv;
        true_states.push(x_true.clone());
        estimated_means.push(estimate.mean.clone());
        controls.push(u);
    }

    Ok(RolloutRecord {
        seed,
        true_states,
        estimated_means,
        controls,
        worst_raw_value,
        collided,
    })
}

/// Run `trials` closed-loop rollouts and aggregate violation statistics.
/// Deterministic for a fixed `seed` regardless of thread count.
pub fn monte_carlo_validate<M: StochasticModel + Sync>(
    problem: &Problem<M>,
    plan: &PlanResult,
    trials: usize,
    seed: u64,
) -> Result<ValidationStatistics> {
    if trials == 0 {
        return Err(CilqgError::BadParams("trials must be positive".into()));
    }
    if plan.controls.is_empty() {
        return Err(CilqgError::BadParams("plan has no controls".into()));
    }
    let records: Vec<RolloutRecord> = (0..trials)
        .into_par_iter()
        .map(|r| rollout(problem, plan, seed.wrapping_add(r as u64)))
        .collect::<Result<Vec<_>>>()?;

    let steps = plan.controls.len() + 1;
    let mut violations = vec![0usize; steps];
    let mut collisions = 0usize;
    let mut cost_acc = 0.0;
    for rec in &records {
        for (k, &v) in rec.worst_raw_value.iter().enumerate() {
            if v > 0.0 {
                violations[k] += 1;
            }
        }
        if rec.collided {
            collisions += 1;
        }
        let mut cost = 0.0;
        for k in 0..rec.controls.len() {
            cost += problem.cost.stage(k, &rec.true_states[k], &rec.controls[k]);
        }
        cost += problem.cost.terminal(rec.controls.len(), &rec.true_states[rec.controls.len()]);
        cost_acc += cost;
    }

    let violation_rate: Vec<f64> = violations.iter().map(|&v| v as f64 / trials as f64).collect();
    let std_err = violation_rate
        .iter()
        .map(|&r| (r * (1.0 - r) / trials as f64).sqrt())
        .collect();
    Ok(ValidationStatistics {
        trials,
        violation_rate,
        std_err,
        collision_rate: collisions as f64 / trials as f64,
        mean_cost: cost_acc / trials as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::LinearModel;
    use crate::solver::{solve, SolverSettings, TrackingCost};
    use nalgebra::RowDVector;

    fn noiseless_problem(n: usize) -> Problem<LinearModel> {
        Problem {
            model: LinearModel::new(
                Matrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]),
                Matrix::from_row_slice(2, 1, &[0.005, 0.1]),
                Matrix::from_row_slice(2, 1, &[0.005, 0.1]),
                CovarianceMatrix::zeros(1),
                CovarianceMatrix::zeros(2),
            ),
            initial_belief: Belief::new(
                Vector::from_row_slice(&[1.0, 0.0]),
                CovarianceMatrix::zeros(2),
            )
            .unwrap(),
            initial_controls: vec![Vector::zeros(1); n],
            cost: TrackingCost {
                state_weights: Matrix::identity(2, 2),
                control_weights: Matrix::identity(1, 1) * 0.1,
                terminal_weights: Matrix::identity(2, 2),
                reference: vec![Vector::zeros(2); n + 1],
            },
            state_constraints: vec![StateConstraintSpec::Linear {
                row: RowDVector::from_row_slice(&[-1.0, 0.0]),
                offset: -0.05,
            }],
            control_box: None,
            control_noise_cov: CovarianceMatrix::zeros(1),
            position_indices: (0, 1),
        }
    }

    #[test]
    fn zero_noise_rollout_has_zero_violations() {
        let n = 15;
        let problem = noiseless_problem(n);
        let settings = SolverSettings {
            horizon: n,
            ..Default::default()
        };
        let plan = solve(&problem, &settings).unwrap();
        let stats = monte_carlo_validate(&problem, &plan, 64, 7).unwrap();
        assert_eq!(stats.max_violation_rate(), 0.0);
        assert_eq!(stats.collision_rate, 0.0);
    }

    #[test]
    fn zero_trials_rejected() {
        let n = 5;
        let problem = noiseless_problem(n);
        let settings = SolverSettings {
            horizon: n,
            ..Default::default()
        };
        let plan = solve(&problem, &settings).unwrap();
        assert!(matches!(
            monte_carlo_validate(&problem, &plan, 0, 7),
            Err(CilqgError::BadParams(_))
        ));
    }

    #[test]
    fn statistics_reproducible_for_fixed_seed() {
        let n = 10;
        let mut problem = noiseless_problem(n);
        problem.model.process_noise_cov = CovarianceMatrix::scaled_identity(1, 0.01);
        problem.model.measurement_noise_cov = CovarianceMatrix::scaled_identity(2, 0.01);
        problem.initial_belief = Belief::new(
            Vector::from_row_slice(&[1.0, 0.0]),
            CovarianceMatrix::scaled_identity(2, 0.001),
        )
        .unwrap();
        let settings = SolverSettings {
            horizon: n,
            ..Default::default()
        };
        let plan = solve(&problem, &settings).unwrap();
        let a = monte_carlo_validate(&problem, &plan, 500, 42).unwrap();
        let b = monte_carlo_validate(&problem, &plan, 500, 42).unwrap();
        assert_eq!(a.violation_rate, b.violation_rate);
        assert_eq!(a.mean_cost, b.mean_cost);
        let c = monte_carlo_validate(&problem, &plan, 500, 43).unwrap();
        assert!(a.mean_cost != c.mean_cost || a.violation_rate != c.violation_rate);
    }

    #[test]
    fn linear_gaussian_violation_rate_matches_tail() {
        // Linear system, linear constraint kept tight by construction: the
        // empirical per-step violation rate at the boundary-active steps
        // approaches 1 - p.
        let n = 6;
        let p = 0.9;
        // Pure diffusion: A = I, B = I, no feedback corrections wanted, so
        // plan a constant state at the tightened boundary.
        let model = LinearModel::new(
            Matrix::identity(1, 1),
            Matrix::identity(1, 1),
            Matrix::identity(1, 1),
            CovarianceMatrix::scaled_identity(1, 0.04),
            // Huge measurement noise: the filter learns nothing, so the
            // planned covariance matches the open-loop dispersion.
            CovarianceMatrix::scaled_identity(1, 1e9),
        );
        let problem = Problem {
            model,
            initial_belief: Belief::new(Vector::zeros(1), CovarianceMatrix::zeros(1)).unwrap(),
            initial_controls: vec![Vector::zeros(1); n],
            cost: TrackingCost {
                state_weights: Matrix::identity(1, 1),
                control_weights: Matrix::identity(1, 1) * 1e-6,
                terminal_weights: Matrix::identity(1, 1),
                reference: vec![Vector::zeros(1); n + 1],
            },
            state_constraints: vec![StateConstraintSpec::Linear {
                row: RowDVector::from_row_slice(&[1.0]),
                offset: 0.0,
            }],
            control_box: None,
            control_noise_cov: CovarianceMatrix::zeros(1),
            position_indices: (0, 0),
        };
        // Hand-build a plan that sits exactly on the tightened boundary at
        // step 1 with zero feedback: x_1 = -gamma_1, controls place it there.
        let variances = crate::belief::propagate_variance(
            &problem.model,
            &crate::types::NominalTrajectory::new(
                vec![Vector::zeros(1); n + 1],
                vec![Vector::zeros(1); n],
            )
            .unwrap(),
            &problem.initial_belief,
            crate::belief::PropagationOptions::default(),
        )
        .unwrap();
        let row = RowDVector::from_row_slice(&[1.0]);
        let gamma1 = crate::constraints::compute_gamma(&row, &variances.covariances[1], p).unwrap();
        // Plan: move to -gamma1 at step 1 and hold far below afterwards.
        let mut states = vec![Vector::zeros(1)];
        let mut controls = Vec::new();
        let mut x = 0.0;
        for k in 0..n {
            let target = if k == 0 { -gamma1 } else { -10.0 };
            controls.push(Vector::from_element(1, target - x));
            x = target;
            states.push(Vector::from_element(1, x));
        }
        let plan = PlanResult {
            mode: crate::solver::SolverMode::Cilqg,
            states,
            controls,
            variances,
            feedback_gains: vec![Matrix::zeros(1, 1); n],
            schedule: crate::solver::ConstraintSchedule {
                steps: vec![Default::default(); n + 1],
            },
            true_cost: 0.0,
            diagnostics: Default::default(),
        };
        let trials = 100_000;
        let stats = monte_carlo_validate(&problem, &plan, trials, 11).unwrap();
        // Step 1 is boundary-tight: empirical rate within 3 standard errors
        // of 1 - p (standard error of the true rate).
        let se = (p * (1.0 - p) / trials as f64).sqrt();
        let rate = stats.violation_rate[1];
        assert!(
            (rate - (1.0 - p)).abs() < 3.0 * se + 1e-12,
            "rate {rate} vs {} +- {se}",
            1.0 - p
        );
    }
}
