//! Gaussian belief propagation along a nominal trajectory.
//!
//! The linearized system gives a time-varying Kalman recursion; substituting
//! the expected measurement for the unknown future one leaves the mean on the
//! noiseless dynamics while the covariance still contracts through the
//! filter. The variance sequence depends only on the system coefficients,
//! never on the control perturbations.

use crate::error::{CilqgError, Result};
use crate::models::StochasticModel;
use crate::types::{Belief, CovarianceMatrix, LinearizedStep, Matrix, NominalTrajectory, Vector};

/// Covariances along the horizon, index 0 holding the initial belief
/// covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceSequence {
    pub covariances: Vec<CovarianceMatrix>,
}

impl VarianceSequence {
    pub fn len(&self) -> usize {
        self.covariances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.covariances.is_empty()
    }

    pub fn traces(&self) -> Vec<f64> {
        self.covariances.iter().map(|c| c.matrix().trace()).collect()
    }
}

/// One Kalman measurement update: prior covariance, gain and posterior.
#[derive(Debug, Clone)]
pub struct KalmanStep {
    pub prior_cov: CovarianceMatrix,
    pub gain: Matrix,
    pub posterior_cov: CovarianceMatrix,
}

fn symmetrized_cov(m: Matrix) -> CovarianceMatrix {
    let sym = (&m + m.transpose()) * 0.5;
    // Propagation of a valid covariance through the Kalman maps stays PSD up
    // to roundoff; clamp eigenvalues only when the cheap PD check fails.
    if sym.clone().cholesky().is_some() {
        return CovarianceMatrix::trusted(sym);
    }
    let eig = sym.symmetric_eigen();
    let clamped = eig.eigenvalues.map(|l| l.max(0.0));
    CovarianceMatrix::trusted(
        &eig.eigenvectors * Matrix::from_diagonal(&clamped) * eig.eigenvectors.transpose(),
    )
}

/// Propagate a posterior belief through the linearized dynamics.
///
/// Mean: `x_next + A (mu - x_k) + B (u - u_k)`; covariance:
/// `A S A^T + W Q W^T`, symmetrized.
pub fn prior_update(
    posterior: &Belief,
    step: &LinearizedStep,
    nominal_state: &Vector,
    nominal_control: &Vector,
    nominal_next: &Vector,
    control: &Vector,
    process_noise_cov: &CovarianceMatrix,
) -> Result<Belief> {
    let n = posterior.dim();
    if step.a.nrows() != n || step.a.ncols() != n {
        return Err(CilqgError::ShapeMismatch {
            context: "prior_update A",
            expected: format!("{n}x{n}"),
            got: format!("{}x{}", step.a.nrows(), step.a.ncols()),
        });
    }
    if step.b.nrows() != n || step.b.ncols() != control.len() {
        return Err(CilqgError::ShapeMismatch {
            context: "prior_update B",
            expected: format!("{n}x{}", control.len()),
            got: format!("{}x{}", step.b.nrows(), step.b.ncols()),
        });
    }
    if step.w.ncols() != process_noise_cov.dim() {
        return Err(CilqgError::ShapeMismatch {
            context: "prior_update W",
            expected: format!("cols {}", process_noise_cov.dim()),
            got: format!("cols {}", step.w.ncols()),
        });
    }
    let mean =
        nominal_next + &step.a * (&posterior.mean - nominal_state) + &step.b * (control - nominal_control);
    let cov = &step.a * posterior.covariance.matrix() * step.a.transpose()
        + &step.w * process_noise_cov.matrix() * step.w.transpose();
    Belief::new(mean, symmetrized_cov(cov))
}

/// Condition number limit beyond which the innovation is declared singular.
const INNOVATION_COND_LIMIT: f64 = 1e12;
/// Jitter added to a non-invertible innovation covariance.
const INNOVATION_JITTER: f64 = 1e-12;

fn invert_innovation(s: Matrix) -> Result<Matrix> {
    if let Some(chol) = s.clone().cholesky() {
        return Ok(chol.inverse());
    }
    // V vanishes at zero speed in the velocity-scaled measurement model, so
    // the innovation can be singular; regularize, then give up only if the
    // conditioning is still hopeless.
    let r = s.nrows();
    let regularized = s + Matrix::identity(r, r) * INNOVATION_JITTER;
    let eig = regularized.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    let cond = if min > 0.0 { max / min } else { f64::INFINITY };
    if cond > INNOVATION_COND_LIMIT {
        return Err(CilqgError::SingularInnovation { cond });
    }
    regularized
        .cholesky()
        .map(|c| c.inverse())
        .ok_or(CilqgError::SingularInnovation { cond })
}

/// Kalman measurement update on the linearized system.
///
/// The posterior mean equals the prior mean: planning replaces the unknown
/// measurement with its expectation, so only the covariance contracts.
/// `noise_cov` is the measurement-noise covariance mapped through `V`.
pub fn measurement_update(
    prior: &Belief,
    step: &LinearizedStep,
    noise_cov: &CovarianceMatrix,
    joseph_form: bool,
) -> Result<KalmanStep> {
    let n = prior.dim();
    let prior_cov = prior.covariance.matrix();
    let innovation = &step.h * prior_cov * step.h.transpose()
        + &step.v * noise_cov.matrix() * step.v.transpose();
    let inv = invert_innovation(innovation)?;
    let gain = prior_cov * step.h.transpose() * inv;
    let posterior = if joseph_form {
        let ikh = Matrix::identity(n, n) - &gain * &step.h;
        let vn = &step.v * noise_cov.matrix() * step.v.transpose();
        &ikh * prior_cov * ikh.transpose() + &gain * vn * gain.transpose()
    } else {
        (Matrix::identity(n, n) - &gain * &step.h) * prior_cov
    };
    Ok(KalmanStep {
        prior_cov: prior.covariance.clone(),
        gain,
        posterior_cov: symmetrized_cov(posterior),
    })
}

/// Options for [`propagate_variance`].
#[derive(Debug, Clone, Copy)]
pub struct PropagationOptions {
    /// Skip the measurement update (prior-only recursion).
    pub open_loop: bool,
    /// Use the Joseph form for the posterior covariance.
    pub joseph_form: bool,
}

impl Default for PropagationOptions {
    fn default() -> Self {
        Self {
            open_loop: false,
            joseph_form: false,
        }
    }
}

/// Run the variance recursion along a nominal trajectory: linearize at each
/// `(x_k, u_k)`, apply the prior update, then the measurement update.
/// Returns `N + 1` covariances with the initial one at index 0.
pub fn propagate_variance<M: StochasticModel>(
    model: &M,
    nominal: &NominalTrajectory,
    initial: &Belief,
    options: PropagationOptions,
) -> Result<VarianceSequence> {
    let n = model.state_dim();
    if initial.dim() != n {
        return Err(CilqgError::ShapeMismatch {
            context: "propagate_variance initial belief",
            expected: format!("dim {n}"),
            got: format!("dim {}", initial.dim()),
        });
    }
    let mut covariances = Vec::with_capacity(nominal.horizon() + 1);
    covariances.push(initial.covariance.clone());
    let mut belief = initial.clone();
    for k in 0..nominal.horizon() {
        let step = model.linearize(&nominal.states[k], &nominal.controls[k], &nominal.states[k + 1])?;
        let prior = prior_update(
            &belief,
            &step,
            &nominal.states[k],
            &nominal.controls[k],
            &nominal.states[k + 1],
            &nominal.controls[k],
            model.process_noise_cov(),
        )?;
        belief = if options.open_loop {
            prior
        } else {
            #[cfg(feature = "state-cov-innovation")]
            let noise = belief.covariance.clone();
            #[cfg(not(feature = "state-cov-innovation"))]
            let noise = model.measurement_noise_cov().clone();
            let kalman = measurement_update(&prior, &step, &noise, options.joseph_form)?;
            Belief::new(prior.mean, kalman.posterior_cov)?
        };
        covariances.push(belief.covariance.clone());
    }
    Ok(VarianceSequence { covariances })
}

/// Propagate the belief mean through the linearized dynamics for an
/// arbitrary control sequence: `m_{k+1} = x_{k+1} + A_k (m_k - x_k) + B_k (u_k - u_k_nom)`.
pub fn propagate_mean(
    nominal: &NominalTrajectory,
    initial_mean: &Vector,
    controls: &[Vector],
    steps: &[LinearizedStep],
) -> Result<Vec<Vector>> {
    if controls.len() != nominal.horizon() || steps.len() != nominal.horizon() {
        return Err(CilqgError::ShapeMismatch {
            context: "propagate_mean",
            expected: format!("{} controls/steps", nominal.horizon()),
            got: format!("{} controls, {} steps", controls.len(), steps.len()),
        });
    }
    let mut means = Vec::with_capacity(nominal.horizon() + 1);
    means.push(initial_mean.clone());
    for k in 0..nominal.horizon() {
        let next = &nominal.states[k + 1]
            + &steps[k].a * (&means[k] - &nominal.states[k])
            + &steps[k].b * (&controls[k] - &nominal.controls[k]);
        means.push(next);
    }
    Ok(means)
}
