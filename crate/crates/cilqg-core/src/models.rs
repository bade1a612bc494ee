//! Nonlinear stochastic dynamics and measurement models.
//!
//! [`StochasticModel`] is the generic interface the belief propagation and
//! the solver work against; [`BicycleModel`] is the kinematic vehicle model
//! used by the driving scenarios. Linearization is analytic for the bicycle
//! model; finite differences are kept as a test oracle only.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{CilqgError, Result};
use crate::types::{CovarianceMatrix, LinearizedStep, Matrix, Vector};

/// Nonlinear stochastic system `x' = f(x, u, w)`, `y = h(x, v)` with
/// Gaussian noise. Evaluation and linearization are pure functions.
pub trait StochasticModel {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn process_noise_dim(&self) -> usize;
    fn measurement_dim(&self) -> usize;
    fn measurement_noise_dim(&self) -> usize;

    fn process_noise_cov(&self) -> &CovarianceMatrix;
    fn measurement_noise_cov(&self) -> &CovarianceMatrix;

    /// One dynamics step `f(x, u, w)`.
    fn step(&self, x: &Vector, u: &Vector, w: &Vector) -> Result<Vector>;

    /// Measurement `h(x, v)`.
    fn measure(&self, x: &Vector, v: &Vector) -> Vector;

    /// Jacobians `(A, B, W)` of `f` at `(x, u, w=0)`.
    fn linearize_dynamics(&self, x: &Vector, u: &Vector) -> Result<(Matrix, Matrix, Matrix)>;

    /// Jacobians `(H, V)` of `h` at `(x, v=0)`.
    fn linearize_measurement(&self, x: &Vector) -> (Matrix, Matrix);

    /// Full linearization around a nominal point, bundling dynamics
    /// Jacobians at `(x, u)` with measurement Jacobians at the successor
    /// state `x_next`.
    fn linearize(&self, x: &Vector, u: &Vector, x_next: &Vector) -> Result<LinearizedStep> {
        let (a, b, w) = self.linearize_dynamics(x, u)?;
        let (h, v) = self.linearize_measurement(x_next);
        Ok(LinearizedStep { a, b, w, h, v })
    }
}

/// Parameters of the kinematic bicycle model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BicycleParams {
    /// Wheelbase [m].
    pub wheelbase: f64,
    /// Sampling time [s].
    pub sampling_time: f64,
    /// Process noise covariance over (w_a [m/s^2], w_kappa [1/m]).
    pub process_noise_cov: CovarianceMatrix,
    /// Measurement noise covariance (state-dimensional).
    pub measurement_noise_cov: CovarianceMatrix,
}

impl BicycleParams {
    pub fn validate(&self) -> Result<()> {
        if self.wheelbase <= 0.0 {
            return Err(CilqgError::BadParams("wheelbase must be positive".into()));
        }
        if self.sampling_time <= 0.0 {
            return Err(CilqgError::BadParams("sampling_time must be positive".into()));
        }
        if self.process_noise_cov.dim() != 2 {
            return Err(CilqgError::BadParams(
                "process_noise_cov must be 2x2 (acceleration, curvature channels)".into(),
            ));
        }
        if self.measurement_noise_cov.dim() != BicycleModel::STATE_DIM {
            return Err(CilqgError::BadParams(
                "measurement_noise_cov must be 4x4".into(),
            ));
        }
        Ok(())
    }
}

/// Kinematic bicycle model. State `(px, py, v, theta)`, control
/// `(a, delta)`, process noise `(w_a, w_kappa)` injected into acceleration
/// and curvature. The measurement is the state plus noise scaled by the
/// scalar speed.
#[derive(Debug, Clone)]
pub struct BicycleModel {
    pub params: BicycleParams,
}

/// State vector layout of the bicycle model.
pub mod state_index {
    pub const PX: usize = 0;
    pub const PY: usize = 1;
    pub const V: usize = 2;
    pub const THETA: usize = 3;
}

/// Control vector layout of the bicycle model.
pub mod control_index {
    pub const ACCEL: usize = 0;
    pub const STEER: usize = 1;
}

/// Below this value of |kappa * d| the arc integrals switch to series
/// expansions of sinc-type kernels; the closed forms use half-angle
/// products, which stay cancellation-free on either side of the switch.
const ARC_SERIES_THRESHOLD: f64 = 1e-8;

/// sin(x)/x with a series fallback near zero.
fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        let x2 = x * x;
        1.0 - x2 / 6.0 + x2 * x2 / 120.0
    } else {
        x.sin() / x
    }
}

/// Displacement over an arc of length `d` with constant curvature `kappa`
/// starting at heading `theta`:
/// `(∫ cos(theta + kappa s) ds, ∫ sin(theta + kappa s) ds)` over `[0, d]`.
///
/// Written with half-angle products so small `kappa * d` loses no
/// precision to cancellation.
fn arc_displacement(theta: f64, kappa: f64, d: f64) -> (f64, f64) {
    let psi = kappa * d;
    if psi.abs() <= ARC_SERIES_THRESHOLD {
        // Series in psi: d*(cos - psi/2 sin - psi^2/6 cos, sin + psi/2 cos - psi^2/6 sin).
        let (s, c) = theta.sin_cos();
        let dx = d * (c - 0.5 * psi * s - psi * psi / 6.0 * c);
        let dy = d * (s + 0.5 * psi * c - psi * psi / 6.0 * s);
        (dx, dy)
    } else {
        let half = 0.5 * psi;
        let k = d * sinc(half);
        let (s, c) = (theta + half).sin_cos();
        (k * c, k * s)
    }
}

/// First-moment arc kernels `(∫ s cos(theta + kappa s) ds, ∫ s sin(theta + kappa s) ds)`
/// over `[0, d]`; these are the curvature sensitivities of [`arc_displacement`].
fn arc_first_moment(theta: f64, kappa: f64, d: f64) -> (f64, f64) {
    let psi = kappa * d;
    let d2 = d * d;
    if psi.abs() < 1e-4 {
        let (s, c) = theta.sin_cos();
        let even = 0.5 - psi * psi / 8.0;
        let odd = psi / 3.0 - psi * psi * psi / 30.0;
        (d2 * (c * even - s * odd), d2 * (s * even + c * odd))
    } else {
        let (s_end, c_end) = (theta + psi).sin_cos();
        let half = 0.5 * psi;
        // cos(theta+psi) - cos(theta) = -2 sin(theta+psi/2) sin(psi/2), and the
        // sine analog, keep the 1/psi^2 terms well conditioned.
        let jc = d2 * (s_end / psi - 2.0 * (theta + half).sin() * half.sin() / (psi * psi));
        let js = d2 * (-c_end / psi + 2.0 * (theta + half).cos() * half.sin() / (psi * psi));
        (jc, js)
    }
}

impl BicycleModel {
    pub const STATE_DIM: usize = 4;
    pub const CONTROL_DIM: usize = 2;

    pub fn new(params: BicycleParams) -> Result<Self> {
        params.validate()?;
        Ok(Self { params })
    }

    fn check_steering(&self, delta: f64) -> Result<()> {
        if delta.abs() >= std::f64::consts::FRAC_PI_2 {
            return Err(CilqgError::Domain(format!(
                "steering angle {delta:.4} rad outside (-pi/2, pi/2)"
            )));
        }
        Ok(())
    }
}

impl StochasticModel for BicycleModel {
    fn state_dim(&self) -> usize {
        Self::STATE_DIM
    }
    fn control_dim(&self) -> usize {
        Self::CONTROL_DIM
    }
    fn process_noise_dim(&self) -> usize {
        2
    }
    fn measurement_dim(&self) -> usize {
        Self::STATE_DIM
    }
    fn measurement_noise_dim(&self) -> usize {
        Self::STATE_DIM
    }

    fn process_noise_cov(&self) -> &CovarianceMatrix {
        &self.params.process_noise_cov
    }
    fn measurement_noise_cov(&self) -> &CovarianceMatrix {
        &self.params.measurement_noise_cov
    }

    fn step(&self, x: &Vector, u: &Vector, w: &Vector) -> Result<Vector> {
        use control_index::*;
        use state_index::*;
        let delta = u[STEER];
        self.check_steering(delta)?;
        let tr = self.params.sampling_time;
        let accel = u[ACCEL] + w[0];
        let kappa = delta.tan() / self.params.wheelbase + w[1];
        // Noisy acceleration enters both the velocity update and the travel
        // distance, so the injected noise acts on one physical quantity.
        let d = x[V] * tr + 0.5 * accel * tr * tr;
        let (dx, dy) = arc_displacement(x[THETA], kappa, d);
        Ok(Vector::from_row_slice(&[
            x[PX] + dx,
            x[PY] + dy,
            x[V] + accel * tr,
            x[THETA] + kappa * d,
        ]))
    }

    fn measure(&self, x: &Vector, v: &Vector) -> Vector {
        x + v * x[state_index::V]
    }

    fn linearize_dynamics(&self, x: &Vector, u: &Vector) -> Result<(Matrix, Matrix, Matrix)> {
        use control_index::*;
        use state_index::*;
        let delta = u[STEER];
        self.check_steering(delta)?;
        let tr = self.params.sampling_time;
        let l = self.params.wheelbase;
        let tan_d = delta.tan();
        let kappa = tan_d / l;
        let d = x[V] * tr + 0.5 * u[ACCEL] * tr * tr;
        let theta = x[THETA];
        let psi = kappa * d;
        let (sin_end, cos_end) = (theta + psi).sin_cos();
        let (ic, is) = arc_displacement(theta, kappa, d);
        let (jc, js) = arc_first_moment(theta, kappa, d);
        // Sensitivities of (d, kappa) to inputs.
        let d_da = 0.5 * tr * tr;
        let dkappa_ddelta = (1.0 + tan_d * tan_d) / l;

        let mut a = Matrix::identity(4, 4);
        a[(PX, V)] = cos_end * tr;
        a[(PX, THETA)] = -is;
        a[(PY, V)] = sin_end * tr;
        a[(PY, THETA)] = ic;
        a[(THETA, V)] = kappa * tr;

        let mut b = Matrix::zeros(4, 2);
        b[(PX, ACCEL)] = cos_end * d_da;
        b[(PX, STEER)] = -js * dkappa_ddelta;
        b[(PY, ACCEL)] = sin_end * d_da;
        b[(PY, STEER)] = jc * dkappa_ddelta;
        b[(V, ACCEL)] = tr;
        b[(THETA, ACCEL)] = kappa * d_da;
        b[(THETA, STEER)] = d * dkappa_ddelta;

        // w_a enters exactly like the commanded acceleration; w_kappa adds
        // directly to the curvature.
        let mut w = Matrix::zeros(4, 2);
        w[(PX, 0)] = cos_end * d_da;
        w[(PX, 1)] = -js;
        w[(PY, 0)] = sin_end * d_da;
        w[(PY, 1)] = jc;
        w[(V, 0)] = tr;
        w[(THETA, 0)] = kappa * d_da;
        w[(THETA, 1)] = d;

        Ok((a, b, w))
    }

    fn linearize_measurement(&self, x: &Vector) -> (Matrix, Matrix) {
        let n = Self::STATE_DIM;
        (
            Matrix::identity(n, n),
            Matrix::identity(n, n) * x[state_index::V],
        )
    }
}

/// Draw one zero-mean Gaussian sample with the given covariance.
pub fn sample_gaussian<R: Rng + ?Sized>(rng: &mut R, cov: &CovarianceMatrix) -> Vector {
    let factor = cov.factor();
    let z = DVector::from_fn(cov.dim(), |_, _| StandardNormal.sample(rng));
    factor * z
}

/// Linear test system `x' = A x + B u + W w`, `y = H x + V v`; useful for
/// exercising the belief-propagation and solver plumbing on systems with a
/// known closed form.
#[derive(Debug, Clone)]
pub struct LinearModel {
    pub a: Matrix,
    pub b: Matrix,
    pub w: Matrix,
    pub h: Matrix,
    pub v: Matrix,
    pub process_noise_cov: CovarianceMatrix,
    pub measurement_noise_cov: CovarianceMatrix,
}

impl LinearModel {
    /// Additive-noise identity-measurement system with the given dynamics.
    pub fn new(
        a: Matrix,
        b: Matrix,
        w: Matrix,
        process_noise_cov: CovarianceMatrix,
        measurement_noise_cov: CovarianceMatrix,
    ) -> Self {
        let n = a.nrows();
        Self {
            h: Matrix::identity(n, n),
            v: Matrix::identity(n, n),
            a,
            b,
            w,
            process_noise_cov,
            measurement_noise_cov,
        }
    }
}

impl StochasticModel for LinearModel {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }
    fn control_dim(&self) -> usize {
        self.b.ncols()
    }
    fn process_noise_dim(&self) -> usize {
        self.w.ncols()
    }
    fn measurement_dim(&self) -> usize {
        self.h.nrows()
    }
    fn measurement_noise_dim(&self) -> usize {
        self.v.ncols()
    }

    fn process_noise_cov(&self) -> &CovarianceMatrix {
        &self.process_noise_cov
    }
    fn measurement_noise_cov(&self) -> &CovarianceMatrix {
        &self.measurement_noise_cov
    }

    fn step(&self, x: &Vector, u: &Vector, w: &Vector) -> Result<Vector> {
        Ok(&self.a * x + &self.b * u + &self.w * w)
    }

    fn measure(&self, x: &Vector, v: &Vector) -> Vector {
        &self.h * x + &self.v * v
    }

    fn linearize_dynamics(&self, _x: &Vector, _u: &Vector) -> Result<(Matrix, Matrix, Matrix)> {
        Ok((self.a.clone(), self.b.clone(), self.w.clone()))
    }

    fn linearize_measurement(&self, _x: &Vector) -> (Matrix, Matrix) {
        (self.h.clone(), self.v.clone())
    }
}

/// Central finite-difference Jacobian of `f` at `x0`, used as a test oracle
/// against the analytic linearizations.
pub fn finite_difference_jacobian<F>(f: F, x0: &Vector, out_dim: usize, h: f64) -> Matrix
where
    F: Fn(&Vector) -> Vector,
{
    let mut jac = DMatrix::zeros(out_dim, x0.len());
    for j in 0..x0.len() {
        let mut plus = x0.clone();
        let mut minus = x0.clone();
        plus[j] += h;
        minus[j] -= h;
        let df = (f(&plus) - f(&minus)) / (2.0 * h);
        jac.set_column(j, &df);
    }
    jac
}
