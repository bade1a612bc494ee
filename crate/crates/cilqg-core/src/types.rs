//! Shared planning data types: Gaussian beliefs, covariance matrices with
//! enforced invariants, nominal trajectories and linearized system steps.
//!
//! All types are immutable values after construction and safe to share
//! between threads.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{CilqgError, Result};

/// Dense column vector used for states, controls and measurements.
pub type Vector = DVector<f64>;
/// Dense matrix used for Jacobians, gains and weights.
pub type Matrix = DMatrix<f64>;

/// Eigenvalues above this (negative) floor are accepted; values in
/// `[-PSD_TOL, 0)` are clamped to zero when factoring.
pub const PSD_TOL: f64 = 1e-9;

/// Symmetric positive-semidefinite matrix. Construction symmetrizes the
/// input as `(M + M^T)/2` and rejects matrices whose smallest eigenvalue
/// falls below `-PSD_TOL`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceMatrix(Matrix);

impl CovarianceMatrix {
    /// Symmetrize and validate a raw square matrix.
    pub fn new(raw: Matrix) -> Result<Self> {
        if raw.nrows() != raw.ncols() {
            return Err(CilqgError::NotSquare {
                rows: raw.nrows(),
                cols: raw.ncols(),
            });
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(CilqgError::Invariant(
                "covariance has non-finite entries".into(),
            ));
        }
        let sym = (&raw + raw.transpose()) * 0.5;
        // Cheap PD fast path; fall back to the eigenvalue check for the
        // semidefinite boundary.
        if sym.clone().cholesky().is_some() {
            return Ok(Self(sym));
        }
        let min_eig = min_eigenvalue(&sym);
        if min_eig < -PSD_TOL {
            return Err(CilqgError::NotPsd { min_eig });
        }
        Ok(Self(sym))
    }

    /// Wrap a matrix already known to be symmetric PSD (internal fast path).
    pub(crate) fn trusted(sym: Matrix) -> Self {
        Self(sym)
    }

    /// Zero covariance of the given dimension.
    pub fn zeros(dim: usize) -> Self {
        Self(Matrix::zeros(dim, dim))
    }

    /// Identity scaled by `scale`.
    pub fn scaled_identity(dim: usize, scale: f64) -> Self {
        Self(Matrix::identity(dim, dim) * scale)
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    /// Factor `L` with `L L^T = Σ` (eigenvalues clamped at zero). Works for
    /// singular covariances, where a plain Cholesky would fail.
    pub fn factor(&self) -> Matrix {
        if let Some(chol) = self.0.clone().cholesky() {
            return chol.l();
        }
        let eig = self.0.clone().symmetric_eigen();
        let sqrt_vals = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
        &eig.eigenvectors * Matrix::from_diagonal(&sqrt_vals)
    }

    /// Symmetric square root `S` with `S S = Σ`.
    pub fn sqrt(&self) -> Matrix {
        let eig = self.0.clone().symmetric_eigen();
        let sqrt_vals = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
        &eig.eigenvectors * Matrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose()
    }
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &Matrix) -> f64 {
    m.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |a, &b| a.min(b))
}

/// Builds a [`CovarianceMatrix`] from a raw square matrix, symmetrizing as
/// `(M + M^T)/2` and rejecting indefinite input.
pub fn make_covariance(raw: Matrix) -> Result<CovarianceMatrix> {
    CovarianceMatrix::new(raw)
}

/// Gaussian state estimate: mean and covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct Belief {
    pub mean: Vector,
    pub covariance: CovarianceMatrix,
}

impl Belief {
    pub fn new(mean: Vector, covariance: CovarianceMatrix) -> Result<Self> {
        if mean.len() != covariance.dim() {
            return Err(CilqgError::ShapeMismatch {
                context: "belief",
                expected: format!("covariance {0}x{0}", mean.len()),
                got: format!("{0}x{0}", covariance.dim()),
            });
        }
        Ok(Self { mean, covariance })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Paired state/control sequences; `states.len() == controls.len() + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NominalTrajectory {
    pub states: Vec<Vector>,
    pub controls: Vec<Vector>,
}

impl NominalTrajectory {
    pub fn new(states: Vec<Vector>, controls: Vec<Vector>) -> Result<Self> {
        if states.len() != controls.len() + 1 {
            return Err(CilqgError::ShapeMismatch {
                context: "nominal trajectory",
                expected: format!("{} states", controls.len() + 1),
                got: format!("{} states", states.len()),
            });
        }
        Ok(Self { states, controls })
    }

    /// Number of control steps N.
    pub fn horizon(&self) -> usize {
        self.controls.len()
    }
}

/// Per-timestep linearization of the stochastic system: dynamics Jacobians
/// `A`, `B`, `W` and measurement Jacobians `H`, `V` at the next step.
#[derive(Debug, Clone)]
pub struct LinearizedStep {
    pub a: Matrix,
    pub b: Matrix,
    pub w: Matrix,
    pub h: Matrix,
    pub v: Matrix,
}

/// Axis-aligned description of a confidence ellipse over two state axes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfidenceEllipse {
    pub center: [f64; 2],
    /// Semi-axis lengths, major first.
    pub semi_axes: [f64; 2],
    /// Rotation of the major axis from the first chosen axis [rad].
    pub rotation: f64,
}

impl ConfidenceEllipse {
    /// Points on the ellipse boundary, counterclockwise.
    pub fn polyline(&self, samples: usize) -> Vec<[f64; 2]> {
        let (sin_r, cos_r) = self.rotation.sin_cos();
        (0..samples)
            .map(|i| {
                let t = 2.0 * std::f64::consts::PI * i as f64 / samples as f64;
                let (ex, ey) = (self.semi_axes[0] * t.cos(), self.semi_axes[1] * t.sin());
                [
                    self.center[0] + cos_r * ex - sin_r * ey,
                    self.center[1] + sin_r * ex + cos_r * ey,
                ]
            })
            .collect()
    }
}

/// Quantile of the chi-square distribution with two degrees of freedom,
/// from the closed-form CDF `1 - exp(-x/2)`. This is the scaling convention
/// used for all confidence ellipses in this crate.
pub fn chi2_quantile_2dof(p: f64) -> f64 {
    -2.0 * (1.0 - p).ln()
}

/// Confidence region of a belief with coverage probability `p`, restricted
/// to the two state axes in `axes`.
pub fn confidence_ellipse(belief: &Belief, p: f64, axes: (usize, usize)) -> Result<ConfidenceEllipse> {
    if !(p > 0.0 && p < 1.0) {
        return Err(CilqgError::BadProbability { p, range: "(0, 1)" });
    }
    let n = belief.dim();
    if axes.0 >= n || axes.1 >= n {
        return Err(CilqgError::BadParams(format!(
            "ellipse axes ({}, {}) out of range for dimension {n}",
            axes.0, axes.1
        )));
    }
    let cov = belief.covariance.matrix();
    let sub = Matrix::from_row_slice(
        2,
        2,
        &[
            cov[(axes.0, axes.0)],
            cov[(axes.0, axes.1)],
            cov[(axes.1, axes.0)],
            cov[(axes.1, axes.1)],
        ],
    );
    let eig = sub.symmetric_eigen();
    let scale = chi2_quantile_2dof(p);
    // Order eigenpairs so the major axis comes first.
    let (major, minor) = if eig.eigenvalues[0] >= eig.eigenvalues[1] {
        (0, 1)
    } else {
        (1, 0)
    };
    let lam_major = eig.eigenvalues[major].max(0.0);
    let lam_minor = eig.eigenvalues[minor].max(0.0);
    Ok(ConfidenceEllipse {
        center: [belief.mean[axes.0], belief.mean[axes.1]],
        semi_axes: [(scale * lam_major).sqrt(), (scale * lam_minor).sqrt()],
        rotation: eig.eigenvectors[(1, major)].atan2(eig.eigenvectors[(0, major)]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn identity_is_fixed_point() {
        let m = Matrix::identity(4, 4);
        let cov = make_covariance(m.clone()).unwrap();
        assert_eq!(cov.matrix(), &m);
    }

    #[test]
    fn construction_symmetrizes() {
        let raw = Matrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        let cov = make_covariance(raw).unwrap();
        let expected = Matrix::from_row_slice(2, 2, &[1.0, 0.05, 0.05, 1.0]);
        assert_eq!(cov.matrix(), &expected);
    }

    #[test]
    fn indefinite_rejected() {
        let raw = Matrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, 1.0]);
        match make_covariance(raw) {
            Err(CilqgError::NotPsd { min_eig }) => assert_relative_eq!(min_eig, -1.0, epsilon = 1e-12),
            other => panic!("expected NotPsd, got {other:?}"),
        }
    }

    #[test]
    fn non_square_rejected() {
        let raw = Matrix::zeros(2, 3);
        assert!(matches!(make_covariance(raw), Err(CilqgError::NotSquare { .. })));
    }

    #[test]
    fn chi2_quantile_matches_bisection() {
        // Independent oracle: bisection on the 2-DOF chi-square CDF.
        let cdf = |x: f64| 1.0 - (-x / 2.0).exp();
        for &p in &[0.5, 0.9, 0.98, 0.999] {
            let (mut lo, mut hi) = (0.0, 100.0);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if cdf(mid) < p {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            assert_relative_eq!(chi2_quantile_2dof(p), 0.5 * (lo + hi), epsilon = 1e-10);
        }
    }

    fn unit_belief() -> Belief {
        Belief::new(
            Vector::zeros(2),
            CovarianceMatrix::scaled_identity(2, 1.0),
        )
        .unwrap()
    }

    #[test]
    fn ellipse_unit_cov_is_circle() {
        let e = confidence_ellipse(&unit_belief(), 0.98, (0, 1)).unwrap();
        let radius = chi2_quantile_2dof(0.98).sqrt();
        assert_relative_eq!(radius, 2.7971, epsilon = 1e-4);
        assert_relative_eq!(e.semi_axes[0], radius, epsilon = 1e-12);
        assert_relative_eq!(e.semi_axes[1], radius, epsilon = 1e-12);
    }

    #[test]
    fn ellipse_degenerate_probability() {
        let e = confidence_ellipse(&unit_belief(), 1e-12, (0, 1)).unwrap();
        assert!(e.semi_axes[0] < 1e-5);
        assert!(confidence_ellipse(&unit_belief(), 0.0, (0, 1)).is_err());
        assert!(confidence_ellipse(&unit_belief(), 1.0, (0, 1)).is_err());
    }

    #[test]
    fn ellipse_diagonal_cov() {
        let belief = Belief::new(
            Vector::zeros(2),
            make_covariance(Matrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 1.0])).unwrap(),
        )
        .unwrap();
        let e = confidence_ellipse(&belief, 0.98, (0, 1)).unwrap();
        let r = chi2_quantile_2dof(0.98).sqrt();
        assert_relative_eq!(e.semi_axes[0], 2.0 * r, epsilon = 1e-12);
        assert_relative_eq!(e.semi_axes[1], r, epsilon = 1e-12);
        // Major axis along x.
        assert!(e.rotation.abs() < 1e-12 || (e.rotation.abs() - std::f64::consts::PI).abs() < 1e-12);
    }

    #[test]
    fn ellipse_monte_carlo_coverage() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let cov = make_covariance(Matrix::from_row_slice(2, 2, &[2.0, 0.7, 0.7, 1.0])).unwrap();
        let factor = cov.factor();
        let belief = Belief::new(Vector::zeros(2), cov.clone()).unwrap();
        let p = 0.9;
        let e = confidence_ellipse(&belief, p, (0, 1)).unwrap();
        // Count samples inside the ellipse via the quadratic form.
        let inv = cov.matrix().clone().try_inverse().unwrap();
        let threshold = chi2_quantile_2dof(p);
        let trials = 100_000;
        let mut inside = 0usize;
        for _ in 0..trials {
            let z = Vector::from_fn(2, |_, _| StandardNormal.sample(&mut rng));
            let x = &factor * z;
            if (x.transpose() * &inv * &x)[(0, 0)] <= threshold {
                inside += 1;
            }
        }
        let frac = inside as f64 / trials as f64;
        assert!((frac - p).abs() < 0.01, "coverage {frac} vs requested {p}");
        // Sanity: the polyline boundary matches the quadratic form.
        for pt in e.polyline(16) {
            let x = Vector::from_row_slice(&[pt[0], pt[1]]);
            assert_relative_eq!((x.transpose() * &inv * &x)[(0, 0)], threshold, epsilon = 1e-9);
        }
    }

    proptest! {
        #[test]
        fn covariance_always_symmetric(vals in proptest::collection::vec(-10.0f64..10.0, 9)) {
            let raw = Matrix::from_row_slice(3, 3, &vals);
            if let Ok(cov) = make_covariance(raw) {
                let m = cov.matrix();
                let asym = (m - m.transpose()).abs().max();
                prop_assert_eq!(asym, 0.0);
                prop_assert!(min_eigenvalue(m) >= -PSD_TOL);
            }
        }

        #[test]
        fn ellipse_monotone_in_p(p1 in 0.01f64..0.98, dp in 0.001f64..0.01) {
            let p2 = p1 + dp;
            let belief = Belief::new(
                Vector::zeros(2),
                make_covariance(Matrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 2.0])).unwrap(),
            ).unwrap();
            let e1 = confidence_ellipse(&belief, p1, (0, 1)).unwrap();
            let e2 = confidence_ellipse(&belief, p2, (0, 1)).unwrap();
            prop_assert!(e1.semi_axes[0] <= e2.semi_axes[0]);
            prop_assert!(e1.semi_axes[1] <= e2.semi_axes[1]);
        }
    }
}
