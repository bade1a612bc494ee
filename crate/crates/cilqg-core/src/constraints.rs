//! Chance-constraint transformation and collision-avoidance geometry.
//!
//! A nonlinear constraint `g(x) <= 0` that must hold with probability `p`
//! is linearized around the nominal state, split into deterministic and
//! stochastic parts and tightened by a back-off `gamma` computed from the
//! Gaussian tail, leaving a deterministic linear constraint
//! `G z <= -m - gamma`. Collision constraints come from convex feasible
//! sets of polygon obstacles or from distance constraints against
//! uncertain moving obstacles.

use nalgebra::RowDVector;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf_inv;

use crate::error::{CilqgError, Result};
use crate::types::{CovarianceMatrix, Matrix, Vector};

/// Which decision variable a transformed constraint acts on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConstraintKind {
    State,
    Control,
}

/// Where a transformed constraint came from, for diagnostics and artifact
/// labeling.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConstraintSource {
    StaticObstacle(usize),
    DynamicObstacle(usize),
    ControlLower(usize),
    ControlUpper(usize),
    Custom(String),
}

impl ConstraintSource {
    pub fn label(&self) -> String {
        match self {
            Self::StaticObstacle(i) => format!("static_obstacle_{i}"),
            Self::DynamicObstacle(i) => format!("dynamic_obstacle_{i}"),
            Self::ControlLower(c) => format!("control_lower_{c}"),
            Self::ControlUpper(c) => format!("control_upper_{c}"),
            Self::Custom(s) => s.clone(),
        }
    }
}

/// Deterministic linear constraint `G z + m + gamma <= 0` obtained from a
/// chance constraint. `gamma >= 0` whenever `p >= 0.5`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearChanceConstraint {
    pub row: RowDVector<f64>,
    pub offset: f64,
    pub gamma: f64,
    pub kind: ConstraintKind,
    pub source: ConstraintSource,
}

impl LinearChanceConstraint {
    /// Tightened left-hand side `G z + m + gamma`; feasible iff negative.
    pub fn value(&self, z: &Vector) -> f64 {
        (&self.row * z)[0] + self.offset + self.gamma
    }

    /// Raw linearized value `G z + m` without the tightening.
    pub fn raw_value(&self, z: &Vector) -> f64 {
        (&self.row * z)[0] + self.offset
    }
}

/// Linearize `g` at `x0`: returns `(G, m)` with `G = dg/dx` and
/// `m = g(x0) - G x0`, so `G x + m` is the first-order expansion of `g`.
pub fn linearize_constraint<F>(g: F, x0: &Vector) -> Result<(RowDVector<f64>, f64)>
where
    F: Fn(&Vector) -> f64,
{
    let h = 1e-7;
    let mut grad = RowDVector::zeros(x0.len());
    for j in 0..x0.len() {
        let mut plus = x0.clone();
        let mut minus = x0.clone();
        plus[j] += h;
        minus[j] -= h;
        grad[j] = (g(&plus) - g(&minus)) / (2.0 * h);
    }
    let value = g(x0);
    if !value.is_finite() || grad.iter().any(|v| !v.is_finite()) {
        return Err(CilqgError::NonFiniteGradient);
    }
    let offset = value - (&grad * x0)[0];
    Ok((grad, offset))
}

/// Build `(G, m)` directly from a known gradient and constraint value.
pub fn linearization_from_gradient(
    grad: RowDVector<f64>,
    value: f64,
    x0: &Vector,
) -> Result<(RowDVector<f64>, f64)> {
    if !value.is_finite() || grad.iter().any(|v| !v.is_finite()) {
        return Err(CilqgError::NonFiniteGradient);
    }
    let offset = value - (&grad * x0)[0];
    Ok((grad, offset))
}

/// Tightening back-off for a scalar linear-Gaussian constraint:
/// `gamma = sqrt(2 G S G^T) * erf_inv(2p - 1)`.
pub fn compute_gamma(row: &RowDVector<f64>, cov: &CovarianceMatrix, p: f64) -> Result<f64> {
    if !(0.5..1.0).contains(&p) {
        return Err(CilqgError::BadProbability { p, range: "[0.5, 1)" });
    }
    let variance = quadratic_form(row, cov.matrix());
    Ok((2.0 * variance.max(0.0)).sqrt() * erf_inv(2.0 * p - 1.0))
}

fn quadratic_form(row: &RowDVector<f64>, m: &Matrix) -> f64 {
    (row * m * row.transpose())[0]
}

/// Transform the chance constraint `Pr(g(x) <= 0) >= p` into a
/// [`LinearChanceConstraint`] by linearizing `g` at `x0` and tightening
/// against the Gaussian covariance `cov`.
pub fn transform_chance_constraint<F>(
    g: F,
    x0: &Vector,
    cov: &CovarianceMatrix,
    p: f64,
    kind: ConstraintKind,
    source: ConstraintSource,
) -> Result<LinearChanceConstraint>
where
    F: Fn(&Vector) -> f64,
{
    let (row, offset) = linearize_constraint(g, x0)?;
    let gamma = compute_gamma(&row, cov, p)?;
    Ok(LinearChanceConstraint {
        row,
        offset,
        gamma,
        kind,
        source,
    })
}

/// Convex polygon obstacle in the plane, vertices stored counterclockwise,
/// inflated by a safety-margin band of width `inflation`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvexPolygonObstacle {
    vertices: Vec<[f64; 2]>,
    pub inflation: f64,
}

impl ConvexPolygonObstacle {
    pub fn new(mut vertices: Vec<[f64; 2]>, inflation: f64) -> Result<Self> {
        if vertices.len() < 3 {
            return Err(CilqgError::Invariant(format!(
                "polygon needs at least 3 vertices, got {}",
                vertices.len()
            )));
        }
        if inflation < 0.0 {
            return Err(CilqgError::Invariant("polygon inflation must be >= 0".into()));
        }
        let area = signed_area(&vertices);
        if area.abs() < 1e-12 {
            return Err(CilqgError::Invariant("polygon is degenerate (zero area)".into()));
        }
        if area < 0.0 {
            vertices.reverse();
        }
        // Convexity: every cross product of consecutive edges stays positive
        // once the order is counterclockwise.
        let n = vertices.len();
        for i in 0..n {
            let a = vertices[i];
            let b = vertices[(i + 1) % n];
            let c = vertices[(i + 2) % n];
            let cross = (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0]);
            if cross <= 0.0 {
                return Err(CilqgError::Invariant(format!(
                    "polygon is not strictly convex at vertex {}",
                    (i + 1) % n
                )));
            }
        }
        Ok(Self { vertices, inflation })
    }

    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }

    pub fn contains(&self, point: [f64; 2]) -> bool {
        let n = self.vertices.len();
        (0..n).all(|i| {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            (b[0] - a[0]) * (point[1] - a[1]) - (b[1] - a[1]) * (point[0] - a[0]) >= 0.0
        })
    }

    /// Axis-aligned bounding box `(min, max)` of the raw polygon.
    pub fn bounding_box(&self) -> ([f64; 2], [f64; 2]) {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for v in &self.vertices {
            for d in 0..2 {
                lo[d] = lo[d].min(v[d]);
                hi[d] = hi[d].max(v[d]);
            }
        }
        (lo, hi)
    }
}

fn signed_area(vertices: &[[f64; 2]]) -> f64 {
    let n = vertices.len();
    0.5 * (0..n)
        .map(|i| {
            let a = vertices[i];
            let b = vertices[(i + 1) % n];
            a[0] * b[1] - b[0] * a[1]
        })
        .sum::<f64>()
}

fn point_segment_closest(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> ([f64; 2], f64) {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let c = [a[0] + t * ab[0], a[1] + t * ab[1]];
    let d = ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt();
    (c, d)
}

/// Signed distance from `point` to the polygon boundary (positive outside,
/// negative inside) together with the unit outward gradient. Where several
/// boundary points are equally close (vertices, medial axis) the gradient
/// is the normalized average of the candidate directions, a deterministic
/// subgradient choice.
pub fn signed_distance(poly: &ConvexPolygonObstacle, point: [f64; 2]) -> (f64, [f64; 2]) {
    let verts = poly.vertices();
    let n = verts.len();
    let mut best = f64::INFINITY;
    let mut dirs: Vec<[f64; 2]> = Vec::new();
    let inside = poly.contains(point);
    for i in 0..n {
        let (closest, dist) = point_segment_closest(point, verts[i], verts[(i + 1) % n]);
        if dist < best - 1e-12 {
            best = dist;
            dirs.clear();
        }
        if (dist - best).abs() <= 1e-12 {
            let raw = if inside {
                [closest[0] - point[0], closest[1] - point[1]]
            } else {
                [point[0] - closest[0], point[1] - closest[1]]
            };
            let norm = (raw[0] * raw[0] + raw[1] * raw[1]).sqrt();
            if norm > 1e-12 {
                dirs.push([raw[0] / norm, raw[1] / norm]);
            } else {
                // Query point sits on the boundary: use the outward edge normal.
                let a = verts[i];
                let b = verts[(i + 1) % n];
                let e = [b[0] - a[0], b[1] - a[1]];
                let len = (e[0] * e[0] + e[1] * e[1]).sqrt();
                dirs.push([e[1] / len, -e[0] / len]);
            }
        }
    }
    let mut g = [0.0, 0.0];
    for d in &dirs {
        g[0] += d[0];
        g[1] += d[1];
    }
    let norm = (g[0] * g[0] + g[1] * g[1]).sqrt();
    if norm > 1e-12 {
        g = [g[0] / norm, g[1] / norm];
    }
    (if inside { -best } else { best }, g)
}

fn segments_intersect(a1: [f64; 2], a2: [f64; 2], b1: [f64; 2], b2: [f64; 2]) -> bool {
    let orient = |p: [f64; 2], q: [f64; 2], r: [f64; 2]| {
        (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0])
    };
    let d1 = orient(b1, b2, a1);
    let d2 = orient(b1, b2, a2);
    let d3 = orient(a1, a2, b1);
    let d4 = orient(a1, a2, b2);
    (d1 * d2 < 0.0) && (d3 * d4 < 0.0)
}

/// Euclidean distance between two convex polygons; zero when they touch or
/// overlap.
pub fn polygon_distance(a: &ConvexPolygonObstacle, b: &ConvexPolygonObstacle) -> f64 {
    if a.vertices().iter().any(|&v| b.contains(v)) || b.vertices().iter().any(|&v| a.contains(v)) {
        return 0.0;
    }
    let edges = |p: &ConvexPolygonObstacle| {
        let v = p.vertices();
        (0..v.len()).map(move |i| (v[i], v[(i + 1) % v.len()])).collect::<Vec<_>>()
    };
    let mut best = f64::INFINITY;
    for (a1, a2) in edges(a) {
        for (b1, b2) in edges(b) {
            if segments_intersect(a1, a2, b1, b2) {
                return 0.0;
            }
            best = best.min(point_segment_closest(a1, b1, b2).1);
            best = best.min(point_segment_closest(a2, b1, b2).1);
            best = best.min(point_segment_closest(b1, a1, a2).1);
            best = best.min(point_segment_closest(b2, a1, a2).1);
        }
    }
    best
}

/// Half-space `{x : a . x <= b}` in the plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HalfSpace {
    pub normal: [f64; 2],
    pub bound: f64,
}

impl HalfSpace {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        self.normal[0] * p[0] + self.normal[1] * p[1] <= self.bound
    }
}

/// Convex feasible set of a polygon obstacle at the nominal position: the
/// half space obtained by linearizing the signed distance. With inflation
/// `eta` the emitted constraint is
/// `g(x) = eta - phi(x0) - grad_phi(x0) . (x - x0) <= 0`.
///
/// Returns the half space and the `(gradient, g(x0))` pair that feeds the
/// chance transform. Errors when the nominal position is on or inside the
/// polygon.
pub fn convex_feasible_set(
    poly: &ConvexPolygonObstacle,
    position: [f64; 2],
    obstacle_index: usize,
) -> Result<(HalfSpace, [f64; 2], f64)> {
    let (phi, grad) = signed_distance(poly, position);
    if phi <= 0.0 {
        return Err(CilqgError::NominalInsideObstacle {
            index: obstacle_index,
            phi,
        });
    }
    // g(x) <= 0 with g = eta - phi(x0) - grad . (x - x0); rewritten as
    // -grad . x <= phi - eta - grad . x0  i.e.  a . x <= b.
    let g0 = poly.inflation - phi;
    let normal = [-grad[0], -grad[1]];
    let bound = -(g0 + grad[0] * position[0] + grad[1] * position[1]);
    Ok((HalfSpace { normal, bound }, grad, g0))
}

/// Chance-tightened collision constraint against a polygon obstacle, as a
/// full-state-dimension constraint row (gradient on the position block,
/// zeros elsewhere).
pub fn polygon_chance_constraint(
    poly: &ConvexPolygonObstacle,
    nominal_state: &Vector,
    position_indices: (usize, usize),
    state_cov: &CovarianceMatrix,
    p: f64,
    obstacle_index: usize,
) -> Result<LinearChanceConstraint> {
    let position = [nominal_state[position_indices.0], nominal_state[position_indices.1]];
    let (_, grad, g0) = convex_feasible_set(poly, position, obstacle_index)?;
    let n = nominal_state.len();
    let mut row = RowDVector::zeros(n);
    row[position_indices.0] = -grad[0];
    row[position_indices.1] = -grad[1];
    let (row, offset) = linearization_from_gradient(row, g0, nominal_state)?;
    let gamma = compute_gamma(&row, state_cov, p)?;
    Ok(LinearChanceConstraint {
        row,
        offset,
        gamma,
        kind: ConstraintKind::State,
        source: ConstraintSource::StaticObstacle(obstacle_index),
    })
}

/// Gaussian snapshot of a moving obstacle at one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertainObstacleState {
    pub mean: [f64; 2],
    pub covariance: CovarianceMatrix,
}

impl UncertainObstacleState {
    pub fn new(mean: [f64; 2], covariance: CovarianceMatrix) -> Result<Self> {
        if covariance.dim() != 2 {
            return Err(CilqgError::BadParams(
                "obstacle covariance must be 2x2".into(),
            ));
        }
        Ok(Self { mean, covariance })
    }
}

/// Collision constraint against an uncertain obstacle at one step:
/// linearize `g(x) = eta - ||pos(x) - z_obs||` at the nominal state and
/// tighten with the combined ego + obstacle covariance.
pub fn obstacle_uncertainty_constraint(
    nominal_state: &Vector,
    obstacle: &UncertainObstacleState,
    safety_margin: f64,
    position_indices: (usize, usize),
    ego_cov: &CovarianceMatrix,
    p: f64,
    step: usize,
    obstacle_index: usize,
) -> Result<LinearChanceConstraint> {
    let dx = nominal_state[position_indices.0] - obstacle.mean[0];
    let dy = nominal_state[position_indices.1] - obstacle.mean[1];
    let dist = (dx * dx + dy * dy).sqrt();
    if dist < 1e-9 {
        return Err(CilqgError::CoincidentCenters { step });
    }
    let grad2d = [-dx / dist, -dy / dist];
    let n = nominal_state.len();
    let mut row = RowDVector::zeros(n);
    row[position_indices.0] = grad2d[0];
    row[position_indices.1] = grad2d[1];
    let g0 = safety_margin - dist;
    let (row, offset) = linearization_from_gradient(row, g0, nominal_state)?;
    // Combined uncertainty: ego covariance through the padded row plus the
    // obstacle covariance through the 2D gradient.
    let ego_var = quadratic_form(&row, ego_cov.matrix());
    let obs_row = RowDVector::from_row_slice(&grad2d);
    let obs_var = quadratic_form(&obs_row, obstacle.covariance.matrix());
    if !(0.5..1.0).contains(&p) {
        return Err(CilqgError::BadProbability { p, range: "[0.5, 1)" });
    }
    let gamma = (2.0 * (ego_var + obs_var).max(0.0)).sqrt() * erf_inv(2.0 * p - 1.0);
    Ok(LinearChanceConstraint {
        row,
        offset,
        gamma,
        kind: ConstraintKind::State,
        source: ConstraintSource::DynamicObstacle(obstacle_index),
    })
}

/// Componentwise control bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ControlBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(CilqgError::BadParams("control box bound lengths differ".into()));
        }
        for (c, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if lo >= hi {
                return Err(CilqgError::EmptyBox { channel: c });
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, u: &Vector) -> bool {
        (0..self.dim()).all(|c| u[c] >= self.lower[c] && u[c] <= self.upper[c])
    }

    pub fn clamp(&self, u: &Vector) -> Vector {
        Vector::from_fn(self.dim(), |c, _| u[c].clamp(self.lower[c], self.upper[c]))
    }
}

/// Chance-tightened box constraints on the control: two rows per channel
/// (`u <= upper` and `-u <= -lower`), each tightened by its own `gamma`
/// from the control noise covariance. A zero covariance reproduces the
/// deterministic box.
pub fn control_chance_constraints(
    bounds: &ControlBox,
    control_noise_cov: &CovarianceMatrix,
    p: f64,
) -> Result<Vec<LinearChanceConstraint>> {
    let m = bounds.dim();
    if control_noise_cov.dim() != m {
        return Err(CilqgError::ShapeMismatch {
            context: "control noise covariance",
            expected: format!("{m}x{m}"),
            got: format!("{0}x{0}", control_noise_cov.dim()),
        });
    }
    let mut out = Vec::with_capacity(2 * m);
    for c in 0..m {
        let mut upper_row = RowDVector::zeros(m);
        upper_row[c] = 1.0;
        let gamma = compute_gamma(&upper_row, control_noise_cov, p)?;
        if bounds.lower[c] + gamma > bounds.upper[c] - gamma {
            return Err(CilqgError::EmptyBox { channel: c });
        }
        out.push(LinearChanceConstraint {
            row: upper_row,
            offset: -bounds.upper[c],
            gamma,
            kind: ConstraintKind::Control,
            source: ConstraintSource::ControlUpper(c),
        });
        let mut lower_row = RowDVector::zeros(m);
        lower_row[c] = -1.0;
        out.push(LinearChanceConstraint {
            row: lower_row,
            offset: bounds.lower[c],
            gamma,
            kind: ConstraintKind::Control,
            source: ConstraintSource::ControlLower(c),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Standard-normal quantile by bisection on a quadrature-computed CDF;
    /// fully independent of the erf-based implementation path.
    pub fn normal_quantile_oracle(p: f64) -> f64 {
        let density = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
        // Simpson quadrature of the density from 0 to x.
        let cdf = |x: f64| {
            let steps = 2000;
            let h = x / steps as f64;
            let mut acc = density(0.0) + density(x);
            for i in 1..steps {
                let t = i as f64 * h;
                acc += if i % 2 == 1 { 4.0 } else { 2.0 } * density(t);
            }
            0.5 + acc * h / 3.0
        };
        let (mut lo, mut hi) = (0.0, 10.0);
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if cdf(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    fn unit_row(n: usize, idx: usize) -> RowDVector<f64> {
        let mut r = RowDVector::zeros(n);
        r[idx] = 1.0;
        r
    }

    #[test]
    fn gamma_at_half_is_zero() {
        let row = unit_row(2, 0);
        let cov = CovarianceMatrix::scaled_identity(2, 3.0);
        assert_eq!(compute_gamma(&row, &cov, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn gamma_matches_normal_quantile() {
        let row = unit_row(1, 0);
        let cov = CovarianceMatrix::scaled_identity(1, 1.0);
        let gamma = compute_gamma(&row, &cov, 0.98).unwrap();
        assert!((2.0530..=2.0545).contains(&gamma), "gamma {gamma}");
        assert_relative_eq!(gamma, normal_quantile_oracle(0.98), epsilon = 1e-6);

        let cov_quarter = CovarianceMatrix::scaled_identity(1, 0.25);
        let gamma2 = compute_gamma(&row, &cov_quarter, 0.8413).unwrap();
        assert_relative_eq!(gamma2, 0.5, epsilon = 2e-4);
    }

    #[test]
    fn gamma_rejects_bad_probability() {
        let row = unit_row(1, 0);
        let cov = CovarianceMatrix::scaled_identity(1, 1.0);
        assert!(compute_gamma(&row, &cov, 0.49).is_err());
        assert!(compute_gamma(&row, &cov, 1.0).is_err());
    }

    #[test]
    fn linearize_affine_is_exact() {
        let x0 = Vector::from_row_slice(&[3.0, -1.0]);
        let (g, m) = linearize_constraint(|x| x[0] - 5.0, &x0).unwrap();
        assert_relative_eq!(g[0], 1.0, epsilon = 1e-6);
        assert_relative_eq!(g[1], 0.0, epsilon = 1e-6);
        assert_relative_eq!(m, -5.0, epsilon = 1e-6);
    }

    #[test]
    fn linearize_norm_constraint() {
        let x0 = Vector::from_row_slice(&[2.0, 0.0]);
        let (g, m) = linearize_constraint(|x| x.norm() - 1.0, &x0).unwrap();
        assert_relative_eq!(g[0], 1.0, epsilon = 1e-6);
        assert_relative_eq!(g[1], 0.0, epsilon = 1e-6);
        assert_relative_eq!(m, -1.0, epsilon = 1e-6);
    }

    #[test]
    fn linearize_quadratic_constraint() {
        let x0 = Vector::from_row_slice(&[1.0, 0.0]);
        let (g, m) = linearize_constraint(|x| x[0] * x[0] - 4.0, &x0).unwrap();
        assert_relative_eq!(g[0], 2.0, epsilon = 1e-5);
        assert_relative_eq!(m, -5.0, epsilon = 1e-5);
    }

    #[test]
    fn transform_composes_linearization_and_gamma() {
        let x0 = Vector::zeros(2);
        let cov = CovarianceMatrix::scaled_identity(2, 1.0);
        let c = transform_chance_constraint(
            |x| x[0],
            &x0,
            &cov,
            0.98,
            ConstraintKind::State,
            ConstraintSource::Custom("test".into()),
        )
        .unwrap();
        // Feasibility boundary: z_1 <= -gamma ~ -2.0537.
        let boundary = Vector::from_row_slice(&[-c.gamma - c.offset, 0.0]);
        assert_relative_eq!(c.value(&boundary), 0.0, epsilon = 1e-9);
        assert!((2.0530..=2.0545).contains(&c.gamma));

        // Deterministic limit: zero covariance leaves the plain linearization.
        let det = transform_chance_constraint(
            |x| x[0],
            &x0,
            &CovarianceMatrix::zeros(2),
            0.98,
            ConstraintKind::State,
            ConstraintSource::Custom("test".into()),
        )
        .unwrap();
        assert_eq!(det.gamma, 0.0);
    }

    #[test]
    fn transform_monte_carlo_violation_rate() {
        // z on the tightened boundary: violation probability of the original
        // linear-Gaussian constraint must equal 1 - p.
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let row = RowDVector::from_row_slice(&[0.8, -0.6]);
        let cov = CovarianceMatrix::new(Matrix::from_row_slice(2, 2, &[0.5, 0.2, 0.2, 0.4]))
            .unwrap();
        let p = 0.9;
        let gamma = compute_gamma(&row, &cov, p).unwrap();
        let factor = cov.factor();
        let trials = 200_000;
        let mut violations = 0usize;
        for _ in 0..trials {
            let z = Vector::from_fn(2, |_, _| {
                rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng)
            });
            let e = &factor * z;
            if (&row * e)[0] > gamma {
                violations += 1;
            }
        }
        let rate = violations as f64 / trials as f64;
        assert!((rate - (1.0 - p)).abs() < 0.005, "rate {rate}");
    }

    fn unit_square() -> ConvexPolygonObstacle {
        ConvexPolygonObstacle::new(
            vec![[-0.5, -0.5], [0.5, -0.5], [0.5, 0.5], [-0.5, 0.5]],
            0.0,
        )
        .unwrap()
    }

    #[test]
    fn polygon_validation() {
        assert!(ConvexPolygonObstacle::new(vec![[0.0, 0.0], [1.0, 0.0]], 0.0).is_err());
        // Clockwise input is normalized to counterclockwise.
        let cw = ConvexPolygonObstacle::new(
            vec![[-0.5, 0.5], [0.5, 0.5], [0.5, -0.5], [-0.5, -0.5]],
            0.0,
        )
        .unwrap();
        assert!(signed_area(cw.vertices()) > 0.0);
        // Non-convex rejected.
        assert!(ConvexPolygonObstacle::new(
            vec![[0.0, 0.0], [2.0, 0.0], [1.0, 0.1], [1.0, 2.0]],
            0.0
        )
        .is_err());
    }

    #[test]
    fn signed_distance_outside_inside_boundary() {
        let sq = unit_square();
        let (phi, grad) = signed_distance(&sq, [2.0, 0.0]);
        assert_relative_eq!(phi, 1.5, epsilon = 1e-12);
        assert_relative_eq!(grad[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(grad[1], 0.0, epsilon = 1e-12);

        let (phi_c, _) = signed_distance(&sq, [0.0, 0.0]);
        assert_relative_eq!(phi_c, -0.5, epsilon = 1e-12);

        let (phi_b, grad_b) = signed_distance(&sq, [0.5, 0.0]);
        assert_relative_eq!(phi_b, 0.0, epsilon = 1e-12);
        assert_relative_eq!(grad_b[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn signed_distance_vertex_region_gradient() {
        let sq = unit_square();
        // Closest feature is the corner (0.5, 0.5).
        let (phi, grad) = signed_distance(&sq, [1.5, 1.5]);
        assert_relative_eq!(phi, std::f64::consts::SQRT_2, epsilon = 1e-12);
        assert_relative_eq!(grad[0], std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-12);
        assert_relative_eq!(grad[1], std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-12);
    }

    #[test]
    fn signed_distance_gradient_matches_finite_differences() {
        let sq = unit_square();
        let mut rng = ChaCha8Rng::seed_from_u64(57);
        let h = 1e-6;
        let mut checked = 0;
        while checked < 100 {
            let p = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let (_, grad) = signed_distance(&sq, p);
            // Skip points too close to the boundary, vertex rays or the
            // medial axis where the gradient is only a subgradient.
            let (phi, _) = signed_distance(&sq, p);
            if phi.abs() < 0.05 || (p[0].abs() - p[1].abs()).abs() < 0.05 {
                continue;
            }
            let fdx = (signed_distance(&sq, [p[0] + h, p[1]]).0
                - signed_distance(&sq, [p[0] - h, p[1]]).0)
                / (2.0 * h);
            let fdy = (signed_distance(&sq, [p[0], p[1] + h]).0
                - signed_distance(&sq, [p[0], p[1] - h]).0)
                / (2.0 * h);
            assert!((grad[0] - fdx).abs() < 1e-4, "grad x at {p:?}");
            assert!((grad[1] - fdy).abs() < 1e-4, "grad y at {p:?}");
            let norm = (grad[0] * grad[0] + grad[1] * grad[1]).sqrt();
            assert_relative_eq!(norm, 1.0, epsilon = 1e-9);
            checked += 1;
        }
    }

    #[test]
    fn convex_feasible_set_half_space() {
        let sq = unit_square();
        let (hs, grad, g0) = convex_feasible_set(&sq, [2.0, 0.0], 0).unwrap();
        // Half space x >= 0.5, i.e. -x <= -0.5.
        assert_relative_eq!(hs.normal[0], -1.0, epsilon = 1e-12);
        assert_relative_eq!(hs.normal[1], 0.0, epsilon = 1e-12);
        assert_relative_eq!(hs.bound, -0.5, epsilon = 1e-12);
        assert!(hs.contains([2.0, 0.0]));
        assert!(!hs.contains([0.0, 0.0]));
        assert_relative_eq!(g0, -1.5, epsilon = 1e-12);
        assert_relative_eq!(grad[0], 1.0, epsilon = 1e-12);

        // Nominal on the symmetry axis gives an axis-aligned normal.
        let (hs_axis, _, _) = convex_feasible_set(&sq, [0.0, 3.0], 0).unwrap();
        assert_relative_eq!(hs_axis.normal[0], 0.0, epsilon = 1e-12);
        assert_relative_eq!(hs_axis.normal[1], -1.0, epsilon = 1e-12);

        assert!(matches!(
            convex_feasible_set(&sq, [0.0, 0.0], 3),
            Err(CilqgError::NominalInsideObstacle { index: 3, .. })
        ));
    }

    #[test]
    fn disjoint_obstacle_half_spaces_intersect() {
        let left = ConvexPolygonObstacle::new(
            vec![[-3.0, -1.0], [-2.0, -1.0], [-2.0, 1.0], [-3.0, 1.0]],
            0.0,
        )
        .unwrap();
        let right = ConvexPolygonObstacle::new(
            vec![[2.0, -1.0], [3.0, -1.0], [3.0, 1.0], [2.0, 1.0]],
            0.0,
        )
        .unwrap();
        let x = [0.0, 0.2];
        let (h1, _, _) = convex_feasible_set(&left, x, 0).unwrap();
        let (h2, _, _) = convex_feasible_set(&right, x, 1).unwrap();
        assert!(h1.contains(x) && h2.contains(x));
        // Slack along each normal equals phi.
        let slack1 = h1.bound - (h1.normal[0] * x[0] + h1.normal[1] * x[1]);
        assert_relative_eq!(slack1, signed_distance(&left, x).0, epsilon = 1e-12);
    }

    #[test]
    fn obstacle_uncertainty_reduces_to_ego_only() {
        let state = Vector::from_row_slice(&[3.0, 0.0, 5.0, 0.0]);
        let ego_cov = CovarianceMatrix::scaled_identity(4, 0.1);
        let zero_obs = UncertainObstacleState::new([0.0, 0.0], CovarianceMatrix::zeros(2)).unwrap();
        let c = obstacle_uncertainty_constraint(&state, &zero_obs, 1.0, (0, 1), &ego_cov, 0.98, 0, 0)
            .unwrap();
        assert_relative_eq!(c.raw_value(&state), -2.0, epsilon = 1e-12);

        // Same transform done via the generic path must agree bit-for-bit in
        // gamma when the obstacle covariance vanishes.
        let generic_gamma = compute_gamma(&c.row, &ego_cov, 0.98).unwrap();
        assert_eq!(c.gamma, generic_gamma);
    }

    #[test]
    fn obstacle_uncertainty_combined_covariance() {
        let state = Vector::from_row_slice(&[3.0, 0.0, 5.0, 0.0]);
        let obs = UncertainObstacleState::new(
            [0.0, 0.0],
            CovarianceMatrix::scaled_identity(2, 0.25),
        )
        .unwrap();
        let c = obstacle_uncertainty_constraint(
            &state,
            &obs,
            1.0,
            (0, 1),
            &CovarianceMatrix::zeros(4),
            0.98,
            0,
            0,
        )
        .unwrap();
        // sigma = 0.5 along the radial direction.
        assert_relative_eq!(c.gamma, 0.5 * normal_quantile_oracle(0.98), epsilon = 1e-5);

        let coincident = UncertainObstacleState::new([3.0, 0.0], CovarianceMatrix::zeros(2)).unwrap();
        assert!(matches!(
            obstacle_uncertainty_constraint(
                &state,
                &coincident,
                1.0,
                (0, 1),
                &CovarianceMatrix::zeros(4),
                0.98,
                7,
                0
            ),
            Err(CilqgError::CoincidentCenters { step: 7 })
        ));
    }

    #[test]
    fn control_box_deterministic_and_tightened() {
        let bounds = ControlBox::new(vec![-1.0], vec![1.0]).unwrap();
        let det = control_chance_constraints(&bounds, &CovarianceMatrix::zeros(1), 0.98).unwrap();
        assert_eq!(det.len(), 2);
        for c in &det {
            assert_eq!(c.gamma, 0.0);
        }
        let u = Vector::from_row_slice(&[1.0]);
        assert_relative_eq!(det[0].value(&u), 0.0, epsilon = 1e-15);

        let tightened = control_chance_constraints(
            &bounds,
            &CovarianceMatrix::scaled_identity(1, 0.01),
            0.98,
        )
        .unwrap();
        // |u| <= 1 - 0.1 * 2.0537.
        let limit = 1.0 - 0.1 * normal_quantile_oracle(0.98);
        let boundary = Vector::from_row_slice(&[limit]);
        assert!(tightened[0].value(&boundary).abs() < 1e-4);

        // p = 0.5 keeps the original box even with noise.
        let p_half = control_chance_constraints(
            &bounds,
            &CovarianceMatrix::scaled_identity(1, 0.01),
            0.5,
        )
        .unwrap();
        for c in &p_half {
            assert_eq!(c.gamma, 0.0);
        }

        // Excessive tightening empties the box.
        assert!(matches!(
            control_chance_constraints(&bounds, &CovarianceMatrix::scaled_identity(1, 1.0), 0.98),
            Err(CilqgError::EmptyBox { channel: 0 })
        ));
    }

    proptest! {
        #[test]
        fn gamma_monotone_in_p_and_variance(
            p1 in 0.5f64..0.985,
            dp in 0.0005f64..0.01,
            v1 in 0.01f64..4.0,
            dv in 0.01f64..1.0,
        ) {
            let row = RowDVector::from_row_slice(&[1.0]);
            let c1 = CovarianceMatrix::scaled_identity(1, v1);
            let c2 = CovarianceMatrix::scaled_identity(1, v1 + dv);
            let g_p1 = compute_gamma(&row, &c1, p1).unwrap();
            let g_p2 = compute_gamma(&row, &c1, p1 + dp).unwrap();
            prop_assert!(g_p2 >= g_p1);
            let g_v2 = compute_gamma(&row, &c2, p1).unwrap();
            prop_assert!(g_v2 >= g_p1);
        }

        #[test]
        fn half_space_contains_nominal_with_phi_slack(
            px in -6.0f64..6.0,
            py in -6.0f64..6.0,
        ) {
            let sq = ConvexPolygonObstacle::new(
                vec![[-0.5, -0.5], [0.5, -0.5], [0.5, 0.5], [-0.5, 0.5]],
                0.0,
            ).unwrap();
            let (phi, _) = signed_distance(&sq, [px, py]);
            prop_assume!(phi > 1e-6);
            let (hs, _, _) = convex_feasible_set(&sq, [px, py], 0).unwrap();
            let slack = hs.bound - (hs.normal[0] * px + hs.normal[1] * py);
            prop_assert!((slack - phi).abs() < 1e-9);
        }
    }
}
