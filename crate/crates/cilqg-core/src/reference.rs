//! Reference-trajectory generation: straight lines, constant-curvature arcs
//! and waypoint splines, sampled at the scenario's timestep.

use serde::{Deserialize, Serialize};

use crate::error::{CilqgError, Result};
use crate::types::Vector;

/// Reference generator specification, as it appears in scenario files.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ReferenceSpec {
    Straight {
        start: [f64; 2],
        heading: f64,
        speed: f64,
    },
    Arc {
        start: [f64; 2],
        heading: f64,
        speed: f64,
        curvature: f64,
    },
    Waypoints {
        speed: f64,
        points: Vec<[f64; 2]>,
    },
    /// Explicit state list `(px, py, v, theta)` per step.
    Explicit { states: Vec<[f64; 4]> },
}

/// Sample a reference of `steps + 1` states `(px, py, v, theta)` at spacing
/// `dt`.
pub fn generate_reference(spec: &ReferenceSpec, dt: f64, steps: usize) -> Result<Vec<Vector>> {
    if dt <= 0.0 {
        return Err(CilqgError::BadParams("reference dt must be positive".into()));
    }
    match spec {
        ReferenceSpec::Straight { start, heading, speed } => {
            if *speed < 0.0 {
                return Err(CilqgError::BadParams("reference speed must be >= 0".into()));
            }
            let (sin_h, cos_h) = heading.sin_cos();
            Ok((0..=steps)
                .map(|k| {
                    let s = speed * dt * k as f64;
                    Vector::from_row_slice(&[
                        start[0] + s * cos_h,
                        start[1] + s * sin_h,
                        *speed,
                        *heading,
                    ])
                })
                .collect())
        }
        ReferenceSpec::Arc {
            start,
            heading,
            speed,
            curvature,
        } => {
            if *speed < 0.0 {
                return Err(CilqgError::BadParams("reference speed must be >= 0".into()));
            }
            if curvature.abs() < 1e-12 {
                return generate_reference(
                    &ReferenceSpec::Straight {
                        start: *start,
                        heading: *heading,
                        speed: *speed,
                    },
                    dt,
                    steps,
                );
            }
            let radius = 1.0 / curvature;
            // Circle center sits one radius to the left of the heading.
            let cx = start[0] - radius * heading.sin();
            let cy = start[1] + radius * heading.cos();
            Ok((0..=steps)
                .map(|k| {
                    let s = speed * dt * k as f64;
                    let theta = heading + curvature * s;
                    Vector::from_row_slice(&[
                        cx + radius * theta.sin(),
                        cy - radius * theta.cos(),
                        *speed,
                        theta,
                    ])
                })
                .collect())
        }
        ReferenceSpec::Waypoints { speed, points } => {
            if points.len() < 2 {
                return Err(CilqgError::BadParams(
                    "waypoint reference needs at least two points".into(),
                ));
            }
            if *speed <= 0.0 {
                return Err(CilqgError::BadParams("waypoint speed must be positive".into()));
            }
            let spline = PlanarSpline::through(points)?;
            Ok((0..=steps)
                .map(|k| {
                    let s = (speed * dt * k as f64).min(spline.total_length());
                    let ([px, py], heading) = spline.sample(s);
                    Vector::from_row_slice(&[px, py, *speed, heading])
                })
                .collect())
        }
        ReferenceSpec::Explicit { states } => {
            if states.len() < steps + 1 {
                return Err(CilqgError::BadParams(format!(
                    "explicit reference has {} states, need {}",
                    states.len(),
                    steps + 1
                )));
            }
            Ok(states[..=steps]
                .iter()
                .map(|s| Vector::from_row_slice(s))
                .collect())
        }
    }
}

/// Natural cubic spline through planar waypoints, parameterized by chord
/// length.
pub struct PlanarSpline {
    knots: Vec<f64>,
    x: CubicSpline,
    y: CubicSpline,
}

impl PlanarSpline {
    pub fn through(points: &[[f64; 2]]) -> Result<Self> {
        let mut knots = Vec::with_capacity(points.len());
        let mut acc = 0.0;
        knots.push(0.0);
        for w in points.windows(2) {
            let d = ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt();
            if d < 1e-9 {
                return Err(CilqgError::BadParams("duplicate consecutive waypoints".into()));
            }
            acc += d;
            knots.push(acc);
        }
        let xs: Vec<f64> = points.iter().map(|p| p[0]).collect();
        let ys: Vec<f64> = points.iter().map(|p| p[1]).collect();
        Ok(Self {
            x: CubicSpline::natural(&knots, &xs),
            y: CubicSpline::natural(&knots, &ys),
            knots,
        })
    }

    pub fn total_length(&self) -> f64 {
        *self.knots.last().unwrap()
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Position and tangent heading at parameter `s` (clamped to the range).
    pub fn sample(&self, s: f64) -> ([f64; 2], f64) {
        let s = s.clamp(0.0, self.total_length());
        let px = self.x.eval(s);
        let py = self.y.eval(s);
        let heading = self.y.deriv(s).atan2(self.x.deriv(s));
        ([px, py], heading)
    }
}

/// Natural cubic spline over scalar samples (tridiagonal Thomas solve).
struct CubicSpline {
    xs: Vec<f64>,
    ys: Vec<f64>,
    second: Vec<f64>,
}

impl CubicSpline {
    fn natural(xs: &[f64], ys: &[f64]) -> Self {
        let n = xs.len();
        let mut second = vec![0.0; n];
        if n > 2 {
            let m = n - 2;
            let mut sub = vec![0.0; m];
            let mut diag = vec![0.0; m];
            let mut sup = vec![0.0; m];
            let mut rhs = vec![0.0; m];
            for i in 0..m {
                let h0 = xs[i + 1] - xs[i];
                let h1 = xs[i + 2] - xs[i + 1];
                sub[i] = h0;
                diag[i] = 2.0 * (h0 + h1);
                sup[i] = h1;
                rhs[i] = 6.0 * ((ys[i + 2] - ys[i + 1]) / h1 - (ys[i + 1] - ys[i]) / h0);
            }
            // Thomas algorithm.
            for i in 1..m {
                let w = sub[i] / diag[i - 1];
                diag[i] -= w * sup[i - 1];
                rhs[i] -= w * rhs[i - 1];
            }
            second[m] = rhs[m - 1] / diag[m - 1];
            for i in (0..m - 1).rev() {
                second[i + 1] = (rhs[i] - sup[i] * second[i + 2]) / diag[i];
            }
        }
        Self {
            xs: xs.to_vec(),
            ys: ys.to_vec(),
            second,
        }
    }

    fn segment(&self, x: f64) -> usize {
        match self
            .xs
            .binary_search_by(|probe| probe.partial_cmp(&x).unwrap())
        {
            Ok(i) => i.min(self.xs.len() - 2),
            Err(i) => i.saturating_sub(1).min(self.xs.len() - 2),
        }
    }

    fn eval(&self, x: f64) -> f64 {
        let i = self.segment(x);
        let h = self.xs[i + 1] - self.xs[i];
        let a = (self.xs[i + 1] - x) / h;
        let b = (x - self.xs[i]) / h;
        a * self.ys[i]
            + b * self.ys[i + 1]
            + ((a * a * a - a) * self.second[i] + (b * b * b - b) * self.second[i + 1]) * h * h
                / 6.0
    }

    fn deriv(&self, x: f64) -> f64 {
        let i = self.segment(x);
        let h = self.xs[i + 1] - self.xs[i];
        let a = (self.xs[i + 1] - x) / h;
        let b = (x - self.xs[i]) / h;
        (self.ys[i + 1] - self.ys[i]) / h
            + ((3.0 * b * b - 1.0) * self.second[i + 1] - (3.0 * a * a - 1.0) * self.second[i]) * h
                / 6.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn straight_reference() {
        let spec = ReferenceSpec::Straight {
            start: [0.0, 0.0],
            heading: 0.0,
            speed: 10.0,
        };
        let states = generate_reference(&spec, 0.2, 50).unwrap();
        assert_eq!(states.len(), 51);
        for (k, s) in states.iter().enumerate() {
            assert_relative_eq!(s[0], 2.0 * k as f64, epsilon = 1e-12);
            assert_relative_eq!(s[1], 0.0, epsilon = 1e-12);
            assert_relative_eq!(s[2], 10.0, epsilon = 1e-12);
            assert_relative_eq!(s[3], 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn arc_reference_heading_tracks_arc_length() {
        let kappa = 0.05;
        let speed = 8.0;
        let dt = 0.2;
        let spec = ReferenceSpec::Arc {
            start: [1.0, -2.0],
            heading: 0.3,
            speed,
            curvature: kappa,
        };
        let states = generate_reference(&spec, dt, 30).unwrap();
        for (k, s) in states.iter().enumerate() {
            let arc = speed * dt * k as f64;
            assert_relative_eq!(s[3], 0.3 + kappa * arc, epsilon = 1e-12);
        }
        // Consecutive positions spaced by the chord of the arc step.
        let chord = 2.0 * (1.0 / kappa) * (kappa * speed * dt / 2.0).sin();
        for w in states.windows(2) {
            let d = ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt();
            assert_relative_eq!(d, chord, epsilon = 1e-9);
        }
    }

    #[test]
    fn waypoint_spline_interpolates() {
        let points = vec![[0.0, 0.0], [5.0, 1.0], [10.0, -1.0]];
        let spline = PlanarSpline::through(&points).unwrap();
        for (knot, point) in spline.knots().to_vec().iter().zip(&points) {
            let ([px, py], _) = spline.sample(*knot);
            assert!((px - point[0]).abs() < 1e-6);
            assert!((py - point[1]).abs() < 1e-6);
        }
        let spec = ReferenceSpec::Waypoints {
            speed: 2.0,
            points,
        };
        let states = generate_reference(&spec, 0.2, 40).unwrap();
        assert_eq!(states.len(), 41);
    }

    #[test]
    fn bad_params_rejected() {
        assert!(generate_reference(
            &ReferenceSpec::Straight {
                start: [0.0, 0.0],
                heading: 0.0,
                speed: -1.0
            },
            0.2,
            10
        )
        .is_err());
        assert!(generate_reference(
            &ReferenceSpec::Waypoints {
                speed: 1.0,
                points: vec![[0.0, 0.0]]
            },
            0.2,
            10
        )
        .is_err());
        assert!(matches!(
            generate_reference(
                &ReferenceSpec::Explicit { states: vec![[0.0; 4]; 5] },
                0.2,
                10
            ),
            Err(CilqgError::BadParams(_))
        ));
    }
}
