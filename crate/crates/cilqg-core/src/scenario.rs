//! Scenario definition and ingestion: JSON schema, validation, built-in
//! scenario fixtures and conversion into a solver [`Problem`].
//!
//! All physical quantities are SI; matrices are arrays of rows (row-major).

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::constraints::{
    polygon_distance, ControlBox, ConvexPolygonObstacle, UncertainObstacleState,
};
use crate::error::{CilqgError, Result};
use crate::models::{state_index, BicycleModel, BicycleParams};
use crate::reference::{generate_reference, ReferenceSpec};
use crate::solver::{Problem, SolverSettings, StateConstraintSpec, TrackingCost};
use crate::types::{Belief, CovarianceMatrix, Matrix, Vector};

/// A moving obstacle: per-step Gaussian position estimates plus the safety
/// margin the ego must keep.
#[derive(Debug, Clone)]
pub struct DynamicObstacle {
    pub safety_margin: f64,
    pub trajectory: Vec<UncertainObstacleState>,
}

/// Fully validated planning scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub description: String,
    pub params: BicycleParams,
    pub initial_belief: Belief,
    pub reference: Vec<Vector>,
    pub state_weights: Matrix,
    pub control_weights: Matrix,
    pub terminal_weights: Matrix,
    pub static_obstacles: Vec<ConvexPolygonObstacle>,
    pub dynamic_obstacles: Vec<DynamicObstacle>,
    pub control_box: ControlBox,
    pub control_noise_cov: CovarianceMatrix,
    pub initial_controls: Vec<Vector>,
    pub settings: SolverSettings,
}

impl Scenario {
    pub fn horizon(&self) -> usize {
        self.settings.horizon
    }

    pub fn model(&self) -> Result<BicycleModel> {
        BicycleModel::new(self.params.clone())
    }

    /// Assemble the solver-facing problem.
    pub fn to_problem(&self) -> Result<Problem<BicycleModel>> {
        let mut state_constraints: Vec<StateConstraintSpec> = self
            .static_obstacles
            .iter()
            .cloned()
            .map(StateConstraintSpec::Polygon)
            .collect();
        for obs in &self.dynamic_obstacles {
            state_constraints.push(StateConstraintSpec::Moving {
                states: obs.trajectory.clone(),
                safety_margin: obs.safety_margin,
            });
        }
        Ok(Problem {
            model: self.model()?,
            initial_belief: self.initial_belief.clone(),
            initial_controls: self.initial_controls.clone(),
            cost: TrackingCost {
                state_weights: self.state_weights.clone(),
                control_weights: self.control_weights.clone(),
                terminal_weights: self.terminal_weights.clone(),
                reference: self.reference.clone(),
            },
            state_constraints,
            control_box: Some(self.control_box.clone()),
            control_noise_cov: self.control_noise_cov.clone(),
            position_indices: (state_index::PX, state_index::PY),
        })
    }
}

// ---------------------------------------------------------------------------
// Document schema (serde side)
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize, Serialize)]
struct ScenarioDoc {
    name: String,
    #[serde(default)]
    description: String,
    vehicle: VehicleDoc,
    initial_belief: BeliefDoc,
    reference: ReferenceSpec,
    cost: CostDoc,
    #[serde(default)]
    static_obstacles: Vec<StaticObstacleDoc>,
    #[serde(default)]
    dynamic_obstacles: Vec<DynamicObstacleDoc>,
    control_box: ControlBoxDoc,
    #[serde(default)]
    control_noise_cov: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    initial_controls: Option<InitialControlsDoc>,
    #[serde(default)]
    solver: SolverDoc,
}

#[derive(Debug, Deserialize, Serialize)]
struct VehicleDoc {
    wheelbase: f64,
    sampling_time: f64,
    process_noise_cov: Vec<Vec<f64>>,
    measurement_noise_cov: Vec<Vec<f64>>,
}

#[derive(Debug, Deserialize, Serialize)]
struct BeliefDoc {
    mean: Vec<f64>,
    covariance: Vec<Vec<f64>>,
}

#[derive(Debug, Deserialize, Serialize)]
struct CostDoc {
    state_weights: Vec<Vec<f64>>,
    control_weights: Vec<Vec<f64>>,
    terminal_weights: Vec<Vec<f64>>,
}

#[derive(Debug, Deserialize, Serialize)]
struct StaticObstacleDoc {
    vertices: Vec<[f64; 2]>,
    #[serde(default)]
    inflation: f64,
}

#[derive(Debug, Deserialize, Serialize)]
struct DynamicObstacleDoc {
    safety_margin: f64,
    trajectory: Vec<ObstacleStateDoc>,
}

#[derive(Debug, Deserialize, Serialize)]
struct ObstacleStateDoc {
    mean: [f64; 2],
    covariance: Vec<Vec<f64>>,
}

#[derive(Debug, Deserialize, Serialize)]
struct ControlBoxDoc {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum InitialControlsDoc {
    /// Same control at every step.
    Constant { value: Vec<f64> },
    /// Brake at `decel` for `steps` steps, then coast (bicycle layout).
    Brake { decel: f64, steps: usize },
    /// Piecewise-constant segments `(steps, control)`, padded with the last
    /// control.
    Segments { segments: Vec<(usize, Vec<f64>)> },
    Explicit { controls: Vec<Vec<f64>> },
}

#[derive(Debug, Deserialize, Serialize, Default)]
struct SolverDoc {
    chance_threshold: Option<f64>,
    horizon: Option<usize>,
    barrier_init: Option<f64>,
    barrier_growth: Option<f64>,
    outer_tolerance: Option<f64>,
    inner_tolerance: Option<f64>,
    max_outer_iterations: Option<usize>,
    max_inner_iterations: Option<usize>,
    penalty_weight: Option<f64>,
}

fn matrix_from_rows(rows: &[Vec<f64>], dim: (usize, usize), field: &str) -> Result<Matrix> {
    if rows.len() != dim.0 || rows.iter().any(|r| r.len() != dim.1) {
        return Err(CilqgError::Schema {
            field: field.to_string(),
            message: format!("expected a {}x{} matrix (array of rows)", dim.0, dim.1),
        });
    }
    Ok(DMatrix::from_fn(dim.0, dim.1, |i, j| rows[i][j]))
}

fn covariance_from_rows(rows: &[Vec<f64>], dim: usize, field: &str) -> Result<CovarianceMatrix> {
    let m = matrix_from_rows(rows, (dim, dim), field)?;
    CovarianceMatrix::new(m).map_err(|e| CilqgError::Schema {
        field: field.to_string(),
        message: e.to_string(),
    })
}

fn psd_weights(rows: &[Vec<f64>], dim: usize, field: &str) -> Result<Matrix> {
    Ok(covariance_from_rows(rows, dim, field)?.into_matrix())
}

/// Parse and validate a scenario document (JSON).
pub fn load_scenario(document: &str) -> Result<Scenario> {
    let deserializer = &mut serde_json::Deserializer::from_str(document);
    let doc: ScenarioDoc =
        serde_path_to_error::deserialize(deserializer).map_err(|e| CilqgError::Schema {
            field: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
    build_scenario(doc)
}

fn build_scenario(doc: ScenarioDoc) -> Result<Scenario> {
    let n_state = BicycleModel::STATE_DIM;
    let n_control = BicycleModel::CONTROL_DIM;

    let solver = &doc.solver;
    let defaults = SolverSettings::default();
    let settings = SolverSettings {
        chance_threshold: solver.chance_threshold.unwrap_or(defaults.chance_threshold),
        horizon: solver.horizon.unwrap_or(defaults.horizon),
        barrier_init: solver.barrier_init.unwrap_or(defaults.barrier_init),
        barrier_growth: solver.barrier_growth.unwrap_or(defaults.barrier_growth),
        outer_tolerance: solver.outer_tolerance.unwrap_or(defaults.outer_tolerance),
        inner_tolerance: solver.inner_tolerance.unwrap_or(defaults.inner_tolerance),
        max_outer_iterations: solver
            .max_outer_iterations
            .unwrap_or(defaults.max_outer_iterations),
        max_inner_iterations: solver
            .max_inner_iterations
            .unwrap_or(defaults.max_inner_iterations),
        penalty_weight: solver.penalty_weight.unwrap_or(defaults.penalty_weight),
        mode: defaults.mode,
    };
    settings.validate()?;
    let horizon = settings.horizon;

    let params = BicycleParams {
        wheelbase: doc.vehicle.wheelbase,
        sampling_time: doc.vehicle.sampling_time,
        process_noise_cov: covariance_from_rows(
            &doc.vehicle.process_noise_cov,
            2,
            "vehicle.process_noise_cov",
        )?,
        measurement_noise_cov: covariance_from_rows(
            &doc.vehicle.measurement_noise_cov,
            n_state,
            "vehicle.measurement_noise_cov",
        )?,
    };
    params.validate()?;

    if doc.initial_belief.mean.len() != n_state {
        return Err(CilqgError::Schema {
            field: "initial_belief.mean".into(),
            message: format!("expected {n_state} entries"),
        });
    }
    let initial_belief = Belief::new(
        Vector::from_row_slice(&doc.initial_belief.mean),
        covariance_from_rows(&doc.initial_belief.covariance, n_state, "initial_belief.covariance")?,
    )?;

    let reference = generate_reference(&doc.reference, params.sampling_time, horizon)?;

    let state_weights = psd_weights(&doc.cost.state_weights, n_state, "cost.state_weights")?;
    let control_weights =
        psd_weights(&doc.cost.control_weights, n_control, "cost.control_weights")?;
    let terminal_weights =
        psd_weights(&doc.cost.terminal_weights, n_state, "cost.terminal_weights")?;

    let mut static_obstacles = Vec::with_capacity(doc.static_obstacles.len());
    for (i, o) in doc.static_obstacles.iter().enumerate() {
        let poly = ConvexPolygonObstacle::new(o.vertices.clone(), o.inflation).map_err(|e| {
            CilqgError::Schema {
                field: format!("static_obstacles[{i}]"),
                message: e.to_string(),
            }
        })?;
        static_obstacles.push(poly);
    }
    // Convex feasible sets of multiple obstacles only compose when the
    // obstacles (with their margins) are pairwise disjoint.
    for i in 0..static_obstacles.len() {
        for j in (i + 1)..static_obstacles.len() {
            let gap = polygon_distance(&static_obstacles[i], &static_obstacles[j]);
            let needed = static_obstacles[i].inflation + static_obstacles[j].inflation;
            if gap <= needed {
                return Err(CilqgError::Invariant(format!(
                    "static obstacles {i} and {j} overlap (gap {gap:.3} m <= combined margin {needed:.3} m)"
                )));
            }
        }
    }

    let mut dynamic_obstacles = Vec::with_capacity(doc.dynamic_obstacles.len());
    for (i, o) in doc.dynamic_obstacles.iter().enumerate() {
        if o.trajectory.len() < horizon + 1 {
            return Err(CilqgError::Schema {
                field: format!("dynamic_obstacles[{i}].trajectory"),
                message: format!(
                    "has {} states, horizon needs {}",
                    o.trajectory.len(),
                    horizon + 1
                ),
            });
        }
        if o.safety_margin <= 0.0 {
            return Err(CilqgError::Schema {
                field: format!("dynamic_obstacles[{i}].safety_margin"),
                message: "must be positive".into(),
            });
        }
        let mut trajectory = Vec::with_capacity(o.trajectory.len());
        for (k, s) in o.trajectory.iter().enumerate() {
            trajectory.push(UncertainObstacleState::new(
                s.mean,
                covariance_from_rows(
                    &s.covariance,
                    2,
                    &format!("dynamic_obstacles[{i}].trajectory[{k}].covariance"),
                )?,
            )?);
        }
        dynamic_obstacles.push(DynamicObstacle {
            safety_margin: o.safety_margin,
            trajectory,
        });
    }

    let control_box = ControlBox::new(doc.control_box.lower.clone(), doc.control_box.upper.clone())?;
    if control_box.dim() != n_control {
        return Err(CilqgError::Schema {
            field: "control_box".into(),
            message: format!("expected {n_control} channels"),
        });
    }

    let control_noise_cov = match &doc.control_noise_cov {
        Some(rows) => covariance_from_rows(rows, n_control, "control_noise_cov")?,
        None => CovarianceMatrix::zeros(n_control),
    };

    let initial_controls = expand_initial_controls(
        doc.initial_controls.as_ref(),
        horizon,
        n_control,
        &control_box,
    )?;

    // The fixed initial state must start clear of every obstacle margin.
    let pos0 = [
        initial_belief.mean[state_index::PX],
        initial_belief.mean[state_index::PY],
    ];
    for (i, poly) in static_obstacles.iter().enumerate() {
        let (phi, _) = crate::constraints::signed_distance(poly, pos0);
        if phi <= poly.inflation {
            return Err(CilqgError::Invariant(format!(
                "initial position is inside the margin of static obstacle {i} (distance {phi:.3} m)"
            )));
        }
    }

    Ok(Scenario {
        name: doc.name,
        description: doc.description,
        params,
        initial_belief,
        reference,
        state_weights,
        control_weights,
        terminal_weights,
        static_obstacles,
        dynamic_obstacles,
        control_box,
        control_noise_cov,
        initial_controls,
        settings,
    })
}

fn expand_initial_controls(
    doc: Option<&InitialControlsDoc>,
    horizon: usize,
    n_control: usize,
    bounds: &ControlBox,
) -> Result<Vec<Vector>> {
    let controls = match doc {
        None => vec![Vector::zeros(n_control); horizon],
        Some(InitialControlsDoc::Constant { value }) => {
            if value.len() != n_control {
                return Err(CilqgError::Schema {
                    field: "initial_controls.value".into(),
                    message: format!("expected {n_control} entries"),
                });
            }
            vec![Vector::from_row_slice(value); horizon]
        }
        Some(InitialControlsDoc::Brake { decel, steps }) => (0..horizon)
            .map(|k| {
                let mut u = Vector::zeros(n_control);
                if k < *steps {
                    u[0] = -decel.abs();
                }
                u
            })
            .collect(),
        Some(InitialControlsDoc::Segments { segments }) => {
            let mut out = Vec::with_capacity(horizon);
            for (len, value) in segments {
                if value.len() != n_control {
                    return Err(CilqgError::Schema {
                        field: "initial_controls.segments".into(),
                        message: format!("expected {n_control} entries per control"),
                    });
                }
                for _ in 0..*len {
                    if out.len() == horizon {
                        break;
                    }
                    out.push(Vector::from_row_slice(value));
                }
            }
            let pad = out
                .last()
                .cloned()
                .unwrap_or_else(|| Vector::zeros(n_control));
            while out.len() < horizon {
                out.push(pad.clone());
            }
            out
        }
        Some(InitialControlsDoc::Explicit { controls }) => {
            if controls.len() < horizon {
                return Err(CilqgError::Schema {
                    field: "initial_controls.controls".into(),
                    message: format!("has {} controls, horizon needs {horizon}", controls.len()),
                });
            }
            controls[..horizon]
                .iter()
                .map(|c| Vector::from_row_slice(c))
                .collect()
        }
    };
    for (k, u) in controls.iter().enumerate() {
        if !bounds.contains(u) {
            return Err(CilqgError::Invariant(format!(
                "initial control at step {k} violates the control box"
            )));
        }
    }
    Ok(controls)
}

// ---------------------------------------------------------------------------
// Built-in scenarios
// ---------------------------------------------------------------------------

pub const TWO_STATIC_OBSTACLES: &str = include_str!("../scenarios/two_static_obstacles.json");
pub const ONE_STATIC_OBSTACLE_CURVED: &str =
    include_str!("../scenarios/one_static_obstacle_curved.json");
pub const DYNAMIC_OVERTAKE: &str = include_str!("../scenarios/dynamic_overtake.json");

/// Names of the built-in scenarios.
pub fn builtin_names() -> &'static [&'static str] {
    &["two_static_obstacles", "one_static_obstacle_curved", "dynamic_overtake"]
}

/// Raw JSON of a built-in scenario.
pub fn builtin_document(name: &str) -> Option<&'static str> {
    match name {
        "two_static_obstacles" => Some(TWO_STATIC_OBSTACLES),
        "one_static_obstacle_curved" => Some(ONE_STATIC_OBSTACLE_CURVED),
        "dynamic_overtake" => Some(DYNAMIC_OVERTAKE),
        _ => None,
    }
}

/// Load a built-in scenario by name.
pub fn load_builtin(name: &str) -> Result<Scenario> {
    let doc = builtin_document(name).ok_or_else(|| CilqgError::BadParams(format!(
        "unknown builtin scenario `{name}` (available: {})",
        builtin_names().join(", ")
    )))?;
    load_scenario(doc)
}

/// All built-in scenarios.
pub fn builtin_scenarios() -> Result<Vec<Scenario>> {
    builtin_names().iter().map(|n| load_builtin(n)).collect()
}
