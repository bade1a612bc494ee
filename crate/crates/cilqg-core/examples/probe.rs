//! Development probe: solve the builtin scenarios in every mode and print
//! the quantities the fixtures are tuned around.

use cilqg_core::*;

fn ellipse_clearance(
    plan: &PlanResult,
    variances: &VarianceSequence,
    obstacles: &[ConvexPolygonObstacle],
    p: f64,
) -> f64 {
    // Minimum over steps/obstacles of signed distance of the transformed
    // polygon from the unit disc; <= 1 means the ellipse intersects.
    let mut min_phi = f64::INFINITY;
    for (k, x) in plan.states.iter().enumerate() {
        let belief = Belief::new(x.clone(), variances.covariances[k].clone()).unwrap();
        let cov = belief.covariance.matrix();
        let sub = Matrix::from_row_slice(2, 2, &[cov[(0, 0)], cov[(0, 1)], cov[(1, 0)], cov[(1, 1)]]);
        let scale = chi2_quantile_2dof(p).sqrt();
        let m = CovarianceMatrix::new(sub).unwrap().sqrt() * scale;
        let minv = m.clone().try_inverse().unwrap();
        for poly in obstacles {
            let verts: Vec<[f64; 2]> = poly
                .vertices()
                .iter()
                .map(|v| {
                    let d = Vector::from_row_slice(&[v[0] - x[0], v[1] - x[1]]);
                    let t = &minv * d;
                    [t[0], t[1]]
                })
                .collect();
            let tpoly = ConvexPolygonObstacle::new(verts, 0.0).unwrap();
            let (phi, _) = signed_distance(&tpoly, [0.0, 0.0]);
            min_phi = min_phi.min(phi);
        }
    }
    min_phi
}

fn report(name: &str) {
    println!("=== {name} ===");
    let sc = load_builtin(name).unwrap();
    let problem = sc.to_problem().unwrap();
    let p = sc.settings.chance_threshold;
    for mode in [SolverMode::Cilqg, SolverMode::Cilqr, SolverMode::Gbsp, SolverMode::OpenCilqg] {
        let mut settings = sc.settings.clone();
        settings.mode = mode;
        let started = std::time::Instant::now();
        let res = solve_problem(&problem, &settings);
        let dt = started.elapsed().as_secs_f64() * 1e3;
        match res {
            Ok(plan) => {
                let max_c = plan.diagnostics.max_constraint_value;
                let term = &plan.states[plan.states.len() - 1];
                let vmin = plan.states.iter().map(|x| x[2]).fold(f64::INFINITY, f64::min);
                let vmax = plan.states.iter().map(|x| x[2]).fold(f64::NEG_INFINITY, f64::max);
                let dmax = plan
                    .controls
                    .iter()
                    .map(|u| u[1].abs())
                    .fold(0.0, f64::max);
                // Assessed closed-loop covariances on this nominal.
                let model = sc.model().unwrap();
                let traj = plan.trajectory();
                let assessed = propagate_variance(
                    &model,
                    &traj,
                    &problem.initial_belief,
                    PropagationOptions::default(),
                )
                .unwrap();
                let used = if mode == SolverMode::Cilqr { &assessed } else { &plan.variances };
                let ell = if sc.static_obstacles.is_empty() {
                    f64::NAN
                } else {
                    ellipse_clearance(&plan, used, &sc.static_obstacles, p)
                };
                let sigma_max = used
                    .covariances
                    .iter()
                    .map(|c| c.matrix()[(1, 1)].sqrt())
                    .fold(0.0, f64::max);
                println!(
                    "{:6} converged={} outer={} inner={} t={:.1e} cost={:.1} maxC={:+.3e} term=({:.1},{:.2}) v=[{:.2},{:.2}] dmax={:.4} sigy_max={:.3} ellip_phi={:.3} {:.1}ms",
                    mode.name(),
                    plan.diagnostics.converged,
                    plan.diagnostics.outer_iterations,
                    plan.diagnostics.inner_iterations,
                    plan.diagnostics.final_barrier_weight,
                    plan.true_cost,
                    max_c,
                    term[0],
                    term[1],
                    vmin,
                    vmax,
                    dmax,
                    sigma_max,
                    ell,
                    dt
                );
            }
            Err(e) => println!("{:6} ERROR after {:.1}ms: {e}", mode.name(), dt),
        }
    }
}

fn main() {
    for name in builtin_names() {
        report(name);
    }
}
