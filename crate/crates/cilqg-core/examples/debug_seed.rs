//! Development probe: inspect constraint values on the seed rollout.

use cilqg_core::solver::*;
use cilqg_core::*;

fn main() {
    let sc = load_builtin("two_static_obstacles").unwrap();
    let problem = sc.to_problem().unwrap();
    let model = sc.model().unwrap();
    let zero_w = Vector::zeros(2);
    let mut states = vec![problem.initial_belief.mean.clone()];
    for u in &problem.initial_controls {
        states.push(model.step(states.last().unwrap(), u, &zero_w).unwrap());
    }
    let nominal = NominalTrajectory::new(states, problem.initial_controls.clone()).unwrap();
    for (k, x) in nominal.states.iter().enumerate() {
        if k % 5 == 0 {
            println!("k={k:2} x=({:7.3},{:7.3}) v={:6.3} th={:6.3}", x[0], x[1], x[2], x[3]);
        }
    }
    let variances = propagate_variance(
        &model,
        &nominal,
        &problem.initial_belief,
        PropagationOptions::default(),
    )
    .unwrap();
    for (k, c) in variances.covariances.iter().enumerate() {
        if k % 5 == 0 {
            let m = c.matrix();
            println!(
                "k={k:2} sig=({:.4},{:.4},{:.4},{:.4})",
                m[(0, 0)].sqrt(),
                m[(1, 1)].sqrt(),
                m[(2, 2)].sqrt(),
                m[(3, 3)].sqrt()
            );
        }
    }
    // Rebuild the schedule the solver would see.
    let settings = sc.settings.clone();
    let plan = match solve_problem(&problem, &settings) {
        Ok(p) => {
            println!("solved fine?!");
            p
        }
        Err(CilqgError::NoProgress { best, reason }) => {
            println!("NoProgress: {reason}");
            *best
        }
        Err(e) => {
            println!("error: {e}");
            // Build schedule manually through a 1-step hack: use the public
            // pieces to find the worst constraint.
            let p = settings.chance_threshold;
            for k in 1..=nominal.horizon() {
                let cov = &variances.covariances[k];
                for (i, poly) in sc.static_obstacles.iter().enumerate() {
                    let pos = [nominal.states[k][0], nominal.states[k][1]];
                    let (phi, grad) = signed_distance(poly, pos);
                    let mut row = nalgebra::RowDVector::zeros(4);
                    row[0] = -grad[0];
                    row[1] = -grad[1];
                    let gamma = compute_gamma(&row, cov, p).unwrap();
                    let value = poly.inflation - phi + gamma;
                    if value > -0.5 {
                        println!(
                            "k={k:2} obs{i} phi={phi:7.3} gamma={gamma:7.3} tight_value={value:+.4}"
                        );
                    }
                }
            }
            return;
        }
    };
    let _ = plan;
}
