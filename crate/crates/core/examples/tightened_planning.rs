//! Plan inside tightened state and input boxes on the 3D benchmark, then track
//! the plan on the perturbed plant (no predictor) and check the original
//! constraints. The tube radius is an argument here, not calibrated.

use conformal_contraction::linalg::Vector;
use conformal_contraction::metric::synthesize_constant_metric;
use conformal_contraction::planner::{end_to_end_run, Constraints, PlanProblem, SolverOptions};
use conformal_contraction::systems::{benchmark_3d, BoxSet};
use conformal_contraction::tube::{tighten_input_box, tighten_state_box};

fn main() -> conformal_contraction::Result<()> {
    let radius: f64 = std::env::args()
        .nth(1)
        .map_or(2.5, |s| s.parse().expect("radius"));
    let (nominal, truth) = benchmark_3d(&Default::default());
    let metric = synthesize_constant_metric(
        &nominal,
        &nominal.state_box().grid(5, None),
        &Default::default(),
    )?
    .metric;
    let state_box = BoxSet::symmetric(&[4.0; 3]);
    let input_box = BoxSet::symmetric(&[20.0; 2]);
    let s_bar = tighten_state_box(&state_box, radius, &metric);
    let a_bar = tighten_input_box(
        &input_box,
        &s_bar.set,
        &metric,
        &nominal,
        radius,
        &Default::default(),
    )?;
    println!("tightened state box {:?}..{:?}", s_bar.set.lo, s_bar.set.hi);
    println!("tightened input box {:?}..{:?}", a_bar.set.lo, a_bar.set.hi);

    let problem = PlanProblem {
        sys: nominal.clone(),
        horizon: 5.0,
        dt: 0.01,
        start: Vector::from_vec(vec![-1.5, 0.5, -0.5]),
        goal: Vector::from_vec(vec![3.5, 0.0, 0.0]),
        goal_weights: vec![1.0; 3],
        state_box: s_bar.set.clone(),
        input_box: a_bar.set.clone(),
        obstacles: vec![],
        plane: [0, 1],
        w1: 0.01,
        w2: 10.0,
        barrier: 0.01,
        options: SolverOptions {
            max_iter: 150,
            ..Default::default()
        },
    };
    let plan = problem.solve(None)?;
    println!(
        "plan: cost {:.4} after {} iterations (converged {}), final state {:.3?}",
        plan.cost,
        plan.iterations,
        plan.converged,
        plan.record.states.last().expect("non-empty").as_slice()
    );

    let constraints = Constraints {
        state_box,
        input_box,
        obstacles: vec![],
        plane: [0, 1],
    };
    let truth = truth.with_state_box(constraints.state_box.clone());
    let (report, _) = end_to_end_run(
        &truth,
        &plan,
        &metric,
        None,
        &Default::default(),
        &plan.record.states[0],
        radius,
        &constraints,
    )?;
    println!(
        "tracking: max distance {:.4}, contained {}, state violation {:.3e}, input violation {:.3e}",
        report.max_distance, report.contained, report.state_violation, report.input_violation
    );
    Ok(())
}
