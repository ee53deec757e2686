mod common;

use common::{lattice_distance, qp_barrier, vtol_metric};
use conformal_contraction::control::{solve_min_norm, FeedbackConstraint};
use conformal_contraction::linalg::{Matrix, Vector};
use conformal_contraction::metric::{
    riemannian_distance, ContractionMetric, GeodesicOptions, PolyTerm,
};
use conformal_contraction::planner::{PlanProblem, SolverOptions};
use conformal_contraction::rng::stream;
use conformal_contraction::systems::{BoxSet, DynamicalSystem};
use conformal_contraction::tube::{
    sample_metric_ball, schur_projection, tighten_input_box, tighten_state_box, Ellipse2d,
    InputTighteningOptions,
};
use rand::Rng;

fn warped() -> ContractionMetric {
    // M(x) = [[2 + x₂², 0.5], [0.5, 1 + 0.5 x₁²]]
    let c = |a: f64, b: f64, d: f64| Matrix::from_row_slice(2, 2, &[a, b, b, d]);
    ContractionMetric::polynomial(
        vec![
            PolyTerm {
                exponents: vec![0, 0],
                coefficient: c(2.0, 0.5, 1.0),
            },
            PolyTerm {
                exponents: vec![0, 2],
                coefficient: c(1.0, 0.0, 0.0),
            },
            PolyTerm {
                exponents: vec![2, 0],
                coefficient: c(0.0, 0.0, 0.5),
            },
        ],
        0.5,
        10.0,
        1.0,
    )
    .unwrap()
}

#[test]
fn geodesic_matches_lattice_shortest_path() {
    let metric = warped();
    for (a, b) in [
        ([-1.5, 1.5], [1.5, 1.5]),
        ([-1.0, -1.0], [1.5, 0.5]),
        ([0.0, -1.5], [0.0, 1.5]),
    ] {
        let (d, g) = riemannian_distance(
            &metric,
            &Vector::from_vec(a.to_vec()),
            &Vector::from_vec(b.to_vec()),
            &GeodesicOptions {
                segments: 32,
                ..Default::default()
            },
        );
        let oracle = lattice_distance(&metric, a, b, [-2.0, -2.0], [2.0, 2.0], 81, 4);
        assert!(g.converged);
        assert!(
            (d - oracle).abs() <= 0.01 * oracle,
            "{a:?} -> {b:?}: geodesic {d}, lattice {oracle}"
        );
    }
}

#[test]
fn constant_metric_distance_closed_form() {
    let mut rng = stream(5, "closed-form", 0);
    for _ in 0..50 {
        let l = Matrix::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0));
        let m = &l * l.transpose() + Matrix::identity(4, 4);
        let metric = ContractionMetric::constant(m.clone(), 1.0).unwrap();
        let x = Vector::from_fn(4, |_, _| rng.random_range(-3.0..3.0));
        let y = Vector::from_fn(4, |_, _| rng.random_range(-3.0..3.0));
        let (d, _) = riemannian_distance(&metric, &x, &y, &Default::default());
        let e = &y - &x;
        assert!((d - e.dot(&(&m * &e)).sqrt()).abs() < 1e-10);
    }
}

#[test]
fn min_norm_feedback_matches_barrier_qp() {
    let mut rng = stream(6, "qp", 0);
    let mut active = 0;
    for _ in 0..300 {
        let m = rng.random_range(1..5);
        let a = Vector::from_fn(m, |_, _| rng.random_range(-2.0..2.0));
        let b = rng.random_range(-2.0..2.0);
        let c = FeedbackConstraint {
            a: a.clone(),
            b,
            energy: 1.0,
        };
        let k = solve_min_norm(&c).unwrap();
        let oracle = qp_barrier(&a, b);
        active += usize::from(b > 0.0);
        assert!(
            (&k - &oracle).amax() < 1e-8,
            "a {a:?} b {b} closed {k:?} oracle {oracle:?}"
        );
    }
    assert!(active > 100 && active < 200);
}

#[test]
fn state_tightening_matches_boundary_sampling() {
    let m = Matrix::from_diagonal(&Vector::from_vec(vec![4.0, 1.0]));
    let metric = ContractionMetric::constant(m.clone(), 1.0).unwrap();
    let t = tighten_state_box(&BoxSet::symmetric(&[1.0, 2.0]), 1.0, &metric);
    assert_eq!(t.upper_margin, vec![0.5, 1.0]);
    let mut rng = stream(7, "ball-boundary", 0);
    let mut ext = [0.0f64; 2];
    for _ in 0..100_000 {
        let th: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let p = [th.cos() / 2.0, th.sin()];
        ext[0] = ext[0].max(p[0].abs());
        ext[1] = ext[1].max(p[1].abs());
    }
    for (e, m) in ext.iter().zip(&t.upper_margin) {
        assert!(*e <= m + 1e-12);
        assert!(m - e < 1e-6);
    }
}

#[test]
fn input_margin_against_scalar_feedback_gain() {
    // ẋ = a x + u with M = 1: k(ξ, x̄) = −(λ + a)(ξ − x̄), so sup over the ball is (λ + a)d̄.
    let a = 0.3;
    let sys = DynamicalSystem::linear(
        "scalar",
        Matrix::from_element(1, 1, a),
        Matrix::from_element(1, 1, 1.0),
    );
    let metric = ContractionMetric::constant(Matrix::identity(1, 1), 1.2).unwrap();
    let radius = 0.7;
    let exact = (1.2 + a) * radius;
    let t = tighten_input_box(
        &BoxSet::symmetric(&[10.0]),
        &BoxSet::symmetric(&[2.0]),
        &metric,
        &sys,
        radius,
        &InputTighteningOptions {
            sections: 8,
            budget: 200,
            ..Default::default()
        },
    )
    .unwrap();
    for margin in [t.lower_margin[0], t.upper_margin[0]] {
        assert!(
            (margin - exact).abs() <= 0.15 * exact,
            "margin {margin}, exact {exact}"
        );
    }
    let centre_only = tighten_input_box(
        &BoxSet::symmetric(&[10.0]),
        &BoxSet::symmetric(&[2.0]),
        &metric,
        &sys,
        radius,
        &InputTighteningOptions {
            sections: 8,
            budget: 1,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(centre_only.upper_margin, vec![0.0]);
}

#[test]
fn vtol_projection_sound_and_tight() {
    let metric = vtol_metric();
    let c = Vector::from_vec(vec![5.0, 5.0, 0.0, 0.0, 0.0, 0.0]);
    let m = metric.eval(&c);
    let minv = m.clone().try_inverse().unwrap();
    let r = 1.3;
    let mut rng = stream(8, "vtol-projection", 0);
    for (i, j) in [(0, 1), (2, 5), (1, 4)] {
        let e = Ellipse2d::from_metric(&m, &c, i, j, r).unwrap();
        for _ in 0..2000 {
            let x = sample_metric_ball(&m, &c, r, &mut rng);
            assert!(e.contains([x[i], x[j]]));
        }
        for k in 0..16 {
            let th = k as f64 * std::f64::consts::TAU / 16.0;
            let mut w = Vector::zeros(6);
            w[i] = th.cos();
            w[j] = th.sin();
            let mw = &minv * &w;
            let x = &c + &mw * (r / w.dot(&mw).sqrt());
            assert!((e.level([x[i], x[j]]) - r * r).abs() < 1e-6 * r * r);
        }
    }
    let block = Matrix::from_fn(6, 6, |a, b| {
        if a < 2 && b < 2 || a >= 2 && b >= 2 {
            m[(a, b)]
        } else {
            0.0
        }
    });
    let s = schur_projection(&block, 0, 1).unwrap();
    assert!((s - block.view((0, 0), (2, 2))).amax() < 1e-12);
}

#[test]
fn double_integrator_plan_matches_dense_least_squares() {
    let sys = DynamicalSystem::linear(
        "double-integrator",
        Matrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
        Matrix::from_row_slice(2, 1, &[0.0, 1.0]),
    );
    let (horizon, dt, hold) = (2.0, 0.01, 10);
    let (w1, w2) = (0.05, 10.0);
    let problem = PlanProblem {
        sys,
        horizon,
        dt,
        start: Vector::from_vec(vec![0.0, 0.0]),
        goal: Vector::from_vec(vec![1.0, 0.0]),
        goal_weights: vec![1.0, 1.0],
        state_box: BoxSet::unbounded(2),
        input_box: BoxSet::symmetric(&[100.0]),
        obstacles: vec![],
        plane: [0, 1],
        w1,
        w2,
        barrier: 0.0,
        options: SolverOptions {
            max_iter: 3000,
            rel_tol: 1e-12,
            hold_steps: hold,
            ..Default::default()
        },
    };
    let plan = problem.solve(None).unwrap();

    // x_T = G u over the held blocks, solved densely.
    let blocks = 20;
    let tau = hold as f64 * dt;
    let mut g = Matrix::zeros(2, blocks);
    for j in 0..blocks {
        let rest = horizon - (j + 1) as f64 * tau;
        g[(0, j)] = tau * tau / 2.0 + tau * rest;
        g[(1, j)] = tau;
    }
    let target = Vector::from_vec(vec![1.0, 0.0]);
    let h = Matrix::identity(blocks, blocks) * (w1 * tau) + g.transpose() * &g * w2;
    let u = h.lu().solve(&(g.transpose() * &target * w2)).unwrap();
    let miss = &g * &u - &target;
    let oracle = w1 * tau * u.norm_squared() + w2 * miss.norm_squared();
    assert!(
        (plan.cost - oracle).abs() <= 0.02 * oracle,
        "plan {} oracle {oracle}",
        plan.cost
    );
}
