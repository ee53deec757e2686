//! Acceptance checks, one PASS/FAIL line each. Run with
//! `cargo test --release --test acceptance`.

mod common;

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{binomial_slack, lattice_distance, qp_barrier, vtol_metric};
use conformal_contraction::conformal::{calibrate, empirical_coverage};
use conformal_contraction::control::{solve_min_norm, ContractingPolicy, FeedbackConstraint};
use conformal_contraction::harness::{Pipeline, Report};
use conformal_contraction::linalg::{Matrix, Vector};
use conformal_contraction::metric::{
    riemannian_distance, synthesize_constant_metric, ContractionMetric, GeodesicOptions, PolyTerm,
};
use conformal_contraction::predictor::{sample_reference_dataset, ReferenceSampler};
use conformal_contraction::rng::stream;
use conformal_contraction::systems::{benchmark_3d, benchmark_vtol, integrate, VtolParams};
use conformal_contraction::tube::{tracking_distances, PrciTube};
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn configs() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn run_config(name: &str) -> (Report, Duration) {
    let out = tempfile::tempdir().unwrap();
    let t = Instant::now();
    let report = Pipeline::from_config_file(&configs().join(name), out.path(), None)
        .and_then(|mut p| p.run())
        .unwrap_or_else(|e| panic!("{name}: {e}"));
    (report, t.elapsed())
}

fn conformal_exactness() -> Outcome {
    let (reps, n_cal, n_test, alpha) = (10_000, 50, 100, 0.05);
    let t = Instant::now();
    let cov: Vec<f64> = (0..reps)
        .map(|k| {
            let mut rng = stream(1, "exchangeable", k);
            let cal: Vec<f64> = (0..n_cal).map(|_| rng.random::<f64>()).collect();
            let test: Vec<f64> = (0..n_test).map(|_| rng.random::<f64>()).collect();
            empirical_coverage(&test, calibrate(&cal, alpha).unwrap().quantile_value)
        })
        .collect();
    let elapsed = t.elapsed();
    let mean = cov.iter().sum::<f64>() / reps as f64;
    let var = cov.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
    let se = (var / reps as f64).sqrt();
    let (lo, hi) = (1.0 - alpha, 1.0 - alpha + 1.0 / (n_cal as f64 + 1.0));
    let pass = mean >= lo - 3.0 * se && mean <= hi + 3.0 * se && elapsed < Duration::from_secs(10);
    outcome(
        pass,
        format!(
            "mean coverage {mean:.5} in [{lo:.4}, {hi:.4}] ± 3·{se:.5}; {elapsed:.2?} (< 10 s)"
        ),
    )
}

fn desk_coverage_and_envelope() -> (Outcome, Outcome) {
    let (report, elapsed) = run_config("threeD_desk.toml");
    let c = &report.evaluation.containment;
    let floor = 0.95 - binomial_slack(0.95, c.n);
    let cov = outcome(
        c.fraction >= floor && elapsed < Duration::from_secs(300),
        format!(
            "containment {}/{} = {:.4} (≥ {floor:.4}), radius {:.4}; {elapsed:.1?} (< 5 min)",
            c.contained, c.n, c.fraction, c.radius
        ),
    );
    let e = &report.evaluation;
    let env = outcome(
        e.envelope_violations == 0 && e.envelope_checked > 0,
        format!(
            "{} violations among {} contained rollouts (slack {}·c2)",
            e.envelope_violations, e.envelope_checked, e.envelope_slack
        ),
    );
    (cov, env)
}

fn nominal_contraction() -> Outcome {
    let (nominal, _) = benchmark_3d(&Default::default());
    let metric = synthesize_constant_metric(
        &nominal,
        &nominal.state_box().grid(5, None),
        &Default::default(),
    )
    .unwrap()
    .metric;
    let lambda = metric.rate();
    let (horizon, dt) = ((3.0 / lambda / 0.01).ceil() * 0.01, 0.01);
    let refs = sample_reference_dataset(
        &nominal,
        &ReferenceSampler::for_system(&nominal),
        20,
        horizon,
        dt,
        4,
    )
    .unwrap();
    let mut worst = f64::INFINITY;
    for (k, r) in refs.records.iter().enumerate() {
        let mut rng = stream(4, "contraction-offset", k as u64);
        let offset = Vector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
        let xr0 = &r.record.states[0];
        let policy =
            ContractingPolicy::new(metric.clone(), nominal.clone(), r.reference_input.clone());
        let run = policy
            .rollout(&nominal, &(xr0 + offset), xr0, horizon, dt)
            .unwrap();
        let d = tracking_distances(
            &metric,
            &run.record.states,
            &run.reference,
            &Default::default(),
        );
        let pts: Vec<(f64, f64)> = run
            .record
            .times
            .iter()
            .zip(&d)
            .filter(|(t, d)| **t <= 3.0 / lambda + 1e-9 && **d > 1e-12)
            .map(|(t, d)| (*t, d.ln()))
            .collect();
        let n = pts.len() as f64;
        let (st, sy) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
        let (mt, my) = (st / n, sy / n);
        let num: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum();
        let den: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
        worst = worst.min(-num / den);
    }
    outcome(
        worst >= 0.9 * lambda,
        format!(
            "slowest fitted rate {worst:.4} over 20 pairs (≥ 0.9·λ = {:.4})",
            0.9 * lambda
        ),
    )
}

fn qp_equivalence() -> Outcome {
    let t = Instant::now();
    let mut worst = 0.0f64;
    let mut active = 0;
    for k in 0..1000 {
        let mut rng = stream(5, "qp-instances", k);
        let m = rng.random_range(1..7);
        let a = Vector::from_fn(m, |_, _| rng.random_range(-3.0..3.0));
        let b = rng.random_range(-3.0..3.0);
        let kappa = solve_min_norm(&FeedbackConstraint {
            a: a.clone(),
            b,
            energy: 1.0,
        })
        .unwrap();
        worst = worst.max((kappa - qp_barrier(&a, b)).amax());
        active += usize::from(b > 0.0);
    }
    let elapsed = t.elapsed();
    outcome(
        worst <= 1e-8 && elapsed < Duration::from_secs(5),
        format!("max deviation {worst:.2e} (≤ 1e-8), {active}/1000 active; {elapsed:.2?} (< 5 s)"),
    )
}

fn geodesics() -> Outcome {
    let mut rng = stream(6, "closed-form", 0);
    let mut flat_err = 0.0f64;
    for _ in 0..200 {
        let l = Matrix::from_fn(5, 5, |_, _| rng.random_range(-1.0..1.0));
        let m = &l * l.transpose() + Matrix::identity(5, 5) * 0.1;
        let metric = ContractionMetric::constant(m.clone(), 1.0).unwrap();
        let x = Vector::from_fn(5, |_, _| rng.random_range(-5.0..5.0));
        let y = Vector::from_fn(5, |_, _| rng.random_range(-5.0..5.0));
        let e = &y - &x;
        let exact = e.dot(&(&m * &e)).sqrt();
        flat_err = flat_err
            .max((riemannian_distance(&metric, &x, &y, &Default::default()).0 - exact).abs());
    }
    // M(x) = [[1 + x₂², 0.3], [0.3, 1 + x₁²]]
    let c = |a: f64, b: f64, d: f64| Matrix::from_row_slice(2, 2, &[a, b, b, d]);
    let warped = ContractionMetric::polynomial(
        vec![
            PolyTerm {
                exponents: vec![0, 0],
                coefficient: c(1.0, 0.3, 1.0),
            },
            PolyTerm {
                exponents: vec![0, 2],
                coefficient: c(1.0, 0.0, 0.0),
            },
            PolyTerm {
                exponents: vec![2, 0],
                coefficient: c(0.0, 0.0, 1.0),
            },
        ],
        0.7,
        10.0,
        1.0,
    )
    .unwrap();
    let mut rel = 0.0f64;
    for (a, b) in [
        ([-1.5, 1.5], [1.5, 1.5]),
        ([-1.5, -1.0], [1.0, 1.5]),
        ([1.5, -1.5], [1.5, 1.5]),
        ([-0.5, 0.0], [1.0, 0.5]),
    ] {
        let (d, _) = riemannian_distance(
            &warped,
            &Vector::from_vec(a.to_vec()),
            &Vector::from_vec(b.to_vec()),
            &GeodesicOptions {
                segments: 32,
                ..Default::default()
            },
        );
        let oracle = lattice_distance(&warped, a, b, [-2.0, -2.0], [2.0, 2.0], 81, 4);
        rel = rel.max((d - oracle).abs() / oracle);
    }
    outcome(
        flat_err <= 1e-10 && rel <= 0.01,
        format!("constant metric error {flat_err:.2e} (≤ 1e-10); state-dependent vs lattice {:.3}% (≤ 1%)", 100.0 * rel),
    )
}

fn schur_soundness() -> Outcome {
    let metric = vtol_metric();
    let params = VtolParams::default();
    let vtol = benchmark_vtol(&params).nominal();
    let hover = Vector::from_vec(vec![params.hover_thrust(); 2]);
    let x0 = Vector::from_vec(vec![4.0, 6.0, 0.0, 0.0, 0.0, 0.0]);
    let reference = integrate(&vtol, &x0, |_, _| hover.clone(), 1.0, 0.1).unwrap();
    let tube = PrciTube::with_radius(reference, metric.clone(), 1.5, 0.05);
    let mut rng = stream(7, "schur", 0);
    let mut outside = 0;
    let mut touch = 0.0f64;
    let planes = [(0, 1), (2, 5), (3, 4)];
    let projected: Vec<_> = planes
        .iter()
        .map(|&(i, j)| tube.project(i, j).unwrap())
        .collect();
    for s in 0..10_000 {
        let (i, j) = planes[s % 3];
        let (t, e) = &projected[s % 3][(s / 3) % projected[s % 3].len()];
        let x = tube.sample_cross_section(*t, &mut rng);
        outside += usize::from(!e.contains([x[i], x[j]]));
    }
    for (&(i, j), ellipses) in planes.iter().zip(&projected) {
        let (t, e) = &ellipses[0];
        let c = tube.center(*t);
        let minv = metric.eval(&c).try_inverse().unwrap();
        for k in 0..64 {
            let th = k as f64 * std::f64::consts::TAU / 64.0;
            let mut w = Vector::zeros(6);
            w[i] = th.cos();
            w[j] = th.sin();
            let mw = &minv * &w;
            let x = &c + &mw * (tube.radius / w.dot(&mw).sqrt());
            let r2 = e.radius * e.radius;
            touch = touch.max((e.level([x[i], x[j]]) - r2).abs() / r2);
        }
    }
    outcome(
        outside == 0 && touch <= 1e-6,
        format!(
            "{outside}/10000 interior samples outside; boundary touch error {touch:.2e} (≤ 1e-6)"
        ),
    )
}

fn tightened_planning() -> Outcome {
    let (report, elapsed) = run_config("threeD_plan_desk.toml");
    let e = &report.evaluation;
    let n = e.containment.n;
    let (v, f) = (
        e.constraint_violations.unwrap_or(n),
        e.constraint_violation_fraction.unwrap_or(1.0),
    );
    let ceiling = 0.05 + binomial_slack(0.05, n);
    let p = report.planning.as_ref().expect("planning summary");
    outcome(
        f <= ceiling,
        format!(
            "{v}/{n} rollouts violate the original sets = {f:.4} (≤ {ceiling:.4}); {}/{} plans solved, radii {:.3}/{:.3}; {elapsed:.1?}",
            p.plans_solved, p.plans_requested, report.calibration.radius, p.tracking_calibration.radius
        ),
    )
}

fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        Pipeline::from_config_file(&configs().join("smoke.toml"), d.path(), None)
            .and_then(|mut p| p.run())
            .unwrap();
    }
    let ra = fs::read(a.path().join("report.json")).unwrap();
    let rb = fs::read(b.path().join("report.json")).unwrap();
    outcome(
        ra == rb,
        format!("report.json {} bytes, identical: {}", ra.len(), ra == rb),
    )
}

fn main() -> ExitCode {
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let wanted = |k: usize| filter.is_empty() || filter.iter().any(|f| f == &k.to_string());
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    if wanted(1) {
        results.push((1, "conformal exactness", conformal_exactness()));
    }
    if wanted(2) || wanted(3) {
        let (cov, env) = desk_coverage_and_envelope();
        results.push((2, "desk-scale coverage", cov));
        results.push((3, "envelope", env));
    }
    if wanted(4) {
        results.push((4, "nominal contraction", nominal_contraction()));
    }
    if wanted(5) {
        results.push((5, "QP oracle", qp_equivalence()));
    }
    if wanted(6) {
        results.push((6, "geodesics", geodesics()));
    }
    if wanted(7) {
        results.push((7, "Schur projection", schur_soundness()));
    }
    if wanted(8) {
        results.push((8, "tightened planning", tightened_planning()));
    }
    if wanted(9) {
        results.push((9, "determinism", determinism()));
    }
    let mut failed = 0;
    for (k, name, o) in &results {
        println!(
            "{} {k}. {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        failed += usize::from(!o.pass);
    }
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
