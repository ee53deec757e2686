use log::{debug, info};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{verify_contraction, ContractionMetric, VerifyOptions};
use crate::error::{Error, Result};
use crate::linalg::{jacobian, null_space, sym, sym_eigen, Matrix, Vector};
use crate::systems::DynamicalSystem;

#[derive(Debug, Clone)]
pub struct SynthesisOptions {
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// Largest admissible condition number `χ = m̄ / m̲`.
    pub chi_max: f64,
    /// Residual score `s` used in the objective `(s / λ)² χ`.
    pub score_hint: f64,
    /// Rates tried between `lambda_min` and the largest feasible rate.
    pub lambda_candidates: usize,
    pub lambda_bisection_steps: usize,
    pub chi_bisection_steps: usize,
    /// A `(W, λ)` pair counts as feasible once its worst grid margin reaches this.
    pub margin_tol: f64,
    /// Projected-ascent iteration budget per feasibility problem.
    pub max_iter: usize,
    /// Optional finer grid the returned metric must also pass.
    pub verify_grid: Option<Vec<Vector>>,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        Self {
            lambda_min: 0.1,
            lambda_max: 5.0,
            chi_max: 100.0,
            score_hint: 1.0,
            lambda_candidates: 12,
            lambda_bisection_steps: 16,
            chi_bisection_steps: 14,
            margin_tol: 1e-3,
            max_iter: 600,
            verify_grid: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthesisCandidate {
    pub lambda: f64,
    pub chi: f64,
    pub objective: f64,
    pub margin: f64,
}

#[derive(Debug, Clone)]
pub struct SynthesisOutcome {
    pub metric: ContractionMetric,
    pub chi: f64,
    pub objective: f64,
    /// Largest rate found feasible at `chi_max`.
    pub lambda_feasible_max: f64,
    pub candidates: Vec<SynthesisCandidate>,
}

/// Per-point data of the constant-`W` conditions: drift Jacobian and an
/// orthonormal basis of `ker(Bᵀ)`.
struct PointData {
    a: Matrix,
    kernel: Matrix,
}

struct Problem {
    points: Vec<PointData>,
    n: usize,
}

/// Eigen-pairs of `S = −Nᵀ(AW + WAᵀ + 2λW)N` at one point.
fn point_spectrum(p: &PointData, w: &Matrix, lambda: f64) -> (Vector, Matrix) {
    let aw = &p.a * w;
    let c = &aw + aw.transpose() + w * (2.0 * lambda);
    let s = -(p.kernel.transpose() * c * &p.kernel);
    sym_eigen(&s)
}

impl Problem {
    fn new(sys: &DynamicalSystem, grid: &[Vector]) -> Self {
        let n = sys.state_dim();
        let points = grid
            .par_iter()
            .map(|x| {
                let a = jacobian(|y| sys.drift(y), x);
                let mut kernel = null_space(&sys.actuation(x).transpose(), 1e-8);
                if kernel.ncols() == 0 {
                    kernel = Matrix::identity(n, n);
                }
                PointData { a, kernel }
            })
            .collect();
        Self { points, n }
    }

    fn hard_margin(&self, w: &Matrix, lambda: f64) -> f64 {
        self.points
            .par_iter()
            .map(|p| point_spectrum(p, w, lambda).0[0])
            .collect::<Vec<_>>()
            .into_iter()
            .fold(f64::INFINITY, f64::min)
    }

    /// Soft-min of all eigenvalues and its gradient with respect to `W`.
    fn soft_margin(
        &self,
        w: &Matrix,
        lambda: f64,
        beta: f64,
        want_grad: bool,
    ) -> (f64, f64, Matrix) {
        let spectra: Vec<(Vector, Matrix)> = self
            .points
            .par_iter()
            .map(|p| point_spectrum(p, w, lambda))
            .collect();
        let floor = spectra
            .iter()
            .flat_map(|(v, _)| v.iter().copied())
            .fold(f64::INFINITY, f64::min);
        let mut z = 0.0;
        for (values, _) in &spectra {
            z += values
                .iter()
                .map(|mu| (-beta * (mu - floor)).exp())
                .sum::<f64>();
        }
        let soft = floor - z.ln() / beta;
        let mut grad = Matrix::zeros(self.n, self.n);
        if want_grad {
            for (p, (values, vectors)) in self.points.iter().zip(&spectra) {
                for (k, mu) in values.iter().enumerate() {
                    let weight = (-beta * (mu - floor)).exp() / z;
                    if weight < 1e-14 {
                        continue;
                    }
                    let zv = &p.kernel * vectors.column(k);
                    let zz = &zv * zv.transpose();
                    let atz = p.a.transpose() * &zz;
                    grad -= (&atz + atz.transpose() + &zz * (2.0 * lambda)) * weight;
                }
            }
        }
        (soft, floor, grad)
    }
}

/// Project a symmetric matrix onto `{W : I ⪯ W ⪯ χI}`.
fn project(w: &Matrix, chi: f64) -> Matrix {
    let (values, vectors) = sym_eigen(w);
    let clipped = values.map(|v| v.clamp(1.0, chi));
    sym(&(&vectors * Matrix::from_diagonal(&clipped) * vectors.transpose()))
}

/// Maximise the worst grid margin over `I ⪯ W ⪯ χI` at fixed `λ` by projected
/// ascent on a soft-min with increasing sharpness. Stops early once the hard
/// margin reaches `target`.
fn maximize_margin(
    problem: &Problem,
    lambda: f64,
    chi: f64,
    start: &Matrix,
    target: f64,
    max_iter: usize,
) -> (Matrix, f64) {
    let mut w = project(start, chi);
    let mut best = (w.clone(), problem.hard_margin(&w, lambda));
    if best.1 >= target {
        return best;
    }
    let scale = problem
        .points
        .iter()
        .map(|p| p.a.norm() + 2.0 * lambda)
        .fold(1e-12, f64::max)
        * chi;
    let sharpness = [4.0, 16.0, 64.0, 256.0, 1024.0, 4096.0];
    let per_stage = (max_iter / sharpness.len()).max(1);
    let mut step = 0.1 * chi;
    for s in sharpness {
        let beta = s / scale;
        let (mut value, _, mut grad) = problem.soft_margin(&w, lambda, beta, true);
        for _ in 0..per_stage {
            let gnorm = grad.norm();
            if gnorm == 0.0 {
                break;
            }
            let mut improved = false;
            while step > 1e-12 * chi {
                let trial = project(&(&w + &grad * (step / gnorm)), chi);
                let (v, hard, g) = problem.soft_margin(&trial, lambda, beta, true);
                if v > value {
                    w = trial;
                    value = v;
                    grad = g;
                    if hard > best.1 {
                        best = (w.clone(), hard);
                    }
                    step = (step * 1.5).min(chi);
                    improved = true;
                    break;
                }
                step *= 0.5;
            }
            if !improved || best.1 >= target {
                break;
            }
        }
        if best.1 >= target {
            break;
        }
        step = step.max(1e-3 * chi);
    }
    best
}

/// Search constant metrics `M = χ W⁻¹` with `I ⪯ W ⪯ χI` and rates `λ` that
/// satisfy the restricted contraction condition on `grid`, minimising the
/// squared Euclidean tube bound `(s / λ)² χ`.
///
/// The largest feasible rate at `chi_max` is found by bisection; for a ladder
/// of rates below it the smallest feasible `χ` is found by bisection as well.
/// Candidates are tried in order of objective and the first one whose metric
/// passes [`verify_contraction`] is returned.
pub fn synthesize_constant_metric(
    sys: &DynamicalSystem,
    grid: &[Vector],
    opts: &SynthesisOptions,
) -> Result<SynthesisOutcome> {
    let (lo, hi) = (opts.lambda_min, opts.lambda_max);
    if !(lo > 0.0 && hi >= lo && opts.chi_max >= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < lambda_min ≤ lambda_max and chi_max ≥ 1, got [{lo}, {hi}], {}",
            opts.chi_max
        )));
    }
    if grid.is_empty() {
        return Err(Error::InvalidArgument("synthesis grid is empty".into()));
    }
    let problem = Problem::new(sys, grid);
    let n = problem.n;
    let solve = |lambda: f64, chi: f64, start: &Matrix| {
        let (w, margin) =
            maximize_margin(&problem, lambda, chi, start, opts.margin_tol, opts.max_iter);
        (margin >= opts.margin_tol, w, margin)
    };

    let identity = Matrix::identity(n, n);
    let (ok, mut warm, _) = solve(lo, opts.chi_max, &identity);
    if !ok {
        return Err(Error::Infeasible {
            lambda_min: lo,
            lambda_max: hi,
        });
    }
    let mut feasible_max = lo;
    let (ok_hi, w_hi, _) = solve(hi, opts.chi_max, &warm);
    if ok_hi {
        feasible_max = hi;
        warm = w_hi;
    } else {
        let mut upper = hi;
        for _ in 0..opts.lambda_bisection_steps {
            let mid = 0.5 * (feasible_max + upper);
            let (ok, w, _) = solve(mid, opts.chi_max, &warm);
            if ok {
                feasible_max = mid;
                warm = w;
            } else {
                upper = mid;
            }
        }
    }
    info!(
        "largest feasible rate at chi_max = {}: {feasible_max:.4}",
        opts.chi_max
    );

    let count = opts.lambda_candidates.max(1);
    let mut candidates: Vec<(SynthesisCandidate, Matrix)> = Vec::with_capacity(count);
    for j in 0..count {
        let lambda = if count == 1 {
            feasible_max
        } else {
            lo + (feasible_max - lo) * j as f64 / (count - 1) as f64
        };
        // Bisect on log χ for the smallest feasible condition number.
        let (ok, mut w_best, mut margin_best) = solve(lambda, opts.chi_max, &warm);
        if !ok {
            continue;
        }
        let (ok1, w1, m1) = solve(lambda, 1.0, &identity);
        if ok1 {
            w_best = w1;
            margin_best = m1;
        } else {
            let (mut chi_lo, mut chi_hi) = (0.0f64, opts.chi_max.ln());
            for _ in 0..opts.chi_bisection_steps {
                let mid = 0.5 * (chi_lo + chi_hi);
                let (ok, w, m) = solve(lambda, mid.exp(), &w_best);
                if ok {
                    chi_hi = mid;
                    w_best = w;
                    margin_best = m;
                } else {
                    chi_lo = mid;
                }
            }
        }
        let (w_lo, w_hi) = {
            let (v, _) = sym_eigen(&w_best);
            (v[0], v[n - 1])
        };
        let chi = w_hi / w_lo;
        let objective = (opts.score_hint / lambda).powi(2) * chi;
        debug!("candidate λ = {lambda:.4}: χ = {chi:.4}, objective = {objective:.4}");
        candidates.push((
            SynthesisCandidate {
                lambda,
                chi,
                objective,
                margin: margin_best,
            },
            w_best,
        ));
    }
    candidates.sort_by(|a, b| a.0.objective.total_cmp(&b.0.objective));

    let verify_opts = VerifyOptions::default();
    for (cand, w) in &candidates {
        let (values, _) = sym_eigen(w);
        let w_bar = w / values[0];
        let chi = values[n - 1] / values[0];
        let Some(inv) = w_bar.clone().try_inverse() else {
            continue;
        };
        let metric = ContractionMetric::constant(sym(&(inv * chi)), cand.lambda)?;
        let coarse = verify_contraction(&metric, sys, grid, &verify_opts);
        let fine_ok = opts
            .verify_grid
            .as_ref()
            .map(|g| verify_contraction(&metric, sys, g, &verify_opts).passed)
            .unwrap_or(true);
        if coarse.passed && fine_ok {
            return Ok(SynthesisOutcome {
                metric,
                chi: cand.chi,
                objective: cand.objective,
                lambda_feasible_max: feasible_max,
                candidates: candidates.iter().map(|(c, _)| c.clone()).collect(),
            });
        }
        debug!("candidate λ = {} failed verification", cand.lambda);
    }
    Err(Error::Infeasible {
        lambda_min: lo,
        lambda_max: hi,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::BoxSet;

    fn stable_linear() -> DynamicalSystem {
        let b = Matrix::from_row_slice(2, 1, &[0.0, 1.0]);
        DynamicalSystem::linear("stable", -Matrix::identity(2, 2), b)
            .with_state_box(BoxSet::symmetric(&[1.0, 1.0]))
    }

    #[test]
    fn projection_clips_spectrum() {
        let w = Matrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 7.0]);
        let p = project(&w, 4.0);
        assert!((p[(0, 0)] - 1.0).abs() < 1e-12);
        assert!((p[(1, 1)] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn isotropic_case_returns_largest_rate() {
        let sys = stable_linear();
        let grid = sys.state_box().grid(3, None);
        let opts = SynthesisOptions {
            lambda_min: 0.1,
            lambda_max: 0.9,
            lambda_candidates: 5,
            ..Default::default()
        };
        let out = synthesize_constant_metric(&sys, &grid, &opts).unwrap();
        assert!((out.metric.rate() - 0.9).abs() < 1e-12);
        assert!((out.chi - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rate_above_attainable_is_infeasible() {
        let sys = stable_linear();
        let grid = sys.state_box().grid(3, None);
        let opts = SynthesisOptions {
            lambda_min: 1.5,
            lambda_max: 3.0,
            chi_max: 20.0,
            ..Default::default()
        };
        assert!(matches!(
            synthesize_constant_metric(&sys, &grid, &opts),
            Err(Error::Infeasible { .. })
        ));
    }
}
