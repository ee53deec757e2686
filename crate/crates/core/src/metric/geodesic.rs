use log::warn;

use super::ContractionMetric;
use crate::linalg::{solve_toeplitz_tridiagonal, Matrix, Vector};

#[derive(Debug, Clone, Copy)]
pub struct GeodesicOptions {
    /// Number of segments `K`; the curve has `K + 1` nodes.
    pub segments: usize,
    pub max_iter: usize,
    /// Stop once an accepted step lowers the energy by less than this fraction.
    pub rel_tol: f64,
}

impl Default for GeodesicOptions {
    fn default() -> Self {
        Self {
            segments: 16,
            max_iter: 500,
            rel_tol: 1e-9,
        }
    }
}

/// Discretised curve `γ(μ_i)`, `μ_i = i / K`, between two states.
#[derive(Debug, Clone)]
pub struct Geodesic {
    pub nodes: Vec<Vector>,
    /// Discrete energy `K Σ Δᵢᵀ M(midᵢ) Δᵢ`.
    pub energy: f64,
    /// Discrete length `Σ √(Δᵢᵀ M(midᵢ) Δᵢ)`.
    pub length: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Energy after each accepted iterate, starting with the straight segment.
    pub energy_history: Vec<f64>,
}

impl Geodesic {
    pub fn segments(&self) -> usize {
        self.nodes.len() - 1
    }
    pub fn endpoint_a(&self) -> &Vector {
        &self.nodes[0]
    }
    pub fn endpoint_b(&self) -> &Vector {
        &self.nodes[self.nodes.len() - 1]
    }
    pub fn distance(&self) -> f64 {
        self.energy.sqrt()
    }

    /// `∂γ/∂μ` at `μ = 0`, second-order one-sided difference.
    pub fn tangent_start(&self) -> Vector {
        let k = self.segments() as f64;
        let c = &self.nodes;
        if c.len() < 3 {
            return (&c[1] - &c[0]) * k;
        }
        ((&c[1] - &c[0]) * 4.0 - (&c[2] - &c[0])) * (0.5 * k)
    }

    /// `∂γ/∂μ` at `μ = 1`.
    pub fn tangent_end(&self) -> Vector {
        let k = self.segments() as f64;
        let c = &self.nodes;
        let n = c.len() - 1;
        if c.len() < 3 {
            return (&c[n] - &c[n - 1]) * k;
        }
        ((&c[n] - &c[n - 1]) * 4.0 - (&c[n] - &c[n - 2])) * (0.5 * k)
    }
}

fn straight(x: &Vector, y: &Vector, k: usize) -> Vec<Vector> {
    (0..=k)
        .map(|i| {
            if i == k {
                y.clone()
            } else {
                x + (y - x) * (i as f64 / k as f64)
            }
        })
        .collect()
}

/// Returns `(energy, length)` of a node chain.
fn energy_length(metric: &ContractionMetric, nodes: &[Vector]) -> (f64, f64) {
    let k = (nodes.len() - 1) as f64;
    let mut energy = 0.0;
    let mut length = 0.0;
    for w in nodes.windows(2) {
        let d = &w[1] - &w[0];
        let mid = (&w[0] + &w[1]) * 0.5;
        let q = d.dot(&(metric.eval(&mid) * &d)).max(0.0);
        energy += q;
        length += q.sqrt();
    }
    (k * energy, length)
}

/// Energy gradient with respect to the interior nodes `1..K-1`.
fn energy_gradient(metric: &ContractionMetric, nodes: &[Vector]) -> Vec<Vector> {
    let kk = (nodes.len() - 1) as f64;
    let n = nodes[0].len();
    let mut grad = vec![Vector::zeros(n); nodes.len()];
    for i in 0..nodes.len() - 1 {
        let d = &nodes[i + 1] - &nodes[i];
        let mid = (&nodes[i] + &nodes[i + 1]) * 0.5;
        let md = metric.eval(&mid) * &d;
        let mut half_dm = Vector::zeros(n);
        if !metric.is_constant() {
            for c in 0..n {
                half_dm[c] = 0.5 * d.dot(&(metric.partial(&mid, c) * &d));
            }
        }
        // Segment i contributes to node i (−2MΔ) and node i+1 (+2MΔ).
        grad[i] += (&half_dm - &md * 2.0) * kk;
        grad[i + 1] += (&half_dm + &md * 2.0) * kk;
    }
    grad
}

/// Minimum-energy curve between `x` and `y` under `metric`.
///
/// Interior nodes are moved by preconditioned gradient descent with Armijo
/// backtracking from the straight segment. The preconditioner is the exact
/// Hessian for a flat metric frozen at the chord midpoint, so constant metrics
/// terminate at the (exact) straight line without iterating.
pub fn riemannian_distance(
    metric: &ContractionMetric,
    x: &Vector,
    y: &Vector,
    opts: &GeodesicOptions,
) -> (f64, Geodesic) {
    let k = opts.segments.max(1);
    let mut nodes = straight(x, y, k);
    let (mut energy, mut length) = energy_length(metric, &nodes);
    let mut history = vec![energy];
    let mut converged = metric.is_constant() || k == 1 || energy == 0.0;
    let mut iterations = 0;

    if !converged {
        let pre = metric.eval(&((x + y) * 0.5));
        let pre = nalgebra::Cholesky::new(pre.clone())
            .map(|c| c.inverse())
            .unwrap_or_else(|| Matrix::identity(pre.nrows(), pre.ncols()));
        let n = x.len();
        while iterations < opts.max_iter {
            iterations += 1;
            let grad = energy_gradient(metric, &nodes);
            // Direction p = −(2K · T ⊗ M̄)⁻¹ g on interior nodes.
            let scaled: Vec<Vector> = grad[1..k].iter().map(|g| &pre * g).collect();
            let mut dir = vec![Vector::zeros(n); k - 1];
            let mut column = vec![0.0; k - 1];
            for c in 0..n {
                for (j, s) in scaled.iter().enumerate() {
                    column[j] = s[c];
                }
                solve_toeplitz_tridiagonal(2.0, -1.0, &mut column);
                for (j, d) in dir.iter_mut().enumerate() {
                    d[c] = -column[j] / (2.0 * k as f64);
                }
            }
            let slope: f64 = grad[1..k].iter().zip(&dir).map(|(g, d)| g.dot(d)).sum();
            if !(slope < 0.0) {
                converged = true;
                break;
            }
            let mut step = 1.0;
            let mut accepted = None;
            for _ in 0..40 {
                let mut trial = nodes.clone();
                for (j, d) in dir.iter().enumerate() {
                    trial[j + 1] += d * step;
                }
                let (e, l) = energy_length(metric, &trial);
                if e <= energy + 1e-4 * step * slope {
                    accepted = Some((trial, e, l));
                    break;
                }
                step *= 0.5;
            }
            let Some((trial, e, l)) = accepted else {
                converged = true;
                break;
            };
            let decrease = (energy - e) / energy;
            nodes = trial;
            energy = e;
            length = l;
            history.push(energy);
            if decrease < opts.rel_tol {
                converged = true;
                break;
            }
        }
        if !converged {
            warn!(
                "geodesic solve stopped after {} iterations without reaching relative tolerance {:e}",
                iterations, opts.rel_tol
            );
        }
    }

    let geodesic = Geodesic {
        nodes,
        energy,
        length,
        converged,
        iterations,
        energy_history: history,
    };
    (energy.sqrt(), geodesic)
}
