use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ContractionMetric;
use crate::linalg::{jacobian, null_space, sym_eigen, Matrix, Vector};
use crate::systems::DynamicalSystem;

#[derive(Debug, Clone, Copy)]
pub struct VerifyOptions {
    /// Absolute Frobenius-norm tolerance on the killing condition.
    pub killing_tol: f64,
    /// Relative slack on the eigenvalue bounds.
    pub bound_rel_tol: f64,
    /// The contraction condition passes when its margin exceeds this.
    pub margin_floor: f64,
    /// Rank tolerance for `ker(BᵀM)`, relative to the largest singular value.
    pub kernel_rel_tol: f64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            killing_tol: 1e-6,
            bound_rel_tol: 1e-9,
            margin_floor: 0.0,
            kernel_rel_tol: 1e-8,
        }
    }
}

/// Raw quantities of the three contraction conditions at one state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointConditions {
    pub eig_min: f64,
    pub eig_max: f64,
    /// Largest `‖∂b_jᵀM + M∂b_j + ∂_{b_j}M‖_F` over actuation columns.
    pub killing_residual: f64,
    /// `−λ_max(Nᵀ C N)` with `C = ∂fᵀM + M∂f + ∂_f M + 2λM` and `N` an
    /// orthonormal basis of `ker(BᵀM)`. When the kernel is trivial (square
    /// invertible `B`) the unrestricted condition `N = I` is used instead.
    pub contraction_margin: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Bounds,
    Killing,
    Contraction,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Violation {
    pub index: usize,
    pub point: Vec<f64>,
    pub condition: Condition,
    pub value: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerificationReport {
    pub points: usize,
    pub lambda: f64,
    pub m_lower: f64,
    pub m_upper: f64,
    /// `min (λ_min(M) − m̲)` over the grid.
    #[serde(with = "crate::serde_ext::finite_or_null")]
    pub worst_lower_margin: f64,
    /// `min (m̄ − λ_max(M))` over the grid.
    #[serde(with = "crate::serde_ext::finite_or_null")]
    pub worst_upper_margin: f64,
    pub worst_killing_residual: f64,
    #[serde(with = "crate::serde_ext::finite_or_null")]
    pub worst_contraction_margin: f64,
    pub violations: Vec<Violation>,
    pub passed: bool,
}

impl VerificationReport {
    pub fn to_json(&self) -> crate::Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn count(&self, condition: Condition) -> usize {
        self.violations
            .iter()
            .filter(|v| v.condition == condition)
            .count()
    }
}

/// Evaluate the three contraction conditions of `metric` for `sys` at `x`.
pub fn point_conditions(
    metric: &ContractionMetric,
    sys: &DynamicalSystem,
    x: &Vector,
    kernel_rel_tol: f64,
) -> PointConditions {
    let n = sys.state_dim();
    let m = metric.eval(x);
    let (eig, _) = sym_eigen(&m);

    let b = sys.actuation(x);
    let mut killing = 0.0f64;
    for j in 0..sys.input_dim() {
        let col = |y: &Vector| -> Vector { sys.actuation(y).column(j).into_owned() };
        let db = jacobian(col, x);
        let bj = b.column(j).into_owned();
        let k = db.transpose() * &m + &m * &db + metric.directional(x, &bj);
        killing = killing.max(k.norm());
    }

    let mut kernel = null_space(&(b.transpose() * &m), kernel_rel_tol);
    if kernel.ncols() == 0 {
        kernel = Matrix::identity(n, n);
    }
    let a = jacobian(|y| sys.drift(y), x);
    let f = sys.drift(x);
    let c = a.transpose() * &m + &m * &a + metric.directional(x, &f) + &m * (2.0 * metric.rate());
    let restricted: Matrix = kernel.transpose() * c * &kernel;
    let (values, _) = sym_eigen(&restricted);
    let margin = -values[values.len() - 1];
    debug_assert_eq!(m.nrows(), n);
    PointConditions {
        eig_min: eig[0],
        eig_max: eig[n - 1],
        killing_residual: killing,
        contraction_margin: margin,
    }
}

/// Check the bounds, killing and restricted contraction conditions at every
/// grid point. Violations are reported, never raised.
pub fn verify_contraction(
    metric: &ContractionMetric,
    sys: &DynamicalSystem,
    grid: &[Vector],
    opts: &VerifyOptions,
) -> VerificationReport {
    let conditions: Vec<PointConditions> = grid
        .par_iter()
        .map(|x| point_conditions(metric, sys, x, opts.kernel_rel_tol))
        .collect();

    let mut report = VerificationReport {
        points: grid.len(),
        lambda: metric.rate(),
        m_lower: metric.m_lower(),
        m_upper: metric.m_upper(),
        worst_lower_margin: f64::INFINITY,
        worst_upper_margin: f64::INFINITY,
        worst_killing_residual: 0.0,
        worst_contraction_margin: f64::INFINITY,
        violations: Vec::new(),
        passed: true,
    };
    let slack_lo = opts.bound_rel_tol * metric.m_lower();
    let slack_hi = opts.bound_rel_tol * metric.m_upper();
    for (index, (x, pc)) in grid.iter().zip(&conditions).enumerate() {
        let lower = pc.eig_min - metric.m_lower();
        let upper = metric.m_upper() - pc.eig_max;
        report.worst_lower_margin = report.worst_lower_margin.min(lower);
        report.worst_upper_margin = report.worst_upper_margin.min(upper);
        report.worst_killing_residual = report.worst_killing_residual.max(pc.killing_residual);
        report.worst_contraction_margin =
            report.worst_contraction_margin.min(pc.contraction_margin);
        let point: Vec<f64> = x.iter().copied().collect();
        let mut flag = |condition, value| {
            report.violations.push(Violation {
                index,
                point: point.clone(),
                condition,
                value,
            })
        };
        if lower < -slack_lo || upper < -slack_hi {
            flag(Condition::Bounds, lower.min(upper));
        }
        if pc.killing_residual > opts.killing_tol {
            flag(Condition::Killing, pc.killing_residual);
        }
        if !(pc.contraction_margin > opts.margin_floor) {
            flag(Condition::Contraction, pc.contraction_margin);
        }
    }
    report.passed = report.violations.is_empty();
    report
}
