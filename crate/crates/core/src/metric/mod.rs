//! Contraction metrics `M(x)`, Riemannian geodesics, grid verification of the
//! contraction conditions and constant-metric synthesis.

mod geodesic;
mod synthesize;
mod verify;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{eig_range, Matrix, Vector};

pub use geodesic::{riemannian_distance, Geodesic, GeodesicOptions};
pub use synthesize::{
    synthesize_constant_metric, SynthesisCandidate, SynthesisOptions, SynthesisOutcome,
};
pub use verify::{
    point_conditions, verify_contraction, Condition, PointConditions, VerificationReport,
    VerifyOptions, Violation,
};

/// One monomial term `coefficient · Π x_k^{e_k}` of a polynomial metric.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyTerm {
    pub exponents: Vec<u32>,
    pub coefficient: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MetricForm {
    Constant(Matrix),
    Polynomial(Vec<PolyTerm>),
}

/// A Riemannian metric together with its eigenvalue bounds and contraction rate.
#[derive(Debug, Clone, PartialEq)]
pub struct ContractionMetric {
    form: MetricForm,
    dim: usize,
    m_lower: f64,
    m_upper: f64,
    rate: f64,
}

fn check_symmetric(m: &Matrix) -> Result<()> {
    if !m.is_square() {
        return Err(Error::InvalidArgument(
            "metric matrix must be square".into(),
        ));
    }
    let asym = (m - m.transpose()).amax();
    if asym > 1e-10 * m.amax().max(1.0) {
        return Err(Error::InvalidArgument(format!(
            "metric matrix is not symmetric (max asymmetry {asym:e})"
        )));
    }
    Ok(())
}

impl ContractionMetric {
    /// Constant metric; the bounds are the extreme eigenvalues of `m`.
    pub fn constant(m: Matrix, rate: f64) -> Result<Self> {
        check_symmetric(&m)?;
        let m = crate::linalg::sym(&m);
        let (lo, hi) = eig_range(&m);
        if lo <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "metric is not positive definite (min eigenvalue {lo:e})"
            )));
        }
        Self::check_rate(rate)?;
        Ok(Self {
            dim: m.nrows(),
            form: MetricForm::Constant(m),
            m_lower: lo,
            m_upper: hi,
            rate,
        })
    }

    /// Polynomial metric. The bounds are claims over the state box; use
    /// [`verify_contraction`] to check them on a grid.
    pub fn polynomial(terms: Vec<PolyTerm>, m_lower: f64, m_upper: f64, rate: f64) -> Result<Self> {
        let Some(first) = terms.first() else {
            return Err(Error::InvalidArgument(
                "polynomial metric needs at least one term".into(),
            ));
        };
        let dim = first.coefficient.nrows();
        for t in &terms {
            check_symmetric(&t.coefficient)?;
            if t.coefficient.nrows() != dim || t.exponents.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: t.coefficient.nrows().max(t.exponents.len()),
                });
            }
        }
        if !(m_lower > 0.0 && m_upper >= m_lower) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < m_lower ≤ m_upper, got {m_lower}, {m_upper}"
            )));
        }
        Self::check_rate(rate)?;
        let terms = terms
            .into_iter()
            .map(|t| PolyTerm {
                exponents: t.exponents,
                coefficient: crate::linalg::sym(&t.coefficient),
            })
            .collect();
        Ok(Self {
            form: MetricForm::Polynomial(terms),
            dim,
            m_lower,
            m_upper,
            rate,
        })
    }

    fn check_rate(rate: f64) -> Result<()> {
        if rate > 0.0 && rate.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "contraction rate must be positive, got {rate}"
            )))
        }
    }

    pub fn with_rate(mut self, rate: f64) -> Result<Self> {
        Self::check_rate(rate)?;
        self.rate = rate;
        Ok(self)
    }

    pub fn form(&self) -> &MetricForm {
        &self.form
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn m_lower(&self) -> f64 {
        self.m_lower
    }
    pub fn m_upper(&self) -> f64 {
        self.m_upper
    }
    pub fn rate(&self) -> f64 {
        self.rate
    }
    pub fn is_constant(&self) -> bool {
        matches!(self.form, MetricForm::Constant(_))
    }

    /// The constant matrix, if this metric is constant.
    pub fn constant_matrix(&self) -> Option<&Matrix> {
        match &self.form {
            MetricForm::Constant(m) => Some(m),
            MetricForm::Polynomial(_) => None,
        }
    }

    pub fn eval(&self, x: &Vector) -> Matrix {
        match &self.form {
            MetricForm::Constant(m) => m.clone(),
            MetricForm::Polynomial(terms) => {
                let mut out = Matrix::zeros(self.dim, self.dim);
                for t in terms {
                    out += &t.coefficient * monomial(&t.exponents, x, None);
                }
                out
            }
        }
    }

    /// `∂M/∂x_k` at `x`.
    pub fn partial(&self, x: &Vector, k: usize) -> Matrix {
        let mut out = Matrix::zeros(self.dim, self.dim);
        if let MetricForm::Polynomial(terms) = &self.form {
            for t in terms {
                if t.exponents[k] > 0 {
                    out += &t.coefficient * monomial(&t.exponents, x, Some(k));
                }
            }
        }
        out
    }

    /// `∂_v M = Σ_k (∂M/∂x_k) v_k`.
    pub fn directional(&self, x: &Vector, v: &Vector) -> Matrix {
        let mut out = Matrix::zeros(self.dim, self.dim);
        if self.is_constant() {
            return out;
        }
        for k in 0..self.dim {
            if v[k] != 0.0 {
                out += self.partial(x, k) * v[k];
            }
        }
        out
    }

    /// `χ = m̄ / m̲`.
    pub fn condition_number(&self) -> f64 {
        self.m_upper / self.m_lower
    }

    pub fn to_file(&self) -> MetricFile {
        let rows = |m: &Matrix| -> Vec<Vec<f64>> {
            m.row_iter().map(|r| r.iter().copied().collect()).collect()
        };
        let body = match &self.form {
            MetricForm::Constant(m) => MetricBody::Constant { matrix: rows(m) },
            MetricForm::Polynomial(terms) => MetricBody::Polynomial {
                coefficients: terms
                    .iter()
                    .map(|t| TermFile {
                        exponents: t.exponents.clone(),
                        matrix: rows(&t.coefficient),
                    })
                    .collect(),
            },
        };
        MetricFile {
            body,
            m_lower: self.m_lower,
            m_upper: self.m_upper,
            lambda: self.rate,
        }
    }

    pub fn from_file(file: &MetricFile) -> Result<Self> {
        let mat = |rows: &[Vec<f64>]| -> Result<Matrix> {
            let n = rows.len();
            if rows.iter().any(|r| r.len() != n) {
                return Err(Error::InvalidArgument(
                    "metric matrix must be square".into(),
                ));
            }
            Ok(Matrix::from_fn(n, n, |i, j| rows[i][j]))
        };
        match &file.body {
            MetricBody::Constant { matrix } => {
                let mut m = Self::constant(mat(matrix)?, file.lambda)?;
                // Stored bounds may be looser than the eigenvalues (e.g. after scaling).
                m.m_lower = file.m_lower.min(m.m_lower);
                m.m_upper = file.m_upper.max(m.m_upper);
                Ok(m)
            }
            MetricBody::Polynomial { coefficients } => {
                let terms = coefficients
                    .iter()
                    .map(|t| {
                        Ok(PolyTerm {
                            exponents: t.exponents.clone(),
                            coefficient: mat(&t.matrix)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Self::polynomial(terms, file.m_lower, file.m_upper, file.lambda)
            }
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_file())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_file(&serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn monomial(exponents: &[u32], x: &Vector, differentiate: Option<usize>) -> f64 {
    let mut value = 1.0;
    for (k, &e) in exponents.iter().enumerate() {
        if Some(k) == differentiate {
            value *= e as f64 * x[k].powi(e as i32 - 1);
        } else if e > 0 {
            value *= x[k].powi(e as i32);
        }
    }
    value
}

/// On-disk form of a metric.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricFile {
    #[serde(flatten)]
    pub body: MetricBody,
    pub m_lower: f64,
    pub m_upper: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "parameterization", rename_all = "snake_case")]
pub enum MetricBody {
    Constant { matrix: Vec<Vec<f64>> },
    Polynomial { coefficients: Vec<TermFile> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TermFile {
    pub exponents: Vec<u32>,
    pub matrix: Vec<Vec<f64>>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diag_poly() -> ContractionMetric {
        // M(x) = diag(1 + x₁², 1)
        let terms = vec![
            PolyTerm {
                exponents: vec![0, 0],
                coefficient: Matrix::identity(2, 2),
            },
            PolyTerm {
                exponents: vec![2, 0],
                coefficient: Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]),
            },
        ];
        ContractionMetric::polynomial(terms, 1.0, 10.0, 0.5).unwrap()
    }

    #[test]
    fn polynomial_eval_and_partials() {
        let m = diag_poly();
        let x = Vector::from_vec(vec![2.0, -1.0]);
        assert_eq!(m.eval(&x)[(0, 0)], 5.0);
        assert_eq!(m.partial(&x, 0)[(0, 0)], 4.0);
        assert_eq!(m.partial(&x, 1).amax(), 0.0);
        let fd = crate::linalg::matrix_partial(|y| m.eval(y), &x, 0);
        assert!((fd - m.partial(&x, 0)).amax() < 1e-8);
    }

    #[test]
    fn constant_bounds_from_eigenvalues() {
        let m =
            ContractionMetric::constant(Matrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]), 1.0)
                .unwrap();
        assert!((m.m_lower() - 1.0).abs() < 1e-12);
        assert!((m.m_upper() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_asymmetric_and_indefinite() {
        let a = Matrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(ContractionMetric::constant(a, 1.0).is_err());
        let b = Matrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(ContractionMetric::constant(b, 1.0).is_err());
        assert!(ContractionMetric::constant(Matrix::identity(2, 2), 0.0).is_err());
    }

    #[test]
    fn json_round_trip() {
        let c =
            ContractionMetric::constant(Matrix::from_row_slice(2, 2, &[3.0, 0.2, 0.2, 1.5]), 0.7)
                .unwrap();
        let back = ContractionMetric::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(c, back);
        let p = diag_poly();
        let json = p.to_json().unwrap();
        assert!(json.contains("\"parameterization\": \"polynomial\""));
        assert_eq!(p, ContractionMetric::from_json(&json).unwrap());
    }
}
