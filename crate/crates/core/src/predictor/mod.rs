//! Uncertainty predictors `ζ̂(x, u; θ)`: model families, training on
//! open-loop perturbed data, and the trajectory datasets they learn from.

mod dataset;
mod mlp;
mod train;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};

pub(crate) use dataset::hex;
pub use dataset::{
    generate_perturbed_dataset, generate_reference_dataset, sample_reference_dataset,
    sample_steered_dataset, split_reference, DatasetManifest, DatasetRecord, ManifestEntry,
    PolicyMode, RecordFailure, ReferenceSampler, Split, SteeredSampler, TrainingDataset,
    TrajectoryDataset,
};
pub use mlp::{DenseLayer, MlpModel};
pub use train::{sup_error, train, Family, TrainConfig, TrainingSummary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Model {
    Zero,
    /// `ζ̂ = C φ(x, u)` with `φ` all monomials of `(x, u)` up to `degree`.
    LinearFeatures {
        degree: u32,
        terms: Vec<Vec<u32>>,
        /// Row `i` holds the coefficients of output `i`.
        coefficients: Vec<Vec<f64>>,
    },
    Mlp(MlpModel),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyPredictor {
    pub state_dim: usize,
    pub input_dim: usize,
    #[serde(flatten)]
    pub model: Model,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainingSummary>,
}

/// Exponent vectors of every monomial in `dim` variables with total degree at
/// most `degree`, ordered by degree and then lexicographically (descending).
pub fn monomial_terms(dim: usize, degree: u32) -> Vec<Vec<u32>> {
    fn fill(dim: usize, left: u32, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if prefix.len() == dim - 1 {
            prefix.push(left);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for e in (0..=left).rev() {
            prefix.push(e);
            fill(dim, left - e, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    for d in 0..=degree {
        fill(dim, d, &mut Vec::new(), &mut out);
    }
    out
}

/// Evaluate the monomials `terms` at `z`.
pub fn features(terms: &[Vec<u32>], z: &[f64]) -> Vec<f64> {
    terms
        .iter()
        .map(|e| {
            e.iter()
                .zip(z)
                .filter(|(&p, _)| p > 0)
                .map(|(&p, &v)| v.powi(p as i32))
                .product()
        })
        .collect()
}

pub(crate) fn stack(x: &Vector, u: &Vector) -> Vec<f64> {
    x.iter().chain(u.iter()).copied().collect()
}

impl UncertaintyPredictor {
    pub fn zero(state_dim: usize, input_dim: usize) -> Self {
        Self {
            state_dim,
            input_dim,
            model: Model::Zero,
            training: None,
        }
    }

    pub fn family(&self) -> Family {
        match self.model {
            Model::Zero => Family::Zero,
            Model::LinearFeatures { .. } => Family::LinearFeatures,
            Model::Mlp(_) => Family::Mlp,
        }
    }

    /// `ζ̂(x, u)`; checks dimensions.
    pub fn predict(&self, x: &Vector, u: &Vector) -> Result<Vector> {
        if x.len() != self.state_dim {
            return Err(Error::DimensionMismatch {
                expected: self.state_dim,
                got: x.len(),
            });
        }
        if u.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                got: u.len(),
            });
        }
        Ok(self.eval(x, u))
    }

    /// `ζ̂(x, u)` without dimension checks.
    pub fn eval(&self, x: &Vector, u: &Vector) -> Vector {
        match &self.model {
            Model::Zero => Vector::zeros(self.state_dim),
            Model::LinearFeatures {
                terms,
                coefficients,
                ..
            } => {
                let phi = features(terms, &stack(x, u));
                Vector::from_iterator(
                    self.state_dim,
                    coefficients
                        .iter()
                        .map(|row| row.iter().zip(&phi).map(|(c, f)| c * f).sum::<f64>()),
                )
            }
            Model::Mlp(net) => Vector::from_vec(net.forward(&stack(x, u))),
        }
    }

    /// All trainable parameters `θ` as one flat vector.
    pub fn parameters(&self) -> Vec<f64> {
        match &self.model {
            Model::Zero => Vec::new(),
            Model::LinearFeatures { coefficients, .. } => coefficients.concat(),
            Model::Mlp(net) => net.parameters(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

pub(crate) fn rows_of(m: &Matrix) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monomials_count_and_order() {
        let t = monomial_terms(3, 2);
        assert_eq!(t.len(), 10);
        assert_eq!(t[0], vec![0, 0, 0]);
        assert_eq!(t[1], vec![1, 0, 0]);
        assert_eq!(t[4], vec![2, 0, 0]);
        assert_eq!(monomial_terms(5, 2).len(), 21);
    }

    #[test]
    fn features_evaluate_products() {
        let t = vec![vec![0, 0], vec![1, 1], vec![0, 3]];
        assert_eq!(features(&t, &[2.0, -1.5]), vec![1.0, -3.0, -3.375]);
    }

    #[test]
    fn zero_family_and_basis_coefficient() {
        let x = Vector::from_vec(vec![0.5, -1.0]);
        let u = Vector::from_vec(vec![2.0]);
        let z = UncertaintyPredictor::zero(2, 1);
        assert_eq!(z.predict(&x, &u).unwrap(), Vector::zeros(2));
        assert!(matches!(
            z.predict(&u, &u),
            Err(Error::DimensionMismatch {
                expected: 2,
                got: 1
            })
        ));

        let terms = monomial_terms(3, 2);
        let k = terms.iter().position(|e| e == &vec![1, 0, 1]).unwrap();
        let mut coefficients = vec![vec![0.0; terms.len()]; 2];
        coefficients[1][k] = 1.0;
        let p = UncertaintyPredictor {
            state_dim: 2,
            input_dim: 1,
            model: Model::LinearFeatures {
                degree: 2,
                terms,
                coefficients,
            },
            training: None,
        };
        let out = p.predict(&x, &u).unwrap();
        assert_eq!(out[0], 0.0);
        assert_eq!(out[1], 0.5 * 2.0);
        let back = UncertaintyPredictor::from_json(&p.to_json().unwrap()).unwrap();
        assert_eq!(back, p);
    }
}
