//! Control-affine plants `ẋ = f(x) + B(x)u + ζ(x, u)`, the two benchmark
//! systems, reference input signals, trajectory records and the fixed-step
//! integrator.

mod benchmarks;
mod integrate;
mod record;
mod signal;

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{rank, Matrix, Vector};

pub use benchmarks::{
    benchmark_3d, benchmark_vtol, vtol_state_box, ThreeDParams, VtolParams, THREE_D_ACTUATION,
};
pub(crate) use integrate::step_count;
pub use integrate::{integrate, rk4_step};
pub use record::{RecordEnvelope, TrajectoryRecord};
pub use signal::{InputSignal, SampleTime};

pub type VectorField = Arc<dyn Fn(&Vector) -> Vector + Send + Sync>;
pub type MatrixField = Arc<dyn Fn(&Vector) -> Matrix + Send + Sync>;
pub type UncertaintyField = Arc<dyn Fn(&Vector, &Vector) -> Vector + Send + Sync>;

/// Axis-aligned box `∏ [lo_i, hi_i]`. Infinite bounds are allowed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxSet {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxSet {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Self {
        assert_eq!(lo.len(), hi.len(), "box bounds must have equal length");
        Self { lo, hi }
    }

    pub fn symmetric(half_widths: &[f64]) -> Self {
        Self::new(
            half_widths.iter().map(|h| -h).collect(),
            half_widths.to_vec(),
        )
    }

    pub fn unbounded(dim: usize) -> Self {
        Self::new(vec![f64::NEG_INFINITY; dim], vec![f64::INFINITY; dim])
    }

    pub fn from_intervals(intervals: &[[f64; 2]]) -> Self {
        Self::new(
            intervals.iter().map(|i| i[0]).collect(),
            intervals.iter().map(|i| i[1]).collect(),
        )
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lo.iter().zip(&self.hi).any(|(l, h)| l > h)
    }

    pub fn contains(&self, x: &Vector) -> bool {
        self.contains_with_tol(x, 0.0)
    }

    pub fn contains_with_tol(&self, x: &Vector, tol: f64) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(v, (l, h))| *v >= l - tol && *v <= h + tol)
    }

    /// `other ⊆ self`.
    pub fn includes(&self, other: &BoxSet) -> bool {
        other.is_empty()
            || self
                .lo
                .iter()
                .zip(&self.hi)
                .zip(other.lo.iter().zip(&other.hi))
                .all(|((l, h), (ol, oh))| ol >= l && oh <= h)
    }

    pub fn clamp(&self, x: &Vector) -> Vector {
        Vector::from_iterator(
            x.len(),
            x.iter()
                .zip(self.lo.iter().zip(&self.hi))
                .map(|(v, (l, h))| v.clamp(*l, *h)),
        )
    }

    /// Shrink interval `i` by `lower[i]` from below and `upper[i]` from above.
    pub fn shrink(&self, lower: &[f64], upper: &[f64]) -> BoxSet {
        BoxSet::new(
            self.lo.iter().zip(lower).map(|(l, d)| l + d).collect(),
            self.hi.iter().zip(upper).map(|(h, d)| h - d).collect(),
        )
    }

    pub fn center(&self) -> Vector {
        Vector::from_iterator(
            self.dim(),
            self.lo.iter().zip(&self.hi).map(|(l, h)| 0.5 * (l + h)),
        )
    }

    /// Uniform sample; panics on unbounded coordinates.
    pub fn sample(&self, rng: &mut impl Rng) -> Vector {
        Vector::from_iterator(
            self.dim(),
            self.lo.iter().zip(&self.hi).map(|(l, h)| {
                assert!(
                    l.is_finite() && h.is_finite(),
                    "cannot sample an unbounded box"
                );
                if h > l {
                    rng.random_range(*l..*h)
                } else {
                    *l
                }
            }),
        )
    }

    /// Tensor grid with `points` values per axis. Axes not listed in `active`
    /// are fixed at the box center.
    pub fn grid(&self, points: usize, active: Option<&[usize]>) -> Vec<Vector> {
        let n = self.dim();
        let axes: Vec<usize> = active.map_or_else(|| (0..n).collect(), <[usize]>::to_vec);
        let center = self.center();
        let axis_values = |i: usize| -> Vec<f64> {
            if points <= 1 {
                vec![center[i]]
            } else {
                (0..points)
                    .map(|k| {
                        self.lo[i] + (self.hi[i] - self.lo[i]) * k as f64 / (points - 1) as f64
                    })
                    .collect()
            }
        };
        let mut out = vec![center.clone()];
        for &axis in &axes {
            let values = axis_values(axis);
            out = out
                .into_iter()
                .flat_map(|p| {
                    values.iter().map(move |&v| {
                        let mut q = p.clone();
                        q[axis] = v;
                        q
                    })
                })
                .collect();
        }
        out
    }
}

/// A perturbed control-affine plant. `uncertainty = None` is the nominal model.
#[derive(Clone)]
pub struct DynamicalSystem {
    name: String,
    state_dim: usize,
    input_dim: usize,
    drift: VectorField,
    actuation: MatrixField,
    uncertainty: Option<UncertaintyField>,
    state_box: BoxSet,
    input_box: BoxSet,
    params: Vec<(String, f64)>,
}

impl fmt::Debug for DynamicalSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DynamicalSystem")
            .field("name", &self.name)
            .field("state_dim", &self.state_dim)
            .field("input_dim", &self.input_dim)
            .field("perturbed", &self.uncertainty.is_some())
            .finish()
    }
}

impl DynamicalSystem {
    pub fn new(
        name: impl Into<String>,
        state_dim: usize,
        input_dim: usize,
        drift: impl Fn(&Vector) -> Vector + Send + Sync + 'static,
        actuation: impl Fn(&Vector) -> Matrix + Send + Sync + 'static,
    ) -> Self {
        assert!(
            state_dim > 0 && input_dim > 0,
            "dimensions must be positive"
        );
        Self {
            name: name.into(),
            state_dim,
            input_dim,
            drift: Arc::new(drift),
            actuation: Arc::new(actuation),
            uncertainty: None,
            state_box: BoxSet::unbounded(state_dim),
            input_box: BoxSet::unbounded(input_dim),
            params: Vec::new(),
        }
    }

    /// Linear plant `ẋ = Ax + Bu`.
    pub fn linear(name: impl Into<String>, a: Matrix, b: Matrix) -> Self {
        let (n, m) = (b.nrows(), b.ncols());
        Self::new(name, n, m, move |x| &a * x, move |_| b.clone())
    }

    pub fn with_uncertainty(
        mut self,
        zeta: impl Fn(&Vector, &Vector) -> Vector + Send + Sync + 'static,
    ) -> Self {
        self.uncertainty = Some(Arc::new(zeta));
        self
    }

    pub fn with_state_box(mut self, b: BoxSet) -> Self {
        assert_eq!(b.dim(), self.state_dim);
        self.state_box = b;
        self
    }

    pub fn with_input_box(mut self, b: BoxSet) -> Self {
        assert_eq!(b.dim(), self.input_dim);
        self.input_box = b;
        self
    }

    pub fn with_params(mut self, params: &[(&str, f64)]) -> Self {
        self.params = params.iter().map(|(k, v)| ((*k).to_owned(), *v)).collect();
        self
    }

    /// Same plant with `ζ` removed.
    pub fn nominal(&self) -> Self {
        let mut s = self.clone();
        s.uncertainty = None;
        s
    }

    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn state_dim(&self) -> usize {
        self.state_dim
    }
    pub fn input_dim(&self) -> usize {
        self.input_dim
    }
    pub fn state_box(&self) -> &BoxSet {
        &self.state_box
    }
    pub fn input_box(&self) -> &BoxSet {
        &self.input_box
    }
    pub fn params(&self) -> &[(String, f64)] {
        &self.params
    }
    pub fn param(&self, key: &str) -> Option<f64> {
        self.params.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }
    pub fn is_nominal(&self) -> bool {
        self.uncertainty.is_none()
    }

    pub fn drift(&self, x: &Vector) -> Vector {
        (self.drift)(x)
    }

    pub fn actuation(&self, x: &Vector) -> Matrix {
        (self.actuation)(x)
    }

    /// `ζ(x, u)`, zero for nominal systems.
    pub fn uncertainty(&self, x: &Vector, u: &Vector) -> Vector {
        match &self.uncertainty {
            Some(z) => z(x, u),
            None => Vector::zeros(self.state_dim),
        }
    }

    pub fn nominal_rhs(&self, x: &Vector, u: &Vector) -> Vector {
        self.drift(x) + self.actuation(x) * u
    }

    pub fn rhs(&self, x: &Vector, u: &Vector) -> Vector {
        let mut dx = self.nominal_rhs(x, u);
        if let Some(z) = &self.uncertainty {
            dx += z(x, u);
        }
        dx
    }

    /// Check that `B(x)` has full column rank at every sample.
    pub fn check_actuation_rank(&self, samples: &[Vector]) -> Result<()> {
        for x in samples {
            let r = rank(&self.actuation(x));
            if r < self.input_dim {
                return Err(Error::InvalidArgument(format!(
                    "actuation has rank {r} < {} at x = {:?}",
                    self.input_dim,
                    x.as_slice()
                )));
            }
        }
        Ok(())
    }

    pub(crate) fn check_state(&self, x: &Vector) -> Result<()> {
        if x.len() != self.state_dim {
            return Err(Error::DimensionMismatch {
                expected: self.state_dim,
                got: x.len(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn box_grid_counts_and_fixed_axes() {
        let b = BoxSet::symmetric(&[1.0, 2.0, 3.0]);
        assert_eq!(b.grid(3, None).len(), 27);
        let g = b.grid(4, Some(&[1]));
        assert_eq!(g.len(), 4);
        assert!(g.iter().all(|p| p[0] == 0.0 && p[2] == 0.0));
        assert_eq!(g[0][1], -2.0);
        assert_eq!(g[3][1], 2.0);
    }

    #[test]
    fn box_shrink_and_inclusion() {
        let b = BoxSet::symmetric(&[1.0, 1.0]);
        let s = b.shrink(&[0.5, 0.25], &[0.5, 0.25]);
        assert_eq!(s.lo, vec![-0.5, -0.75]);
        assert!(b.includes(&s));
        assert!(!s.includes(&b));
        assert!(b.shrink(&[1.5, 0.0], &[1.0, 0.0]).is_empty());
    }

    #[test]
    fn box_samples_stay_inside() {
        let b = BoxSet::new(vec![-1.0, 2.0], vec![0.0, 5.0]);
        let mut rng = stream(1, "box", 0);
        for _ in 0..100 {
            assert!(b.contains(&b.sample(&mut rng)));
        }
    }

    #[test]
    fn rank_check_flags_deficient_actuation() {
        let sys = DynamicalSystem::new(
            "deficient",
            2,
            2,
            |x| -x.clone(),
            |_| Matrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]),
        );
        assert!(sys.check_actuation_rank(&[Vector::zeros(2)]).is_err());
    }
}
