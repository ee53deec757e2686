//! Exponential tracking-error envelopes, fixed-radius Riemannian tubes around
//! a reference, set tightening, obstacle inflation and planar projections.

use std::io::Write;

use log::warn;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::conformal::CalibrationResult;
use crate::control::min_norm_feedback;
use crate::error::{Error, Result};
use crate::linalg::{cholesky_lower, eig_range, pinv, Matrix, Vector};
use crate::metric::{riemannian_distance, ContractionMetric, GeodesicOptions};
use crate::predictor::UncertaintyPredictor;
use crate::rng::stream;
use crate::systems::{BoxSet, DynamicalSystem, TrajectoryRecord};

/// `d(t) ≤ (d₀ − c₂)e^{−λt} + c₂` with `c₂ = √m̄·s/λ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IebEnvelope {
    pub d0: f64,
    pub lambda: f64,
    pub c2: f64,
}

impl IebEnvelope {
    pub fn new(d0: f64, metric: &ContractionMetric, score: f64) -> Self {
        Self {
            d0,
            lambda: metric.rate(),
            c2: tube_radius(metric, score),
        }
    }

    pub fn c1(&self) -> f64 {
        (self.d0 - self.c2).abs()
    }

    pub fn at(&self, t: f64) -> f64 {
        (self.d0 - self.c2) * (-self.lambda * t).exp() + self.c2
    }
}

/// `d̄ = √m̄·s/λ`.
pub fn tube_radius(metric: &ContractionMetric, score: f64) -> f64 {
    metric.m_upper().sqrt() * score / metric.rate()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Membership {
    pub contained: bool,
    /// `d̄ − d_RM`.
    pub margin: f64,
    pub distance: f64,
}

/// Constant-radius Riemannian neighbourhood of a reference trajectory.
#[derive(Debug, Clone)]
pub struct PrciTube {
    pub reference: TrajectoryRecord,
    pub metric: ContractionMetric,
    pub radius: f64,
    pub alpha: f64,
    pub quantile: f64,
    pub geodesic: GeodesicOptions,
}

impl PrciTube {
    pub fn new(
        reference: TrajectoryRecord,
        metric: ContractionMetric,
        calibration: &CalibrationResult,
    ) -> Self {
        let radius = tube_radius(&metric, calibration.quantile_value);
        Self {
            reference,
            metric,
            radius,
            alpha: calibration.alpha,
            quantile: calibration.quantile_value,
            geodesic: GeodesicOptions::default(),
        }
    }

    pub fn with_radius(
        reference: TrajectoryRecord,
        metric: ContractionMetric,
        radius: f64,
        alpha: f64,
    ) -> Self {
        let quantile = radius * metric.rate() / metric.m_upper().sqrt();
        Self {
            reference,
            metric,
            radius,
            alpha,
            quantile,
            geodesic: GeodesicOptions::default(),
        }
    }

    pub fn center(&self, t: f64) -> Vector {
        self.reference.state_at(t)
    }

    pub fn contains(&self, x: &Vector, t: f64) -> Membership {
        let (d, _) = riemannian_distance(&self.metric, &self.center(t), x, &self.geodesic);
        Membership {
            contained: d <= self.radius,
            margin: self.radius - d,
            distance: d,
        }
    }

    /// Uniform sample from the cross-section at `t`, with `M` frozen at the centre.
    pub fn sample_cross_section(&self, t: f64, rng: &mut impl Rng) -> Vector {
        let c = self.center(t);
        sample_metric_ball(&self.metric.eval(&c), &c, self.radius, rng)
    }

    /// Planar ellipse of the cross-section at every reference grid time.
    pub fn project(&self, i: usize, j: usize) -> Result<Vec<(f64, Ellipse2d)>> {
        self.reference
            .times
            .iter()
            .zip(&self.reference.states)
            .map(|(&t, c)| {
                Ok((
                    t,
                    Ellipse2d::from_metric(&self.metric.eval(c), c, i, j, self.radius)?,
                ))
            })
            .collect()
    }

    /// Columns `t, center_i, center_j, a11, a12, a22, radius`.
    pub fn write_ellipse_csv<W: Write>(&self, i: usize, j: usize, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["t", "center_i", "center_j", "a11", "a12", "a22", "radius"])?;
        for (t, e) in self.project(i, j)? {
            w.write_record(
                [
                    t,
                    e.center[0],
                    e.center[1],
                    e.shape[0][0],
                    e.shape[0][1],
                    e.shape[1][1],
                    e.radius,
                ]
                .iter()
                .map(f64::to_string),
            )?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `d_RM(x_k, x̄_k)` along two state sequences on the same grid.
pub fn tracking_distances(
    metric: &ContractionMetric,
    states: &[Vector],
    reference: &[Vector],
    opts: &GeodesicOptions,
) -> Vec<f64> {
    states
        .iter()
        .zip(reference)
        .map(|(x, r)| riemannian_distance(metric, r, x, opts).0)
        .collect()
}

/// Uniform sample of `{ξ : (ξ−c)ᵀM(ξ−c) ≤ r²}`.
pub fn sample_metric_ball(m: &Matrix, center: &Vector, radius: f64, rng: &mut impl Rng) -> Vector {
    let n = center.len();
    let g = Vector::from_fn(n, |_, _| StandardNormal.sample(rng));
    let gn = g.norm();
    let z = if gn > 0.0 { g / gn } else { Vector::zeros(n) };
    let scale: f64 = rng.random::<f64>().powf(1.0 / n as f64);
    let l = cholesky_lower(m).expect("metric is positive definite");
    let offset = l
        .transpose()
        .solve_upper_triangular(&(z * (radius * scale)))
        .expect("triangular factor is nonsingular");
    center + offset
}

/// `{y : (y−c)ᵀP(y−c) ≤ r²}` in a coordinate plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipse2d {
    pub center: [f64; 2],
    pub shape: [[f64; 2]; 2],
    pub radius: f64,
}

/// `M_pp − M_pc M_cc⁻¹ M_cp` for the coordinate pair `p = (i, j)`.
pub fn schur_projection(m: &Matrix, i: usize, j: usize) -> Result<Matrix> {
    let n = m.nrows();
    if i == j || i >= n || j >= n {
        return Err(Error::InvalidArgument(format!(
            "bad coordinate pair ({i}, {j}) for dimension {n}"
        )));
    }
    let p = [i, j];
    let c: Vec<usize> = (0..n).filter(|k| !p.contains(k)).collect();
    let mpp = Matrix::from_fn(2, 2, |a, b| m[(p[a], p[b])]);
    if c.is_empty() {
        return Ok(mpp);
    }
    let mcc = Matrix::from_fn(c.len(), c.len(), |a, b| m[(c[a], c[b])]);
    let mpc = Matrix::from_fn(2, c.len(), |a, b| m[(p[a], c[b])]);
    let (lo, hi) = eig_range(&mcc);
    if lo <= 1e-12 * hi.abs().max(1.0) {
        return Err(Error::SingularBlock { min_eig: lo });
    }
    let chol = mcc.cholesky().ok_or(Error::SingularBlock { min_eig: lo })?;
    Ok(&mpp - &mpc * chol.solve(&mpc.transpose()))
}

impl Ellipse2d {
    pub fn from_metric(
        m: &Matrix,
        center: &Vector,
        i: usize,
        j: usize,
        radius: f64,
    ) -> Result<Self> {
        let s = schur_projection(m, i, j)?;
        Ok(Self {
            center: [center[i], center[j]],
            shape: [[s[(0, 0)], s[(0, 1)]], [s[(1, 0)], s[(1, 1)]]],
            radius,
        })
    }

    fn shape_matrix(&self) -> Matrix {
        Matrix::from_row_slice(
            2,
            2,
            &[
                self.shape[0][0],
                self.shape[0][1],
                self.shape[1][0],
                self.shape[1][1],
            ],
        )
    }

    /// `(y−c)ᵀP(y−c)`.
    pub fn level(&self, y: [f64; 2]) -> f64 {
        let d = [y[0] - self.center[0], y[1] - self.center[1]];
        self.shape[0][0] * d[0] * d[0]
            + 2.0 * self.shape[0][1] * d[0] * d[1]
            + self.shape[1][1] * d[1] * d[1]
    }

    pub fn contains(&self, y: [f64; 2]) -> bool {
        self.level(y) <= self.radius * self.radius
    }

    /// Largest Euclidean distance from the centre to the boundary.
    pub fn euclidean_radius(&self) -> f64 {
        let (lo, _) = eig_range(&self.shape_matrix());
        self.radius / lo.sqrt()
    }
}

/// Elliptical obstacle `{p : ‖R(θ)ᵀ(p − c) ⊘ a‖ ≤ 1}` in a coordinate plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub center: [f64; 2],
    pub semi_axes: [f64; 2],
    #[serde(default)]
    pub angle_rad: f64,
}

impl Obstacle {
    /// Normalised level: `< 1` inside, `= 1` on the boundary.
    pub fn level(&self, p: [f64; 2]) -> f64 {
        let (s, c) = self.angle_rad.sin_cos();
        let d = [p[0] - self.center[0], p[1] - self.center[1]];
        let u = (c * d[0] + s * d[1]) / self.semi_axes[0];
        let v = (-s * d[0] + c * d[1]) / self.semi_axes[1];
        u * u + v * v
    }

    /// Gradient of `level` with respect to `p`.
    pub fn level_gradient(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.angle_rad.sin_cos();
        let d = [p[0] - self.center[0], p[1] - self.center[1]];
        let u = (c * d[0] + s * d[1]) / self.semi_axes[0];
        let v = (-s * d[0] + c * d[1]) / self.semi_axes[1];
        let (gu, gv) = (2.0 * u / self.semi_axes[0], 2.0 * v / self.semi_axes[1]);
        [c * gu - s * gv, s * gu + c * gv]
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        self.level(p) <= 1.0
    }

    /// An ellipse containing every point within Euclidean distance `margin`
    /// of this one.
    pub fn inflate(&self, margin: f64) -> Self {
        Self {
            semi_axes: [self.semi_axes[0] + margin, self.semi_axes[1] + margin],
            ..*self
        }
    }
}

/// A box shrunk by per-coordinate margins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TightenedBox {
    pub set: BoxSet,
    pub lower_margin: Vec<f64>,
    pub upper_margin: Vec<f64>,
    /// Some interval collapsed to a point or less.
    pub empty: bool,
}

fn shrink(b: &BoxSet, lower: Vec<f64>, upper: Vec<f64>) -> TightenedBox {
    let set = b.shrink(&lower, &upper);
    let empty = set.lo.iter().zip(&set.hi).any(|(l, h)| l >= h);
    if empty {
        warn!("tightened set is empty");
    }
    TightenedBox {
        set,
        lower_margin: lower,
        upper_margin: upper,
        empty,
    }
}

/// Shrink each interval by the extent of the Riemannian ball of radius `d̄`
/// along that axis: `d̄·√((M⁻¹)_ii)` for constant metrics, `d̄/√m̲` otherwise.
pub fn tighten_state_box(
    state_box: &BoxSet,
    radius: f64,
    metric: &ContractionMetric,
) -> TightenedBox {
    let n = state_box.dim();
    let margins: Vec<f64> = match metric.constant_matrix() {
        Some(m) => {
            let inv = m
                .clone()
                .try_inverse()
                .expect("metric is positive definite");
            (0..n).map(|i| radius * inv[(i, i)].sqrt()).collect()
        }
        None => vec![radius / metric.m_lower().sqrt(); n],
    };
    shrink(state_box, margins.clone(), margins)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InputTighteningOptions {
    /// Reference points `(x̄, ū)` drawn from the reference sets.
    pub sections: usize,
    /// Samples per cross-section; the first is always the centre.
    pub budget: usize,
    pub inflation: f64,
    pub seed: u64,
}

impl Default for InputTighteningOptions {
    fn default() -> Self {
        Self {
            sections: 64,
            budget: 64,
            inflation: 0.1,
            seed: 0,
        }
    }
}

/// Shrink the input box by a sampled estimate of the largest feedback
/// `k(ξ, x̄)` over tube cross-sections. References `x̄` are drawn from
/// `reference_states`, `ū` from the input box itself. This is an inner
/// estimate of the exact tightening, not a bound.
pub fn tighten_input_box(
    input_box: &BoxSet,
    reference_states: &BoxSet,
    metric: &ContractionMetric,
    sys_nominal: &DynamicalSystem,
    radius: f64,
    opts: &InputTighteningOptions,
) -> Result<TightenedBox> {
    let m = input_box.dim();
    let mut upper = vec![0.0f64; m];
    let mut lower = vec![0.0f64; m];
    let geo = GeodesicOptions::default();
    for s in 0..opts.sections {
        let mut rng = stream(opts.seed, "input-tightening", s as u64);
        let x_ref = reference_states.sample(&mut rng);
        let u_ref = input_box.sample(&mut rng);
        let m_ref = metric.eval(&x_ref);
        for b in 0..opts.budget {
            let xi = if b == 0 {
                x_ref.clone()
            } else {
                sample_metric_ball(&m_ref, &x_ref, radius, &mut rng)
            };
            let k = min_norm_feedback(metric, sys_nominal, &xi, &x_ref, &u_ref, &geo)?;
            for i in 0..m {
                upper[i] = upper[i].max(k[i]);
                lower[i] = lower[i].max(-k[i]);
            }
        }
    }
    let grow = |v: Vec<f64>| v.into_iter().map(|x| x * (1.0 + opts.inflation)).collect();
    Ok(shrink(input_box, grow(lower), grow(upper)))
}

/// Extent of the compensation `−B†ζ̂(x_k, u_{k−1})` seen along closed-loop
/// records, as `(lower, upper)` margins. `u₋ = 0` at the first step.
pub fn compensation_margins<'a>(
    predictor: &UncertaintyPredictor,
    sys_nominal: &DynamicalSystem,
    records: impl IntoIterator<Item = &'a TrajectoryRecord>,
) -> (Vec<f64>, Vec<f64>) {
    let m = sys_nominal.input_dim();
    let mut lower = vec![0.0f64; m];
    let mut upper = vec![0.0f64; m];
    for r in records {
        let mut u_prev = Vector::zeros(m);
        for (x, u) in r.states.iter().zip(&r.inputs) {
            let c = -(pinv(&sys_nominal.actuation(x)) * predictor.eval(x, &u_prev));
            for i in 0..m {
                upper[i] = upper[i].max(c[i]);
                lower[i] = lower[i].max(-c[i]);
            }
            u_prev = u.clone();
        }
    }
    (lower, upper)
}

/// Shrink `b` by per-axis margins and flag collapsed intervals.
pub fn shrink_box(b: &BoxSet, lower: Vec<f64>, upper: Vec<f64>) -> TightenedBox {
    shrink(b, lower, upper)
}

/// Whole-trajectory containment over a set of rollouts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainmentReport {
    pub n: usize,
    pub contained: usize,
    pub fraction: f64,
    pub alpha: f64,
    #[serde(with = "crate::serde_ext::finite_or_null")]
    pub quantile: f64,
    #[serde(with = "crate::serde_ext::finite_or_null")]
    pub radius: f64,
}

impl ContainmentReport {
    /// `max_distances[k]` is `max_t d_RM(x(t), x̄(t))` of rollout `k`.
    pub fn from_max_distances(
        max_distances: &[f64],
        radius: f64,
        alpha: f64,
        quantile: f64,
    ) -> Self {
        let contained = max_distances.iter().filter(|&&d| d <= radius).count();
        Self {
            n: max_distances.len(),
            contained,
            fraction: if max_distances.is_empty() {
                f64::NAN
            } else {
                contained as f64 / max_distances.len() as f64
            },
            alpha,
            quantile,
            radius,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn envelope_values() {
        let e = IebEnvelope {
            d0: 2.0,
            lambda: 1.0,
            c2: 1.0,
        };
        assert_eq!(e.at(0.0), 2.0);
        assert!((e.at(2f64.ln()) - 1.5).abs() < 1e-15);
        let flat = IebEnvelope { d0: 1.0, ..e };
        assert_eq!(flat.at(7.0), 1.0);
        assert_eq!(e.c1(), 1.0);
    }

    #[test]
    fn state_box_margins() {
        let b = BoxSet::symmetric(&[1.0, 1.0]);
        let m = ContractionMetric::constant(Matrix::identity(2, 2), 1.0).unwrap();
        let t = tighten_state_box(&b, 0.5, &m);
        assert_eq!(t.set, BoxSet::symmetric(&[0.5, 0.5]));
        assert_eq!(tighten_state_box(&b, 0.0, &m).set, b);
        let m = ContractionMetric::constant(
            Matrix::from_diagonal(&Vector::from_vec(vec![4.0, 1.0])),
            1.0,
        )
        .unwrap();
        let t = tighten_state_box(&b, 1.0, &m);
        assert_eq!(t.lower_margin, vec![0.5, 1.0]);
        assert!(t.empty);
    }

    #[test]
    fn identity_projection_is_circle() {
        let e =
            Ellipse2d::from_metric(&Matrix::identity(3, 3), &Vector::zeros(3), 0, 1, 2.0).unwrap();
        assert_eq!(e.shape, [[1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(e.euclidean_radius(), 2.0);
    }

    #[test]
    fn singular_complement_is_reported() {
        let mut m = Matrix::identity(3, 3);
        m[(2, 2)] = 0.0;
        assert!(matches!(
            schur_projection(&m, 0, 1),
            Err(Error::SingularBlock { .. })
        ));
    }

    #[test]
    fn obstacle_gradient() {
        let o = Obstacle {
            center: [1.0, -0.5],
            semi_axes: [2.0, 0.7],
            angle_rad: 0.4,
        };
        let p = [0.3, 0.2];
        let g = o.level_gradient(p);
        let h = 1e-6;
        let fd0 = (o.level([p[0] + h, p[1]]) - o.level([p[0] - h, p[1]])) / (2.0 * h);
        let fd1 = (o.level([p[0], p[1] + h]) - o.level([p[0], p[1] - h])) / (2.0 * h);
        assert!((g[0] - fd0).abs() < 1e-7 && (g[1] - fd1).abs() < 1e-7);
    }
}
