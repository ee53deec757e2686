//! Contracting tracking feedback from the min-norm QP, the
//! uncertainty-compensated closed-loop policy and its residual error.

use std::cell::RefCell;
use std::sync::Arc;

use log::debug;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{pinv, Vector};
use crate::metric::{riemannian_distance, ContractionMetric, Geodesic, GeodesicOptions};
use crate::predictor::UncertaintyPredictor;
use crate::systems::{rk4_step, DynamicalSystem, InputSignal, SampleTime, TrajectoryRecord};

/// The QP constraint written as `aᵀκ ≥ b`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackConstraint {
    pub a: Vector,
    pub b: f64,
    /// Riemannian energy of the geodesic used to build the constraint.
    pub energy: f64,
}

impl FeedbackConstraint {
    /// `aᵀκ − b`; non-negative when `κ` is feasible.
    pub fn slack(&self, kappa: &Vector) -> f64 {
        self.a.dot(kappa) - self.b
    }
}

/// Build the contraction constraint for tracking `x̄` from `x`, using a
/// geodesic with `γ(0) = x̄` and `γ(1) = x`:
///
/// `−γ_μ(1)ᵀM(x)(f(x) + B(x)(ū + κ)) + γ_μ(0)ᵀM(x̄)(f(x̄) + B(x̄)ū) ≥ λE`.
pub fn feedback_constraint(
    metric: &ContractionMetric,
    sys: &DynamicalSystem,
    x: &Vector,
    x_ref: &Vector,
    u_ref: &Vector,
    geodesic: &Geodesic,
) -> FeedbackConstraint {
    let g0 = geodesic.tangent_start();
    let g1 = geodesic.tangent_end();
    let mg1 = metric.eval(x) * &g1;
    let mg0 = metric.eval(x_ref) * &g0;
    let bx = sys.actuation(x);
    let a = -(bx.transpose() * &mg1);
    let b = metric.rate() * geodesic.energy + mg1.dot(&sys.nominal_rhs(x, u_ref))
        - mg0.dot(&sys.nominal_rhs(x_ref, u_ref));
    FeedbackConstraint {
        a,
        b,
        energy: geodesic.energy,
    }
}

/// Minimum-norm point of the halfspace `aᵀκ ≥ b`.
pub fn solve_min_norm(c: &FeedbackConstraint) -> Result<Vector> {
    if c.b <= 0.0 {
        return Ok(Vector::zeros(c.a.len()));
    }
    let norm_sq = c.a.norm_squared();
    if norm_sq.sqrt() < 1e-10 {
        return Err(Error::DegenerateConstraint {
            norm: norm_sq.sqrt(),
        });
    }
    Ok(&c.a * (c.b / norm_sq))
}

/// `k(x, x̄)`: the smallest correction that enforces the contraction
/// constraint along the geodesic between `x̄` and `x`.
pub fn min_norm_feedback(
    metric: &ContractionMetric,
    sys: &DynamicalSystem,
    x: &Vector,
    x_ref: &Vector,
    u_ref: &Vector,
    opts: &GeodesicOptions,
) -> Result<Vector> {
    let (_, geodesic) = riemannian_distance(metric, x_ref, x, opts);
    solve_min_norm(&feedback_constraint(
        metric, sys, x, x_ref, u_ref, &geodesic,
    ))
}

/// Serializable description of a closed-loop policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub metric: String,
    pub predictor: String,
    pub dt_s: f64,
    pub saturate: bool,
    pub geodesic_segments: usize,
}

/// `u = ū + k(x, x̄) − B(x)† ζ̂(x, u₋)` where `u₋` is the input computed at the
/// previous sampling instant (zero before the first one).
#[derive(Debug, Clone)]
pub struct ContractingPolicy {
    pub metric: ContractionMetric,
    pub nominal: DynamicalSystem,
    pub reference_input: InputSignal,
    pub predictor: Option<Arc<UncertaintyPredictor>>,
    pub geodesic: GeodesicOptions,
    /// Clamp the composed input to the plant's input box.
    pub saturate: bool,
}

/// One closed-loop rollout with its reference.
#[derive(Debug, Clone)]
pub struct ClosedLoopRollout {
    /// Plant states, applied inputs and realised `ζ(x, u)`.
    pub record: TrajectoryRecord,
    pub reference: Vec<Vector>,
    /// `u₋` in force at each grid time.
    pub delayed_inputs: Vec<Vector>,
    pub saturation_events: usize,
}

impl ContractingPolicy {
    pub fn new(
        metric: ContractionMetric,
        nominal: DynamicalSystem,
        reference_input: InputSignal,
    ) -> Self {
        Self {
            metric,
            nominal,
            reference_input,
            predictor: None,
            geodesic: GeodesicOptions::default(),
            saturate: false,
        }
    }

    pub fn with_predictor(mut self, predictor: Option<Arc<UncertaintyPredictor>>) -> Self {
        self.predictor = predictor;
        self
    }

    pub fn with_saturation(mut self, on: bool) -> Self {
        self.saturate = on;
        self
    }

    /// Nominal contracting input `ū(t) + k(x, x̄)`.
    pub fn nominal_input(&self, x: &Vector, x_ref: &Vector, when: SampleTime) -> Result<Vector> {
        let u_ref = self.reference_input.at(when);
        let k = min_norm_feedback(
            &self.metric,
            &self.nominal,
            x,
            x_ref,
            &u_ref,
            &self.geodesic,
        )?;
        Ok(u_ref + k)
    }

    /// `B(x)† ζ̂(x, u₋)`, zero without a predictor.
    pub fn compensation(&self, x: &Vector, u_prev: &Vector) -> Vector {
        match &self.predictor {
            Some(p) => pinv(&self.nominal.actuation(x)) * p.eval(x, u_prev),
            None => Vector::zeros(self.nominal.input_dim()),
        }
    }

    /// Full closed-loop input. Returns the input and whether it was clamped.
    pub fn input(
        &self,
        x: &Vector,
        x_ref: &Vector,
        when: SampleTime,
        u_prev: &Vector,
    ) -> Result<(Vector, bool)> {
        let mut u = self.nominal_input(x, x_ref, when)?;
        if self.predictor.is_some() {
            u -= self.compensation(x, u_prev);
        }
        if self.saturate {
            let clamped = self.nominal.input_box().clamp(&u);
            let hit = clamped != u;
            return Ok((clamped, hit));
        }
        Ok((u, false))
    }

    /// Simulate `plant` under this policy while integrating the reference
    /// `x̄̇ = f(x̄) + B(x̄)ū` alongside. Feedback is evaluated at every RK4
    /// stage; `u₋` is held over each sampling interval.
    pub fn rollout(
        &self,
        plant: &DynamicalSystem,
        x0: &Vector,
        x_ref0: &Vector,
        horizon: f64,
        dt: f64,
    ) -> Result<ClosedLoopRollout> {
        let n = plant.state_dim();
        if x0.len() != n || x_ref0.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: x0.len().min(x_ref0.len()),
            });
        }
        let steps = crate::systems::step_count(horizon, dt)?;
        let m = plant.input_dim();
        let mut out = ClosedLoopRollout {
            record: TrajectoryRecord {
                times: Vec::with_capacity(steps + 1),
                states: Vec::with_capacity(steps + 1),
                inputs: Vec::with_capacity(steps + 1),
                uncertainties: (!plant.is_nominal()).then(|| Vec::with_capacity(steps + 1)),
                state_box_exit: None,
            },
            reference: Vec::with_capacity(steps + 1),
            delayed_inputs: Vec::with_capacity(steps + 1),
            saturation_events: 0,
        };
        let mut z = Vector::zeros(2 * n);
        z.rows_mut(0, n).copy_from(x0);
        z.rows_mut(n, n).copy_from(x_ref0);
        let mut u_prev = Vector::zeros(m);
        let failure: RefCell<Option<Error>> = RefCell::new(None);

        for k in 0..=steps {
            let when = SampleTime::grid(k, dt);
            let x = z.rows(0, n).into_owned();
            let x_ref = z.rows(n, n).into_owned();
            let (u, clamped) = self.input(&x, &x_ref, when, &u_prev)?;
            if clamped {
                out.saturation_events += 1;
            }
            if let Some(zs) = out.record.uncertainties.as_mut() {
                zs.push(plant.uncertainty(&x, &u));
            }
            if out.record.state_box_exit.is_none() && !plant.state_box().contains(&x) {
                out.record.state_box_exit = Some(when.t);
            }
            out.record.times.push(when.t);
            out.record.states.push(x);
            out.record.inputs.push(u.clone());
            out.reference.push(x_ref);
            out.delayed_inputs.push(u_prev.clone());
            if k == steps {
                break;
            }
            let held = u_prev.clone();
            let rhs = |y: &Vector, w: SampleTime| -> Vector {
                let xs = y.rows(0, n).into_owned();
                let xr = y.rows(n, n).into_owned();
                let mut dz = Vector::zeros(2 * n);
                let ur = self.reference_input.at(w);
                dz.rows_mut(n, n)
                    .copy_from(&self.nominal.nominal_rhs(&xr, &ur));
                match self.input(&xs, &xr, w, &held) {
                    Ok((u, _)) => dz.rows_mut(0, n).copy_from(&plant.rhs(&xs, &u)),
                    Err(e) => {
                        failure.borrow_mut().get_or_insert(e);
                    }
                }
                dz
            };
            z = rk4_step(rhs, &z, k, dt);
            if let Some(e) = failure.borrow_mut().take() {
                return Err(e);
            }
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteState {
                    time: (k + 1) as f64 * dt,
                });
            }
            u_prev = u;
        }
        if out.saturation_events > 0 {
            debug!(
                "input saturated at {} of {} sampling instants",
                out.saturation_events,
                steps + 1
            );
        }
        Ok(out)
    }
}

/// `‖R(t_k)‖ = ‖ζ(x_k, u_k) − B(x_k)B(x_k)† ζ̂(x_k, u_{k−1})‖` along a closed-loop
/// record, with `u_{−1} = 0`.
pub fn residual_trace(
    plant: &DynamicalSystem,
    predictor: Option<&UncertaintyPredictor>,
    record: &TrajectoryRecord,
) -> Vec<f64> {
    let m = record.input_dim();
    let zero = Vector::zeros(m);
    (0..record.len())
        .map(|k| {
            let x = &record.states[k];
            let u = &record.inputs[k];
            let mut r = plant.uncertainty(x, u);
            if let Some(p) = predictor {
                let u_prev = if k == 0 { &zero } else { &record.inputs[k - 1] };
                let b = plant.actuation(x);
                r -= &b * (pinv(&b) * p.eval(x, u_prev));
            }
            r.norm()
        })
        .collect()
}
