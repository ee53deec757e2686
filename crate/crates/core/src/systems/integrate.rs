use super::{DynamicalSystem, SampleTime, TrajectoryRecord};
use crate::error::{Error, Result};
use crate::linalg::Vector;

/// One classical RK4 step of `ẋ = rhs(x, when)` over `[step·Δt, (step+1)·Δt]`.
pub fn rk4_step(
    rhs: impl Fn(&Vector, SampleTime) -> Vector,
    x: &Vector,
    step: usize,
    dt: f64,
) -> Vector {
    let t = step as f64 * dt;
    let at = |tau: f64| SampleTime { step, t: t + tau };
    let k1 = rhs(x, at(0.0));
    let k2 = rhs(&(x + &k1 * (0.5 * dt)), at(0.5 * dt));
    let k3 = rhs(&(x + &k2 * (0.5 * dt)), at(0.5 * dt));
    let k4 = rhs(&(x + &k3 * dt), at(dt));
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
}

pub(crate) fn step_count(horizon: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0) || !(horizon >= dt) {
        return Err(Error::InvalidArgument(format!(
            "need Δt > 0 and T ≥ Δt, got Δt = {dt}, T = {horizon}"
        )));
    }
    Ok((horizon / dt).round() as usize)
}

/// Fixed-step RK4 simulation under a feedback policy evaluated at every stage.
/// Records the policy input at each grid point and, when the plant has one,
/// the realised uncertainty `ζ(x_k, u_k)`.
pub fn integrate(
    sys: &DynamicalSystem,
    x0: &Vector,
    policy: impl Fn(&Vector, SampleTime) -> Vector,
    horizon: f64,
    dt: f64,
) -> Result<TrajectoryRecord> {
    sys.check_state(x0)?;
    let steps = step_count(horizon, dt)?;
    if !sys.state_box().contains(x0) {
        return Err(Error::InvalidArgument(
            "initial state lies outside the state box".into(),
        ));
    }
    let mut rec = TrajectoryRecord {
        times: Vec::with_capacity(steps + 1),
        states: Vec::with_capacity(steps + 1),
        inputs: Vec::with_capacity(steps + 1),
        uncertainties: (!sys.is_nominal()).then(|| Vec::with_capacity(steps + 1)),
        state_box_exit: None,
    };
    let mut x = x0.clone();
    for k in 0..=steps {
        let when = SampleTime::grid(k, dt);
        let u = policy(&x, when);
        if let Some(z) = rec.uncertainties.as_mut() {
            z.push(sys.uncertainty(&x, &u));
        }
        if rec.state_box_exit.is_none() && !sys.state_box().contains(&x) {
            rec.state_box_exit = Some(when.t);
        }
        rec.times.push(when.t);
        rec.states.push(x.clone());
        rec.inputs.push(u);
        if k == steps {
            break;
        }
        x = rk4_step(|y, w| sys.rhs(y, &policy(y, w)), &x, k, dt);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState {
                time: (k + 1) as f64 * dt,
            });
        }
    }
    Ok(rec)
}
