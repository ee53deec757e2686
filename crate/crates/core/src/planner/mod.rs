//! Reference generation by single shooting on the nominal dynamics with
//! tightened box constraints and elliptical obstacles.

use std::sync::Arc;

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::control::{ClosedLoopRollout, ContractingPolicy};
use crate::error::{Error, Result};
use crate::linalg::{jacobian, Matrix, Vector};
use crate::metric::{ContractionMetric, GeodesicOptions};
use crate::predictor::UncertaintyPredictor;
use crate::systems::{
    rk4_step, step_count, BoxSet, DynamicalSystem, InputSignal, SampleTime, TrajectoryRecord,
};
use crate::tube::{tracking_distances, Obstacle};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub max_iter: usize,
    pub phase1_max_iter: usize,
    /// Stop once the relative cost decrease over an iteration falls below this.
    pub rel_tol: f64,
    /// Consecutive grid steps sharing one input value.
    pub hold_steps: usize,
    /// Slack that phase 1 aims for on every constraint.
    pub phase1_margin: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iter: 300,
            phase1_max_iter: 300,
            rel_tol: 1e-7,
            hold_steps: 10,
            phase1_margin: 1e-2,
        }
    }
}

/// `min Σ Δt (w₁‖a‖² + w₂P)` with `P` a terminal goal term plus log barriers on
/// the state box and obstacles; inputs are kept in their box by projection.
#[derive(Debug, Clone)]
pub struct PlanProblem {
    pub sys: DynamicalSystem,
    pub horizon: f64,
    pub dt: f64,
    pub start: Vector,
    pub goal: Vector,
    /// Diagonal weights of the terminal goal distance; zero drops a coordinate.
    pub goal_weights: Vec<f64>,
    pub state_box: BoxSet,
    pub input_box: BoxSet,
    pub obstacles: Vec<Obstacle>,
    /// State coordinates of the obstacle plane.
    pub plane: [usize; 2],
    pub w1: f64,
    pub w2: f64,
    pub barrier: f64,
    pub options: SolverOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanCheck {
    /// Largest excursion of a grid state outside the state box (0 if inside).
    pub state_violation: f64,
    pub input_violation: f64,
    /// Smallest `level − 1` over obstacles and grid states; positive is clear.
    pub obstacle_clearance: f64,
    pub feasible: bool,
}

#[derive(Debug, Clone)]
pub struct Plan {
    pub record: TrajectoryRecord,
    pub input: InputSignal,
    pub cost: f64,
    pub cost_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub check: PlanCheck,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSummary {
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
    pub check: PlanCheck,
}

impl Plan {
    pub fn summary(&self) -> PlanSummary {
        PlanSummary {
            cost: self.cost,
            iterations: self.iterations,
            converged: self.converged,
            check: self.check.clone(),
        }
    }
}

/// Inequality slacks `g ≥ 0` at one state, with their gradients.
struct Slacks {
    values: Vec<f64>,
    grads: Vec<Vector>,
}

impl PlanProblem {
    fn steps(&self) -> Result<usize> {
        step_count(self.horizon, self.dt)
    }

    fn blocks(&self, steps: usize) -> usize {
        steps.div_ceil(self.options.hold_steps.max(1))
    }

    fn block_of(&self, k: usize) -> usize {
        k / self.options.hold_steps.max(1)
    }

    fn slacks(&self, x: &Vector) -> Slacks {
        let n = x.len();
        let mut values = Vec::new();
        let mut grads = Vec::new();
        for i in 0..n {
            if self.state_box.lo[i].is_finite() {
                values.push(x[i] - self.state_box.lo[i]);
                let mut g = Vector::zeros(n);
                g[i] = 1.0;
                grads.push(g);
            }
            if self.state_box.hi[i].is_finite() {
                values.push(self.state_box.hi[i] - x[i]);
                let mut g = Vector::zeros(n);
                g[i] = -1.0;
                grads.push(g);
            }
        }
        let [pi, pj] = self.plane;
        for o in &self.obstacles {
            let p = [x[pi], x[pj]];
            values.push(o.level(p) - 1.0);
            let d = o.level_gradient(p);
            let mut g = Vector::zeros(n);
            g[pi] = d[0];
            g[pj] = d[1];
            grads.push(g);
        }
        Slacks { values, grads }
    }

    fn terminal(&self, x: &Vector) -> (f64, Vector) {
        let mut g = Vector::zeros(x.len());
        let mut c = 0.0;
        for (i, &w) in self.goal_weights.iter().enumerate() {
            let d = x[i] - self.goal[i];
            c += w * d * d;
            g[i] = 2.0 * w * d;
        }
        (c, g)
    }

    fn expand(&self, blocks: &[Vector], steps: usize) -> Vec<Vector> {
        (0..steps)
            .map(|k| blocks[self.block_of(k)].clone())
            .collect()
    }

    fn simulate(&self, inputs: &[Vector]) -> Vec<Vector> {
        let mut xs = Vec::with_capacity(inputs.len() + 1);
        xs.push(self.start.clone());
        for (k, u) in inputs.iter().enumerate() {
            let next = rk4_step(|y, _| self.sys.nominal_rhs(y, u), &xs[k], k, self.dt);
            xs.push(next);
        }
        xs
    }

    /// Barrier-phase cost; `+∞` outside the strict interior.
    fn cost(&self, blocks: &[Vector], xs: &[Vector]) -> f64 {
        let h = self.options.hold_steps.max(1) as f64;
        let effort: f64 = blocks.iter().map(|u| u.norm_squared()).sum::<f64>() * h * self.dt;
        let mut barrier = 0.0;
        for x in xs {
            if x.iter().any(|v| !v.is_finite()) {
                return f64::INFINITY;
            }
            for s in self.slacks(x).values {
                if s <= 0.0 {
                    return f64::INFINITY;
                }
                barrier -= s.ln();
            }
        }
        let (term, _) = self.terminal(xs.last().expect("non-empty trajectory"));
        self.w1 * effort + self.w2 * (term + self.barrier * self.dt * barrier)
    }

    /// Phase-1 penalty `Σ Δt Σ max(0, ε − g)²`.
    fn infeasibility(&self, xs: &[Vector]) -> f64 {
        let eps = self.options.phase1_margin;
        let mut p = 0.0;
        for x in xs {
            if x.iter().any(|v| !v.is_finite()) {
                return f64::INFINITY;
            }
            for s in self.slacks(x).values {
                p += (eps - s).max(0.0).powi(2);
            }
        }
        p * self.dt
    }

    /// Gradient of the stage and terminal terms with respect to each grid state.
    fn state_gradients(&self, xs: &[Vector], phase1: bool) -> Vec<Vector> {
        let last = xs.len() - 1;
        xs.iter()
            .enumerate()
            .map(|(k, x)| {
                let sl = self.slacks(x);
                let mut g = Vector::zeros(x.len());
                for (s, ds) in sl.values.iter().zip(&sl.grads) {
                    if phase1 {
                        let v = (self.options.phase1_margin - s).max(0.0);
                        g -= ds * (2.0 * v * self.dt);
                    } else {
                        g -= ds * (self.w2 * self.barrier * self.dt / s);
                    }
                }
                if !phase1 && k == last {
                    g += self.terminal(x).1 * self.w2;
                }
                g
            })
            .collect()
    }

    /// Reverse pass through the RK4 steps; returns the gradient per input block.
    fn adjoint(
        &self,
        xs: &[Vector],
        inputs: &[Vector],
        state_grads: &[Vector],
        blocks: usize,
    ) -> Vec<Vector> {
        let m = self.sys.input_dim();
        let h = self.dt;
        let mut gu = vec![Vector::zeros(m); blocks];
        let mut lam = state_grads[xs.len() - 1].clone();
        for k in (0..inputs.len()).rev() {
            let (x, u) = (&xs[k], &inputs[k]);
            let f = |y: &Vector| self.sys.nominal_rhs(y, u);
            let k1 = f(x);
            let z2 = x + &k1 * (0.5 * h);
            let k2 = f(&z2);
            let z3 = x + &k2 * (0.5 * h);
            let k3 = f(&z3);
            let z4 = x + &k3 * h;
            let c = &lam * (h / 6.0);
            let a4 = c.clone();
            let w4 = jacobian(f, &z4).transpose() * &a4;
            let a3 = &c * 2.0 + &w4 * h;
            let w3 = jacobian(f, &z3).transpose() * &a3;
            let a2 = &c * 2.0 + &w3 * (0.5 * h);
            let w2 = jacobian(f, &z2).transpose() * &a2;
            let a1 = &c + &w2 * (0.5 * h);
            let w1 = jacobian(f, x).transpose() * &a1;
            let b = |z: &Vector| -> Matrix { self.sys.actuation(z).transpose() };
            let g = b(x) * &a1 + b(&z2) * &a2 + b(&z3) * &a3 + b(&z4) * &a4;
            gu[self.block_of(k)] += g;
            lam = &lam + w1 + w2 + w3 + w4 + &state_grads[k];
        }
        gu
    }

    fn effort_gradient(&self, blocks: &[Vector], phase1: bool) -> Vec<Vector> {
        let h = self.options.hold_steps.max(1) as f64;
        blocks
            .iter()
            .map(|u| {
                if phase1 {
                    u * 0.0
                } else {
                    u * (2.0 * self.w1 * h * self.dt)
                }
            })
            .collect()
    }

    fn project(&self, blocks: &mut [Vector]) {
        for u in blocks.iter_mut() {
            *u = self.input_box.clamp(u);
        }
    }

    pub fn check(&self, xs: &[Vector], inputs: &[Vector]) -> PlanCheck {
        let c = Constraints {
            state_box: self.state_box.clone(),
            input_box: self.input_box.clone(),
            obstacles: self.obstacles.clone(),
            plane: self.plane,
        };
        Self::check_against(&c, xs, inputs)
    }

    pub fn check_against(c: &Constraints, xs: &[Vector], inputs: &[Vector]) -> PlanCheck {
        let excess = |b: &BoxSet, v: &Vector| {
            v.iter()
                .zip(b.lo.iter().zip(&b.hi))
                .map(|(x, (l, h))| (l - x).max(x - h).max(0.0))
                .fold(0.0, f64::max)
        };
        let state_violation = xs
            .iter()
            .map(|x| excess(&c.state_box, x))
            .fold(0.0, f64::max);
        let input_violation = inputs
            .iter()
            .map(|u| excess(&c.input_box, u))
            .fold(0.0, f64::max);
        let [pi, pj] = c.plane;
        let obstacle_clearance = xs
            .iter()
            .flat_map(|x| {
                c.obstacles
                    .iter()
                    .map(move |o| o.level([x[pi], x[pj]]) - 1.0)
            })
            .fold(f64::INFINITY, f64::min);
        PlanCheck {
            state_violation,
            input_violation,
            obstacle_clearance,
            feasible: state_violation == 0.0 && input_violation <= 1e-6 && obstacle_clearance > 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self
            .state_box
            .lo
            .iter()
            .zip(&self.state_box.hi)
            .any(|(l, h)| l >= h)
            || self
                .input_box
                .lo
                .iter()
                .zip(&self.input_box.hi)
                .any(|(l, h)| l > h)
        {
            return Err(Error::InfeasiblePlan(
                "tightened state or input box is empty".into(),
            ));
        }
        if !self.state_box.contains(&self.start) {
            return Err(Error::InfeasiblePlan(
                "start lies outside the tightened state box".into(),
            ));
        }
        let [pi, pj] = self.plane;
        if self
            .obstacles
            .iter()
            .any(|o| o.contains([self.start[pi], self.start[pj]]))
        {
            return Err(Error::InfeasiblePlan(
                "start lies inside an obstacle".into(),
            ));
        }
        Ok(())
    }

    /// Projected gradient descent with Barzilai–Borwein steps and Armijo
    /// backtracking; every accepted step lowers `objective`.
    fn descend(
        &self,
        blocks: &mut Vec<Vector>,
        steps: usize,
        phase1: bool,
        max_iter: usize,
        history: &mut Vec<f64>,
    ) -> (usize, bool) {
        let objective = |b: &[Vector]| {
            let xs = self.simulate(&self.expand(b, steps));
            if phase1 {
                self.infeasibility(&xs)
            } else {
                self.cost(b, &xs)
            }
        };
        let gradient = |b: &[Vector]| {
            let inputs = self.expand(b, steps);
            let xs = self.simulate(&inputs);
            let sg = self.state_gradients(&xs, phase1);
            let mut g = self.adjoint(&xs, &inputs, &sg, b.len());
            for (gi, ei) in g.iter_mut().zip(self.effort_gradient(b, phase1)) {
                *gi += ei;
            }
            g
        };
        let mut value = objective(blocks);
        let mut grad = gradient(blocks);
        let mut step = 1.0
            / grad
                .iter()
                .map(|g| g.norm_squared())
                .sum::<f64>()
                .sqrt()
                .max(1e-12);
        let mut prev: Option<(Vec<Vector>, Vec<Vector>)> = None;
        for it in 0..max_iter {
            if phase1 && it % 50 == 0 {
                debug!("phase 1 iteration {it}: penalty {value:.3e}");
            }
            if phase1
                && self
                    .cost(blocks, &self.simulate(&self.expand(blocks, steps)))
                    .is_finite()
            {
                return (it, true);
            }
            if let Some((pb, pg)) = &prev {
                let (mut ss, mut sy) = (0.0, 0.0);
                for i in 0..blocks.len() {
                    let s = &blocks[i] - &pb[i];
                    let y = &grad[i] - &pg[i];
                    ss += s.norm_squared();
                    sy += s.dot(&y);
                }
                if sy > 0.0 {
                    step = ss / sy;
                }
            }
            let mut accepted = false;
            for _ in 0..40 {
                let mut trial: Vec<Vector> = blocks
                    .iter()
                    .zip(&grad)
                    .map(|(u, g)| u - g * step)
                    .collect();
                self.project(&mut trial);
                let decrease: f64 = trial
                    .iter()
                    .zip(blocks.iter())
                    .zip(&grad)
                    .map(|((t, u), g)| g.dot(&(t - u)))
                    .sum();
                let tv = objective(&trial);
                if tv.is_finite() && tv <= value + 1e-4 * decrease {
                    let rel = (value - tv) / value.abs().max(1e-12);
                    prev = Some((std::mem::replace(blocks, trial), grad));
                    grad = gradient(blocks);
                    value = tv;
                    history.push(value);
                    accepted = true;
                    if rel < self.options.rel_tol && !phase1 {
                        return (it + 1, true);
                    }
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                debug!("line search stalled at iteration {it} value {value:.3e}");
                return (it, !phase1);
            }
        }
        let feasible = phase1
            && self
                .cost(blocks, &self.simulate(&self.expand(blocks, steps)))
                .is_finite();
        (max_iter, feasible)
    }

    pub fn solve(&self, warm_start: Option<&[Vector]>) -> Result<Plan> {
        self.validate()?;
        let steps = self.steps()?;
        let nb = self.blocks(steps);
        let m = self.sys.input_dim();
        let mut blocks: Vec<Vector> = match warm_start {
            Some(w) if w.len() == nb => w.to_vec(),
            Some(w) => {
                return Err(Error::DimensionMismatch {
                    expected: nb,
                    got: w.len(),
                })
            }
            None => vec![self.input_box.clamp(&Vector::zeros(m)); nb],
        };
        self.project(&mut blocks);

        let mut history = Vec::new();
        let xs = self.simulate(&self.expand(&blocks, steps));
        if !self.cost(&blocks, &xs).is_finite() {
            let mut p1 = Vec::new();
            let (it, ok) = self.descend(
                &mut blocks,
                steps,
                true,
                self.options.phase1_max_iter,
                &mut p1,
            );
            let xs = self.simulate(&self.expand(&blocks, steps));
            if !ok || !self.cost(&blocks, &xs).is_finite() {
                return Err(Error::InfeasiblePlan(format!(
                    "no strictly feasible input found after {it} phase-1 iterations"
                )));
            }
            debug!("phase 1 reached the interior in {it} iterations");
        }
        let initial = self.cost(&blocks, &self.simulate(&self.expand(&blocks, steps)));
        history.push(initial);
        let (iterations, converged) = self.descend(
            &mut blocks,
            steps,
            false,
            self.options.max_iter,
            &mut history,
        );
        if !converged {
            debug!("planner stopped after {iterations} iterations without meeting the tolerance");
        }
        let inputs = self.expand(&blocks, steps);
        let xs = self.simulate(&inputs);
        let cost = *history.last().expect("history holds the initial cost");
        let check = self.check(&xs, &inputs);
        info!(
            "plan: cost {cost:.4e} after {iterations} iterations, clearance {:.3e}",
            check.obstacle_clearance
        );
        let mut recorded = inputs.clone();
        recorded.push(inputs.last().cloned().unwrap_or_else(|| Vector::zeros(m)));
        let record = TrajectoryRecord {
            times: (0..=steps)
                .map(|k| SampleTime::grid(k, self.dt).t)
                .collect(),
            states: xs,
            inputs: recorded,
            uncertainties: None,
            state_box_exit: None,
        };
        let input = InputSignal::ZeroOrderHold {
            values: inputs.iter().map(|u| u.iter().copied().collect()).collect(),
        };
        Ok(Plan {
            record,
            input,
            cost,
            cost_history: history,
            iterations,
            converged,
            check,
        })
    }

    /// Block inputs of an existing plan, for warm starts.
    pub fn blocks_of(&self, plan: &Plan) -> Vec<Vector> {
        let h = self.options.hold_steps.max(1);
        plan.record
            .inputs
            .iter()
            .step_by(h)
            .take(self.blocks(plan.record.len() - 1))
            .cloned()
            .collect()
    }
}

/// The original (untightened) admissible sets a closed-loop run is checked against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constraints {
    pub state_box: BoxSet,
    pub input_box: BoxSet,
    pub obstacles: Vec<Obstacle>,
    pub plane: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub distances: Vec<f64>,
    pub max_distance: f64,
    pub contained: bool,
    pub state_violation: f64,
    pub input_violation: f64,
    pub obstacle_clearance: f64,
    /// Some grid state or applied input left the original sets, or hit an obstacle.
    pub violated: bool,
    pub saturation_events: usize,
}

/// Track `plan` on the true plant from `x0` with the compensated policy and
/// check the run against the tube and the original constraints.
#[allow(clippy::too_many_arguments)]
pub fn end_to_end_run(
    sys_true: &DynamicalSystem,
    plan: &Plan,
    metric: &ContractionMetric,
    predictor: Option<Arc<UncertaintyPredictor>>,
    geodesic: &GeodesicOptions,
    x0: &Vector,
    radius: f64,
    constraints: &Constraints,
) -> Result<(RunReport, ClosedLoopRollout)> {
    let mut policy = ContractingPolicy::new(metric.clone(), sys_true.nominal(), plan.input.clone())
        .with_predictor(predictor);
    policy.geodesic = *geodesic;
    let horizon = plan.record.horizon();
    let dt = plan.record.dt();
    let run = policy.rollout(sys_true, x0, &plan.record.states[0], horizon, dt)?;
    let distances = tracking_distances(metric, &run.record.states, &run.reference, geodesic);
    let max_distance = distances.iter().copied().fold(0.0, f64::max);
    let check = PlanProblem::check_against(constraints, &run.record.states, &run.record.inputs);
    let report = RunReport {
        distances,
        max_distance,
        contained: max_distance <= radius,
        state_violation: check.state_violation,
        input_violation: check.input_violation,
        obstacle_clearance: check.obstacle_clearance,
        violated: check.state_violation > 0.0
            || check.input_violation > 0.0
            || check.obstacle_clearance <= 0.0,
        saturation_events: run.saturation_events,
    };
    Ok((report, run))
}
