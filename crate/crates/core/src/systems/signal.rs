use rand::Rng;
use serde::{Deserialize, Serialize};

use super::BoxSet;
use crate::linalg::Vector;

/// Evaluation instant inside a fixed-step integration: `step` is the index of
/// the interval `[step·Δt, (step+1)·Δt]` and `t` the stage time within it.
/// Zero-order-hold quantities key off `step`; continuous ones off `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleTime {
    pub step: usize,
    pub t: f64,
}

impl SampleTime {
    pub fn grid(step: usize, dt: f64) -> Self {
        Self {
            step,
            t: step as f64 * dt,
        }
    }
}

/// Open-loop reference input `ū(t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputSignal {
    Constant {
        value: Vec<f64>,
    },
    /// Linear interpolation between knots spaced `knot_spacing` seconds apart;
    /// held at the last knot afterwards.
    PiecewiseLinear {
        knot_spacing: f64,
        knots: Vec<Vec<f64>>,
    },
    /// One value per integration interval.
    ZeroOrderHold {
        values: Vec<Vec<f64>>,
    },
}

impl InputSignal {
    pub fn zero(dim: usize) -> Self {
        InputSignal::Constant {
            value: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            InputSignal::Constant { value } => value.len(),
            InputSignal::PiecewiseLinear { knots, .. } => knots[0].len(),
            InputSignal::ZeroOrderHold { values } => values[0].len(),
        }
    }

    pub fn at(&self, when: SampleTime) -> Vector {
        match self {
            InputSignal::Constant { value } => Vector::from_column_slice(value),
            InputSignal::PiecewiseLinear {
                knot_spacing,
                knots,
            } => {
                let s = (when.t / knot_spacing).max(0.0);
                let i = s.floor() as usize;
                if i + 1 >= knots.len() {
                    return Vector::from_column_slice(&knots[knots.len() - 1]);
                }
                let w = s - i as f64;
                Vector::from_iterator(
                    knots[i].len(),
                    knots[i]
                        .iter()
                        .zip(&knots[i + 1])
                        .map(|(a, b)| a + w * (b - a)),
                )
            }
            InputSignal::ZeroOrderHold { values } => {
                Vector::from_column_slice(&values[when.step.min(values.len() - 1)])
            }
        }
    }

    /// Random piecewise-linear signal with knots uniform in `input_box`.
    pub fn random_piecewise_linear(
        input_box: &BoxSet,
        horizon: f64,
        knot_spacing: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let count = (horizon / knot_spacing).ceil() as usize + 1;
        let knots = (0..count)
            .map(|_| input_box.sample(rng).iter().copied().collect())
            .collect();
        InputSignal::PiecewiseLinear {
            knot_spacing,
            knots,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn piecewise_linear_interpolates_and_holds() {
        let s = InputSignal::PiecewiseLinear {
            knot_spacing: 1.0,
            knots: vec![vec![0.0], vec![2.0]],
        };
        assert_eq!(s.at(SampleTime { step: 0, t: 0.25 })[0], 0.5);
        assert_eq!(s.at(SampleTime { step: 0, t: 3.0 })[0], 2.0);
    }

    #[test]
    fn zero_order_hold_uses_interval_index() {
        let s = InputSignal::ZeroOrderHold {
            values: vec![vec![1.0], vec![2.0]],
        };
        // End of interval 0 still uses value 0.
        assert_eq!(s.at(SampleTime { step: 0, t: 0.01 })[0], 1.0);
        assert_eq!(s.at(SampleTime { step: 1, t: 0.01 })[0], 2.0);
        assert_eq!(s.at(SampleTime { step: 9, t: 1.0 })[0], 2.0);
    }
}
