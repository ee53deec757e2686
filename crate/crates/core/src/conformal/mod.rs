//! Trajectory nonconformity scores and split conformal quantiles, including the
//! two-step variant used when the tube feeds back into planning.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::residual_trace;
use crate::error::{Error, Result};
use crate::predictor::{TrajectoryDataset, UncertaintyPredictor};
use crate::systems::{DynamicalSystem, TrajectoryRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    /// Ascending; failed rollouts are `+∞` (written as `null`).
    #[serde(with = "crate::serde_ext::finite_or_null_vec")]
    pub scores: Vec<f64>,
    pub alpha: f64,
    /// 1-based rank `⌈(1−α)(N+1)⌉`.
    pub quantile_index: usize,
    /// `+∞` (written as `null`) when the rank exceeds `N`.
    #[serde(with = "crate::serde_ext::finite_or_null")]
    pub quantile_value: f64,
    pub unattainable: bool,
    #[serde(default)]
    pub predictor_id: String,
    #[serde(default)]
    pub dataset_hash: String,
}

impl CalibrationResult {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn with_provenance(
        mut self,
        predictor_id: impl Into<String>,
        dataset_hash: impl Into<String>,
    ) -> Self {
        self.predictor_id = predictor_id.into();
        self.dataset_hash = dataset_hash.into();
        self
    }

    pub fn summary(&self) -> String {
        let q = if self.unattainable {
            "+inf (unattainable)".to_owned()
        } else {
            format!("{:.6e}", self.quantile_value)
        };
        format!(
            "N2 = {}, alpha = {}, j_alpha = {}, quantile = {q}",
            self.len(),
            self.alpha,
            self.quantile_index
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// `⌈(1−α)(N+1)⌉`, robust to the rounding of `(1−α)(N+1)` when it is an integer.
pub fn quantile_index(n: usize, alpha: f64) -> usize {
    let v = (1.0 - alpha) * (n as f64 + 1.0);
    (v - 1e-9 * v.max(1.0)).ceil().max(1.0) as usize
}

/// Largest residual `‖ζ − BB†ζ̂‖` over the record's time grid.
pub fn nonconformity_score(
    plant: &DynamicalSystem,
    predictor: Option<&UncertaintyPredictor>,
    record: &TrajectoryRecord,
) -> f64 {
    residual_trace(plant, predictor, record)
        .into_iter()
        .fold(0.0, f64::max)
}

/// Scores of every record of a closed-loop dataset, in record order, followed
/// by `+∞` for each record whose rollout failed.
pub fn score_dataset(
    plant: &DynamicalSystem,
    predictor: Option<&UncertaintyPredictor>,
    dataset: &TrajectoryDataset,
) -> Vec<f64> {
    let mut scores: Vec<f64> = dataset
        .records
        .par_iter()
        .map(|r| nonconformity_score(plant, predictor, &r.record))
        .collect();
    if !dataset.failures.is_empty() {
        warn!(
            "{} failed rollouts enter calibration with score +inf",
            dataset.failures.len()
        );
    }
    scores.extend(dataset.failures.iter().map(|_| f64::INFINITY));
    scores
}

pub fn calibrate(scores: &[f64], alpha: f64) -> Result<CalibrationResult> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidAlpha(alpha));
    }
    if scores.is_empty() {
        return Err(Error::InsufficientCalibrationData(
            "no calibration scores".into(),
        ));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("calibration score is NaN".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let j = quantile_index(n, alpha);
    let unattainable = j > n;
    let value = if unattainable {
        f64::INFINITY
    } else {
        sorted[j - 1]
    };
    if unattainable {
        warn!("j_alpha = {j} exceeds N = {n}; the quantile is +inf");
    }
    Ok(CalibrationResult {
        scores: sorted,
        alpha,
        quantile_index: j,
        quantile_value: value,
        unattainable,
        predictor_id: String::new(),
        dataset_hash: String::new(),
    })
}

/// Fraction of test scores not exceeding `quantile`.
pub fn empirical_coverage(test_scores: &[f64], quantile: f64) -> f64 {
    if test_scores.is_empty() {
        return f64::NAN;
    }
    test_scores.iter().filter(|&&s| s <= quantile).count() as f64 / test_scores.len() as f64
}

/// Partition `0..n` into a first part of `round(fraction·n)` indices and the rest.
pub fn split_indices(n: usize, fraction: f64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "split fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let k = (fraction * n as f64).round() as usize;
    if k == 0 || k == n {
        return Err(Error::InsufficientCalibrationData(format!(
            "cannot split {n} calibration records at fraction {fraction}"
        )));
    }
    Ok(((0..k).collect(), (k..n).collect()))
}

/// Quantiles from two disjoint calibration subsets: the first sizes the tube
/// used to tighten planning, the second is scored on rollouts tracking the
/// tightened plans.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoStepCalibration {
    pub tube: CalibrationResult,
    pub tracking: CalibrationResult,
}

pub fn two_step_calibrate(first: &[f64], second: &[f64], alpha: f64) -> Result<TwoStepCalibration> {
    if first.is_empty() || second.is_empty() {
        return Err(Error::InsufficientCalibrationData(format!(
            "two-step calibration needs both subsets, got {} and {}",
            first.len(),
            second.len()
        )));
    }
    Ok(TwoStepCalibration {
        tube: calibrate(first, alpha)?,
        tracking: calibrate(second, alpha)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranks() {
        assert_eq!(quantile_index(540, 0.05), 514);
        assert_eq!(quantile_index(50, 0.05), 49);
        assert_eq!(quantile_index(10, 0.05), 11);
        assert_eq!(quantile_index(19, 0.05), 19);
        assert_eq!(quantile_index(9, 0.1), 9);
    }

    #[test]
    fn quantile_and_flag() {
        let s: Vec<f64> = (1..=50).rev().map(f64::from).collect();
        let c = calibrate(&s, 0.05).unwrap();
        assert_eq!(c.quantile_value, 49.0);
        assert!(!c.unattainable);
        let c = calibrate(&s[..10], 0.05).unwrap();
        assert!(c.unattainable && c.quantile_value.is_infinite());
        let back = CalibrationResult::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(back, c);
        assert!(matches!(calibrate(&s, 1.0), Err(Error::InvalidAlpha(_))));
        assert!(matches!(
            calibrate(&[], 0.1),
            Err(Error::InsufficientCalibrationData(_))
        ));
    }

    #[test]
    fn coverage_counts() {
        assert_eq!(empirical_coverage(&[0.1, 0.2], 1.0), 1.0);
        assert_eq!(empirical_coverage(&[0.1, 2.0, 3.0, 0.5], 1.0), 0.5);
    }

    #[test]
    fn split_bookkeeping() {
        let (a, b) = split_indices(100, 0.5).unwrap();
        assert_eq!((a.len(), b.len()), (50, 50));
        let s: Vec<f64> = (0..100).map(f64::from).collect();
        let first: Vec<f64> = a.iter().map(|&i| s[i]).collect();
        let second: Vec<f64> = b.iter().map(|&i| s[i]).collect();
        let two = two_step_calibrate(&first, &second, 0.001).unwrap();
        assert!(two.tube.unattainable && two.tracking.unattainable);
    }
}
