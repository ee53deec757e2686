use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::conformal::CalibrationResult;
use crate::error::Result;
use crate::systems::BoxSet;
use crate::tube::{ContainmentReport, Obstacle};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub source: String,
    pub constant: bool,
    pub rate_per_s: f64,
    pub m_lower: f64,
    pub m_upper: f64,
    pub condition_number: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorSummary {
    pub id: String,
    pub family: String,
    /// Mean over training records of the largest prediction error.
    pub train_sup_error: f64,
    /// Same quantity for `ζ̂ = 0`.
    pub zero_sup_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSummary {
    pub n: usize,
    pub alpha: f64,
    pub quantile_index: usize,
    #[serde(with = "crate::serde_ext::finite_or_null")]
    pub quantile: f64,
    pub unattainable: bool,
    #[serde(with = "crate::serde_ext::finite_or_null")]
    pub radius: f64,
    pub failed_rollouts: usize,
}

impl CalibrationSummary {
    pub fn new(c: &CalibrationResult, radius: f64) -> Self {
        Self {
            n: c.len(),
            alpha: c.alpha,
            quantile_index: c.quantile_index,
            quantile: c.quantile_value,
            unattainable: c.unattainable,
            radius,
            failed_rollouts: c.scores.iter().filter(|s| !s.is_finite()).count(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub reference: usize,
    pub train: usize,
    pub cal: usize,
    pub test: usize,
    pub test_failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanningSummary {
    pub tightened_state_box: BoxSet,
    pub tightened_input_box: BoxSet,
    pub feedback_margin_lower: Vec<f64>,
    pub feedback_margin_upper: Vec<f64>,
    pub compensation_margin_lower: Vec<f64>,
    pub compensation_margin_upper: Vec<f64>,
    pub obstacle_inflation: f64,
    pub inflated_obstacles: Vec<Obstacle>,
    pub plans_requested: usize,
    pub plans_solved: usize,
    pub plans_converged: usize,
    pub plan_failures: Vec<String>,
    /// Calibration on rollouts tracking tightened plans.
    pub tracking_calibration: CalibrationSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub containment: ContainmentReport,
    /// Fraction of test scores at or below the calibrated quantile.
    pub score_coverage: f64,
    /// Contained rollouts whose distance exceeded the exponential envelope
    /// (with a relative slack of `envelope_slack` on `c₂`).
    pub envelope_checked: usize,
    pub envelope_violations: usize,
    pub envelope_slack: f64,
    pub max_distance: f64,
    pub mean_max_distance: f64,
    /// Rollouts that left the original state/input sets or touched an obstacle.
    pub constraint_violations: Option<usize>,
    pub constraint_violation_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub name: String,
    pub benchmark: String,
    pub seed: u64,
    pub config_sha256: String,
    pub metric: MetricSummary,
    pub data: DataSummary,
    pub predictor: PredictorSummary,
    pub calibration: CalibrationSummary,
    pub planning: Option<PlanningSummary>,
    pub evaluation: EvaluationSummary,
}

impl Report {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn table(&self) -> String {
        let e = &self.evaluation;
        let c = &e.containment;
        let mut rows: Vec<(&str, String)> = vec![
            (
                "run",
                format!("{} ({}, seed {})", self.name, self.benchmark, self.seed),
            ),
            (
                "metric",
                format!(
                    "lambda {:.4} 1/s, m in [{:.4}, {:.4}]",
                    self.metric.rate_per_s, self.metric.m_lower, self.metric.m_upper
                ),
            ),
            (
                "predictor",
                format!(
                    "{}: train sup error {:.4} (zero predictor {:.4})",
                    self.predictor.family,
                    self.predictor.train_sup_error,
                    self.predictor.zero_sup_error
                ),
            ),
            (
                "calibration",
                format!(
                    "N2 {} alpha {} j {} quantile {} radius {}",
                    self.calibration.n,
                    self.calibration.alpha,
                    self.calibration.quantile_index,
                    fmt_inf(self.calibration.quantile),
                    fmt_inf(self.calibration.radius)
                ),
            ),
        ];
        if let Some(p) = &self.planning {
            rows.push((
                "plans",
                format!(
                    "{}/{} solved, {} converged; tracking quantile {} radius {}",
                    p.plans_solved,
                    p.plans_requested,
                    p.plans_converged,
                    fmt_inf(p.tracking_calibration.quantile),
                    fmt_inf(p.tracking_calibration.radius)
                ),
            ));
        }
        rows.push((
            "containment",
            format!(
                "{}/{} = {:.4} (radius {})",
                c.contained,
                c.n,
                c.fraction,
                fmt_inf(c.radius)
            ),
        ));
        rows.push(("score coverage", format!("{:.4}", e.score_coverage)));
        rows.push((
            "envelope",
            format!(
                "{} violations among {} contained",
                e.envelope_violations, e.envelope_checked
            ),
        ));
        rows.push((
            "distance",
            format!(
                "max {:.4}, mean of per-rollout max {:.4}",
                e.max_distance, e.mean_max_distance
            ),
        ));
        if let (Some(v), Some(f)) = (e.constraint_violations, e.constraint_violation_fraction) {
            rows.push(("constraints", format!("{v} violating rollouts ({f:.4})")));
        }
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut s = String::new();
        for (k, v) in rows {
            let _ = writeln!(s, "{k:<width$}  {v}");
        }
        s
    }
}

fn fmt_inf(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.4}")
    } else {
        "inf".into()
    }
}

/// One test rollout in `rollouts.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRow {
    pub id: usize,
    pub failed: bool,
    pub score: f64,
    pub max_distance: f64,
    pub contained: bool,
    pub envelope_ok: bool,
    pub state_violation: f64,
    pub input_violation: f64,
    pub violated: bool,
}

pub fn write_rollouts_csv<W: Write>(rows: &[RolloutRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
