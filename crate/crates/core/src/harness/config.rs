use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::predictor::TrainConfig;
use crate::systems::BoxSet;
use crate::tube::{InputTighteningOptions, Obstacle};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Benchmark {
    #[serde(rename = "threeD")]
    ThreeD,
    #[serde(rename = "vtol")]
    Vtol,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricSource {
    Synthesize,
    Load,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    pub source: MetricSource,
    /// Metric JSON for `source = "load"`, relative to the config file.
    pub path: Option<PathBuf>,
    /// Grid points per axis of the synthesis grid.
    pub grid_points: usize,
    /// Synthesis box; defaults to the sampler's state box.
    pub grid_lo: Option<Vec<f64>>,
    pub grid_hi: Option<Vec<f64>>,
    pub lambda_min_per_s: f64,
    pub lambda_max_per_s: f64,
    pub chi_max: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            source: MetricSource::Synthesize,
            path: None,
            grid_points: 5,
            grid_lo: None,
            grid_hi: None,
            lambda_min_per_s: 0.1,
            lambda_max_per_s: 5.0,
            chi_max: 100.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    /// Random piecewise-linear inputs.
    OpenLoop,
    /// Inputs of the contracting feedback flying towards random equilibria.
    Steered,
}

/// Reference distribution. Unset boxes fall back to the benchmark's own sets
/// (or the planning sets when planning is configured).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub state_lo: Option<Vec<f64>>,
    pub state_hi: Option<Vec<f64>>,
    pub initial_lo: Option<Vec<f64>>,
    pub initial_hi: Option<Vec<f64>>,
    pub input_lo: Option<Vec<f64>>,
    pub input_hi: Option<Vec<f64>>,
    pub knot_spacing_s: f64,
    /// Redraw references whose nominal trajectory leaves the state box.
    pub reject_exits: bool,
    pub max_draws_per_record: usize,
    /// Offset box of the equilibria from `x₀` and their holding input, for
    /// `kind = "steered"`.
    pub offset_lo: Option<Vec<f64>>,
    pub offset_hi: Option<Vec<f64>>,
    pub target_input: Option<Vec<f64>>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            kind: SamplerKind::OpenLoop,
            state_lo: None,
            state_hi: None,
            initial_lo: None,
            initial_hi: None,
            input_lo: None,
            input_hi: None,
            knot_spacing_s: 1.0,
            reject_exits: true,
            max_draws_per_record: 200,
            offset_lo: None,
            offset_hi: None,
            target_input: None,
        }
    }
}

/// Where closed-loop rollouts start relative to their reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartMode {
    Center,
    /// Uniform in the metric ball of `start_radius` around `x̄(0)`.
    Ball,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutConfig {
    pub start: StartMode,
    pub start_radius: f64,
    pub saturate: bool,
    pub geodesic_segments: usize,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            start: StartMode::Center,
            start_radius: 0.0,
            saturate: false,
            geodesic_segments: 16,
        }
    }
}

/// Tightened planning with two-step calibration. The calibration budget
/// `n_cal` is split: the first part sizes the tube that tightens the sets,
/// the second is re-collected on rollouts that track tightened plans.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanningConfig {
    pub state_lo: Vec<f64>,
    pub state_hi: Vec<f64>,
    pub input_lo: Vec<f64>,
    pub input_hi: Vec<f64>,
    /// Plan start states are drawn uniformly from this box.
    pub start_lo: Vec<f64>,
    pub start_hi: Vec<f64>,
    pub goal: Vec<f64>,
    #[serde(default)]
    pub goal_weights: Option<Vec<f64>>,
    #[serde(default)]
    pub obstacles: Vec<Obstacle>,
    #[serde(default = "default_plane")]
    pub plane: [usize; 2],
    #[serde(default = "default_w1")]
    pub w1: f64,
    #[serde(default = "default_w2")]
    pub w2: f64,
    #[serde(default = "default_barrier")]
    pub barrier: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_hold_steps")]
    pub hold_steps: usize,
    #[serde(default = "default_first_fraction")]
    pub first_fraction: f64,
    #[serde(default)]
    pub input_tightening: InputTighteningOptions,
    /// Relative slack added to the compensation extent seen in calibration.
    #[serde(default = "default_inflation")]
    pub compensation_inflation: f64,
}

fn default_plane() -> [usize; 2] {
    [0, 1]
}
fn default_w1() -> f64 {
    0.01
}
fn default_w2() -> f64 {
    10.0
}
fn default_barrier() -> f64 {
    0.01
}
fn default_max_iter() -> usize {
    100
}
fn default_hold_steps() -> usize {
    10
}
fn default_first_fraction() -> f64 {
    0.5
}
fn default_inflation() -> f64 {
    0.1
}

impl PlanningConfig {
    pub fn state_box(&self) -> BoxSet {
        BoxSet::new(self.state_lo.clone(), self.state_hi.clone())
    }
    pub fn input_box(&self) -> BoxSet {
        BoxSet::new(self.input_lo.clone(), self.input_hi.clone())
    }
    pub fn start_box(&self) -> BoxSet {
        BoxSet::new(self.start_lo.clone(), self.start_hi.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// State coordinates of the tube-ellipse CSV.
    pub ellipse_plane: [usize; 2],
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            ellipse_plane: [0, 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub benchmark: Benchmark,
    #[serde(default)]
    pub seed: u64,
    pub horizon_s: f64,
    pub dt_s: f64,
    pub alpha: f64,
    pub n_train: usize,
    pub n_cal: usize,
    pub n_test: usize,
    #[serde(default)]
    pub metric: MetricConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub predictor: TrainConfig,
    #[serde(default)]
    pub rollout: RolloutConfig,
    #[serde(default)]
    pub planning: Option<PlanningConfig>,
    #[serde(default)]
    pub output: OutputConfig,
    /// Worker threads for within-stage parallelism; all cores when unset.
    #[serde(default)]
    pub workers: Option<usize>,
    /// Directory relative paths are resolved against; set by [`ExperimentConfig::load`].
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidAlpha(self.alpha));
        }
        if !(self.dt_s > 0.0 && self.horizon_s >= self.dt_s) {
            return bad(format!(
                "need 0 < dt_s ≤ horizon_s, got {} and {}",
                self.dt_s, self.horizon_s
            ));
        }
        if self.n_train == 0 || self.n_cal == 0 || self.n_test == 0 {
            return bad("n_train, n_cal and n_test must be positive".into());
        }
        if self.metric.source == MetricSource::Load && self.metric.path.is_none() {
            return bad("metric.source = \"load\" needs metric.path".into());
        }
        if self.sampler.kind == SamplerKind::Steered {
            let s = &self.sampler;
            if s.offset_lo.is_none() || s.offset_hi.is_none() || s.target_input.is_none() {
                return bad(
                    "sampler.kind = \"steered\" needs offset_lo, offset_hi and target_input".into(),
                );
            }
        }
        if self.rollout.start == StartMode::Ball && !(self.rollout.start_radius > 0.0) {
            return bad("rollout.start = \"ball\" needs a positive start_radius".into());
        }
        if let Some(p) = &self.planning {
            if !(p.first_fraction > 0.0 && p.first_fraction < 1.0) {
                return bad(format!(
                    "planning.first_fraction must lie in (0, 1), got {}",
                    p.first_fraction
                ));
            }
            let (first, second) = self.cal_split();
            if first == 0 || second == 0 {
                return bad(format!(
                    "n_cal = {} leaves an empty calibration subset",
                    self.n_cal
                ));
            }
        }
        Ok(())
    }

    /// Sizes of the two calibration subsets (`(n_cal, 0)` without planning).
    pub fn cal_split(&self) -> (usize, usize) {
        match &self.planning {
            Some(p) => {
                let first = ((self.n_cal as f64) * p.first_fraction).round() as usize;
                (first.min(self.n_cal), self.n_cal - first.min(self.n_cal))
            }
            None => (self.n_cal, 0),
        }
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        name = "t"
        benchmark = "threeD"
        horizon_s = 1.0
        dt_s = 0.01
        alpha = 0.1
        n_train = 4
        n_cal = 9
        n_test = 3
    "#;

    #[test]
    fn defaults_and_roundtrip() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.rollout.start, StartMode::Center);
        assert_eq!(cfg.cal_split(), (9, 0));
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_alpha() {
        assert!(ExperimentConfig::from_toml(&format!("{MINIMAL}\nbogus = 1")).is_err());
        assert!(
            ExperimentConfig::from_toml(&MINIMAL.replace("alpha = 0.1", "alpha = 1.5")).is_err()
        );
    }
}
