//! Staged experiment pipeline. Each stage writes its products under the run
//! directory together with a marker holding the configuration fingerprint; a
//! later run with the same configuration reloads them instead of recomputing.

mod config;
mod report;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::{info, warn};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use config::{
    Benchmark, ExperimentConfig, MetricConfig, MetricSource, OutputConfig, PlanningConfig,
    RolloutConfig, SamplerConfig, SamplerKind, StartMode,
};
pub use report::{
    write_rollouts_csv, CalibrationSummary, DataSummary, EvaluationSummary, MetricSummary,
    PlanningSummary, PredictorSummary, Report, RolloutRow,
};

use crate::conformal::{calibrate, empirical_coverage, score_dataset, CalibrationResult};
use crate::error::{Error, Result};
use crate::linalg::Vector;
use crate::metric::{
    synthesize_constant_metric, ContractionMetric, GeodesicOptions, SynthesisOptions,
};
use crate::planner::{Constraints, PlanProblem, SolverOptions};
use crate::predictor::{
    generate_perturbed_dataset, hex, sample_reference_dataset, sample_steered_dataset,
    split_reference, sup_error, train, DatasetRecord, PolicyMode, RecordFailure, ReferenceSampler,
    Split, SteeredSampler, TrajectoryDataset, UncertaintyPredictor,
};
use crate::rng::stream;
use crate::systems::{benchmark_3d, benchmark_vtol, BoxSet, DynamicalSystem};
use crate::tube::{
    compensation_margins, sample_metric_ball, shrink_box, tighten_input_box, tighten_state_box,
    tracking_distances, tube_radius, ContainmentReport, Ellipse2d, IebEnvelope, PrciTube,
};

/// Relative slack on `c₂` when checking rollouts against the exponential envelope.
pub const ENVELOPE_SLACK: f64 = 0.05;

#[derive(Debug, Serialize, Deserialize)]
struct StageMarker {
    stage: String,
    fingerprint: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PlanningState {
    summary: PlanningSummary,
    tracking: CalibrationResult,
}

pub struct Pipeline {
    cfg: ExperimentConfig,
    out: PathBuf,
    fingerprint: String,
    nominal: DynamicalSystem,
    truth: DynamicalSystem,
    geodesic: GeodesicOptions,
    metric: Option<(ContractionMetric, MetricSummary)>,
    reference: Option<TrajectoryDataset>,
    train_data: Option<TrajectoryDataset>,
    predictor: Option<(Arc<UncertaintyPredictor>, PredictorSummary)>,
    cal_data: Option<(TrajectoryDataset, String)>,
    calibration: Option<CalibrationResult>,
    planning: Option<PlanningState>,
    plans: Option<TrajectoryDataset>,
    test_data: Option<(TrajectoryDataset, TrajectoryDataset)>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn box_or(lo: &Option<Vec<f64>>, hi: &Option<Vec<f64>>, fallback: &BoxSet) -> Result<BoxSet> {
    match (lo, hi) {
        (Some(l), Some(h)) => {
            if l.len() != fallback.dim() || h.len() != fallback.dim() {
                return Err(Error::DimensionMismatch {
                    expected: fallback.dim(),
                    got: l.len().min(h.len()),
                });
            }
            Ok(BoxSet::new(l.clone(), h.clone()))
        }
        (None, None) => Ok(fallback.clone()),
        _ => Err(Error::Config("box bounds need both `_lo` and `_hi`".into())),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

impl Pipeline {
    /// `seed` overrides the configuration's seed.
    pub fn new(mut cfg: ExperimentConfig, out: &Path, seed: Option<u64>) -> Result<Self> {
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        let (nominal, truth) = match cfg.benchmark {
            Benchmark::ThreeD => benchmark_3d(&Default::default()),
            Benchmark::Vtol => {
                let truth = benchmark_vtol(&Default::default());
                (truth.nominal(), truth)
            }
        };
        let planning_box = cfg.planning.as_ref().map(PlanningConfig::state_box);
        let state_box = box_or(
            &cfg.sampler.state_lo,
            &cfg.sampler.state_hi,
            planning_box.as_ref().unwrap_or(nominal.state_box()),
        )?;
        let nominal = nominal.with_state_box(state_box.clone());
        let truth = truth.with_state_box(state_box);

        let mut fp = cfg.to_toml()?.into_bytes();
        if cfg.metric.source == MetricSource::Load {
            let path = cfg.resolve(cfg.metric.path.as_ref().expect("validated"));
            fp.extend(
                fs::read(&path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
            );
        }
        let geodesic = GeodesicOptions {
            segments: cfg.rollout.geodesic_segments,
            ..Default::default()
        };
        fs::create_dir_all(out)?;
        fs::write(out.join("config.toml"), cfg.to_toml()?)?;
        Ok(Self {
            fingerprint: sha256_hex(&fp),
            cfg,
            out: out.to_path_buf(),
            nominal,
            truth,
            geodesic,
            metric: None,
            reference: None,
            train_data: None,
            predictor: None,
            cal_data: None,
            calibration: None,
            planning: None,
            plans: None,
            test_data: None,
        })
    }

    pub fn from_config_file(config: &Path, out: &Path, seed: Option<u64>) -> Result<Self> {
        Self::new(ExperimentConfig::load(config)?, out, seed)
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    pub fn nominal(&self) -> &DynamicalSystem {
        &self.nominal
    }

    pub fn truth(&self) -> &DynamicalSystem {
        &self.truth
    }

    fn dir(&self, stage: &str) -> PathBuf {
        self.out.join(stage)
    }

    fn fresh(&self, stage: &str) -> bool {
        match read_json::<StageMarker>(&self.dir(stage).join("stage.json")) {
            Ok(m) => m.fingerprint == self.fingerprint,
            Err(_) => false,
        }
    }

    fn mark(&self, stage: &str) -> Result<()> {
        write_json(
            &self.dir(stage).join("stage.json"),
            &StageMarker {
                stage: stage.to_owned(),
                fingerprint: self.fingerprint.clone(),
            },
        )
    }

    /// Remove a stale stage directory before recomputing it.
    fn reset(&self, stage: &str) -> Result<PathBuf> {
        let dir = self.dir(stage);
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        fs::create_dir_all(&dir)?;
        Ok(dir)
    }

    fn dataset_stage(
        &self,
        stage: &'static str,
        make: impl FnOnce() -> Result<TrajectoryDataset>,
    ) -> Result<(TrajectoryDataset, String)> {
        if self.fresh(stage) {
            let (ds, m) =
                TrajectoryDataset::load(&self.dir(stage)).map_err(|e| e.in_stage(stage))?;
            info!("{stage}: reloaded {} records", ds.len());
            return Ok((ds, m.sha256));
        }
        let dir = self.reset(stage)?;
        let ds = make().map_err(|e| e.in_stage(stage))?;
        let m = ds.save(&dir)?;
        self.mark(stage)?;
        info!(
            "{stage}: {} records, {} failures",
            ds.len(),
            ds.failures.len()
        );
        Ok((ds, m.sha256))
    }

    pub fn metric(&mut self) -> Result<ContractionMetric> {
        if let Some((m, _)) = &self.metric {
            return Ok(m.clone());
        }
        const STAGE: &str = "metric";
        let path = self.dir(STAGE).join("metric.json");
        let summary_path = self.dir(STAGE).join("summary.json");
        let pair = if self.fresh(STAGE) {
            (ContractionMetric::load(&path)?, read_json(&summary_path)?)
        } else {
            self.reset(STAGE)?;
            let mc = &self.cfg.metric;
            let (metric, source) = match mc.source {
                MetricSource::Load => {
                    let p = self.cfg.resolve(mc.path.as_ref().expect("validated"));
                    let m = ContractionMetric::load(&p).map_err(|e| e.in_stage(STAGE))?;
                    if m.dim() != self.nominal.state_dim() {
                        return Err(Error::DimensionMismatch {
                            expected: self.nominal.state_dim(),
                            got: m.dim(),
                        }
                        .in_stage(STAGE));
                    }
                    let name = p
                        .file_name()
                        .map(|f| f.to_string_lossy().into_owned())
                        .unwrap_or_default();
                    (m, format!("load {name}"))
                }
                MetricSource::Synthesize => {
                    let grid_box = box_or(&mc.grid_lo, &mc.grid_hi, self.nominal.state_box())?;
                    let grid = grid_box.grid(mc.grid_points, None);
                    let opts = SynthesisOptions {
                        lambda_min: mc.lambda_min_per_s,
                        lambda_max: mc.lambda_max_per_s,
                        chi_max: mc.chi_max,
                        ..Default::default()
                    };
                    let outcome = synthesize_constant_metric(&self.nominal, &grid, &opts)
                        .map_err(|e| e.in_stage(STAGE))?;
                    write_json(
                        &self.dir(STAGE).join("candidates.json"),
                        &outcome.candidates,
                    )?;
                    (
                        outcome.metric,
                        format!("synthesize on {} grid points", grid.len()),
                    )
                }
            };
            let summary = MetricSummary {
                source,
                constant: metric.is_constant(),
                rate_per_s: metric.rate(),
                m_lower: metric.m_lower(),
                m_upper: metric.m_upper(),
                condition_number: metric.condition_number(),
            };
            metric.save(&path)?;
            write_json(&summary_path, &summary)?;
            self.mark(STAGE)?;
            info!(
                "metric: lambda {:.4}, condition number {:.3}",
                summary.rate_per_s, summary.condition_number
            );
            (metric, summary)
        };
        self.metric = Some(pair);
        Ok(self.metric.as_ref().expect("just set").0.clone())
    }

    fn sampler(&self) -> Result<ReferenceSampler> {
        let s = &self.cfg.sampler;
        Ok(ReferenceSampler {
            initial_box: box_or(&s.initial_lo, &s.initial_hi, self.nominal.state_box())?,
            input_box: box_or(&s.input_lo, &s.input_hi, self.nominal.input_box())?,
            knot_spacing_s: s.knot_spacing_s,
            within_state_box: s.reject_exits,
            max_draws_per_record: s.max_draws_per_record,
        })
    }

    /// Reference records: `n_train` for training, then the first calibration
    /// subset, then (without planning) the test references.
    pub fn reference(&mut self) -> Result<TrajectoryDataset> {
        if let Some(r) = &self.reference {
            return Ok(r.clone());
        }
        let (first, _) = self.cfg.cal_split();
        let tests = if self.cfg.planning.is_some() {
            0
        } else {
            self.cfg.n_test
        };
        let count = self.cfg.n_train + first + tests;
        let s = &self.cfg.sampler;
        let steered = match s.kind {
            SamplerKind::OpenLoop => None,
            SamplerKind::Steered => {
                let metric = self.metric()?;
                let s = &self.cfg.sampler;
                let need = |v: &Option<Vec<f64>>| {
                    v.clone()
                        .ok_or_else(|| Error::Config("steered sampler target".into()))
                };
                Some(SteeredSampler {
                    initial_box: box_or(&s.initial_lo, &s.initial_hi, self.nominal.state_box())?,
                    offset_box: BoxSet::new(need(&s.offset_lo)?, need(&s.offset_hi)?),
                    target_input: Vector::from_vec(need(&s.target_input)?),
                    metric,
                    within_state_box: s.reject_exits,
                    max_draws_per_record: s.max_draws_per_record,
                })
            }
        };
        let sampler = self.sampler()?;
        let (nominal, cfg) = (&self.nominal, &self.cfg);
        let (ds, _) = self.dataset_stage("reference", || match &steered {
            Some(st) => {
                sample_steered_dataset(nominal, st, count, cfg.horizon_s, cfg.dt_s, cfg.seed)
            }
            None => sample_reference_dataset(
                nominal,
                &sampler,
                count,
                cfg.horizon_s,
                cfg.dt_s,
                cfg.seed,
            ),
        })?;
        self.reference = Some(ds.clone());
        Ok(ds)
    }

    pub fn train_data(&mut self) -> Result<TrajectoryDataset> {
        if let Some(d) = &self.train_data {
            return Ok(d.clone());
        }
        let reference = self.reference()?;
        let (tr, _) = split_reference(&reference, self.cfg.n_train);
        let truth = &self.truth;
        let (ds, _) = self.dataset_stage("train_data", || {
            generate_perturbed_dataset(
                truth,
                &tr,
                &PolicyMode::OpenLoopReference,
                Split::Train,
                None,
            )
        })?;
        self.train_data = Some(ds.clone());
        Ok(ds)
    }

    pub fn predictor(&mut self) -> Result<Arc<UncertaintyPredictor>> {
        if let Some((p, _)) = &self.predictor {
            return Ok(p.clone());
        }
        const STAGE: &str = "predictor";
        let path = self.dir(STAGE).join("predictor.json");
        let summary_path = self.dir(STAGE).join("summary.json");
        let pair = if self.fresh(STAGE) {
            (
                UncertaintyPredictor::load(&path)?,
                read_json(&summary_path)?,
            )
        } else {
            let data = self.train_data()?;
            self.reset(STAGE)?;
            let mut tc = self.cfg.predictor.clone();
            tc.seed = tc.seed.wrapping_add(self.cfg.seed);
            let p = train(&data, &tc).map_err(|e| e.in_stage(STAGE))?;
            let zero =
                UncertaintyPredictor::zero(self.nominal.state_dim(), self.nominal.input_dim());
            let json = p.to_json()?;
            let summary = PredictorSummary {
                id: sha256_hex(json.as_bytes())[..16].to_owned(),
                family: p.family().to_string(),
                train_sup_error: p.training.as_ref().map_or(f64::NAN, |t| t.sup_error),
                zero_sup_error: sup_error(&zero, &data)?,
            };
            fs::write(&path, json)?;
            write_json(&summary_path, &summary)?;
            self.mark(STAGE)?;
            (p, summary)
        };
        self.predictor = Some((Arc::new(pair.0), pair.1));
        Ok(self.predictor.as_ref().expect("just set").0.clone())
    }

    fn closed_loop(&mut self) -> Result<PolicyMode> {
        Ok(PolicyMode::ClosedLoop {
            metric: self.metric()?,
            predictor: Some(self.predictor()?),
            geodesic: self.geodesic,
            saturate: self.cfg.rollout.saturate,
        })
    }

    fn starts(
        &self,
        metric: &ContractionMetric,
        refs: &TrajectoryDataset,
        name: &str,
    ) -> Option<Vec<Vector>> {
        match self.cfg.rollout.start {
            StartMode::Center => None,
            StartMode::Ball => Some(
                refs.records
                    .iter()
                    .map(|r| {
                        let x0 = &r.record.states[0];
                        let mut rng = stream(self.cfg.seed, name, r.id as u64);
                        sample_metric_ball(
                            &metric.eval(x0),
                            x0,
                            self.cfg.rollout.start_radius,
                            &mut rng,
                        )
                    })
                    .collect(),
            ),
        }
    }

    fn rollouts(
        &mut self,
        stage: &'static str,
        refs: &TrajectoryDataset,
        split: Split,
    ) -> Result<(TrajectoryDataset, String)> {
        let mode = self.closed_loop()?;
        let metric = self.metric()?;
        let starts = self.starts(&metric, refs, stage);
        let truth = &self.truth;
        self.dataset_stage(stage, || {
            generate_perturbed_dataset(truth, refs, &mode, split, starts.as_deref())
        })
    }

    fn cal_references(&mut self) -> Result<(TrajectoryDataset, TrajectoryDataset)> {
        let reference = self.reference()?;
        let (_, rest) = split_reference(&reference, self.cfg.n_train);
        Ok(split_reference(&rest, self.cfg.cal_split().0))
    }

    /// Closed-loop rollouts on the (first) calibration references.
    pub fn cal_data(&mut self) -> Result<TrajectoryDataset> {
        if let Some((d, _)) = &self.cal_data {
            return Ok(d.clone());
        }
        let (cal, _) = self.cal_references()?;
        let pair = self.rollouts("cal_data", &cal, Split::Cal)?;
        self.cal_data = Some(pair.clone());
        Ok(pair.0)
    }

    pub fn calibration(&mut self) -> Result<CalibrationResult> {
        if let Some(c) = &self.calibration {
            return Ok(c.clone());
        }
        const STAGE: &str = "calibration";
        let path = self.dir(STAGE).join("calibration.json");
        let c = if self.fresh(STAGE) {
            CalibrationResult::from_json(&fs::read_to_string(&path)?)?
        } else {
            let data = self.cal_data()?;
            let p = self.predictor()?;
            self.reset(STAGE)?;
            let scores = score_dataset(&self.truth, Some(&p), &data);
            let hash = self.cal_data.as_ref().expect("cal data loaded").1.clone();
            let id = self
                .predictor
                .as_ref()
                .expect("predictor loaded")
                .1
                .id
                .clone();
            let c = calibrate(&scores, self.cfg.alpha)
                .map_err(|e| e.in_stage(STAGE))?
                .with_provenance(id, hash);
            fs::write(&path, c.to_json()?)?;
            self.mark(STAGE)?;
            info!("calibration: {}", c.summary());
            c
        };
        self.calibration = Some(c.clone());
        Ok(c)
    }

    /// Radius `d̄ = √m̄·s/λ` of the tube from the (first) calibration.
    pub fn tube_radius(&mut self) -> Result<f64> {
        let c = self.calibration()?;
        Ok(tube_radius(&self.metric()?, c.quantile_value))
    }

    /// Tube summary written to `tube/tube.json`: radius, per-axis state
    /// extent and the planar ellipse of the output plane at the box centre.
    pub fn tube(&mut self) -> Result<serde_json::Value> {
        const STAGE: &str = "tube";
        let path = self.dir(STAGE).join("tube.json");
        if self.fresh(STAGE) {
            return read_json(&path);
        }
        let radius = self.tube_radius()?;
        let metric = self.metric()?;
        self.reset(STAGE)?;
        let c = self.calibration()?;
        let state = tighten_state_box(self.nominal.state_box(), radius, &metric);
        let [i, j] = self.cfg.output.ellipse_plane;
        let center = self.nominal.state_box().center();
        let ellipse = if radius.is_finite() {
            Some(
                Ellipse2d::from_metric(&metric.eval(&center), &center, i, j, radius)
                    .map_err(|e| e.in_stage(STAGE))?,
            )
        } else {
            None
        };
        let value = serde_json::json!({
            "alpha": c.alpha,
            "quantile": c.quantile_value.is_finite().then_some(c.quantile_value),
            "radius": radius.is_finite().then_some(radius),
            "rate_per_s": metric.rate(),
            "state_extent": state.upper_margin.iter().map(|m| m.is_finite().then_some(*m)).collect::<Vec<_>>(),
            "ellipse_plane": [i, j],
            "ellipse_at_center": ellipse,
        });
        write_json(&path, &value)?;
        self.mark(STAGE)?;
        Ok(value)
    }

    /// Tightened planning with two-step calibration; `None` without a
    /// planning section.
    pub fn planning(&mut self) -> Result<Option<PlanningSummary>> {
        let Some(pc) = self.cfg.planning.clone() else {
            return Ok(None);
        };
        if let Some(s) = &self.planning {
            return Ok(Some(s.summary.clone()));
        }
        const STAGE: &str = "planning";
        let state_path = self.dir(STAGE).join("planning.json");
        if self.fresh(STAGE) {
            let st: PlanningState = read_json(&state_path)?;
            let (plans, _) = TrajectoryDataset::load(&self.dir(STAGE).join("plans"))?;
            self.plans = Some(plans);
            self.planning = Some(st.clone());
            return Ok(Some(st.summary));
        }
        let metric = self.metric()?;
        let predictor = self.predictor()?;
        let radius = self.tube_radius()?;
        let cal = self.cal_data()?;
        self.reset(STAGE)?;
        if !radius.is_finite() {
            return Err(Error::InsufficientCalibrationData(
                "the first calibration subset gives an infinite tube radius".into(),
            )
            .in_stage(STAGE));
        }

        let s_box = pc.state_box();
        let a_box = pc.input_box();
        let ts = tighten_state_box(&s_box, radius, &metric);
        let mut tight = pc.input_tightening.clone();
        tight.seed = tight.seed.wrapping_add(self.cfg.seed);
        let fb = tighten_input_box(&a_box, &ts.set, &metric, &self.nominal, radius, &tight)
            .map_err(|e| e.in_stage(STAGE))?;
        let grow = |v: Vec<f64>| -> Vec<f64> {
            v.into_iter()
                .map(|x| x * (1.0 + pc.compensation_inflation))
                .collect()
        };
        let (cl, cu) = compensation_margins(
            &predictor,
            &self.nominal,
            cal.records.iter().map(|r| &r.record),
        );
        let (cl, cu) = (grow(cl), grow(cu));
        let lower: Vec<f64> = fb
            .lower_margin
            .iter()
            .zip(&cl)
            .map(|(a, b)| a + b)
            .collect();
        let upper: Vec<f64> = fb
            .upper_margin
            .iter()
            .zip(&cu)
            .map(|(a, b)| a + b)
            .collect();
        let ta = shrink_box(&a_box, lower, upper);
        let [pi, pj] = pc.plane;
        let inflation = match metric.constant_matrix() {
            Some(m) => Ellipse2d::from_metric(m, &s_box.center(), pi, pj, radius)
                .map_err(|e| e.in_stage(STAGE))?
                .euclidean_radius(),
            None => radius / metric.m_lower().sqrt(),
        };
        let inflated: Vec<_> = pc.obstacles.iter().map(|o| o.inflate(inflation)).collect();
        info!(
            "planning: tightened state box {:?}..{:?}, input box {:?}..{:?}",
            ts.set.lo, ts.set.hi, ta.set.lo, ta.set.hi
        );

        let (_, second) = self.cfg.cal_split();
        let requested = second + self.cfg.n_test;
        let goal = Vector::from_vec(pc.goal.clone());
        let weights = pc
            .goal_weights
            .clone()
            .unwrap_or_else(|| vec![1.0; goal.len()]);
        let start_box = pc.start_box();
        let seed = self.cfg.seed;
        let problems: Vec<PlanProblem> = (0..requested)
            .map(|i| PlanProblem {
                sys: self.nominal.clone(),
                horizon: self.cfg.horizon_s,
                dt: self.cfg.dt_s,
                start: start_box.sample(&mut stream(seed, "plan-start", i as u64)),
                goal: goal.clone(),
                goal_weights: weights.clone(),
                state_box: ts.set.clone(),
                input_box: ta.set.clone(),
                obstacles: inflated.clone(),
                plane: pc.plane,
                w1: pc.w1,
                w2: pc.w2,
                barrier: pc.barrier,
                options: SolverOptions {
                    max_iter: pc.max_iter,
                    hold_steps: pc.hold_steps,
                    ..Default::default()
                },
            })
            .collect();
        let results: Vec<_> = problems.par_iter().map(|p| p.solve(None)).collect();
        let mut plans = TrajectoryDataset {
            split: Split::Reference,
            benchmark: self.nominal.name().to_owned(),
            records: Vec::new(),
            failures: Vec::new(),
            sampler: format!(
                "plans from starts uniform in {:?}..{:?} to goal {:?}",
                start_box.lo, start_box.hi, pc.goal
            ),
        };
        let mut converged = 0;
        for (id, r) in results.into_iter().enumerate() {
            match r {
                Ok(plan) => {
                    converged += usize::from(plan.converged);
                    plans.records.push(DatasetRecord {
                        id,
                        reference_input: plan.input,
                        record: plan.record,
                    });
                }
                Err(e) => {
                    warn!("plan {id} failed: {e}");
                    plans.failures.push(RecordFailure {
                        id,
                        error: e.to_string(),
                    });
                }
            }
        }
        plans.save(&self.dir(STAGE).join("plans"))?;

        let (cal2_refs, _) = self.split_plans(&plans);
        let mode = self.closed_loop()?;
        let starts = self.starts(&metric, &cal2_refs, "cal2_data");
        let cal2 = generate_perturbed_dataset(
            &self.truth,
            &cal2_refs,
            &mode,
            Split::Cal,
            starts.as_deref(),
        )
        .map_err(|e| e.in_stage(STAGE))?;
        let cal2_manifest = cal2.save(&self.dir(STAGE).join("cal2_data"))?;
        let mut scores = score_dataset(&self.truth, Some(&predictor), &cal2);
        // Plans that failed to solve count as failed rollouts.
        scores.extend(cal2_refs.failures.iter().map(|_| f64::INFINITY));
        let tracking = calibrate(&scores, self.cfg.alpha)
            .map_err(|e| e.in_stage(STAGE))?
            .with_provenance(
                self.predictor
                    .as_ref()
                    .expect("predictor loaded")
                    .1
                    .id
                    .clone(),
                cal2_manifest.sha256,
            );
        let tracking_radius = tube_radius(&metric, tracking.quantile_value);
        info!("planning: tracking calibration {}", tracking.summary());

        let summary = PlanningSummary {
            tightened_state_box: ts.set,
            tightened_input_box: ta.set,
            feedback_margin_lower: fb.lower_margin,
            feedback_margin_upper: fb.upper_margin,
            compensation_margin_lower: cl,
            compensation_margin_upper: cu,
            obstacle_inflation: inflation,
            inflated_obstacles: inflated,
            plans_requested: requested,
            plans_solved: plans.records.len(),
            plans_converged: converged,
            plan_failures: plans
                .failures
                .iter()
                .map(|f| format!("{}: {}", f.id, f.error))
                .collect(),
            tracking_calibration: CalibrationSummary::new(&tracking, tracking_radius),
        };
        let st = PlanningState { summary, tracking };
        write_json(&state_path, &st)?;
        self.mark(STAGE)?;
        self.plans = Some(plans);
        self.planning = Some(st.clone());
        Ok(Some(st.summary))
    }

    /// Plans with id below the second calibration size track for
    /// calibration, the rest for testing.
    fn split_plans(&self, plans: &TrajectoryDataset) -> (TrajectoryDataset, TrajectoryDataset) {
        let (_, second) = self.cfg.cal_split();
        let part = |keep: &dyn Fn(usize) -> bool| TrajectoryDataset {
            split: Split::Reference,
            benchmark: plans.benchmark.clone(),
            records: plans
                .records
                .iter()
                .filter(|r| keep(r.id))
                .cloned()
                .collect(),
            failures: plans
                .failures
                .iter()
                .filter(|f| keep(f.id))
                .cloned()
                .collect(),
            sampler: plans.sampler.clone(),
        };
        (part(&|id| id < second), part(&|id| id >= second))
    }

    /// Test references and their closed-loop rollouts.
    pub fn test_data(&mut self) -> Result<(TrajectoryDataset, TrajectoryDataset)> {
        if let Some(t) = &self.test_data {
            return Ok(t.clone());
        }
        let refs = if self.cfg.planning.is_some() {
            self.planning()?;
            let plans = self.plans.clone().expect("planning stage ran");
            self.split_plans(&plans).1
        } else {
            self.cal_references()?.1
        };
        let (ds, _) = self.rollouts("test_data", &refs, Split::Test)?;
        self.test_data = Some((refs.clone(), ds.clone()));
        Ok((refs, ds))
    }

    /// Score, containment, envelope and constraint checks on the test
    /// rollouts. Writes `evaluation/rollouts.csv`, `evaluation/ellipse.csv`
    /// and `report.json`.
    pub fn evaluate(&mut self) -> Result<Report> {
        const STAGE: &str = "evaluation";
        let report_path = self.out.join("report.json");
        if self.fresh(STAGE) && report_path.exists() {
            return Report::from_json(&fs::read_to_string(&report_path)?);
        }
        let metric = self.metric()?;
        let predictor = self.predictor()?;
        let calibration = self.calibration()?;
        let first_radius = tube_radius(&metric, calibration.quantile_value);
        let planning = self.planning()?;
        let (quantile, radius) = match &self.planning {
            Some(st) => (
                st.tracking.quantile_value,
                tube_radius(&metric, st.tracking.quantile_value),
            ),
            None => (calibration.quantile_value, first_radius),
        };
        let (refs, test) = self.test_data()?;
        let dir = self.reset(STAGE)?;

        let constraints = self.cfg.planning.as_ref().map(|pc| Constraints {
            state_box: pc.state_box(),
            input_box: pc.input_box(),
            obstacles: pc.obstacles.clone(),
            plane: pc.plane,
        });
        let geodesic = self.geodesic;
        let truth = &self.truth;
        let lambda = metric.rate();
        let mut rows: Vec<RolloutRow> = test
            .records
            .par_iter()
            .map(|r| {
                let reference = refs
                    .records
                    .iter()
                    .find(|x| x.id == r.id)
                    .expect("every rollout has its reference");
                let d = tracking_distances(
                    &metric,
                    &r.record.states,
                    &reference.record.states,
                    &geodesic,
                );
                let max_distance = d.iter().copied().fold(0.0, f64::max);
                let contained = max_distance <= radius;
                let env = IebEnvelope {
                    d0: d[0],
                    lambda,
                    c2: radius,
                };
                let envelope_ok = r
                    .record
                    .times
                    .iter()
                    .zip(&d)
                    .all(|(&t, &dk)| dk <= env.at(t) + ENVELOPE_SLACK * radius);
                let score =
                    crate::conformal::nonconformity_score(truth, Some(&predictor), &r.record);
                let (sv, iv, violated) = match &constraints {
                    Some(c) => {
                        let chk = PlanProblem::check_against(c, &r.record.states, &r.record.inputs);
                        (
                            chk.state_violation,
                            chk.input_violation,
                            chk.state_violation > 0.0
                                || chk.input_violation > 0.0
                                || chk.obstacle_clearance <= 0.0,
                        )
                    }
                    None => (0.0, 0.0, false),
                };
                RolloutRow {
                    id: r.id,
                    failed: false,
                    score,
                    max_distance,
                    contained,
                    envelope_ok,
                    state_violation: sv,
                    input_violation: iv,
                    violated,
                }
            })
            .collect();
        rows.extend(
            test.failures
                .iter()
                .chain(&refs.failures)
                .map(|f| RolloutRow {
                    id: f.id,
                    failed: true,
                    score: f64::INFINITY,
                    max_distance: f64::INFINITY,
                    contained: false,
                    envelope_ok: false,
                    state_violation: f64::INFINITY,
                    input_violation: f64::INFINITY,
                    violated: true,
                }),
        );
        rows.sort_by_key(|r| r.id);
        write_rollouts_csv(&rows, fs::File::create(dir.join("rollouts.csv"))?)?;

        if let (Some(first), true) = (refs.records.first(), radius.is_finite()) {
            let tube =
                PrciTube::with_radius(first.record.clone(), metric.clone(), radius, self.cfg.alpha);
            let [i, j] = self.cfg.output.ellipse_plane;
            tube.write_ellipse_csv(i, j, fs::File::create(dir.join("ellipse.csv"))?)
                .map_err(|e| e.in_stage(STAGE))?;
        }

        let max_d: Vec<f64> = rows.iter().map(|r| r.max_distance).collect();
        let scores: Vec<f64> = rows.iter().map(|r| r.score).collect();
        let contained: Vec<&RolloutRow> = rows.iter().filter(|r| r.contained).collect();
        let finite: Vec<f64> = max_d.iter().copied().filter(|d| d.is_finite()).collect();
        let violations = constraints
            .as_ref()
            .map(|_| rows.iter().filter(|r| r.violated).count());
        let evaluation = EvaluationSummary {
            containment: ContainmentReport::from_max_distances(
                &max_d,
                radius,
                self.cfg.alpha,
                quantile,
            ),
            score_coverage: empirical_coverage(&scores, quantile),
            envelope_checked: contained.len(),
            envelope_violations: contained.iter().filter(|r| !r.envelope_ok).count(),
            envelope_slack: ENVELOPE_SLACK,
            max_distance: finite.iter().copied().fold(0.0, f64::max),
            mean_max_distance: finite.iter().sum::<f64>() / finite.len().max(1) as f64,
            constraint_violations: violations,
            constraint_violation_fraction: violations.map(|v| v as f64 / rows.len().max(1) as f64),
        };
        let reference = self.reference()?;
        let cal = self.cal_data()?;
        let report = Report {
            name: self.cfg.name.clone(),
            benchmark: self.nominal.name().to_owned(),
            seed: self.cfg.seed,
            config_sha256: self.fingerprint.clone(),
            metric: self.metric.as_ref().expect("metric loaded").1.clone(),
            data: DataSummary {
                reference: reference.len(),
                train: self.cfg.n_train,
                cal: cal.len() + cal.failures.len(),
                test: rows.len(),
                test_failures: rows.iter().filter(|r| r.failed).count(),
            },
            predictor: self.predictor.as_ref().expect("predictor loaded").1.clone(),
            calibration: CalibrationSummary::new(&calibration, first_radius),
            planning,
            evaluation,
        };
        fs::write(&report_path, report.to_json()?)?;
        self.mark(STAGE)?;
        Ok(report)
    }

    /// Every stage in order.
    pub fn run(&mut self) -> Result<Report> {
        self.metric()?;
        self.predictor()?;
        self.calibration()?;
        self.tube()?;
        self.planning()?;
        self.evaluate()
    }
}
