use std::fs;
use std::path::Path;
use std::sync::Arc;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::UncertaintyPredictor;
use crate::control::ContractingPolicy;
use crate::error::{Error, Result};
use crate::linalg::Vector;
use crate::metric::{ContractionMetric, GeodesicOptions};
use crate::rng::stream;
use crate::systems::{
    integrate, rk4_step, BoxSet, DynamicalSystem, InputSignal, SampleTime, TrajectoryRecord,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Reference,
    Train,
    Cal,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    /// Index of the reference trajectory this record was generated from.
    pub id: usize,
    pub reference_input: InputSignal,
    pub record: TrajectoryRecord,
}

/// A record that could not be simulated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordFailure {
    pub id: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    pub split: Split,
    pub benchmark: String,
    pub records: Vec<DatasetRecord>,
    pub failures: Vec<RecordFailure>,
    /// How initial conditions and reference inputs were drawn.
    pub sampler: String,
}

pub type TrainingDataset = TrajectoryDataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: usize,
    pub file: String,
    pub reference_input: InputSignal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub benchmark: String,
    pub split: Split,
    pub sampler: String,
    pub state_dim: usize,
    pub input_dim: usize,
    pub dt_s: f64,
    pub horizon_s: f64,
    pub records: Vec<ManifestEntry>,
    pub failures: Vec<RecordFailure>,
    /// SHA-256 over the record CSV files in manifest order.
    pub sha256: String,
}

/// How the plant is driven when re-simulating reference records.
#[derive(Debug, Clone)]
pub enum PolicyMode {
    /// Apply `ū` open loop.
    OpenLoopReference,
    /// Track the reference with the compensated contracting policy.
    ClosedLoop {
        metric: ContractionMetric,
        predictor: Option<Arc<UncertaintyPredictor>>,
        geodesic: GeodesicOptions,
        saturate: bool,
    },
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl TrajectoryDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn ids(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.id).collect()
    }

    /// Write `manifest.json` and one `record_NNNNN.csv` per record into `dir`.
    pub fn save(&self, dir: &Path) -> Result<DatasetManifest> {
        fs::create_dir_all(dir)?;
        let mut hasher = Sha256::new();
        let mut entries = Vec::with_capacity(self.records.len());
        for r in &self.records {
            let mut buf = Vec::new();
            r.record.write_csv(&mut buf)?;
            hasher.update(&buf);
            let file = format!("record_{:05}.csv", r.id);
            fs::write(dir.join(&file), &buf)?;
            entries.push(ManifestEntry {
                id: r.id,
                file,
                reference_input: r.reference_input.clone(),
            });
        }
        let first = self.records.first().map(|r| &r.record);
        let manifest = DatasetManifest {
            benchmark: self.benchmark.clone(),
            split: self.split,
            sampler: self.sampler.clone(),
            state_dim: first.map_or(0, |r| r.state_dim()),
            input_dim: first.map_or(0, |r| r.input_dim()),
            dt_s: first.map_or(0.0, |r| r.dt()),
            horizon_s: first.map_or(0.0, |r| r.horizon()),
            records: entries,
            failures: self.failures.clone(),
            sha256: hex(&hasher.finalize()),
        };
        fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<(Self, DatasetManifest)> {
        let manifest: DatasetManifest =
            serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        let mut hasher = Sha256::new();
        let mut records = Vec::with_capacity(manifest.records.len());
        for e in &manifest.records {
            let bytes = fs::read(dir.join(&e.file))?;
            hasher.update(&bytes);
            records.push(DatasetRecord {
                id: e.id,
                reference_input: e.reference_input.clone(),
                record: TrajectoryRecord::read_csv(bytes.as_slice())?,
            });
        }
        let digest = hex(&hasher.finalize());
        if digest != manifest.sha256 {
            return Err(Error::InvalidArgument(format!(
                "dataset in {} does not match its manifest hash",
                dir.display()
            )));
        }
        let ds = Self {
            split: manifest.split,
            benchmark: manifest.benchmark.clone(),
            records,
            failures: manifest.failures.clone(),
            sampler: manifest.sampler.clone(),
        };
        Ok((ds, manifest))
    }
}

/// Integrate the nominal plant from each `(x₀, ū)` pair. Records whose
/// simulation blows up are skipped and listed in `failures`.
pub fn generate_reference_dataset(
    sys_nominal: &DynamicalSystem,
    initial_conditions: &[Vector],
    reference_inputs: &[InputSignal],
    horizon: f64,
    dt: f64,
) -> Result<TrajectoryDataset> {
    if !sys_nominal.is_nominal() {
        return Err(Error::InvalidArgument(
            "reference data must come from the nominal plant".into(),
        ));
    }
    if initial_conditions.len() != reference_inputs.len() {
        return Err(Error::DimensionMismatch {
            expected: initial_conditions.len(),
            got: reference_inputs.len(),
        });
    }
    let results: Vec<Result<TrajectoryRecord>> = initial_conditions
        .par_iter()
        .zip(reference_inputs.par_iter())
        .map(|(x0, ubar)| integrate(sys_nominal, x0, |_, w| ubar.at(w), horizon, dt))
        .collect();
    collect(
        sys_nominal,
        Split::Reference,
        results
            .into_iter()
            .enumerate()
            .map(|(id, r)| (id, reference_inputs[id].clone(), r)),
    )
}

fn collect(
    sys: &DynamicalSystem,
    split: Split,
    results: impl Iterator<Item = (usize, InputSignal, Result<TrajectoryRecord>)>,
) -> Result<TrajectoryDataset> {
    let mut ds = TrajectoryDataset {
        split,
        benchmark: sys.name().to_owned(),
        records: Vec::new(),
        failures: Vec::new(),
        sampler: String::new(),
    };
    for (id, reference_input, r) in results {
        match r {
            Ok(record) => ds.records.push(DatasetRecord {
                id,
                reference_input,
                record,
            }),
            Err(e @ (Error::NonFiniteState { .. } | Error::DegenerateConstraint { .. })) => {
                warn!("record {id} skipped: {e}");
                ds.failures.push(RecordFailure {
                    id,
                    error: e.to_string(),
                });
            }
            Err(e) => return Err(e),
        }
    }
    info!(
        "{:?} dataset: {} records, {} failed",
        split,
        ds.records.len(),
        ds.failures.len()
    );
    Ok(ds)
}

/// Distribution of reference pairs `(x₀, ū)`: `x₀` uniform in `initial_box`,
/// `ū` piecewise linear with knots uniform in the input box. With
/// `within_state_box`, pairs whose nominal trajectory leaves the state box (or
/// diverges) are redrawn, so accepted pairs are i.i.d. from the conditional law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSampler {
    pub initial_box: BoxSet,
    pub input_box: BoxSet,
    pub knot_spacing_s: f64,
    pub within_state_box: bool,
    /// Give up after this many draws per requested record.
    pub max_draws_per_record: usize,
}

impl ReferenceSampler {
    pub fn for_system(sys: &DynamicalSystem) -> Self {
        Self {
            initial_box: sys.state_box().clone(),
            input_box: sys.input_box().clone(),
            knot_spacing_s: 1.0,
            within_state_box: true,
            max_draws_per_record: 200,
        }
    }

    pub fn describe(&self) -> String {
        format!(
            "x0 uniform in {:?}..{:?}; ubar piecewise linear, knots every {} s uniform in {:?}..{:?}; {}",
            self.initial_box.lo,
            self.initial_box.hi,
            self.knot_spacing_s,
            self.input_box.lo,
            self.input_box.hi,
            if self.within_state_box {
                "rejected unless the nominal trajectory stays in the state box"
            } else {
                "no rejection"
            }
        )
    }

    /// Candidate pair number `draw` of stream `name`.
    pub fn draw(&self, seed: u64, name: &str, draw: u64, horizon: f64) -> (Vector, InputSignal) {
        let mut rng = stream(seed, name, draw);
        let x0 = self.initial_box.sample(&mut rng);
        let u = InputSignal::random_piecewise_linear(
            &self.input_box,
            horizon,
            self.knot_spacing_s,
            &mut rng,
        );
        (x0, u)
    }
}

/// References that steer the nominal plant from `x₀` towards a random
/// equilibrium `x_eq = x₀ + δ` (held by `u_eq`) with the contracting feedback,
/// sampled and held at the grid times. The held inputs become a
/// zero-order-hold `ū`, and the record is that `ū` replayed open loop, so it
/// is an exact nominal solution.
#[derive(Debug, Clone)]
pub struct SteeredSampler {
    pub initial_box: BoxSet,
    /// Offsets `δ` are drawn uniformly from this box.
    pub offset_box: BoxSet,
    pub target_input: Vector,
    pub metric: ContractionMetric,
    pub within_state_box: bool,
    pub max_draws_per_record: usize,
}

impl SteeredSampler {
    pub fn describe(&self) -> String {
        format!(
            "x0 uniform in {:?}..{:?}; ubar from contracting feedback towards x0 + offset, offset uniform in {:?}..{:?}, held by {:?}",
            self.initial_box.lo,
            self.initial_box.hi,
            self.offset_box.lo,
            self.offset_box.hi,
            self.target_input.as_slice()
        )
    }

    fn candidate(
        &self,
        sys_nominal: &DynamicalSystem,
        seed: u64,
        draw: u64,
        horizon: f64,
        dt: f64,
    ) -> Result<(InputSignal, TrajectoryRecord)> {
        let mut rng = stream(seed, "steered-reference", draw);
        let x0 = self.initial_box.sample(&mut rng);
        let target = &x0 + self.offset_box.sample(&mut rng);
        let hold = InputSignal::Constant {
            value: self.target_input.iter().copied().collect(),
        };
        let policy = ContractingPolicy::new(self.metric.clone(), sys_nominal.clone(), hold)
            .with_saturation(true);
        let steps = crate::systems::step_count(horizon, dt)?;
        let none = Vector::zeros(sys_nominal.input_dim());
        let mut values = Vec::with_capacity(steps + 1);
        let mut x = x0.clone();
        for k in 0..=steps {
            let (u, _) = policy.input(&x, &target, SampleTime::grid(k, dt), &none)?;
            if k < steps {
                x = rk4_step(|y, _| sys_nominal.nominal_rhs(y, &u), &x, k, dt);
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteState {
                        time: (k + 1) as f64 * dt,
                    });
                }
            }
            values.push(u.iter().copied().collect());
        }
        let u = InputSignal::ZeroOrderHold { values };
        let rec = integrate(sys_nominal, &x0, |_, w| u.at(w), horizon, dt)?;
        Ok((u, rec))
    }
}

/// Draw `count` accepted reference records. Candidates are simulated in
/// batches and accepted in draw order, so the result does not depend on the
/// thread count.
pub fn sample_reference_dataset(
    sys_nominal: &DynamicalSystem,
    sampler: &ReferenceSampler,
    count: usize,
    horizon: f64,
    dt: f64,
    seed: u64,
) -> Result<TrajectoryDataset> {
    accept_references(
        sys_nominal,
        format!("{} (seed {seed})", sampler.describe()),
        sampler.within_state_box,
        count * sampler.max_draws_per_record,
        count,
        |k| {
            let (x0, u) = sampler.draw(seed, "reference", k, horizon);
            let rec = integrate(sys_nominal, &x0, |_, w| u.at(w), horizon, dt);
            rec.map(|r| (u, r))
        },
    )
}

/// As [`sample_reference_dataset`] for steered references.
pub fn sample_steered_dataset(
    sys_nominal: &DynamicalSystem,
    sampler: &SteeredSampler,
    count: usize,
    horizon: f64,
    dt: f64,
    seed: u64,
) -> Result<TrajectoryDataset> {
    accept_references(
        sys_nominal,
        format!("{} (seed {seed})", sampler.describe()),
        sampler.within_state_box,
        count * sampler.max_draws_per_record,
        count,
        |k| sampler.candidate(sys_nominal, seed, k, horizon, dt),
    )
}

fn accept_references(
    sys_nominal: &DynamicalSystem,
    description: String,
    within_state_box: bool,
    budget: usize,
    count: usize,
    candidate: impl Fn(u64) -> Result<(InputSignal, TrajectoryRecord)> + Sync,
) -> Result<TrajectoryDataset> {
    let mut ds = TrajectoryDataset {
        split: Split::Reference,
        benchmark: sys_nominal.name().to_owned(),
        records: Vec::with_capacity(count),
        failures: Vec::new(),
        sampler: description,
    };
    let budget = budget as u64;
    let mut next = 0u64;
    let mut rejected = 0usize;
    while ds.records.len() < count {
        if next >= budget {
            return Err(Error::InvalidArgument(format!(
                "only {} of {count} reference records accepted after {budget} draws",
                ds.records.len()
            )));
        }
        let batch: Vec<u64> = (next..(next + 64).min(budget)).collect();
        next += batch.len() as u64;
        let sims: Vec<Result<(InputSignal, TrajectoryRecord)>> =
            batch.par_iter().map(|&k| candidate(k)).collect();
        for sim in sims {
            if ds.records.len() == count {
                break;
            }
            match sim {
                Ok((u, r)) if !(within_state_box && r.state_box_exit.is_some()) => {
                    ds.records.push(DatasetRecord {
                        id: ds.records.len(),
                        reference_input: u,
                        record: r,
                    })
                }
                Ok(_) | Err(Error::NonFiniteState { .. } | Error::DegenerateConstraint { .. }) => {
                    rejected += 1
                }
                Err(e) => return Err(e),
            }
        }
    }
    info!("sampled {count} reference records, {rejected} candidates rejected");
    Ok(ds)
}

/// Split a reference dataset into the first `n_train` records and the rest.
/// The two parts share no record id.
pub fn split_reference(
    reference: &TrajectoryDataset,
    n_train: usize,
) -> (TrajectoryDataset, TrajectoryDataset) {
    let k = n_train.min(reference.records.len());
    let part = |records: &[DatasetRecord]| TrajectoryDataset {
        split: Split::Reference,
        benchmark: reference.benchmark.clone(),
        records: records.to_vec(),
        failures: Vec::new(),
        sampler: reference.sampler.clone(),
    };
    (part(&reference.records[..k]), part(&reference.records[k..]))
}

/// Re-simulate each reference record on the true plant. `starts` overrides the
/// initial plant state (default: the reference's own initial state).
pub fn generate_perturbed_dataset(
    sys_true: &DynamicalSystem,
    source: &TrajectoryDataset,
    mode: &PolicyMode,
    split: Split,
    starts: Option<&[Vector]>,
) -> Result<TrajectoryDataset> {
    if let Some(s) = starts {
        if s.len() != source.records.len() {
            return Err(Error::DimensionMismatch {
                expected: source.records.len(),
                got: s.len(),
            });
        }
    }
    let nominal = sys_true.nominal();
    let results: Vec<Result<TrajectoryRecord>> = source
        .records
        .par_iter()
        .enumerate()
        .map(|(i, src)| {
            let x_ref0 = &src.record.states[0];
            let x0 = starts.map_or(x_ref0, |s| &s[i]);
            let horizon = src.record.horizon();
            let dt = src.record.dt();
            match mode {
                PolicyMode::OpenLoopReference => {
                    integrate(sys_true, x0, |_, w| src.reference_input.at(w), horizon, dt)
                }
                PolicyMode::ClosedLoop {
                    metric,
                    predictor,
                    geodesic,
                    saturate,
                } => {
                    let mut policy = ContractingPolicy::new(
                        metric.clone(),
                        nominal.clone(),
                        src.reference_input.clone(),
                    )
                    .with_predictor(predictor.clone())
                    .with_saturation(*saturate);
                    policy.geodesic = *geodesic;
                    policy
                        .rollout(sys_true, x0, x_ref0, horizon, dt)
                        .map(|r| r.record)
                }
            }
        })
        .collect();
    let mut ds = collect(
        sys_true,
        split,
        source
            .records
            .iter()
            .zip(results)
            .map(|(src, r)| (src.id, src.reference_input.clone(), r)),
    )?;
    ds.sampler = source.sampler.clone();
    Ok(ds)
}
