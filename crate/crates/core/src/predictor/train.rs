use std::fmt;
use std::str::FromStr;

use log::{debug, info};
use serde::{Deserialize, Serialize};

use super::mlp::{MlpModel, Net};
use super::{
    features, monomial_terms, rows_of, stack, Model, Split, TrainingDataset, UncertaintyPredictor,
};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::rng::stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Zero,
    LinearFeatures,
    Mlp,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Zero => "zero",
            Family::LinearFeatures => "linear_features",
            Family::Mlp => "mlp",
        })
    }
}

impl FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(Family::Zero),
            "linear_features" => Ok(Family::LinearFeatures),
            "mlp" => Ok(Family::Mlp),
            other => Err(Error::Config(format!("unknown predictor family `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub family: Family,
    /// Polynomial degree of the linear-feature model.
    pub degree: u32,
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Softmax temperature of the sup-over-time surrogate.
    pub temperature: f64,
    /// Use every `time_stride`-th grid sample of each record.
    pub time_stride: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            family: Family::Mlp,
            degree: 2,
            hidden: vec![32, 32],
            epochs: 400,
            learning_rate: 1e-2,
            temperature: 20.0,
            time_stride: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub seed: u64,
    pub records: usize,
    pub samples: usize,
    /// Surrogate loss after each epoch (non-increasing).
    pub loss_history: Vec<f64>,
    /// Mean over records of `sup_t ‖ζ_t − ζ̂(x_t, u_t)‖` on the training data.
    pub sup_error: f64,
}

/// Mean over records of the largest prediction error along each record,
/// evaluated on every grid sample.
pub fn sup_error(predictor: &UncertaintyPredictor, dataset: &TrainingDataset) -> Result<f64> {
    if dataset.records.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for r in &dataset.records {
        let rec = &r.record;
        let zeta = rec.uncertainties.as_ref().ok_or_else(|| {
            Error::InvalidArgument(format!("record {} carries no uncertainty samples", r.id))
        })?;
        let worst = rec
            .states
            .iter()
            .zip(&rec.inputs)
            .zip(zeta)
            .map(|((x, u), z)| (z - predictor.eval(x, u)).norm())
            .fold(0.0, f64::max);
        total += worst;
    }
    Ok(total / dataset.records.len() as f64)
}

struct Samples {
    inputs: Vec<Vec<f64>>,
    targets: Vec<Vector>,
    /// `[start, end)` sample ranges of each record.
    spans: Vec<(usize, usize)>,
}

fn collect_samples(dataset: &TrainingDataset, stride: usize) -> Result<Samples> {
    let mut s = Samples {
        inputs: Vec::new(),
        targets: Vec::new(),
        spans: Vec::new(),
    };
    for r in &dataset.records {
        let zeta = r.record.uncertainties.as_ref().ok_or_else(|| {
            Error::InvalidArgument(format!("record {} carries no uncertainty samples", r.id))
        })?;
        let start = s.inputs.len();
        for k in (0..r.record.len()).step_by(stride.max(1)) {
            s.inputs
                .push(stack(&r.record.states[k], &r.record.inputs[k]));
            s.targets.push(zeta[k].clone());
        }
        s.spans.push((start, s.inputs.len()));
    }
    Ok(s)
}

/// Fit a predictor of `cfg.family` to a training split.
pub fn train(dataset: &TrainingDataset, cfg: &TrainConfig) -> Result<UncertaintyPredictor> {
    if dataset.split != Split::Train {
        return Err(Error::InvalidArgument(format!(
            "predictors train on the train split, got {:?}",
            dataset.split
        )));
    }
    let first = dataset
        .records
        .first()
        .ok_or_else(|| Error::InvalidArgument("training dataset is empty".into()))?;
    let (n, m) = (first.record.state_dim(), first.record.input_dim());
    let samples = collect_samples(dataset, cfg.time_stride)?;

    let (model, history) = match cfg.family {
        Family::Zero => (Model::Zero, Vec::new()),
        Family::LinearFeatures => (fit_linear(&samples, n + m, n, cfg.degree)?, Vec::new()),
        Family::Mlp => fit_mlp(&samples, n + m, n, cfg)?,
    };
    let mut predictor = UncertaintyPredictor {
        state_dim: n,
        input_dim: m,
        model,
        training: None,
    };
    let sup = sup_error(&predictor, dataset)?;
    info!(
        "trained {} predictor on {} records ({} samples): mean sup error {sup:.6}",
        cfg.family,
        dataset.records.len(),
        samples.inputs.len()
    );
    predictor.training = Some(TrainingSummary {
        seed: cfg.seed,
        records: dataset.records.len(),
        samples: samples.inputs.len(),
        loss_history: history,
        sup_error: sup,
    });
    Ok(predictor)
}

/// Least squares on per-sample errors with column scaling for conditioning.
fn fit_linear(samples: &Samples, input_dim: usize, out_dim: usize, degree: u32) -> Result<Model> {
    let terms = monomial_terms(input_dim, degree);
    let rows = samples.inputs.len();
    let mut phi = Matrix::zeros(rows, terms.len());
    for (i, z) in samples.inputs.iter().enumerate() {
        for (j, f) in features(&terms, z).into_iter().enumerate() {
            phi[(i, j)] = f;
        }
    }
    let scale: Vec<f64> = (0..terms.len())
        .map(|j| {
            let s = phi.column(j).amax();
            if s > 0.0 {
                s
            } else {
                1.0
            }
        })
        .collect();
    for (j, s) in scale.iter().enumerate() {
        phi.column_mut(j).unscale_mut(*s);
    }
    let target = Matrix::from_fn(rows, out_dim, |i, k| samples.targets[i][k]);
    let svd = phi.svd(true, true);
    let sol = svd
        .solve(&target, 1e-12 * svd.singular_values.max())
        .map_err(|e| Error::InvalidArgument(format!("least-squares solve failed: {e}")))?;
    let coefficients = Matrix::from_fn(out_dim, terms.len(), |k, j| sol[(j, k)] / scale[j]);
    Ok(Model::LinearFeatures {
        degree,
        terms,
        coefficients: rows_of(&coefficients),
    })
}

fn mean_and_scale(columns: &Matrix) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
    let count = columns.ncols() as f64;
    let mut mean = Vec::new();
    let mut scale = Vec::new();
    let mut active = Vec::new();
    for row in columns.row_iter() {
        let mu = row.sum() / count;
        let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / count;
        let sd = var.sqrt();
        let varies = sd > 1e-12 * (1.0 + mu.abs());
        mean.push(mu);
        scale.push(if varies { sd } else { 1.0 });
        active.push(varies);
    }
    (mean, scale, active)
}

/// Log-sum-exp surrogate of the per-record sup error and its gradient with
/// respect to the standardised network outputs.
#[allow(clippy::too_many_arguments)]
fn surrogate(
    out: &Matrix,
    targets: &Matrix,
    spans: &[(usize, usize)],
    out_mean: &[f64],
    out_scale: &[f64],
    active: &[bool],
    tau: f64,
    want_grad: bool,
) -> (f64, Matrix) {
    let dim = out.nrows();
    let mut grad = Matrix::zeros(dim, out.ncols());
    let mut total = 0.0;
    let records = spans.len() as f64;
    for &(a, b) in spans {
        let mut errs = Vec::with_capacity(b - a);
        let mut diffs = Vec::with_capacity(b - a);
        for s in a..b {
            let d = Vector::from_fn(dim, |i, _| {
                let pred = if active[i] {
                    out_mean[i] + out_scale[i] * out[(i, s)]
                } else {
                    out_mean[i]
                };
                pred - targets[(i, s)]
            });
            errs.push((d.norm_squared() + 1e-24).sqrt());
            diffs.push(d);
        }
        let top = errs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = errs.iter().map(|e| (tau * (e - top)).exp()).collect();
        let z: f64 = weights.iter().sum();
        total += top + z.ln() / tau;
        if want_grad {
            for (k, s) in (a..b).enumerate() {
                let w = weights[k] / z / records / errs[k];
                for i in 0..dim {
                    if active[i] {
                        grad[(i, s)] = w * diffs[k][i] * out_scale[i];
                    }
                }
            }
        }
    }
    (total / records, grad)
}

fn fit_mlp(
    samples: &Samples,
    input_dim: usize,
    out_dim: usize,
    cfg: &TrainConfig,
) -> Result<(Model, Vec<f64>)> {
    let count = samples.inputs.len();
    let raw_in = Matrix::from_fn(input_dim, count, |i, s| samples.inputs[s][i]);
    let targets = Matrix::from_fn(out_dim, count, |i, s| samples.targets[s][i]);
    let (in_mean, in_scale, _) = mean_and_scale(&raw_in);
    let (out_mean, out_scale, active) = mean_and_scale(&targets);
    let input = Matrix::from_fn(input_dim, count, |i, s| {
        (raw_in[(i, s)] - in_mean[i]) / in_scale[i]
    });

    let mut sizes = vec![input_dim];
    sizes.extend(&cfg.hidden);
    sizes.push(out_dim);
    let mut rng = stream(cfg.seed, "mlp-init", 0);
    let mut net = Net::init(&sizes, &active, &mut rng);

    let eval = |net: &Net, want_grad: bool| {
        let acts = net.forward(&input);
        let (loss, g) = surrogate(
            &acts.output,
            &targets,
            &samples.spans,
            &out_mean,
            &out_scale,
            &active,
            cfg.temperature,
            want_grad,
        );
        (loss, acts, g)
    };

    let (mut loss, mut acts, mut gout) = eval(&net, true);
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { epoch: 0 });
    }
    let mut history = vec![loss];
    let mut step = cfg.learning_rate;
    let last = net.weights.len() - 1;
    for epoch in 1..=cfg.epochs {
        let mut grad = net.backward(&acts, &gout);
        for (i, &a) in active.iter().enumerate() {
            if !a {
                grad.weights[last].row_mut(i).fill(0.0);
                grad.biases[last][i] = 0.0;
            }
        }
        let gnorm = grad.norm();
        if !gnorm.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        if gnorm == 0.0 {
            break;
        }
        let trial = net.axpy(-step / gnorm, &grad);
        let (trial_loss, trial_acts, trial_g) = eval(&trial, true);
        if trial_loss.is_finite() && trial_loss <= loss {
            net = trial;
            loss = trial_loss;
            acts = trial_acts;
            gout = trial_g;
            step *= 1.2;
        } else {
            step *= 0.5;
        }
        history.push(loss);
        if epoch % 100 == 0 {
            debug!("epoch {epoch}: surrogate loss {loss:.6}, step {step:.3e}");
        }
    }
    let model = MlpModel {
        input_mean: in_mean,
        input_scale: in_scale,
        output_mean: out_mean,
        output_scale: out_scale,
        output_active: active,
        layers: net.layers(),
    };
    Ok((Model::Mlp(model), history))
}
