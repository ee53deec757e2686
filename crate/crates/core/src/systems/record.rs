use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Vector;

/// Time-indexed samples of state, input and (optionally) realised uncertainty
/// on a uniform grid `t_k = k·Δt`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub times: Vec<f64>,
    pub states: Vec<Vector>,
    pub inputs: Vec<Vector>,
    pub uncertainties: Option<Vec<Vector>>,
    /// First grid time at which the state left the plant's state box.
    pub state_box_exit: Option<f64>,
}

/// JSON form of a record together with the plant metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordEnvelope {
    pub benchmark: String,
    pub state_dim: usize,
    pub input_dim: usize,
    pub dt: f64,
    pub horizon: f64,
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub inputs: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uncertainties: Option<Vec<Vec<f64>>>,
}

fn to_rows(v: &[Vector]) -> Vec<Vec<f64>> {
    v.iter().map(|x| x.iter().copied().collect()).collect()
}

fn from_rows(v: &[Vec<f64>]) -> Vec<Vector> {
    v.iter().map(|r| Vector::from_column_slice(r)).collect()
}

impl TrajectoryRecord {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.states.first().map_or(0, Vector::len)
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.first().map_or(0, Vector::len)
    }

    pub fn dt(&self) -> f64 {
        if self.times.len() < 2 {
            0.0
        } else {
            self.times[1] - self.times[0]
        }
    }

    pub fn horizon(&self) -> f64 {
        self.times.last().copied().unwrap_or(0.0)
    }

    /// Check equal sequence lengths and a uniform time step.
    pub fn validate(&self) -> Result<()> {
        let n = self.times.len();
        let bad_len = self.states.len() != n
            || self.inputs.len() != n
            || self.uncertainties.as_ref().is_some_and(|z| z.len() != n);
        if bad_len {
            return Err(Error::InvalidArgument(
                "record sequences differ in length".into(),
            ));
        }
        let dt = self.dt();
        for w in self.times.windows(2) {
            if ((w[1] - w[0]) - dt).abs() > 1e-12 * dt.abs().max(w[1].abs()) {
                return Err(Error::InvalidArgument(format!(
                    "non-uniform time step near t = {}",
                    w[0]
                )));
            }
        }
        Ok(())
    }

    /// State at time `t` by linear interpolation between grid points.
    pub fn state_at(&self, t: f64) -> Vector {
        let dt = self.dt();
        if dt <= 0.0 || t <= self.times[0] {
            return self.states[0].clone();
        }
        let s = (t - self.times[0]) / dt;
        let i = s.floor() as usize;
        if i + 1 >= self.len() {
            return self.states[self.len() - 1].clone();
        }
        let w = s - i as f64;
        &self.states[i] * (1.0 - w) + &self.states[i + 1] * w
    }

    pub fn to_envelope(&self, benchmark: &str) -> RecordEnvelope {
        RecordEnvelope {
            benchmark: benchmark.to_owned(),
            state_dim: self.state_dim(),
            input_dim: self.input_dim(),
            dt: self.dt(),
            horizon: self.horizon(),
            times: self.times.clone(),
            states: to_rows(&self.states),
            inputs: to_rows(&self.inputs),
            uncertainties: self.uncertainties.as_deref().map(to_rows),
        }
    }

    pub fn from_envelope(env: &RecordEnvelope) -> Result<Self> {
        let rec = Self {
            times: env.times.clone(),
            states: from_rows(&env.states),
            inputs: from_rows(&env.inputs),
            uncertainties: env.uncertainties.as_deref().map(from_rows),
            state_box_exit: None,
        };
        rec.validate()?;
        Ok(rec)
    }

    /// CSV with columns `t, x_1..x_n, u_1..u_m[, zeta_1..zeta_n]`. Floats are
    /// written in shortest round-trip form, so reading back is exact.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let (n, m) = (self.state_dim(), self.input_dim());
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["t".to_owned()];
        header.extend((1..=n).map(|i| format!("x_{i}")));
        header.extend((1..=m).map(|i| format!("u_{i}")));
        if self.uncertainties.is_some() {
            header.extend((1..=n).map(|i| format!("zeta_{i}")));
        }
        w.write_record(&header)?;
        for k in 0..self.len() {
            let mut row = vec![self.times[k].to_string()];
            row.extend(self.states[k].iter().map(f64::to_string));
            row.extend(self.inputs[k].iter().map(f64::to_string));
            if let Some(z) = &self.uncertainties {
                row.extend(z[k].iter().map(f64::to_string));
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let headers = r.headers()?.clone();
        let count = |prefix: &str| headers.iter().filter(|h| h.starts_with(prefix)).count();
        let (n, m, nz) = (count("x_"), count("u_"), count("zeta_"));
        if nz != 0 && nz != n {
            return Err(Error::InvalidArgument(
                "zeta columns must match state dimension".into(),
            ));
        }
        let mut rec = TrajectoryRecord {
            times: Vec::new(),
            states: Vec::new(),
            inputs: Vec::new(),
            uncertainties: (nz > 0).then(Vec::new),
            state_box_exit: None,
        };
        for row in r.records() {
            let row = row?;
            let vals: Vec<f64> = row
                .iter()
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|e| Error::InvalidArgument(e.to_string()))
                })
                .collect::<Result<_>>()?;
            rec.times.push(vals[0]);
            rec.states.push(Vector::from_column_slice(&vals[1..1 + n]));
            rec.inputs
                .push(Vector::from_column_slice(&vals[1 + n..1 + n + m]));
            if let Some(z) = rec.uncertainties.as_mut() {
                z.push(Vector::from_column_slice(&vals[1 + n + m..1 + 2 * n + m]));
            }
        }
        rec.validate()?;
        Ok(rec)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        Self::read_csv(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
