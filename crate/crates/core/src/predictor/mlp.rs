use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::rows_of;
use crate::linalg::{Matrix, Vector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// `out × in`, row-major.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

/// Fully connected tanh network on standardised inputs and outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub input_mean: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub output_mean: Vec<f64>,
    pub output_scale: Vec<f64>,
    /// Outputs that were constant in the training data are pinned to their mean.
    pub output_active: Vec<bool>,
    pub layers: Vec<DenseLayer>,
}

impl MlpModel {
    pub fn forward(&self, z: &[f64]) -> Vec<f64> {
        let mut h: Vec<f64> = z
            .iter()
            .zip(&self.input_mean)
            .zip(&self.input_scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            h = layer
                .weights
                .iter()
                .zip(&layer.bias)
                .map(|(row, b)| {
                    let a = row.iter().zip(&h).map(|(w, x)| w * x).sum::<f64>() + b;
                    if l < last {
                        a.tanh()
                    } else {
                        a
                    }
                })
                .collect();
        }
        h.iter()
            .enumerate()
            .map(|(i, y)| {
                if self.output_active[i] {
                    self.output_mean[i] + self.output_scale[i] * y
                } else {
                    self.output_mean[i]
                }
            })
            .collect()
    }

    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &self.layers {
            for row in &layer.weights {
                out.extend_from_slice(row);
            }
            out.extend_from_slice(&layer.bias);
        }
        out
    }
}

/// Dense working copy of the network used during training.
#[derive(Debug, Clone)]
pub(crate) struct Net {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vector>,
}

pub(crate) struct Activations {
    /// `hidden[0]` is the standardised input; the rest are tanh layers.
    pub hidden: Vec<Matrix>,
    pub output: Matrix,
}

impl Net {
    /// He-style initialisation `N(0, 2 / fan_in)`; pinned outputs start at zero.
    pub fn init(sizes: &[usize], active: &[bool], rng: &mut impl Rng) -> Self {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in sizes.windows(2) {
            let normal = Normal::new(0.0, (2.0 / w[0] as f64).sqrt()).expect("finite std");
            weights.push(Matrix::from_fn(w[1], w[0], |_, _| normal.sample(rng)));
            biases.push(Vector::zeros(w[1]));
        }
        let last = weights.len() - 1;
        for (i, &a) in active.iter().enumerate() {
            if !a {
                weights[last].row_mut(i).fill(0.0);
            }
        }
        Self { weights, biases }
    }

    pub fn forward(&self, input: &Matrix) -> Activations {
        let last = self.weights.len() - 1;
        let mut hidden = vec![input.clone()];
        for l in 0..last {
            let mut a = &self.weights[l] * &hidden[l];
            for mut col in a.column_iter_mut() {
                col += &self.biases[l];
            }
            hidden.push(a.map(f64::tanh));
        }
        let mut output = &self.weights[last] * &hidden[last];
        for mut col in output.column_iter_mut() {
            col += &self.biases[last];
        }
        Activations { hidden, output }
    }

    /// Parameter gradients given `∂L/∂output`.
    pub fn backward(&self, acts: &Activations, grad_out: &Matrix) -> Net {
        let depth = self.weights.len();
        let mut gw = vec![Matrix::zeros(0, 0); depth];
        let mut gb = vec![Vector::zeros(0); depth];
        let mut delta = grad_out.clone();
        for l in (0..depth).rev() {
            gw[l] = &delta * acts.hidden[l].transpose();
            gb[l] = delta.column_sum();
            if l > 0 {
                let back = self.weights[l].transpose() * &delta;
                delta = back.zip_map(&acts.hidden[l], |g, h| g * (1.0 - h * h));
            }
        }
        Net {
            weights: gw,
            biases: gb,
        }
    }

    pub fn axpy(&self, step: f64, dir: &Net) -> Net {
        Net {
            weights: self
                .weights
                .iter()
                .zip(&dir.weights)
                .map(|(w, d)| w + d * step)
                .collect(),
            biases: self
                .biases
                .iter()
                .zip(&dir.biases)
                .map(|(b, d)| b + d * step)
                .collect(),
        }
    }

    pub fn norm(&self) -> f64 {
        let s: f64 = self.weights.iter().map(|w| w.norm_squared()).sum::<f64>()
            + self.biases.iter().map(|b| b.norm_squared()).sum::<f64>();
        s.sqrt()
    }

    pub fn layers(&self) -> Vec<DenseLayer> {
        self.weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| DenseLayer {
                weights: rows_of(w),
                bias: b.iter().copied().collect(),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn batch_forward_matches_pointwise() {
        let mut rng = stream(3, "mlp-test", 0);
        let net = Net::init(&[3, 5, 4, 2], &[true, true], &mut rng);
        let model = MlpModel {
            input_mean: vec![0.0; 3],
            input_scale: vec![1.0; 3],
            output_mean: vec![0.0; 2],
            output_scale: vec![1.0; 2],
            output_active: vec![true; 2],
            layers: net.layers(),
        };
        let x = Matrix::from_fn(3, 4, |i, j| (i as f64 - j as f64) * 0.3);
        let acts = net.forward(&x);
        for j in 0..4 {
            let col: Vec<f64> = x.column(j).iter().copied().collect();
            let y = model.forward(&col);
            for (i, yi) in y.iter().enumerate() {
                assert!((yi - acts.output[(i, j)]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = stream(4, "mlp-test", 0);
        let net = Net::init(&[2, 3, 2], &[true, true], &mut rng);
        let x = Matrix::from_fn(2, 3, |i, j| 0.2 * (i + 2 * j) as f64 - 0.4);
        let target = Matrix::from_fn(2, 3, |i, j| (i as f64) * 0.1 - j as f64 * 0.05);
        let loss = |n: &Net| 0.5 * (n.forward(&x).output - &target).norm_squared();
        let acts = net.forward(&x);
        let g = net.backward(&acts, &(&acts.output - &target));
        let h = 1e-6;
        for l in 0..2 {
            for idx in 0..net.weights[l].len() {
                let mut p = net.clone();
                p.weights[l][idx] += h;
                let mut m = net.clone();
                m.weights[l][idx] -= h;
                let fd = (loss(&p) - loss(&m)) / (2.0 * h);
                assert!((fd - g.weights[l][idx]).abs() < 1e-7);
            }
        }
    }
}
