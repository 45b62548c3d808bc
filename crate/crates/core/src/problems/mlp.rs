use crate::numkit::ParamVector;

use super::LocalObjective;

/// Layer sizes of a one-hidden-layer ReLU network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlpShape {
    pub inputs: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl MlpShape {
    /// Parameter layout: `W1 (h x p) | b1 (h) | W2 (C x h) | b2 (C)`.
    pub fn dim(&self) -> usize {
        self.hidden * self.inputs + self.hidden + self.classes * self.hidden + self.classes
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let b1 = self.hidden * self.inputs;
        let w2 = b1 + self.hidden;
        let b2 = w2 + self.classes * self.hidden;
        (b1, w2, b2)
    }
}

/// Softmax cross-entropy over a ReLU MLP, with weight decay, trained by
/// hand-written backpropagation.
#[derive(Debug, Clone)]
pub struct MlpClient {
    shape: MlpShape,
    features: Vec<f64>,
    labels: Vec<u32>,
    weight_decay: f64,
}

struct Forward {
    pre: Vec<f64>,
    act: Vec<f64>,
    logits: Vec<f64>,
}

impl MlpClient {
    pub fn new(shape: MlpShape, features: Vec<f64>, labels: Vec<u32>, weight_decay: f64) -> Self {
        assert_eq!(features.len(), labels.len() * shape.inputs);
        Self {
            shape,
            features,
            labels,
            weight_decay,
        }
    }

    pub fn shape(&self) -> MlpShape {
        self.shape
    }

    fn row(&self, j: usize) -> &[f64] {
        &self.features[j * self.shape.inputs..(j + 1) * self.shape.inputs]
    }

    fn forward(&self, w: &[f64], x: &[f64]) -> Forward {
        let MlpShape { inputs, hidden, classes } = self.shape;
        let (b1, w2, b2) = self.shape.offsets();
        let pre: Vec<f64> = (0..hidden)
            .map(|h| {
                w[h * inputs..(h + 1) * inputs]
                    .iter()
                    .zip(x)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    + w[b1 + h]
            })
            .collect();
        let act: Vec<f64> = pre.iter().map(|z| z.max(0.0)).collect();
        let logits = (0..classes)
            .map(|c| {
                w[w2 + c * hidden..w2 + (c + 1) * hidden]
                    .iter()
                    .zip(&act)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    + w[b2 + c]
            })
            .collect();
        Forward { pre, act, logits }
    }

    /// Smallest `|pre-activation|` over all samples and hidden units; points
    /// close to zero sit near a ReLU kink.
    pub fn kink_margin(&self, w: &ParamVector) -> f64 {
        (0..self.num_samples())
            .flat_map(|j| self.forward(w.as_slice(), self.row(j)).pre)
            .map(f64::abs)
            .fold(f64::INFINITY, f64::min)
    }
}

fn log_softmax_at(logits: &[f64], y: usize) -> (f64, Vec<f64>) {
    let zmax = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = logits.iter().map(|z| (z - zmax).exp()).sum();
    let probs = logits.iter().map(|z| (z - zmax).exp() / denom).collect();
    (logits[y] - zmax - denom.ln(), probs)
}

impl LocalObjective for MlpClient {
    fn dim(&self) -> usize {
        self.shape.dim()
    }

    fn num_samples(&self) -> usize {
        self.labels.len()
    }

    fn loss(&self, w: &ParamVector) -> f64 {
        let ws = w.as_slice();
        let ce: f64 = (0..self.num_samples())
            .map(|j| {
                let f = self.forward(ws, self.row(j));
                -log_softmax_at(&f.logits, self.labels[j] as usize).0
            })
            .sum::<f64>()
            / self.num_samples() as f64;
        ce + 0.5 * self.weight_decay * ws.iter().map(|v| v * v).sum::<f64>()
    }

    fn batch_gradient(&self, w: &ParamVector, batch: &[usize]) -> ParamVector {
        let MlpShape { inputs, hidden, classes } = self.shape;
        let (b1, w2, b2) = self.shape.offsets();
        let ws = w.as_slice();
        let mut g = vec![0.0; self.dim()];
        let mut delta_hidden = vec![0.0; hidden];
        for &j in batch {
            let x = self.row(j);
            let f = self.forward(ws, x);
            let (_, probs) = log_softmax_at(&f.logits, self.labels[j] as usize);
            delta_hidden.iter_mut().for_each(|v| *v = 0.0);
            for c in 0..classes {
                let dz = probs[c] - if c == self.labels[j] as usize { 1.0 } else { 0.0 };
                g[b2 + c] += dz;
                for h in 0..hidden {
                    g[w2 + c * hidden + h] += dz * f.act[h];
                    delta_hidden[h] += dz * ws[w2 + c * hidden + h];
                }
            }
            for h in 0..hidden {
                if f.pre[h] <= 0.0 {
                    continue;
                }
                let dh = delta_hidden[h];
                g[b1 + h] += dh;
                for (g, x) in g[h * inputs..(h + 1) * inputs].iter_mut().zip(x) {
                    *g += dh * x;
                }
            }
        }
        let inv = 1.0 / batch.len() as f64;
        for (g, w) in g.iter_mut().zip(ws) {
            *g = *g * inv + self.weight_decay * w;
        }
        ParamVector::from_vec(g)
    }
}
