use crate::numkit::ParamVector;

use super::{sym_lambda_max, LocalObjective};

/// L2-regularized logistic regression on one client's samples.
///
/// Two classes use a single sigmoid weight vector (`d = p`); more classes use
/// softmax with one row per class (`d = C p`). Loss is mean cross-entropy
/// plus `lambda/2 ||w||^2`, so it is nonnegative.
#[derive(Debug, Clone)]
pub struct LogisticClient {
    features: Vec<f64>,
    labels: Vec<u32>,
    p: usize,
    classes: usize,
    weight_decay: f64,
    smoothness: f64,
}

impl LogisticClient {
    pub fn new(features: Vec<f64>, labels: Vec<u32>, p: usize, classes: usize, weight_decay: f64) -> Self {
        assert!(classes >= 2, "need at least two classes");
        assert_eq!(features.len(), labels.len() * p);
        let m = labels.len();
        // lambda_max(X^T X) / m
        let mut gram = vec![0.0; p * p];
        for row in features.chunks(p) {
            for i in 0..p {
                for j in 0..p {
                    gram[i * p + j] += row[i] * row[j];
                }
            }
        }
        let lmax = sym_lambda_max(&gram, p) / m as f64;
        // Hessian of the sigmoid loss is bounded by 1/4, softmax by 1/2.
        let curvature = if classes == 2 { 0.25 } else { 0.5 };
        Self {
            features,
            labels,
            p,
            classes,
            weight_decay,
            smoothness: curvature * lmax + weight_decay,
        }
    }

    pub fn smoothness(&self) -> f64 {
        self.smoothness
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    fn row(&self, j: usize) -> &[f64] {
        &self.features[j * self.p..(j + 1) * self.p]
    }

    fn binary(&self) -> bool {
        self.classes == 2
    }

    fn logits(&self, w: &[f64], x: &[f64], out: &mut [f64]) {
        for (c, o) in out.iter_mut().enumerate() {
            *o = w[c * self.p..(c + 1) * self.p]
                .iter()
                .zip(x)
                .map(|(a, b)| a * b)
                .sum();
        }
    }

    fn sample_loss(&self, w: &[f64], j: usize, scratch: &mut [f64]) -> f64 {
        let x = self.row(j);
        let y = self.labels[j] as usize;
        if self.binary() {
            let z: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum();
            // softplus(z) - y z, written to avoid overflow
            z.max(0.0) - if y == 1 { z } else { 0.0 } + (-z.abs()).exp().ln_1p()
        } else {
            self.logits(w, x, scratch);
            let zmax = scratch.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = zmax + scratch.iter().map(|z| (z - zmax).exp()).sum::<f64>().ln();
            lse - scratch[y]
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl LocalObjective for LogisticClient {
    fn dim(&self) -> usize {
        if self.binary() {
            self.p
        } else {
            self.p * self.classes
        }
    }

    fn num_samples(&self) -> usize {
        self.labels.len()
    }

    fn loss(&self, w: &ParamVector) -> f64 {
        let w = w.as_slice();
        let mut scratch = vec![0.0; self.classes];
        let ce: f64 = (0..self.num_samples())
            .map(|j| self.sample_loss(w, j, &mut scratch))
            .sum::<f64>()
            / self.num_samples() as f64;
        ce + 0.5 * self.weight_decay * w.iter().map(|v| v * v).sum::<f64>()
    }

    fn batch_gradient(&self, w: &ParamVector, batch: &[usize]) -> ParamVector {
        let ws = w.as_slice();
        let mut g = vec![0.0; self.dim()];
        let mut z = vec![0.0; self.classes];
        for &j in batch {
            let x = self.row(j);
            let y = self.labels[j] as usize;
            if self.binary() {
                let s: f64 = ws.iter().zip(x).map(|(a, b)| a * b).sum();
                let coef = sigmoid(s) - y as f64;
                for (g, x) in g.iter_mut().zip(x) {
                    *g += coef * x;
                }
            } else {
                self.logits(ws, x, &mut z);
                let zmax = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = z.iter().map(|v| (v - zmax).exp()).sum();
                for c in 0..self.classes {
                    let prob = (z[c] - zmax).exp() / denom;
                    let coef = prob - if c == y { 1.0 } else { 0.0 };
                    for (g, x) in g[c * self.p..(c + 1) * self.p].iter_mut().zip(x) {
                        *g += coef * x;
                    }
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{stream, Purpose, RngKey, RngStream};
    use crate::problems::testutil::{fd_gradient, rel_err};

    fn client(classes: usize, s: &mut RngStream) -> LogisticClient {
        let p = 5;
        let m = 30;
        let features: Vec<f64> = (0..m * p).map(|_| s.normal()).collect();
        let labels: Vec<u32> = (0..m).map(|_| s.below(classes) as u32).collect();
        LogisticClient::new(features, labels, p, classes, 1e-4)
    }

    fn random_w(d: usize, s: &mut RngStream) -> ParamVector {
        ParamVector::from_vec((0..d).map(|_| s.normal()).collect())
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut s = stream(RngKey::new(4, 0, 0, Purpose::Data));
        for classes in [2, 4] {
            let c = client(classes, &mut s);
            for _ in 0..5 {
                let w = random_w(c.dim(), &mut s);
                let err = rel_err(&c.full_gradient(&w), &fd_gradient(&c, &w, 1e-5));
                assert!(err < 1e-5, "classes {classes}: rel err {err}");
            }
        }
    }

    #[test]
    fn smoothness_dominates_probed_ratios() {
        let mut s = stream(RngKey::new(5, 0, 0, Purpose::Data));
        for classes in [2, 3] {
            let c = client(classes, &mut s);
            let mut worst: f64 = 0.0;
            for _ in 0..10_000 {
                let x = random_w(c.dim(), &mut s);
                let y = random_w(c.dim(), &mut s);
                let num = c.full_gradient(&x).sub(&c.full_gradient(&y)).unwrap().norm();
                worst = worst.max(num / x.sub(&y).unwrap().norm());
            }
            assert!(worst <= c.smoothness(), "{worst} > {}", c.smoothness());
        }
    }

    #[test]
    fn loss_is_nonnegative_and_stable() {
        let mut s = stream(RngKey::new(6, 0, 0, Purpose::Data));
        let c = client(2, &mut s);
        let w = random_w(c.dim(), &mut s).scale(1e3);
        let l = c.loss(&w);
        assert!(l.is_finite() && l >= 0.0);
    }
}
