use crate::numkit::ParamVector;

use super::{sym_lambda_max, LocalObjective};

/// `f_i(w) = (1/m) sum_j 1/2 (w - c - o_j)^T A (w - c - o_j)`.
///
/// Offsets `o_j` are centered so the client minimizer is exactly `c`;
/// equivalently `f_i(w) = 1/2 (w - c)^T A (w - c) + b` with
/// `b = (1/m) sum_j 1/2 o_j^T A o_j >= 0`.
#[derive(Debug, Clone)]
pub struct QuadraticClient {
    dim: usize,
    a: Vec<f64>,
    center: Vec<f64>,
    offsets: Vec<Vec<f64>>,
    lambda_max: f64,
}

impl QuadraticClient {
    /// `a` is a symmetric PSD row-major matrix. With no offsets the client
    /// has a single noise-free sample.
    pub fn new(a: Vec<f64>, center: Vec<f64>, offsets: Vec<Vec<f64>>) -> Self {
        let dim = center.len();
        assert_eq!(a.len(), dim * dim, "matrix must be d x d");
        let mut offsets = if offsets.is_empty() {
            vec![vec![0.0; dim]]
        } else {
            offsets
        };
        let m = offsets.len() as f64;
        for j in 0..dim {
            let mean = offsets.iter().map(|o| o[j]).sum::<f64>() / m;
            for o in offsets.iter_mut() {
                o[j] -= mean;
            }
        }
        let lambda_max = sym_lambda_max(&a, dim);
        Self {
            dim,
            a,
            center,
            offsets,
            lambda_max,
        }
    }

    pub fn diagonal(diag: &[f64], center: Vec<f64>) -> Self {
        let d = diag.len();
        let mut a = vec![0.0; d * d];
        for (i, &v) in diag.iter().enumerate() {
            a[i * d + i] = v;
        }
        Self::new(a, center, Vec::new())
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    pub fn matrix(&self) -> &[f64] {
        &self.a
    }

    pub fn smoothness(&self) -> f64 {
        self.lambda_max
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim;
        (0..d)
            .map(|i| {
                self.a[i * d..(i + 1) * d]
                    .iter()
                    .zip(x)
                    .map(|(a, x)| a * x)
                    .sum()
            })
            .collect()
    }
}

impl LocalObjective for QuadraticClient {
    fn dim(&self) -> usize {
        self.dim
    }

    fn num_samples(&self) -> usize {
        self.offsets.len()
    }

    fn loss(&self, w: &ParamVector) -> f64 {
        let mut total = 0.0;
        for o in &self.offsets {
            let r: Vec<f64> = (0..self.dim)
                .map(|j| w[j] - self.center[j] - o[j])
                .collect();
            let ar = self.apply(&r);
            total += 0.5 * r.iter().zip(&ar).map(|(a, b)| a * b).sum::<f64>();
        }
        total / self.offsets.len() as f64
    }

    fn batch_gradient(&self, w: &ParamVector, batch: &[usize]) -> ParamVector {
        // Batches hold distinct indices, so one of size m is the full batch.
        if batch.len() == self.offsets.len() {
            return self.full_gradient(w);
        }
        let inv = 1.0 / batch.len() as f64;
        let r: Vec<f64> = (0..self.dim)
            .map(|j| {
                let mean_offset = batch.iter().map(|&b| self.offsets[b][j]).sum::<f64>() * inv;
                w[j] - self.center[j] - mean_offset
            })
            .collect();
        ParamVector::from_vec(self.apply(&r))
    }

    fn full_gradient(&self, w: &ParamVector) -> ParamVector {
        // Offsets are centered, so the full gradient is A (w - c).
        let r: Vec<f64> = (0..self.dim).map(|j| w[j] - self.center[j]).collect();
        ParamVector::from_vec(self.apply(&r))
    }
}
