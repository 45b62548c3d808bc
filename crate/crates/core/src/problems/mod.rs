//! Client objectives `f_i`, their gradients and smoothness constants.

mod data;
mod logistic;
mod mlp;
mod partition;
mod quadratic;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numkit::{NumError, ParamVector};

pub use data::{gen_synthetic, load_csv, problem_from_shards, Dataset, ShardModel, SyntheticSpec};
pub use logistic::LogisticClient;
pub use mlp::{MlpClient, MlpShape};
pub use partition::{partition_iid, partition_sorted_shards, ClientShard, PartitionScheme, PartitionSpec};
pub use quadratic::QuadraticClient;

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("sample index {index} out of range for client with {samples} samples")]
    SampleOutOfRange { index: usize, samples: usize },
    #[error("client index {index} out of range (n = {n})")]
    ClientOutOfRange { index: usize, n: usize },
    #[error(transparent)]
    Dimension(#[from] NumError),
    #[error("partition: {0}")]
    Partition(String),
    #[error("invalid problem: {0}")]
    Invalid(String),
    #[error("csv {path}: {message}")]
    Csv { path: String, message: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    Quadratic,
    LogisticL2,
    MlpRelu,
}

/// Objective of a single client: mean loss over its samples.
pub trait LocalObjective: Send + Sync {
    fn dim(&self) -> usize;
    fn num_samples(&self) -> usize;
    fn loss(&self, w: &ParamVector) -> f64;

    /// Mean gradient over `batch`; callers guarantee a valid, nonempty batch.
    fn batch_gradient(&self, w: &ParamVector, batch: &[usize]) -> ParamVector;

    /// Exact gradient over all samples.
    fn full_gradient(&self, w: &ParamVector) -> ParamVector {
        let all: Vec<usize> = (0..self.num_samples()).collect();
        self.batch_gradient(w, &all)
    }

    /// Checked mini-batch gradient.
    fn grad_batch(&self, w: &ParamVector, batch: &[usize]) -> Result<ParamVector, ProblemError> {
        if batch.is_empty() {
            return Err(ProblemError::EmptyBatch);
        }
        let samples = self.num_samples();
        if let Some(&index) = batch.iter().find(|&&j| j >= samples) {
            return Err(ProblemError::SampleOutOfRange { index, samples });
        }
        if w.dim() != self.dim() {
            return Err(NumError::DimensionMismatch {
                left: w.dim(),
                right: self.dim(),
            }
            .into());
        }
        Ok(self.batch_gradient(w, batch))
    }
}

#[derive(Debug, Clone)]
pub enum ClientObjective {
    Quadratic(QuadraticClient),
    Logistic(LogisticClient),
    Mlp(MlpClient),
}

impl LocalObjective for ClientObjective {
    fn dim(&self) -> usize {
        match self {
            Self::Quadratic(c) => c.dim(),
            Self::Logistic(c) => c.dim(),
            Self::Mlp(c) => c.dim(),
        }
    }

    fn num_samples(&self) -> usize {
        match self {
            Self::Quadratic(c) => c.num_samples(),
            Self::Logistic(c) => c.num_samples(),
            Self::Mlp(c) => c.num_samples(),
        }
    }

    fn loss(&self, w: &ParamVector) -> f64 {
        match self {
            Self::Quadratic(c) => c.loss(w),
            Self::Logistic(c) => c.loss(w),
            Self::Mlp(c) => c.loss(w),
        }
    }

    fn batch_gradient(&self, w: &ParamVector, batch: &[usize]) -> ParamVector {
        match self {
            Self::Quadratic(c) => c.batch_gradient(w, batch),
            Self::Logistic(c) => c.batch_gradient(w, batch),
            Self::Mlp(c) => c.batch_gradient(w, batch),
        }
    }

    fn full_gradient(&self, w: &ParamVector) -> ParamVector {
        match self {
            Self::Quadratic(c) => c.full_gradient(w),
            Self::Logistic(c) => c.full_gradient(w),
            Self::Mlp(c) => c.full_gradient(w),
        }
    }
}

/// `n` client objectives over a shared parameter space.
#[derive(Debug, Clone)]
pub struct FederatedProblem {
    clients: Vec<ClientObjective>,
    dim: usize,
    smoothness: f64,
    kind: ProblemKind,
    smoothness_is_surrogate: bool,
}

impl FederatedProblem {
    /// Builds a problem and computes its smoothness bound. `mlp_smoothness`
    /// is required for MLP problems and ignored otherwise.
    pub fn new(
        clients: Vec<ClientObjective>,
        mlp_smoothness: Option<f64>,
    ) -> Result<Self, ProblemError> {
        let first = clients
            .first()
            .ok_or_else(|| ProblemError::Invalid("no clients".into()))?;
        let dim = first.dim();
        let kind = match first {
            ClientObjective::Quadratic(_) => ProblemKind::Quadratic,
            ClientObjective::Logistic(_) => ProblemKind::LogisticL2,
            ClientObjective::Mlp(_) => ProblemKind::MlpRelu,
        };
        for c in &clients {
            if c.dim() != dim {
                return Err(ProblemError::Invalid("clients disagree on dimension".into()));
            }
            if c.num_samples() == 0 {
                return Err(ProblemError::Invalid("client without samples".into()));
            }
        }
        let mut smoothness_is_surrogate = false;
        let smoothness = match kind {
            ProblemKind::Quadratic | ProblemKind::LogisticL2 => clients
                .iter()
                .map(|c| match c {
                    ClientObjective::Quadratic(q) => q.smoothness(),
                    ClientObjective::Logistic(l) => l.smoothness(),
                    ClientObjective::Mlp(_) => unreachable!("mixed problem kinds"),
                })
                .fold(0.0, f64::max),
            ProblemKind::MlpRelu => {
                smoothness_is_surrogate = true;
                mlp_smoothness.ok_or_else(|| {
                    ProblemError::Invalid("mlp_relu problems need a smoothness surrogate".into())
                })?
            }
        };
        if clients.iter().any(|c| {
            !matches!(
                (kind, c),
                (ProblemKind::Quadratic, ClientObjective::Quadratic(_))
                    | (ProblemKind::LogisticL2, ClientObjective::Logistic(_))
                    | (ProblemKind::MlpRelu, ClientObjective::Mlp(_))
            )
        }) {
            return Err(ProblemError::Invalid("mixed problem kinds".into()));
        }
        Ok(Self {
            clients,
            dim,
            smoothness,
            kind,
            smoothness_is_surrogate,
        })
    }

    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> ProblemKind {
        self.kind
    }

    pub fn clients(&self) -> &[ClientObjective] {
        &self.clients
    }

    pub fn client(&self, i: usize) -> Result<&ClientObjective, ProblemError> {
        self.clients.get(i).ok_or(ProblemError::ClientOutOfRange {
            index: i,
            n: self.clients.len(),
        })
    }

    /// Upper bound on every client's smoothness constant.
    pub fn smoothness_bound(&self) -> f64 {
        self.smoothness
    }

    /// Whether the bound is a configured surrogate rather than derived.
    pub fn smoothness_is_surrogate(&self) -> bool {
        self.smoothness_is_surrogate
    }

    pub fn grad_full(&self, i: usize, w: &ParamVector) -> Result<ParamVector, ProblemError> {
        let c = self.client(i)?;
        if w.dim() != self.dim {
            return Err(NumError::DimensionMismatch { left: w.dim(), right: self.dim }.into());
        }
        Ok(c.full_gradient(w))
    }

    pub fn grad_batch(
        &self,
        i: usize,
        w: &ParamVector,
        batch: &[usize],
    ) -> Result<ParamVector, ProblemError> {
        self.client(i)?.grad_batch(w, batch)
    }

    /// Global objective `f(w) = (1/n) sum_i f_i(w)`.
    pub fn loss(&self, w: &ParamVector) -> f64 {
        self.clients.iter().map(|c| c.loss(w)).sum::<f64>() / self.clients.len() as f64
    }

    /// Exact global gradient.
    pub fn gradient(&self, w: &ParamVector) -> ParamVector {
        let mut acc = ParamVector::zeros(self.dim);
        for c in &self.clients {
            acc.axpy_in_place(1.0, &c.full_gradient(w))
                .expect("client dimension checked at construction");
        }
        acc.scale(1.0 / self.clients.len() as f64)
    }
}

/// Largest eigenvalue of a symmetric row-major `d x d` matrix.
pub(crate) fn sym_lambda_max(matrix: &[f64], d: usize) -> f64 {
    let m = nalgebra::DMatrix::from_row_slice(d, d, matrix);
    let eig = nalgebra::SymmetricEigen::new(m);
    eig.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;

    /// Central finite-difference gradient.
    pub fn fd_gradient(obj: &dyn LocalObjective, w: &ParamVector, h: f64) -> ParamVector {
        let mut out = ParamVector::zeros(w.dim());
        let mut x = w.clone();
        for j in 0..w.dim() {
            let orig = x[j];
            x[j] = orig + h;
            let up = obj.loss(&x);
            x[j] = orig - h;
            let down = obj.loss(&x);
            x[j] = orig;
            out[j] = (up - down) / (2.0 * h);
        }
        out
    }

    pub fn rel_err(a: &ParamVector, b: &ParamVector) -> f64 {
        let diff = a.sub(b).unwrap().norm();
        diff / a.norm().max(b.norm()).max(1e-12)
    }
}
