//! FedGLOMO, FedLOMO and FedAvg/FedPAQ round engines.

mod client;
mod engine;
mod server;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numkit::{NumError, ParamVector, RngKey, RngStream, Purpose, stream};
use crate::problems::ProblemError;
use crate::quantizer::QuantizeError;

pub use client::{
    draw_batch, fedavg_client_update, glomo_client_update, lomo_client_update,
    ClientMessageGlomo, GlomoClientOutput, LocalOptions, LocalOutput, Trajectory,
};
pub use engine::{
    fedavg_round, fedglomo_round, fedlomo_round, run_experiment, ClientOutputs, Experiment,
    ProbeSchedule, RoundOutcome, RoundRecord, RoundStatus, RunOutput, RunStatus, SCHEMA_VERSION,
};
pub use server::{average_server_round, glomo_direction, glomo_server_round, lomo_server_round};

/// `||w||` above which a run is declared diverged.
pub const DIVERGENCE_NORM: f64 = 1e8;

/// Client id reserved for streams that belong to the server.
pub const SERVER_STREAM: u64 = u64::MAX;

#[derive(Debug, Error)]
pub enum AlgoError {
    #[error(transparent)]
    Quantize(#[from] QuantizeError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Dimension(#[from] NumError),
    #[error("client {client} diverged at local step {tau}")]
    Diverged { client: usize, tau: usize },
    #[error("beta = {0} is outside [0, 1]")]
    InvalidBeta(f64),
    #[error("cannot sample {r} clients out of {n}")]
    InvalidSample { n: usize, r: usize },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Fedglomo,
    Fedlomo,
    Fedavg,
    Fedpaq,
}

impl Algorithm {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Fedglomo => "fedglomo",
            Self::Fedlomo => "fedlomo",
            Self::Fedavg => "fedavg",
            Self::Fedpaq => "fedpaq",
        }
    }
}

/// Hyperparameters shared by all engines; unused fields are ignored by
/// engines that do not need them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperParams {
    pub eta0: f64,
    pub beta: f64,
    /// Local steps `E`.
    pub local_steps: usize,
    /// Rounds `K`.
    pub rounds: usize,
    /// Clients per round `r`.
    pub clients_per_round: usize,
    pub damping: f64,
    pub lr_decay: f64,
    /// Heavy-ball factor for FedAvg-m / FedPAQ-m; 0 disables it.
    pub momentum: f64,
    pub full_participation_round0: bool,
    pub full_batch_round0: bool,
    /// Local mini-batch size; `None` means full local batches.
    pub batch_size: Option<usize>,
    /// Batch size replacing the exact anchor gradient at the first local step.
    pub anchor_batch: Option<usize>,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            eta0: 0.01,
            beta: 0.2,
            local_steps: 10,
            rounds: 100,
            clients_per_round: 25,
            damping: 1.0,
            lr_decay: 0.99,
            momentum: 0.9,
            full_participation_round0: false,
            full_batch_round0: false,
            batch_size: Some(16),
            anchor_batch: None,
        }
    }
}

impl HyperParams {
    /// `eta_k = lr_decay^k * eta0`.
    pub fn eta(&self, k: usize) -> f64 {
        self.eta0 * self.lr_decay.powi(k as i32)
    }

    pub fn validate(&self, n: usize) -> Result<(), AlgoError> {
        let bad = |m: String| Err(AlgoError::Invalid(m));
        if self.clients_per_round == 0 || self.clients_per_round > n {
            return bad(format!("clients_per_round = {} must lie in 1..={n}", self.clients_per_round));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(AlgoError::InvalidBeta(self.beta));
        }
        if !(self.eta0 > 0.0 && self.eta0.is_finite()) {
            return bad(format!("eta0 = {} must be positive", self.eta0));
        }
        if self.local_steps == 0 || self.rounds == 0 {
            return bad("local_steps and rounds must be at least 1".into());
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return bad(format!("damping = {} must lie in (0, 1]", self.damping));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay = {} must lie in (0, 1]", self.lr_decay));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum = {} must lie in [0, 1)", self.momentum));
        }
        if self.batch_size == Some(0) || self.anchor_batch == Some(0) {
            return bad("batch sizes must be positive".into());
        }
        Ok(())
    }
}

/// Server-side state carried between rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub w_curr: ParamVector,
    pub w_prev: ParamVector,
    pub u_prev: Option<ParamVector>,
    pub k: usize,
}

impl ServerState {
    /// Round-0 state with `w_{-1} = w_0`.
    pub fn new(w0: ParamVector) -> Self {
        Self {
            w_prev: w0.clone(),
            w_curr: w0,
            u_prev: None,
            k: 0,
        }
    }
}

/// The two random streams a client consumes in one round.
#[derive(Debug, Clone)]
pub struct ClientStreams {
    pub batch: RngStream,
    pub quantizer: RngStream,
}

impl ClientStreams {
    pub fn for_round(seed: u64, round: usize, client: usize) -> Self {
        Self::for_replica(seed, round, client, 0)
    }

    pub fn for_replica(seed: u64, round: usize, client: usize, replica: u32) -> Self {
        let key = |p| RngKey::new(seed, round as u64, client as u64, p).with_replica(replica);
        Self {
            batch: stream(key(Purpose::Batch)),
            quantizer: stream(key(Purpose::Quantizer)),
        }
    }
}

/// `r` distinct client indices, uniform over `r`-subsets, in ascending order.
pub fn sample_clients(n: usize, r: usize, rng: &mut RngStream) -> Result<Vec<usize>, AlgoError> {
    if r == 0 || r > n {
        return Err(AlgoError::InvalidSample { n, r });
    }
    if r == n {
        return Ok((0..n).collect());
    }
    let mut picked = rng.sample_indices(n, r);
    picked.sort_unstable();
    Ok(picked)
}

/// Sampling stream of round `k`.
pub fn sampling_stream(seed: u64, round: usize, replica: u32) -> RngStream {
    stream(RngKey::new(seed, round as u64, SERVER_STREAM, Purpose::Sampling).with_replica(replica))
}
