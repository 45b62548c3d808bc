//! Round drivers and the experiment loop.

use serde::{Deserialize, Serialize};

use crate::diagnostics::{
    aggregation_variance_probe, alpha_estimate, bcd_estimate, drift_lemma_monitor, AlphaProbe,
    BcdStat, LemmaOutcome, VarianceProbe,
};
use crate::numkit::{sq_norm, ParamVector};
use crate::par::try_map_ordered;
use crate::problems::FederatedProblem;
use crate::quantizer::QuantizerSpec;

use super::{
    average_server_round, fedavg_client_update, glomo_client_update, glomo_server_round,
    lomo_client_update, lomo_server_round, sample_clients, sampling_stream, AlgoError, Algorithm,
    ClientMessageGlomo, ClientStreams, GlomoClientOutput, HyperParams, LocalOptions, LocalOutput,
    ServerState, Trajectory, DIVERGENCE_NORM,
};

/// Version tag written into every round record.
pub const SCHEMA_VERSION: u32 = 1;

/// Probe intervals in rounds; 0 disables a probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSchedule {
    pub alpha_every: usize,
    pub variance_every: usize,
    pub lemma_every: usize,
    pub bcd_every: usize,
    pub variance_resamples: usize,
}

impl Default for ProbeSchedule {
    fn default() -> Self {
        Self {
            alpha_every: 0,
            variance_every: 0,
            lemma_every: 0,
            bcd_every: 0,
            variance_resamples: 100,
        }
    }
}

fn due(every: usize, k: usize) -> bool {
    every > 0 && k.is_multiple_of(every)
}

/// Everything needed to run one algorithm on one problem.
#[derive(Debug, Clone)]
pub struct Experiment<'a> {
    pub problem: &'a FederatedProblem,
    pub algorithm: Algorithm,
    pub hp: HyperParams,
    pub quantizer: QuantizerSpec,
    pub seed: u64,
    /// Run client updates on the rayon pool when the `parallel` feature is on.
    pub parallel: bool,
    pub probes: ProbeSchedule,
    /// Count one combined vector per FedGLOMO client instead of two; only
    /// meaningful without compression.
    pub combine_uncompressed: bool,
    /// Initial point; `None` uses the problem's seeded default.
    pub w0: Option<ParamVector>,
}

impl<'a> Experiment<'a> {
    pub fn new(
        problem: &'a FederatedProblem,
        algorithm: Algorithm,
        hp: HyperParams,
        quantizer: QuantizerSpec,
        seed: u64,
    ) -> Self {
        Self {
            problem,
            algorithm,
            hp,
            quantizer,
            seed,
            parallel: true,
            probes: ProbeSchedule::default(),
            combine_uncompressed: false,
            w0: None,
        }
    }

    pub fn validate(&self) -> Result<(), AlgoError> {
        self.hp.validate(self.problem.num_clients())?;
        if self.combine_uncompressed
            && (self.algorithm != Algorithm::Fedglomo || !self.quantizer.is_identity())
        {
            return Err(AlgoError::Invalid(
                "combined messages need fedglomo with the identity quantizer".into(),
            ));
        }
        if let Some(w0) = &self.w0 {
            if w0.dim() != self.problem.dim() {
                return Err(AlgoError::Invalid(format!(
                    "initial point has dimension {}, problem has {}",
                    w0.dim(),
                    self.problem.dim()
                )));
            }
        }
        Ok(())
    }

    /// Clients taking part in round `k`. Replica 0 is the real round.
    pub fn participants(&self, k: usize, replica: u32) -> Result<Vec<usize>, AlgoError> {
        let n = self.problem.num_clients();
        if k == 0 && self.hp.full_participation_round0 && self.algorithm == Algorithm::Fedglomo {
            return Ok((0..n).collect());
        }
        sample_clients(n, self.hp.clients_per_round, &mut sampling_stream(self.seed, k, replica))
    }

    pub fn local_options(&self, k: usize) -> LocalOptions {
        let full = k == 0 && self.hp.full_batch_round0;
        LocalOptions {
            eta: self.hp.eta(k),
            local_steps: self.hp.local_steps,
            damping: self.hp.damping,
            momentum: match self.algorithm {
                Algorithm::Fedavg | Algorithm::Fedpaq => self.hp.momentum,
                _ => 0.0,
            },
            batch_size: if full { None } else { self.hp.batch_size },
            anchor_batch: if full { None } else { self.hp.anchor_batch },
        }
    }

    /// Paired-trajectory updates of `clients` from the current state.
    pub fn glomo_outputs(
        &self,
        state: &ServerState,
        clients: &[usize],
        opts: &LocalOptions,
        replica: u32,
        parallel: bool,
    ) -> Result<Vec<GlomoClientOutput>, AlgoError> {
        try_map_ordered(parallel && self.parallel, clients, |&i| {
            let obj = self.problem.client(i)?;
            let mut streams = ClientStreams::for_replica(self.seed, state.k, i, replica);
            glomo_client_update(obj, i, &state.w_curr, &state.w_prev, opts, &self.quantizer, &mut streams)
        })
    }

    fn local_outputs(
        &self,
        state: &ServerState,
        clients: &[usize],
        opts: &LocalOptions,
    ) -> Result<Vec<LocalOutput>, AlgoError> {
        try_map_ordered(self.parallel, clients, |&i| {
            let obj = self.problem.client(i)?;
            let mut streams = ClientStreams::for_round(self.seed, state.k, i);
            match self.algorithm {
                Algorithm::Fedlomo => lomo_client_update(obj, i, &state.w_curr, opts, &self.quantizer, &mut streams),
                _ => fedavg_client_update(obj, i, &state.w_curr, opts, &self.quantizer, &mut streams),
            }
        })
    }

    fn downlink_bits(&self, clients: usize) -> u64 {
        let vectors = if self.algorithm == Algorithm::Fedglomo { 2 } else { 1 };
        vectors * 32 * self.problem.dim() as u64 * clients as u64
    }

    /// Advances `state` by one round of the configured algorithm.
    pub fn round(&self, state: &mut ServerState) -> Result<RoundOutcome, AlgoError> {
        match self.algorithm {
            Algorithm::Fedglomo => fedglomo_round(self, state),
            Algorithm::Fedlomo => fedlomo_round(self, state),
            Algorithm::Fedavg | Algorithm::Fedpaq => fedavg_round(self, state),
        }
    }

    /// Local trajectories of every client for the current round, using the
    /// round's own streams, so sampled clients reproduce their real updates.
    fn shadow_trajectories(&self, state: &ServerState) -> Result<Vec<Trajectory>, AlgoError> {
        let everyone: Vec<usize> = (0..self.problem.num_clients()).collect();
        let opts = self.local_options(state.k);
        Ok(match self.algorithm {
            Algorithm::Fedglomo => self
                .glomo_outputs(state, &everyone, &opts, 0, true)?
                .into_iter()
                .map(|o| o.trajectory)
                .collect(),
            _ => self
                .local_outputs(state, &everyone, &opts)?
                .into_iter()
                .map(|o| o.trajectory)
                .collect(),
        })
    }

    /// Alpha probe at the current state.
    pub fn alpha_probe(&self, state: &ServerState) -> Result<AlphaProbe, AlgoError> {
        alpha_estimate(state.k, &self.shadow_trajectories(state)?, self.problem)
    }
}

/// Per-client results of a round.
#[derive(Debug, Clone)]
pub enum ClientOutputs {
    Glomo(Vec<GlomoClientOutput>),
    Local(Vec<LocalOutput>),
}

#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub sampled: Vec<usize>,
    pub bits_up: u64,
    pub bits_down: u64,
    /// Server update: `u_k` for FedGLOMO, the averaged message otherwise.
    pub update: ParamVector,
    pub clients: ClientOutputs,
}

pub fn fedglomo_round(exp: &Experiment<'_>, state: &mut ServerState) -> Result<RoundOutcome, AlgoError> {
    let sampled = exp.participants(state.k, 0)?;
    let opts = exp.local_options(state.k);
    let outputs = exp.glomo_outputs(state, &sampled, &opts, 0, true)?;
    let messages: Vec<ClientMessageGlomo> = outputs.iter().map(|o| o.message.clone()).collect();
    let bits_up = if exp.combine_uncompressed {
        32 * exp.problem.dim() as u64 * sampled.len() as u64
    } else {
        messages.iter().map(|m| m.uplink_bits).sum()
    };
    let update = glomo_server_round(state, &messages, exp.hp.beta)?;
    Ok(RoundOutcome {
        bits_down: exp.downlink_bits(sampled.len()),
        sampled,
        bits_up,
        update,
        clients: ClientOutputs::Glomo(outputs),
    })
}

fn single_message_round(
    exp: &Experiment<'_>,
    state: &mut ServerState,
    lomo: bool,
) -> Result<RoundOutcome, AlgoError> {
    let sampled = exp.participants(state.k, 0)?;
    let opts = exp.local_options(state.k);
    let outputs = exp.local_outputs(state, &sampled, &opts)?;
    let messages: Vec<_> = outputs.iter().map(|o| o.message.clone()).collect();
    let bits_up = messages.iter().map(|m| m.payload_bits()).sum();
    let update = if lomo {
        lomo_server_round(state, &messages)?
    } else {
        average_server_round(state, &messages)?
    };
    Ok(RoundOutcome {
        bits_down: exp.downlink_bits(sampled.len()),
        sampled,
        bits_up,
        update,
        clients: ClientOutputs::Local(outputs),
    })
}

pub fn fedlomo_round(exp: &Experiment<'_>, state: &mut ServerState) -> Result<RoundOutcome, AlgoError> {
    single_message_round(exp, state, true)
}

/// FedAvg with the identity quantizer, FedPAQ otherwise.
pub fn fedavg_round(exp: &Experiment<'_>, state: &mut ServerState) -> Result<RoundOutcome, AlgoError> {
    single_message_round(exp, state, false)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundStatus {
    Ok,
    Diverged,
}

/// Metrics at `w_k` together with the cost of the round that starts there.
///
/// `cumulative_bits` counts uplink bits through this round; downlink bits are
/// tracked separately in `cumulative_bits_down`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub v: u32,
    pub k: usize,
    #[serde(with = "crate::serde_float")]
    pub loss: f64,
    #[serde(with = "crate::serde_float")]
    pub grad_sq_norm: f64,
    pub bits_up: u64,
    pub bits_down: u64,
    pub cumulative_bits: u64,
    pub cumulative_bits_down: u64,
    pub clients: usize,
    pub alpha_hat: Option<f64>,
    pub bcd: Option<BcdStat>,
    pub var_probe: Option<VarianceProbe>,
    pub lemma: Option<LemmaOutcome>,
    pub eta_k: f64,
    pub status: RoundStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Diverged { round: usize },
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<RoundRecord>,
    pub status: RunStatus,
    /// State after the last completed round.
    pub final_state: ServerState,
    /// `f(w_K)`, NaN when the run diverged.
    pub final_loss: f64,
    /// `||grad f(w_K)||^2`, NaN when the run diverged.
    pub final_grad_sq_norm: f64,
}

fn point_diverged(w: &ParamVector, loss: f64) -> bool {
    !loss.is_finite() || !w.is_finite() || w.norm() > DIVERGENCE_NORM
}

/// Runs `hp.rounds` rounds, recording metrics at each iterate before its
/// update. Divergence truncates the run with a final `diverged` record.
pub fn run_experiment(exp: &Experiment<'_>) -> Result<RunOutput, AlgoError> {
    exp.validate()?;
    let problem = exp.problem;
    let w0 = exp.w0.clone().unwrap_or_else(|| problem.initial_point(exp.seed));
    let mut state = ServerState::new(w0);
    let mut records = Vec::with_capacity(exp.hp.rounds);
    let mut cumulative_up = 0u64;
    let mut cumulative_down = 0u64;
    let mut status = RunStatus::Completed;

    for k in 0..exp.hp.rounds {
        let loss = problem.loss(&state.w_curr);
        let grad_sq_norm = sq_norm(&problem.gradient(&state.w_curr));
        let mut record = RoundRecord {
            v: SCHEMA_VERSION,
            k,
            loss,
            grad_sq_norm,
            bits_up: 0,
            bits_down: 0,
            cumulative_bits: cumulative_up,
            cumulative_bits_down: cumulative_down,
            clients: 0,
            alpha_hat: None,
            bcd: None,
            var_probe: None,
            lemma: None,
            eta_k: exp.hp.eta(k),
            status: RoundStatus::Ok,
        };
        if point_diverged(&state.w_curr, loss) {
            record.status = RoundStatus::Diverged;
            records.push(record);
            status = RunStatus::Diverged { round: k };
            break;
        }
        if due(exp.probes.bcd_every, k) {
            record.bcd = Some(bcd_estimate(problem, &state.w_curr)?);
        }
        if due(exp.probes.alpha_every, k) {
            match exp.alpha_probe(&state) {
                Ok(probe) => record.alpha_hat = Some(probe.alpha_hat),
                Err(AlgoError::Diverged { .. }) => {}
                Err(e) => return Err(e),
            }
        }
        if exp.algorithm == Algorithm::Fedglomo
            && state.u_prev.is_some()
            && due(exp.probes.variance_every, k)
        {
            match aggregation_variance_probe(exp, &state, exp.probes.variance_resamples) {
                Ok(probe) => record.var_probe = Some(probe),
                Err(AlgoError::Diverged { .. }) => {}
                Err(e) => return Err(e),
            }
        }

        let w_k = state.w_curr.clone();
        let w_prev = state.w_prev.clone();
        match exp.round(&mut state) {
            Ok(outcome) => {
                if let (true, ClientOutputs::Glomo(outputs)) =
                    (due(exp.probes.lemma_every, k), &outcome.clients)
                {
                    record.lemma = Some(drift_lemma_monitor(
                        outputs,
                        &w_k,
                        &w_prev,
                        record.eta_k,
                        problem.smoothness_bound(),
                        exp.hp.local_steps,
                    )?);
                }
                cumulative_up += outcome.bits_up;
                cumulative_down += outcome.bits_down;
                record.bits_up = outcome.bits_up;
                record.bits_down = outcome.bits_down;
                record.cumulative_bits = cumulative_up;
                record.cumulative_bits_down = cumulative_down;
                record.clients = outcome.sampled.len();
                records.push(record);
            }
            Err(AlgoError::Diverged { .. }) => {
                record.status = RoundStatus::Diverged;
                records.push(record);
                status = RunStatus::Diverged { round: k };
                break;
            }
            Err(e) => return Err(e),
        }
    }

    let (final_loss, final_grad_sq_norm) = match status {
        RunStatus::Completed => {
            let loss = problem.loss(&state.w_curr);
            if point_diverged(&state.w_curr, loss) {
                status = RunStatus::Diverged { round: exp.hp.rounds };
                (f64::NAN, f64::NAN)
            } else {
                (loss, sq_norm(&problem.gradient(&state.w_curr)))
            }
        }
        RunStatus::Diverged { .. } => (f64::NAN, f64::NAN),
    };
    Ok(RunOutput {
        records,
        status,
        final_state: state,
        final_loss,
        final_grad_sq_norm,
    })
}
