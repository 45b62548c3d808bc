//! Local client procedures for each algorithm.

use crate::numkit::{ParamVector, RngStream};
use crate::problems::LocalObjective;
use crate::quantizer::{quantize, QuantizedVector, QuantizerSpec};

use super::{AlgoError, ClientStreams};

/// Local iterates `w_{k,0}, ..., w_{k,E}`.
pub type Trajectory = Vec<ParamVector>;

/// Per-round local settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalOptions {
    pub eta: f64,
    pub local_steps: usize,
    pub damping: f64,
    /// FedAvg heavy-ball factor.
    pub momentum: f64,
    pub batch_size: Option<usize>,
    pub anchor_batch: Option<usize>,
}

/// Sorted batch of `size` distinct sample indices, or every sample when the
/// size is absent or at least `m`. Full batches consume no randomness.
pub fn draw_batch(m: usize, size: Option<usize>, rng: &mut RngStream) -> Vec<usize> {
    match size {
        Some(b) if b < m => {
            let mut batch = rng.sample_indices(m, b);
            batch.sort_unstable();
            batch
        }
        _ => (0..m).collect(),
    }
}

/// `g + damping * (v_prev - g_prev)`.
fn corrected_direction(g: &ParamVector, v_prev: &ParamVector, g_prev: &ParamVector, damping: f64) -> ParamVector {
    let out = g
        .iter()
        .zip(v_prev.iter())
        .zip(g_prev.iter())
        .map(|((g, v), gp)| g + damping * (v - gp))
        .collect();
    ParamVector::from_vec(out)
}

fn step(w: &ParamVector, eta: f64, v: &ParamVector) -> ParamVector {
    ParamVector::from_vec(w.iter().zip(v.iter()).map(|(w, v)| w - eta * v).collect())
}

fn ensure_finite(w: &ParamVector, client: usize, tau: usize) -> Result<(), AlgoError> {
    if w.is_finite() {
        Ok(())
    } else {
        Err(AlgoError::Diverged { client, tau })
    }
}

fn anchor<O: LocalObjective + ?Sized>(
    obj: &O,
    points: &[&ParamVector],
    opts: &LocalOptions,
    rng: &mut RngStream,
) -> Result<Vec<ParamVector>, AlgoError> {
    match opts.anchor_batch {
        None => Ok(points.iter().map(|w| obj.full_gradient(w)).collect()),
        Some(b) => {
            let batch = draw_batch(obj.num_samples(), Some(b), rng);
            points
                .iter()
                .map(|w| obj.grad_batch(w, &batch).map_err(AlgoError::from))
                .collect()
        }
    }
}

/// Both FedGLOMO uplink messages.
#[derive(Debug, Clone)]
pub struct ClientMessageGlomo {
    /// `Q(w_k - w_{k,E})`.
    pub q_drift: QuantizedVector,
    /// `Q((w_k - w_{k,E}) - (w_{k-1} - w^_{k-1,E}))`.
    pub q_delta: QuantizedVector,
    pub uplink_bits: u64,
}

impl ClientMessageGlomo {
    pub fn new(q_drift: QuantizedVector, q_delta: QuantizedVector) -> Self {
        let uplink_bits = q_drift.payload_bits() + q_delta.payload_bits();
        Self { q_drift, q_delta, uplink_bits }
    }
}

#[derive(Debug, Clone)]
pub struct GlomoClientOutput {
    pub client: usize,
    pub message: ClientMessageGlomo,
    /// Pre-quantization `w_k - w_{k,E}`.
    pub drift: ParamVector,
    /// Pre-quantization `w_{k-1} - w^_{k-1,E}`.
    pub hat_drift: ParamVector,
    pub trajectory: Trajectory,
    pub hat_trajectory: Trajectory,
}

/// Runs the paired local-momentum recursion from `w_k` and `w_{k-1}` on
/// shared batches and quantizes the two messages.
#[allow(clippy::too_many_arguments)]
pub fn glomo_client_update<O: LocalObjective + ?Sized>(
    obj: &O,
    client: usize,
    w_k: &ParamVector,
    w_prev: &ParamVector,
    opts: &LocalOptions,
    quantizer: &QuantizerSpec,
    streams: &mut ClientStreams,
) -> Result<GlomoClientOutput, AlgoError> {
    if opts.local_steps == 0 || !(opts.eta > 0.0) {
        return Err(AlgoError::Invalid("local update needs eta > 0 and E >= 1".into()));
    }
    let m = obj.num_samples();
    let mut anchors = anchor(obj, &[w_k, w_prev], opts, &mut streams.batch)?.into_iter();
    let mut v = anchors.next().expect("two anchors");
    let mut v_hat = anchors.next().expect("two anchors");

    let mut trajectory = Vec::with_capacity(opts.local_steps + 1);
    let mut hat_trajectory = Vec::with_capacity(opts.local_steps + 1);
    trajectory.push(w_k.clone());
    hat_trajectory.push(w_prev.clone());
    trajectory.push(step(w_k, opts.eta, &v));
    hat_trajectory.push(step(w_prev, opts.eta, &v_hat));
    ensure_finite(&trajectory[1], client, 0)?;
    ensure_finite(&hat_trajectory[1], client, 0)?;

    for tau in 1..opts.local_steps {
        let batch = draw_batch(m, opts.batch_size, &mut streams.batch);
        let (w, w_last) = (&trajectory[tau], &trajectory[tau - 1]);
        let (wh, wh_last) = (&hat_trajectory[tau], &hat_trajectory[tau - 1]);
        let g = obj.grad_batch(w, &batch)?;
        let g_hat = obj.grad_batch(wh, &batch)?;
        let g_last = obj.grad_batch(w_last, &batch)?;
        let g_hat_last = obj.grad_batch(wh_last, &batch)?;
        v = corrected_direction(&g, &v, &g_last, opts.damping);
        v_hat = corrected_direction(&g_hat, &v_hat, &g_hat_last, opts.damping);
        let next = step(w, opts.eta, &v);
        let next_hat = step(wh, opts.eta, &v_hat);
        ensure_finite(&next, client, tau)?;
        ensure_finite(&next_hat, client, tau)?;
        trajectory.push(next);
        hat_trajectory.push(next_hat);
    }

    let drift = w_k.sub(trajectory.last().expect("nonempty"))?;
    let hat_drift = w_prev.sub(hat_trajectory.last().expect("nonempty"))?;
    let delta = drift.sub(&hat_drift)?;
    let q_drift = quantize(&drift, quantizer, &mut streams.quantizer)?;
    let q_delta = quantize(&delta, quantizer, &mut streams.quantizer)?;
    Ok(GlomoClientOutput {
        client,
        message: ClientMessageGlomo::new(q_drift, q_delta),
        drift,
        hat_drift,
        trajectory,
        hat_trajectory,
    })
}

/// Single-message client output for FedLOMO and FedAvg.
#[derive(Debug, Clone)]
pub struct LocalOutput {
    pub client: usize,
    pub message: QuantizedVector,
    /// The pre-quantization vector that was sent.
    pub update: ParamVector,
    pub trajectory: Trajectory,
}

/// FedLOMO local momentum; sends `Q(w_{k,E} - w_k)`.
pub fn lomo_client_update<O: LocalObjective + ?Sized>(
    obj: &O,
    client: usize,
    w_k: &ParamVector,
    opts: &LocalOptions,
    quantizer: &QuantizerSpec,
    streams: &mut ClientStreams,
) -> Result<LocalOutput, AlgoError> {
    if opts.local_steps == 0 || !(opts.eta > 0.0) {
        return Err(AlgoError::Invalid("local update needs eta > 0 and E >= 1".into()));
    }
    let m = obj.num_samples();
    let mut v = anchor(obj, &[w_k], opts, &mut streams.batch)?.remove(0);
    let mut trajectory = Vec::with_capacity(opts.local_steps + 1);
    trajectory.push(w_k.clone());
    trajectory.push(step(w_k, opts.eta, &v));
    ensure_finite(&trajectory[1], client, 0)?;
    for tau in 1..opts.local_steps {
        let batch = draw_batch(m, opts.batch_size, &mut streams.batch);
        let g = obj.grad_batch(&trajectory[tau], &batch)?;
        let g_last = obj.grad_batch(&trajectory[tau - 1], &batch)?;
        v = corrected_direction(&g, &v, &g_last, opts.damping);
        let next = step(&trajectory[tau], opts.eta, &v);
        ensure_finite(&next, client, tau)?;
        trajectory.push(next);
    }
    let update = trajectory.last().expect("nonempty").sub(w_k)?;
    let message = quantize(&update, quantizer, &mut streams.quantizer)?;
    Ok(LocalOutput { client, message, update, trajectory })
}

/// E steps of local SGD with an optional heavy-ball accumulator reset every
/// round; sends `Q(w_k - w_{k,E})`.
pub fn fedavg_client_update<O: LocalObjective + ?Sized>(
    obj: &O,
    client: usize,
    w_k: &ParamVector,
    opts: &LocalOptions,
    quantizer: &QuantizerSpec,
    streams: &mut ClientStreams,
) -> Result<LocalOutput, AlgoError> {
    if opts.local_steps == 0 || !(opts.eta > 0.0) {
        return Err(AlgoError::Invalid("local update needs eta > 0 and E >= 1".into()));
    }
    let m = obj.num_samples();
    let mut buf = ParamVector::zeros(w_k.dim());
    let mut trajectory = Vec::with_capacity(opts.local_steps + 1);
    trajectory.push(w_k.clone());
    for tau in 0..opts.local_steps {
        let batch = draw_batch(m, opts.batch_size, &mut streams.batch);
        let g = obj.grad_batch(&trajectory[tau], &batch)?;
        buf = if opts.momentum == 0.0 {
            g
        } else {
            let mut b = buf.scale(opts.momentum);
            b.axpy_in_place(1.0, &g)?;
            b
        };
        let next = step(&trajectory[tau], opts.eta, &buf);
        ensure_finite(&next, client, tau)?;
        trajectory.push(next);
    }
    let update = w_k.sub(trajectory.last().expect("nonempty"))?;
    let message = quantize(&update, quantizer, &mut streams.quantizer)?;
    Ok(LocalOutput { client, message, update, trajectory })
}
