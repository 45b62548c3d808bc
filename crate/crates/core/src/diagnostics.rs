//! Measured statistics: the alpha heterogeneity ratio, client dissimilarity,
//! aggregation variance and the drift-lemma monitor.

use serde::{Deserialize, Serialize};

use crate::algorithms::{
    glomo_direction, AlgoError, Experiment, GlomoClientOutput, ServerState, Trajectory,
};
use crate::numkit::{mean, sq_norm, ParamVector};
use crate::par::try_map_ordered;
use crate::problems::FederatedProblem;
use crate::quantizer::decode;

/// Alpha measured over one full-participation round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaProbe {
    pub round: usize,
    pub alpha_hat: f64,
    /// Ratio at each local step `tau = 1..=E`.
    pub per_tau_ratios: Vec<f64>,
}

/// `||sum_i e_i||^2 / sum_i ||e_i||^2`, defined as 0 when every `e_i` is 0.
pub fn alpha_ratio(deviations: &[ParamVector]) -> Result<f64, AlgoError> {
    let Some(first) = deviations.first() else {
        return Ok(0.0);
    };
    let mut total = ParamVector::zeros(first.dim());
    let mut denom = 0.0;
    for e in deviations {
        total.axpy_in_place(1.0, e)?;
        denom += sq_norm(e);
    }
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok(sq_norm(&total) / denom)
}

/// Alpha from the local trajectories of every client, indexed by client.
///
/// At each step the deviation of client `i` is
/// `grad f_i(w_{i,tau}) - grad f_i(mean_j w_{j,tau})`.
pub fn alpha_estimate(
    round: usize,
    trajectories: &[Trajectory],
    problem: &FederatedProblem,
) -> Result<AlphaProbe, AlgoError> {
    let n = problem.num_clients();
    if trajectories.len() != n {
        return Err(AlgoError::Invalid(format!(
            "alpha needs trajectories from all {n} clients, got {}",
            trajectories.len()
        )));
    }
    let steps = trajectories[0].len();
    if trajectories.iter().any(|t| t.len() != steps) {
        return Err(AlgoError::Invalid("trajectories differ in length".into()));
    }
    let mut per_tau_ratios = Vec::with_capacity(steps.saturating_sub(1));
    for tau in 1..steps {
        let points: Vec<ParamVector> = trajectories.iter().map(|t| t[tau].clone()).collect();
        let avg = mean(&points)?;
        let deviations = points
            .iter()
            .enumerate()
            .map(|(i, w)| {
                let g = problem.grad_full(i, w)?;
                let g_avg = problem.grad_full(i, &avg)?;
                Ok(g.sub(&g_avg)?)
            })
            .collect::<Result<Vec<_>, AlgoError>>()?;
        per_tau_ratios.push(alpha_ratio(&deviations)?);
    }
    let alpha_hat = per_tau_ratios.iter().copied().fold(0.0, f64::max);
    Ok(AlphaProbe { round, alpha_hat, per_tau_ratios })
}

/// Client dissimilarity at one point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BcdStat {
    pub mean_sq: f64,
    pub max_sq: f64,
}

/// Mean and max over clients of `||grad f_i(w) - grad f(w)||^2`.
pub fn bcd_estimate(problem: &FederatedProblem, w: &ParamVector) -> Result<BcdStat, AlgoError> {
    let n = problem.num_clients();
    let grads = (0..n)
        .map(|i| problem.grad_full(i, w))
        .collect::<Result<Vec<_>, _>>()?;
    let global = mean(&grads)?;
    let mut total = 0.0;
    let mut max_sq: f64 = 0.0;
    for g in &grads {
        let s = sq_norm(&g.sub(&global)?);
        total += s;
        max_sq = max_sq.max(s);
    }
    Ok(BcdStat { mean_sq: total / n as f64, max_sq })
}

/// Trace variance of the server update under resampled clients and
/// quantizer randomness.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceProbe {
    pub var_glomo: f64,
    pub var_plain: f64,
}

fn trace_variance(samples: &[ParamVector]) -> Result<f64, AlgoError> {
    let centre = mean(samples)?;
    let mut total = 0.0;
    for s in samples {
        total += sq_norm(&s.sub(&centre)?);
    }
    Ok(total / (samples.len() - 1) as f64)
}

/// Redraws the round's client subset, batches and quantizer noise
/// `n_resamples` times at the current state and compares the spread of the
/// global-momentum update with plain averaging of the drifts.
///
/// Replica `j` uses streams keyed by replica `j + 1`, so the probe never
/// reuses the randomness of the actual round.
pub fn aggregation_variance_probe(
    exp: &Experiment<'_>,
    state: &ServerState,
    n_resamples: usize,
) -> Result<VarianceProbe, AlgoError> {
    let u_prev = state
        .u_prev
        .as_ref()
        .ok_or_else(|| AlgoError::Invalid("variance probe needs a previous update (k >= 1)".into()))?;
    if n_resamples < 2 {
        return Err(AlgoError::Invalid("variance probe needs at least 2 resamples".into()));
    }
    let opts = exp.local_options(state.k);
    let replicas: Vec<u32> = (1..=n_resamples as u32).collect();
    let beta = exp.hp.beta;
    let pairs = try_map_ordered(exp.parallel, &replicas, |&j| -> Result<_, AlgoError> {
        let sampled = exp.participants(state.k, j)?;
        let outputs = exp.glomo_outputs(state, &sampled, &opts, j, false)?;
        let drifts = outputs
            .iter()
            .map(|o| decode(&o.message.q_drift))
            .collect::<Result<Vec<_>, _>>()?;
        let deltas = outputs
            .iter()
            .map(|o| decode(&o.message.q_delta))
            .collect::<Result<Vec<_>, _>>()?;
        let plain = mean(&drifts)?;
        let glomo = glomo_direction(&plain, &mean(&deltas)?, Some(u_prev), beta)?;
        Ok((glomo, plain))
    })?;
    let (glomo, plain): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    Ok(VarianceProbe {
        var_glomo: trace_variance(&glomo)?,
        var_plain: trace_variance(&plain)?,
    })
}

/// Drift-lemma check for one round.
///
/// `holds` is `None` when the step-size precondition `2 eta L E^2 <= 1`
/// fails and no verdict is given.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LemmaOutcome {
    /// Largest `||drift_i - hat_drift_i|| / ||w_k - w_{k-1}||` over clients.
    #[serde(with = "crate::serde_float")]
    pub max_ratio: f64,
    /// `2 e eta L E (E + 1)`.
    pub bound: f64,
    pub holds: Option<bool>,
}

impl LemmaOutcome {
    pub fn precondition_met(&self) -> bool {
        self.holds.is_some()
    }
}

/// Compares the paired-trajectory drift difference of every client with the
/// lemma's bound. Identical anchors require an exactly zero difference.
pub fn drift_lemma_monitor(
    clients: &[GlomoClientOutput],
    w_k: &ParamVector,
    w_prev: &ParamVector,
    eta: f64,
    l: f64,
    e: usize,
) -> Result<LemmaOutcome, AlgoError> {
    let e_f = e as f64;
    let bound = 2.0 * std::f64::consts::E * eta * l * e_f * (e_f + 1.0);
    let gap = w_k.sub(w_prev)?.norm();
    let mut max_ratio: f64 = 0.0;
    for c in clients {
        let lhs = c.drift.sub(&c.hat_drift)?.norm();
        let ratio = if gap == 0.0 {
            if lhs == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            lhs / gap
        };
        max_ratio = max_ratio.max(ratio);
    }
    let precondition = 2.0 * eta * l * e_f * e_f <= 1.0;
    let holds = precondition.then_some(max_ratio <= bound);
    Ok(LemmaOutcome { max_ratio, bound, holds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algorithms::{glomo_client_update, ClientStreams, LocalOptions};
    use crate::numkit::{stream, Purpose, RngKey};
    use crate::problems::{ClientObjective, QuadraticClient};
    use crate::quantizer::QuantizerSpec;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::from_vec(v.to_vec())
    }

    #[test]
    fn ratio_of_zero_deviations_is_zero() {
        assert_eq!(alpha_ratio(&vec![pv(&[0.0, 0.0]); 3]).unwrap(), 0.0);
    }

    #[test]
    fn equal_deviations_give_n() {
        assert_eq!(alpha_ratio(&vec![pv(&[1.0, -2.0]); 7]).unwrap(), 7.0);
    }

    #[test]
    fn ratio_matches_naive_loops() {
        let mut rng = stream(RngKey::new(5, 0, 0, Purpose::Probe));
        for _ in 0..50 {
            let es: Vec<Vec<f64>> = (0..6).map(|_| (0..4).map(|_| rng.normal()).collect()).collect();
            let mut num = 0.0;
            for j in 0..4 {
                let s: f64 = es.iter().map(|e| e[j]).sum();
                num += s * s;
            }
            let den: f64 = es.iter().flat_map(|e| e.iter().map(|x| x * x)).sum();
            let got = alpha_ratio(&es.iter().map(|e| pv(e)).collect::<Vec<_>>()).unwrap();
            assert!((got - num / den).abs() <= 1e-10 * (num / den));
            assert!(got <= 6.0 + 1e-9);
        }
    }

    fn two_client_problem(c1: Vec<f64>, c2: Vec<f64>) -> FederatedProblem {
        let a = vec![1.0, 0.0, 0.0, 1.0];
        FederatedProblem::new(
            vec![
                ClientObjective::Quadratic(QuadraticClient::new(a.clone(), c1, Vec::new())),
                ClientObjective::Quadratic(QuadraticClient::new(a, c2, Vec::new())),
            ],
            None,
        )
        .unwrap()
    }

    #[test]
    fn identical_clients_have_zero_alpha_and_bcd() {
        let p = two_client_problem(vec![1.0, 2.0], vec![1.0, 2.0]);
        let traj = vec![pv(&[0.0, 0.0]), pv(&[0.5, 0.5])];
        let probe = alpha_estimate(0, &[traj.clone(), traj], &p).unwrap();
        assert_eq!(probe.alpha_hat, 0.0);
        let bcd = bcd_estimate(&p, &pv(&[0.3, -0.1])).unwrap();
        assert_eq!((bcd.mean_sq, bcd.max_sq), (0.0, 0.0));
    }

    #[test]
    fn opposite_gradients_bcd() {
        // Identity Hessians, centres +c and -c: at w = 0 the client gradients
        // are -c and +c, the global gradient is 0.
        let p = two_client_problem(vec![1.0, 2.0], vec![-1.0, -2.0]);
        let bcd = bcd_estimate(&p, &pv(&[0.0, 0.0])).unwrap();
        assert_eq!(bcd.mean_sq, 5.0);
        assert_eq!(bcd.max_sq, 5.0);
    }

    #[test]
    fn alpha_needs_every_client() {
        let p = two_client_problem(vec![1.0, 2.0], vec![-1.0, -2.0]);
        assert!(alpha_estimate(0, &[vec![pv(&[0.0, 0.0])]], &p).is_err());
    }

    fn lemma_case(wk: &[f64], wp: &[f64], eta: f64, e: usize) -> LemmaOutcome {
        let q = QuadraticClient::new(vec![2.0, 0.3, 0.3, 1.0], vec![0.4, -0.7], Vec::new());
        let opts = LocalOptions { eta, local_steps: e, damping: 1.0, momentum: 0.0, batch_size: None, anchor_batch: None };
        let out = glomo_client_update(&q, 0, &pv(wk), &pv(wp), &opts, &QuantizerSpec::identity(), &mut ClientStreams::for_round(0, 0, 0)).unwrap();
        drift_lemma_monitor(&[out], &pv(wk), &pv(wp), eta, q.smoothness(), e).unwrap()
    }

    #[test]
    fn lemma_identical_anchors() {
        let out = lemma_case(&[1.0, 1.0], &[1.0, 1.0], 0.02, 3);
        assert_eq!(out.max_ratio, 0.0);
        assert_eq!(out.holds, Some(true));
    }

    #[test]
    fn lemma_single_step_is_smoothness() {
        let eta = 0.1;
        let out = lemma_case(&[1.0, 0.0], &[0.0, 2.0], eta, 1);
        // E = 1: the bound is 4 e eta L, and smoothness alone gives eta L.
        assert!(out.max_ratio <= out.bound / (4.0 * std::f64::consts::E) + 1e-12);
        assert!(eta > 0.0);
        assert_eq!(out.holds, Some(true));
    }

    #[test]
    fn lemma_precondition_unmet() {
        let out = lemma_case(&[1.0, 0.0], &[0.0, 2.0], 0.2, 5);
        assert!(!out.precondition_met());
    }
}
