//! Standalone checks of the quantizer, the drift lemma and the alpha probe.

use crate::algorithms::Algorithm;
use crate::numkit::{sq_norm, stream, ParamVector, Purpose, RngKey, RngStream};
use crate::quantizer::{decode, payload_bits, quantize, to_wire, QuantizerSpec};

use super::{prepare, HarnessError, RunConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub check: &'static str,
    pub lines: Vec<String>,
    pub passed: bool,
}

impl VerifyReport {
    /// Converts a failed report into an error.
    pub fn into_result(self) -> Result<Self, HarnessError> {
        if self.passed {
            Ok(self)
        } else {
            Err(HarnessError::VerifyFailed(format!("{}: {}", self.check, self.lines.join("; "))))
        }
    }
}

fn probe_rng(seed: u64, id: u64) -> RngStream {
    stream(RngKey::new(seed, 0, id, Purpose::Probe))
}

fn random_vector(d: usize, rng: &mut RngStream) -> ParamVector {
    ParamVector::from_vec((0..d).map(|_| rng.normal()).collect())
}

/// Largest per-coordinate z-score of the empirical mean of `samples`
/// quantizations of `v` against `v`.
pub fn quantizer_unbiasedness(v: &ParamVector, spec: &QuantizerSpec, samples: usize, seed: u64) -> f64 {
    let d = v.dim();
    let mut sum = vec![0.0; d];
    let mut sum_sq = vec![0.0; d];
    let mut rng = stream(RngKey::new(seed, 0, 0, Purpose::Quantizer));
    for _ in 0..samples {
        let q = decode(&quantize(v, spec, &mut rng).expect("finite input")).expect("valid levels");
        for (i, x) in q.iter().enumerate() {
            sum[i] += x;
            sum_sq[i] += x * x;
        }
    }
    let m = samples as f64;
    let mut worst: f64 = 0.0;
    for i in 0..d {
        let mean = sum[i] / m;
        let var = (sum_sq[i] / m - mean * mean).max(0.0) * m / (m - 1.0);
        let se = (var / m).sqrt();
        let diff = (mean - v.as_slice()[i]).abs();
        let z = if se == 0.0 {
            if diff <= 1e-12 * v.norm() { 0.0 } else { f64::INFINITY }
        } else {
            diff / se
        };
        worst = worst.max(z);
    }
    worst
}

/// Empirical `E||Q(v) - v||^2 / (q ||v||^2)` over `samples` draws, where
/// `q` is the spec's variance factor. Values at or below one agree with the
/// variance bound.
pub fn quantizer_variance_ratio(v: &ParamVector, spec: &QuantizerSpec, samples: usize, seed: u64) -> f64 {
    let q = spec.variance_factor(v.dim());
    let norm_sq = sq_norm(v);
    if q == 0.0 || norm_sq == 0.0 {
        return 0.0;
    }
    let mut rng = stream(RngKey::new(seed, 0, 1, Purpose::Quantizer));
    let mut total = 0.0;
    for _ in 0..samples {
        let out = decode(&quantize(v, spec, &mut rng).expect("finite input")).expect("valid levels");
        total += sq_norm(&out.sub(v).expect("same dimension"));
    }
    total / samples as f64 / (q * norm_sq)
}

/// Unbiasedness, variance bound and wire length of the configured quantizer
/// at the problem's dimension.
pub fn verify_quantizer(cfg: &RunConfig) -> Result<VerifyReport, HarnessError> {
    let spec = cfg.quantizer.spec()?;
    let d = cfg.build_problem()?.dim();
    let mut lines = Vec::new();
    let mut passed = true;
    let mut rng = probe_rng(cfg.seed, 0);

    if spec.is_identity() {
        let v = random_vector(d, &mut rng);
        let q = quantize(&v, &spec, &mut rng).map_err(|e| HarnessError::config("quantizer", e.to_string()))?;
        let exact = decode(&q).map(|out| out == v).unwrap_or(false);
        passed &= exact && q.payload_bits() == 32 * d as u64;
        lines.push(format!("identity: exact = {exact}, bits = {} (32 d = {})", q.payload_bits(), 32 * d));
        return Ok(VerifyReport { check: "quantizer", lines, passed });
    }

    let v = random_vector(d, &mut rng);
    let z = quantizer_unbiasedness(&v, &spec, 20_000, cfg.seed);
    // Bonferroni-style allowance for d coordinates.
    let z_limit = 4.0 + (d as f64).ln().max(0.0).sqrt();
    let ok = z <= z_limit;
    passed &= ok;
    lines.push(format!("unbiasedness: max z = {z:.3} (limit {z_limit:.3}) {}", if ok { "ok" } else { "FAIL" }));

    let mut worst: f64 = 0.0;
    for id in 1..=20 {
        let v = random_vector(d, &mut probe_rng(cfg.seed, id));
        worst = worst.max(quantizer_variance_ratio(&v, &spec, 500, cfg.seed + id));
    }
    let ok = worst <= 1.05;
    passed &= ok;
    lines.push(format!(
        "variance: max E||Q(v)-v||^2 / (q ||v||^2) = {worst:.4} with q = {:.4} {}",
        spec.variance_factor(d),
        if ok { "ok" } else { "FAIL" }
    ));

    let q = quantize(&v, &spec, &mut rng).map_err(|e| HarnessError::config("quantizer", e.to_string()))?;
    let bits = q.payload_bits();
    let expected = payload_bits(d, &spec).exact;
    let bytes = to_wire(&q).len() as u64;
    let ok = bits == expected && bytes == bits.div_ceil(8);
    passed &= ok;
    lines.push(format!("wire: {bits} bits, {bytes} bytes, expected {expected} bits {}", if ok { "ok" } else { "FAIL" }));
    Ok(VerifyReport { check: "quantizer", lines, passed })
}

/// Runs FedGLOMO with the drift-lemma monitor on every round.
pub fn verify_lemma(cfg: &RunConfig) -> Result<VerifyReport, HarnessError> {
    if cfg.algorithm != Algorithm::Fedglomo {
        return Err(HarnessError::config("algorithm", "lemma verification needs fedglomo"));
    }
    let mut cfg = cfg.clone();
    cfg.probes.lemma_every = 1;
    let prepared = prepare(&cfg)?;
    let out = prepared.run()?;
    let outcomes: Vec<_> = out.records.iter().filter_map(|r| r.lemma).collect();
    let checked = outcomes.iter().filter(|o| o.precondition_met()).count();
    let failed: Vec<usize> = out
        .records
        .iter()
        .filter(|r| r.lemma.is_some_and(|o| o.holds == Some(false)))
        .map(|r| r.k)
        .collect();
    let worst = outcomes.iter().map(|o| o.max_ratio / o.bound).fold(0.0, f64::max);
    let mut lines = vec![format!(
        "{} rounds monitored, {checked} with the step-size precondition met, worst ratio / bound = {worst:.4}",
        outcomes.len()
    )];
    if checked == 0 {
        lines.push("precondition 2 eta L E^2 <= 1 never met; no verdict".to_string());
    }
    if !failed.is_empty() {
        lines.push(format!("bound exceeded in rounds {failed:?}"));
    }
    Ok(VerifyReport { check: "lemma", lines, passed: failed.is_empty() })
}

/// Runs with the alpha probe on every round and checks `alpha_hat <= n`.
pub fn verify_alpha(cfg: &RunConfig) -> Result<VerifyReport, HarnessError> {
    let mut cfg = cfg.clone();
    cfg.probes.alpha_every = 1;
    let prepared = prepare(&cfg)?;
    let n = prepared.problem.num_clients() as f64;
    let out = prepared.run()?;
    let mut alphas: Vec<(usize, f64)> = out.records.iter().filter_map(|r| r.alpha_hat.map(|a| (r.k, a))).collect();
    let over: Vec<usize> = alphas.iter().filter(|(_, a)| *a > n * (1.0 + 1e-9)).map(|(k, _)| *k).collect();
    alphas.sort_by(|a, b| a.1.total_cmp(&b.1));
    let mut lines = Vec::new();
    if let (Some(lo), Some(hi)) = (alphas.first(), alphas.last()) {
        let mid = alphas[alphas.len() / 2].1;
        lines.push(format!(
            "{} probes: min {:.4}, median {mid:.4}, max {:.4}, max / n = {:.4}",
            alphas.len(),
            lo.1,
            hi.1,
            hi.1 / n
        ));
    } else {
        lines.push("no rounds probed".to_string());
    }
    if !over.is_empty() {
        lines.push(format!("alpha_hat exceeds n = {n} in rounds {over:?}"));
    }
    Ok(VerifyReport { check: "alpha", lines, passed: over.is_empty() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::parse_config;

    fn cfg(extra: &str) -> RunConfig {
        parse_config(
            &format!("algorithm = \"fedglomo\"\n[problem]\nclients = 6\nfeatures = 4\n[hyper]\nrounds = 4\nclients_per_round = 3\nlocal_steps = 2\neta0 = 0.01\n{extra}"),
            None,
        )
        .unwrap()
    }

    #[test]
    fn quantizer_check_passes() {
        let report = verify_quantizer(&cfg("[quantizer]\nbits = 2\n")).unwrap();
        assert!(report.passed, "{:?}", report.lines);
        assert!(verify_quantizer(&cfg("")).unwrap().passed);
    }

    #[test]
    fn biased_sample_is_flagged() {
        let spec = QuantizerSpec::stochastic(1).unwrap();
        let v = ParamVector::from_vec(vec![1.0, 2.0, -0.5]);
        assert!(quantizer_unbiasedness(&v, &spec, 5_000, 1) < 5.0);
        assert!(quantizer_variance_ratio(&v, &spec, 2_000, 1) <= 1.05);
    }

    #[test]
    fn lemma_and_alpha_checks_pass() {
        let c = cfg("");
        assert!(verify_lemma(&c).unwrap().passed);
        let report = verify_alpha(&c).unwrap();
        assert!(report.passed, "{:?}", report.lines);
        assert!(report.lines[0].starts_with("4 probes"));
    }
}
