//! Step sizes, momentum weights and rate bounds prescribed by the
//! convergence theorems, plus the evaluation-iterate distribution.

use std::f64::consts::E as EULER;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numkit::RngStream;

#[derive(Debug, Error, PartialEq)]
pub enum TheoryError {
    #[error("invalid theory inputs: {0}")]
    Invalid(String),
    #[error(
        "beta = {beta} is not below 1; the local-step range condition E + 1 <= {upper} \
         (here E + 1 = {e_plus_1}) is likely violated"
    )]
    BetaTooLarge { beta: f64, e_plus_1: f64, upper: f64 },
    #[error("degenerate constant: {0}")]
    Degenerate(String),
}

/// Problem and protocol constants entering the bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryInputs {
    /// Smoothness `L`.
    pub l: f64,
    pub n: usize,
    pub r: usize,
    /// Local steps `E`.
    pub e: usize,
    /// Rounds `K`.
    pub k: usize,
    /// Quantizer variance factor.
    pub q: f64,
    /// Heterogeneity constant, at most `n`.
    pub alpha: f64,
    /// `f(w_0)`.
    pub f0: f64,
    /// Local stochastic-gradient variance (FedAvg bound only).
    pub sigma2: f64,
}

impl TheoryInputs {
    pub fn validate(&self) -> Result<(), TheoryError> {
        let bad = |m: &str| Err(TheoryError::Invalid(m.to_string()));
        if !(self.l > 0.0 && self.l.is_finite()) {
            return bad("L must be positive and finite");
        }
        if self.n == 0 || self.r == 0 || self.r > self.n {
            return bad("need 1 <= r <= n");
        }
        if self.e == 0 || self.k == 0 {
            return bad("E and K must be at least 1");
        }
        if !(self.q >= 0.0 && self.q.is_finite()) {
            return bad("q must be nonnegative");
        }
        if !(self.alpha > 0.0 && self.alpha <= self.n as f64) {
            return bad("alpha must lie in (0, n]");
        }
        if !(self.f0 >= 0.0 && self.f0.is_finite()) {
            return bad("f0 must be nonnegative");
        }
        if !(self.sigma2 >= 0.0 && self.sigma2.is_finite()) {
            return bad("sigma2 must be nonnegative");
        }
        Ok(())
    }

    /// `(n - r) / (r (n - 1))`, zero under full participation.
    pub fn sampling_term(&self) -> f64 {
        if self.r == self.n {
            0.0
        } else {
            (self.n - self.r) as f64 / (self.r as f64 * (self.n as f64 - 1.0))
        }
    }

    /// `q/n + (1 + q)(n - r)/(r(n - 1))`.
    fn compression_term(&self) -> f64 {
        self.q / self.n as f64 + (1.0 + self.q) * self.sampling_term()
    }

    /// The bracket shared by the FedGLOMO step size and rate:
    /// `(1/n)(alpha + 4/E) + 800 e^2 (1+q)(E+1)^2 (q/n + (1+q)(n-r)/(r(n-1)))`.
    pub fn glomo_bracket(&self) -> f64 {
        let (n, e) = (self.n as f64, self.e as f64);
        (self.alpha + 4.0 / e) / n
            + 800.0 * EULER * EULER * (1.0 + self.q) * (e + 1.0).powi(2) * self.compression_term()
    }
}

/// `1 / (6 L E K^{1/3} bracket^{1/3})`.
pub fn glomo_eta(i: &TheoryInputs) -> Result<f64, TheoryError> {
    i.validate()?;
    let k = i.k as f64;
    Ok(1.0 / (6.0 * i.l * i.e as f64 * k.cbrt() * i.glomo_bracket().cbrt()))
}

/// `160 e^2 (1+q) eta^2 L^2 E^2 (E+1)^2`, rejected when not below 1.
pub fn glomo_beta(i: &TheoryInputs, eta: f64) -> Result<f64, TheoryError> {
    i.validate()?;
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(TheoryError::Invalid("eta must be positive".into()));
    }
    let e = i.e as f64;
    let beta = 160.0 * EULER * EULER * (1.0 + i.q) * (eta * i.l * e * (e + 1.0)).powi(2);
    if beta >= 1.0 {
        return Err(TheoryError::BetaTooLarge {
            beta,
            e_plus_1: e + 1.0,
            upper: glomo_range(i).1,
        });
    }
    Ok(beta)
}

/// Lower and upper limits on `E + 1` under which the FedGLOMO step sizes
/// are guaranteed consistent. Either may be infinite.
pub fn glomo_range(i: &TheoryInputs) -> (f64, f64) {
    let k = i.k as f64;
    let c = i.compression_term();
    let lower = if c == 0.0 {
        f64::INFINITY
    } else {
        (1.0 / k.cbrt()) / (1200.0 * EULER * EULER * (1.0 + i.q) * c)
    };
    let upper = (1.0 + i.q).sqrt() * i.sampling_term() * k / 3.0;
    (lower, upper)
}

/// Human-readable notes on violated range conditions. These never fail a run.
pub fn glomo_range_warnings(i: &TheoryInputs) -> Vec<String> {
    let (lower, upper) = glomo_range(i);
    let e1 = i.e as f64 + 1.0;
    let mut out = Vec::new();
    if e1 < lower {
        out.push(format!("E + 1 = {e1} is below the lower range limit {lower:.6e}"));
    }
    if i.r < i.n && e1 > upper {
        out.push(format!("E + 1 = {e1} exceeds the upper range limit {upper:.6e}"));
    }
    out
}

/// `39 L f0 / K^{2/3} * bracket^{1/3}`.
pub fn glomo_rate_bound(i: &TheoryInputs) -> Result<f64, TheoryError> {
    i.validate()?;
    let k = i.k as f64;
    Ok(39.0 * i.l * i.f0 / k.cbrt().powi(2) * i.glomo_bracket().cbrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LomoStep {
    pub eta: f64,
    pub b: f64,
    pub zeta: f64,
}

/// `B = q/n + 4(1+q)(n-r)/(r(n-1))`, `eta = 1/(8 L E sqrt(B K))` and the
/// evaluation-iterate parameter `zeta`.
pub fn lomo_eta(i: &TheoryInputs) -> Result<LomoStep, TheoryError> {
    i.validate()?;
    let (n, e, k) = (i.n as f64, i.e as f64, i.k as f64);
    let b = i.q / n + 4.0 * (1.0 + i.q) * i.sampling_term();
    if b == 0.0 {
        return Err(TheoryError::Degenerate(
            "B = 0 (no compression and full participation)".into(),
        ));
    }
    let eta = 1.0 / (8.0 * i.l * e * (b * k).sqrt());
    let zeta = 1.0 / (4.0 * k) + (i.alpha + 4.0 / e) / n / (16.0 * (b * k).powf(1.5));
    Ok(LomoStep { eta, b, zeta })
}

/// `64 sqrt(B) L f0 / sqrt(K)`.
pub fn lomo_rate_bound(i: &TheoryInputs) -> Result<f64, TheoryError> {
    let step = lomo_eta(i)?;
    Ok(64.0 * step.b.sqrt() * i.l * i.f0 / (i.k as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FedavgStep {
    pub eta: f64,
    pub zeta: f64,
    /// `(n-r)/(6r(n-1)) + 4 alpha/(9n)`.
    pub c: f64,
}

fn fedavg_constant(i: &TheoryInputs) -> f64 {
    i.sampling_term() / 6.0 + 4.0 * i.alpha / (9.0 * i.n as f64)
}

/// `eta = 1/(L E sqrt(3 c K))` and `zeta = eta^2 L^2 E^2 c`.
pub fn fedavg_eta(i: &TheoryInputs) -> Result<FedavgStep, TheoryError> {
    i.validate()?;
    let c = fedavg_constant(i);
    if !(c > 0.0 && c.is_finite()) {
        return Err(TheoryError::Degenerate(format!("FedAvg constant c = {c}")));
    }
    let (e, k) = (i.e as f64, i.k as f64);
    let eta = 1.0 / (i.l * e * (3.0 * c * k).sqrt());
    let zeta = (eta * i.l * e).powi(2) * c;
    Ok(FedavgStep { eta, zeta, c })
}

/// Right-hand side of the FedAvg rate, including the `sigma2` terms.
pub fn fedavg_rate_bound(i: &TheoryInputs) -> Result<f64, TheoryError> {
    let step = fedavg_eta(i)?;
    let (n, r, e, k) = (i.n as f64, i.r as f64, i.e as f64, i.k as f64);
    let c = step.c;
    let descent = 3.0 * i.l * i.f0 / k.sqrt() * (3.0 * c).sqrt();
    let sampling = if i.r == i.n { 0.0 } else { (n - r) / (3.0 * r * (n - 1.0)) };
    let local = (1.0 / (r * e) + sampling) * i.sigma2 / (3.0 * c * k).sqrt();
    let drift = (1.0 / e + 8.0 * i.alpha / 9.0) * i.sigma2 / (3.0 * n * c * k);
    Ok(descent + local + drift)
}

/// `P(k) ∝ (1 + zeta)^{K-1-k}` over `k = 0..K`, evaluated in the log domain.
pub fn eval_iterate_pmf(zeta: f64, k: usize) -> Result<Vec<f64>, TheoryError> {
    if !(zeta >= 0.0 && zeta.is_finite()) || k == 0 {
        return Err(TheoryError::Invalid("need zeta >= 0 and K >= 1".into()));
    }
    let log_base = zeta.ln_1p();
    // Exponents are relative to the largest one, at k = 0.
    let weights: Vec<f64> = (0..k).map(|j| (-(j as f64) * log_base).exp()).collect();
    let total: f64 = weights.iter().sum();
    Ok(weights.into_iter().map(|w| w / total).collect())
}

/// Draws the evaluation round `k*` by inverting the cumulative distribution.
pub fn sample_eval_iterate(zeta: f64, k: usize, rng: &mut RngStream) -> Result<usize, TheoryError> {
    let pmf = eval_iterate_pmf(zeta, k)?;
    let u = rng.uniform();
    let mut acc = 0.0;
    for (j, p) in pmf.iter().enumerate() {
        acc += p;
        if u < acc {
            return Ok(j);
        }
    }
    Ok(k - 1)
}
