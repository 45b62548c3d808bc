//! Single runs written to a directory.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::algorithms::{Algorithm, RoundRecord, RoundStatus, RunStatus, SCHEMA_VERSION};
use crate::numkit::{stream, Purpose, RngKey};
use crate::theory::sample_eval_iterate;

use super::export::write_plot_csv;
use super::{prepare, HarnessError, HyperparamSource, Prepared, RunConfig, TheoryReport};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaSummary {
    pub probes: usize,
    pub min: f64,
    pub median: f64,
    pub max: f64,
    /// Largest alpha over `n`.
    pub max_over_n: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LemmaSummary {
    pub checked: usize,
    pub held: usize,
    pub precondition_unmet: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoremCheck {
    pub bound: f64,
    pub avg_grad_sq_norm: f64,
    pub holds: bool,
}

/// Round drawn from the theorem's evaluation distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalIterate {
    pub k: usize,
    pub grad_sq_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub v: u32,
    pub algorithm: Algorithm,
    pub status: RunStatus,
    pub seed: u64,
    pub rounds_requested: usize,
    pub rounds_recorded: usize,
    pub dim: usize,
    pub clients: usize,
    pub clients_per_round: usize,
    pub smoothness: f64,
    pub smoothness_is_surrogate: bool,
    pub f0: f64,
    #[serde(with = "crate::serde_float")]
    pub final_loss: f64,
    #[serde(with = "crate::serde_float")]
    pub final_grad_sq_norm: f64,
    #[serde(with = "crate::serde_float")]
    pub min_grad_sq_norm: f64,
    #[serde(with = "crate::serde_float")]
    pub avg_grad_sq_norm: f64,
    pub total_bits_up: u64,
    pub total_bits_down: u64,
    pub alpha: Option<AlphaSummary>,
    pub alpha_note: Option<String>,
    pub lemma: Option<LemmaSummary>,
    pub theory: Option<TheoryReport>,
    pub theorem_check: Option<TheoremCheck>,
    pub eval_iterate: Option<EvalIterate>,
    /// Not part of the deterministic outputs.
    pub wall_time_secs: f64,
}

/// Outputs of a finished run.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub dir: PathBuf,
    pub summary: RunSummary,
    pub records: Vec<RoundRecord>,
}

fn median(sorted: &[f64]) -> f64 {
    let m = sorted.len();
    if m % 2 == 1 {
        sorted[m / 2]
    } else {
        0.5 * (sorted[m / 2 - 1] + sorted[m / 2])
    }
}

fn summarize(p: &Prepared, out: &crate::algorithms::RunOutput, wall: f64) -> RunSummary {
    let ok: Vec<&RoundRecord> = out.records.iter().filter(|r| r.status == RoundStatus::Ok).collect();
    let grads: Vec<f64> = ok.iter().map(|r| r.grad_sq_norm).collect();
    let avg = if grads.is_empty() { f64::NAN } else { grads.iter().sum::<f64>() / grads.len() as f64 };
    let min = grads.iter().copied().fold(f64::INFINITY, f64::min);
    let n = p.problem.num_clients();

    let mut alphas: Vec<f64> = out.records.iter().filter_map(|r| r.alpha_hat).collect();
    alphas.sort_by(f64::total_cmp);
    let alpha = (!alphas.is_empty()).then(|| AlphaSummary {
        probes: alphas.len(),
        min: alphas[0],
        median: median(&alphas),
        max: alphas[alphas.len() - 1],
        max_over_n: alphas[alphas.len() - 1] / n as f64,
    });
    let alpha_note = alpha.map(|_| {
        "alpha is computed from pre-quantization local parameters of a full-participation shadow pass".to_string()
    });

    let lemmas: Vec<_> = out.records.iter().filter_map(|r| r.lemma).collect();
    let lemma = (!lemmas.is_empty()).then(|| LemmaSummary {
        checked: lemmas.iter().filter(|l| l.precondition_met()).count(),
        held: lemmas.iter().filter(|l| l.holds == Some(true)).count(),
        precondition_unmet: lemmas.iter().filter(|l| !l.precondition_met()).count(),
    });

    let complete = matches!(out.status, RunStatus::Completed);
    let theorem_check = match (&p.theory, complete) {
        (Some(t), true) => Some(TheoremCheck {
            bound: t.rate_bound,
            avg_grad_sq_norm: avg,
            holds: avg <= t.rate_bound,
        }),
        _ => None,
    };
    let eval_iterate = match (&p.theory, complete) {
        (Some(t), true) if p.config.hyperparam_source == HyperparamSource::Theorem => {
            let mut rng = stream(RngKey::new(p.config.seed, 0, u64::MAX, Purpose::EvalIterate));
            sample_eval_iterate(t.zeta, out.records.len(), &mut rng)
                .ok()
                .map(|k| EvalIterate { k, grad_sq_norm: out.records[k].grad_sq_norm })
        }
        _ => None,
    };

    RunSummary {
        v: SCHEMA_VERSION,
        algorithm: p.config.algorithm,
        status: out.status,
        seed: p.config.seed,
        rounds_requested: p.config.hyper.rounds,
        rounds_recorded: out.records.len(),
        dim: p.problem.dim(),
        clients: n,
        clients_per_round: p.config.hyper.clients_per_round,
        smoothness: p.problem.smoothness_bound(),
        smoothness_is_surrogate: p.problem.smoothness_is_surrogate(),
        f0: p.f0,
        final_loss: out.final_loss,
        final_grad_sq_norm: out.final_grad_sq_norm,
        min_grad_sq_norm: min,
        avg_grad_sq_norm: avg,
        total_bits_up: out.records.last().map_or(0, |r| r.cumulative_bits),
        total_bits_down: out.records.last().map_or(0, |r| r.cumulative_bits_down),
        alpha,
        alpha_note,
        lemma,
        theory: p.theory.clone(),
        theorem_check,
        eval_iterate,
        wall_time_secs: wall,
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), HarnessError> {
    fs::write(path, contents).map_err(|e| HarnessError::io(path, e))
}

/// Writes `records` as one JSON object per line.
pub(crate) fn write_jsonl(path: &Path, records: &[RoundRecord]) -> Result<(), HarnessError> {
    let file = fs::File::create(path).map_err(|e| HarnessError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("round records serialize");
        writeln!(w, "{line}").map_err(|e| HarnessError::io(path, e))?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

/// Runs `cfg` and writes `config.echo`, `rounds.jsonl`, `summary.json` and
/// `plot.csv` into `dir`. A diverged run still writes every file.
pub fn run_to_dir(cfg: &RunConfig, dir: &Path) -> Result<RunReport, HarnessError> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    write_file(&dir.join("config.echo"), cfg.to_toml().as_bytes())?;
    let prepared = prepare(cfg)?;
    let start = Instant::now();
    let out = prepared.run()?;
    let wall = start.elapsed().as_secs_f64();
    let summary = summarize(&prepared, &out, wall);

    write_jsonl(&dir.join("rounds.jsonl"), &out.records)?;
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_file(&dir.join("summary.json"), json.as_bytes())?;
    let label = dir.file_name().map_or_else(|| "run".to_string(), |s| s.to_string_lossy().into_owned());
    write_plot_csv(
        &dir.join("plot.csv"),
        &[(label, summary.dim, summary.clients_per_round, out.records.as_slice())],
    )?;
    Ok(RunReport { dir: dir.to_path_buf(), summary, records: out.records })
}
