//! Tidy CSV export of per-round records.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::algorithms::{RoundRecord, RoundStatus};

use super::{HarnessError, RunSummary};

pub const PLOT_COLUMNS: [&str; 11] = [
    "run",
    "k",
    "loss",
    "grad_sq_norm",
    "bits_up",
    "bits_down",
    "cumulative_bits",
    "bits_norm",
    "eta_k",
    "alpha_hat",
    "status",
];

const HEADER_COMMENT: &str = "\
# run: run directory name
# k: round index; metrics are taken at w_k before the round's update
# loss: global objective f(w_k)
# grad_sq_norm: squared norm of the exact global gradient at w_k
# bits_up, bits_down: bits sent to and from the server in round k
# cumulative_bits: uplink bits through round k
# bits_norm: cumulative_bits / (d * r)
# eta_k: local learning rate of round k
# alpha_hat: measured heterogeneity ratio, empty when not probed
# status: ok or diverged
";

fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        v.to_string()
    } else {
        String::new()
    }
}

/// Writes the tidy table for `(run, d, r, records)` groups.
pub fn write_plot_csv(
    path: &Path,
    runs: &[(String, usize, usize, &[RoundRecord])],
) -> Result<usize, HarnessError> {
    let io = |e: std::io::Error| HarnessError::io(path, e);
    let mut file = fs::File::create(path).map_err(io)?;
    file.write_all(HEADER_COMMENT.as_bytes()).map_err(io)?;
    let mut w = csv::Writer::from_writer(file);
    let csv_err = |e: csv::Error| HarnessError::Format { path: path.to_path_buf(), message: e.to_string() };
    w.write_record(PLOT_COLUMNS).map_err(csv_err)?;
    let mut rows = 0;
    for (run, d, r, records) in runs {
        let scale = (*d * *r) as f64;
        for rec in records.iter() {
            w.write_record([
                run.clone(),
                rec.k.to_string(),
                fmt_f64(rec.loss),
                fmt_f64(rec.grad_sq_norm),
                rec.bits_up.to_string(),
                rec.bits_down.to_string(),
                rec.cumulative_bits.to_string(),
                fmt_f64(rec.cumulative_bits as f64 / scale),
                fmt_f64(rec.eta_k),
                rec.alpha_hat.map(fmt_f64).unwrap_or_default(),
                match rec.status {
                    RoundStatus::Ok => "ok".to_string(),
                    RoundStatus::Diverged => "diverged".to_string(),
                },
            ])
            .map_err(csv_err)?;
            rows += 1;
        }
    }
    w.flush().map_err(io)?;
    Ok(rows)
}

/// Reads `rounds.jsonl` from a run directory.
pub fn read_records(dir: &Path) -> Result<Vec<RoundRecord>, HarnessError> {
    let path = dir.join("rounds.jsonl");
    let text = fs::read_to_string(&path).map_err(|e| HarnessError::io(&path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| HarnessError::Format {
                path: path.clone(),
                message: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

fn read_summary(dir: &Path) -> Result<RunSummary, HarnessError> {
    let path = dir.join("summary.json");
    let text = fs::read_to_string(&path).map_err(|e| HarnessError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Format { path, message: e.to_string() })
}

fn gaps(records: &[RoundRecord], expected: usize) -> Vec<usize> {
    let mut seen = vec![false; expected.max(records.len())];
    for r in records {
        if r.k < seen.len() {
            seen[r.k] = true;
        }
    }
    seen.iter().take(expected).enumerate().filter(|(_, s)| !**s).map(|(k, _)| k).collect()
}

/// Combines the records of finished runs into one tidy CSV at `out` and
/// returns the number of data rows. Any run whose records do not cover
/// rounds `0..rounds_recorded` is reported as an error.
pub fn export_plotdata(dirs: &[PathBuf], out: &Path) -> Result<usize, HarnessError> {
    let mut loaded = Vec::with_capacity(dirs.len());
    let mut problems = Vec::new();
    for dir in dirs {
        let summary = read_summary(dir)?;
        let records = read_records(dir)?;
        let missing = gaps(&records, summary.rounds_recorded);
        if !missing.is_empty() {
            let list: Vec<String> = missing.iter().map(|k| k.to_string()).collect();
            problems.push(format!("{}: k = {}", dir.display(), list.join(", ")));
        }
        let name = dir
            .file_name()
            .map_or_else(|| dir.display().to_string(), |s| s.to_string_lossy().into_owned());
        loaded.push((name, summary.dim, summary.clients_per_round, records));
    }
    if !problems.is_empty() {
        return Err(HarnessError::Gaps(problems.join("; ")));
    }
    let groups: Vec<_> = loaded.iter().map(|(n, d, r, recs)| (n.clone(), *d, *r, recs.as_slice())).collect();
    write_plot_csv(out, &groups)
}
