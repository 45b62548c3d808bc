//! Parameter sweeps over zipped configuration axes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::par::try_map_ordered;

use super::{parse_config, read_records, run_to_dir, HarnessError, RunSummary};

/// One swept configuration key, such as `hyper.beta`, with its values.
#[derive(Debug, Clone, PartialEq)]
pub struct Axis {
    pub path: String,
    pub values: Vec<toml::Value>,
}

impl Axis {
    /// Parses comma separated command-line values.
    pub fn parse(path: &str, values: &str) -> Self {
        Self {
            path: path.to_string(),
            values: values.split(',').map(|v| parse_axis_value(v.trim())).collect(),
        }
    }
}

/// Reads a command-line value as an integer, float, boolean or string, in
/// that order.
pub fn parse_axis_value(text: &str) -> toml::Value {
    if let Ok(i) = text.parse::<i64>() {
        toml::Value::Integer(i)
    } else if let Ok(f) = text.parse::<f64>() {
        toml::Value::Float(f)
    } else if let Ok(b) = text.parse::<bool>() {
        toml::Value::Boolean(b)
    } else {
        toml::Value::String(text.to_string())
    }
}

#[derive(Debug, Clone)]
pub struct SweepRun {
    pub dir: PathBuf,
    /// Axis values as written into the run's configuration.
    pub labels: Vec<String>,
    pub seed: Option<u64>,
    pub summary: RunSummary,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub runs: Vec<SweepRun>,
    pub merged: PathBuf,
    /// Per-round mean and standard deviation across seeds, when seeds were
    /// given.
    pub stats: Option<PathBuf>,
}

fn set_path(table: &mut toml::Table, path: &str, value: toml::Value) -> Result<(), HarnessError> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(HarnessError::config(path, "malformed axis path"));
    }
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| HarnessError::config(path, format!("`{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn label(value: &toml::Value) -> String {
    match value {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn sanitize(text: &str) -> String {
    text.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect()
}

struct Point {
    text: String,
    dir: PathBuf,
    labels: Vec<String>,
    seed: Option<u64>,
}

fn plan(base: &toml::Table, axes: &[Axis], seeds: &[u64], out_dir: &Path) -> Result<Vec<Point>, HarnessError> {
    let len = axes.first().map_or(1, |a| a.values.len());
    for a in axes {
        if a.values.is_empty() {
            return Err(HarnessError::config(&a.path, "axis has no values"));
        }
        if a.values.len() != len {
            return Err(HarnessError::config(
                &a.path,
                format!("axes are zipped and must have equal lengths ({} vs {len})", a.values.len()),
            ));
        }
        if !seeds.is_empty() && a.path == "seed" {
            return Err(HarnessError::config("seed", "use either a seed axis or a seed list"));
        }
    }
    let seed_list: Vec<Option<u64>> = if seeds.is_empty() { vec![None] } else { seeds.iter().map(|&s| Some(s)).collect() };
    let mut points = Vec::new();
    for i in 0..len {
        for &seed in &seed_list {
            let mut table = base.clone();
            let mut labels = Vec::with_capacity(axes.len());
            for a in axes {
                set_path(&mut table, &a.path, a.values[i].clone())?;
                labels.push(label(&a.values[i]));
            }
            if let Some(s) = seed {
                let s = i64::try_from(s).map_err(|_| HarnessError::config("seed", "seed must fit in i64"))?;
                table.insert("seed".into(), toml::Value::Integer(s));
            }
            let mut name = format!("{:03}", points.len());
            for l in &labels {
                name.push('_');
                name.push_str(&sanitize(l));
            }
            if let Some(s) = seed {
                name.push_str(&format!("_seed{s}"));
            }
            points.push(Point {
                text: toml::to_string(&table).expect("tables serialize"),
                dir: out_dir.join(name),
                labels,
                seed,
            });
        }
    }
    Ok(points)
}

fn write_merged(path: &Path, axes: &[Axis], runs: &[SweepRun]) -> Result<(), HarnessError> {
    let csv_err = |e: csv::Error| HarnessError::Format { path: path.to_path_buf(), message: e.to_string() };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header: Vec<String> = vec!["run".into()];
    header.extend(axes.iter().map(|a| a.path.clone()));
    header.extend(["seed", "k", "loss", "grad_sq_norm", "cumulative_bits", "bits_norm", "status"].map(String::from));
    w.write_record(&header).map_err(csv_err)?;
    for run in runs {
        let name = run.dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let scale = (run.summary.dim * run.summary.clients_per_round) as f64;
        for rec in read_records(&run.dir)? {
            let mut row = vec![name.clone()];
            row.extend(run.labels.iter().cloned());
            row.push(run.summary.seed.to_string());
            row.push(rec.k.to_string());
            row.push(rec.loss.to_string());
            row.push(rec.grad_sq_norm.to_string());
            row.push(rec.cumulative_bits.to_string());
            row.push((rec.cumulative_bits as f64 / scale).to_string());
            row.push(format!("{:?}", rec.status).to_lowercase());
            w.write_record(&row).map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Groups runs by every axis except `seed` and writes per-round mean and
/// sample standard deviation.
fn write_stats(path: &Path, axes: &[Axis], runs: &[SweepRun]) -> Result<(), HarnessError> {
    let keep: Vec<usize> = (0..axes.len()).filter(|&i| axes[i].path != "seed").collect();
    // (axis labels, k) -> per-seed values of loss, grad_sq_norm, bits_norm
    let mut groups: BTreeMap<(Vec<String>, usize), Vec<[f64; 3]>> = BTreeMap::new();
    for run in runs {
        let scale = (run.summary.dim * run.summary.clients_per_round) as f64;
        let key: Vec<String> = keep.iter().map(|&i| run.labels[i].clone()).collect();
        for rec in read_records(&run.dir)? {
            groups
                .entry((key.clone(), rec.k))
                .or_default()
                .push([rec.loss, rec.grad_sq_norm, rec.cumulative_bits as f64 / scale]);
        }
    }
    let csv_err = |e: csv::Error| HarnessError::Format { path: path.to_path_buf(), message: e.to_string() };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header: Vec<String> = keep.iter().map(|&i| axes[i].path.clone()).collect();
    header.extend(
        ["k", "seeds", "loss_mean", "loss_std", "grad_sq_norm_mean", "grad_sq_norm_std", "bits_norm_mean", "bits_norm_std"]
            .map(String::from),
    );
    w.write_record(&header).map_err(csv_err)?;
    for ((labels, k), vals) in &groups {
        let mut row = labels.clone();
        row.push(k.to_string());
        row.push(vals.len().to_string());
        for j in 0..3 {
            let col: Vec<f64> = vals.iter().map(|v| v[j]).collect();
            let (m, s) = mean_std(&col);
            row.push(m.to_string());
            row.push(s.to_string());
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

/// Runs every zipped point of `axes`, once per entry of `seeds` (or once
/// with the configured seed when `seeds` is empty), into numbered
/// directories under `out_dir`. Writes `merged.csv` and, when seeds vary
/// through `seeds` or a `seed` axis, `merged_stats.csv`.
pub fn sweep(
    base_text: &str,
    base_dir: Option<&Path>,
    axes: &[Axis],
    seeds: &[u64],
    parallel: bool,
    out_dir: &Path,
) -> Result<SweepOutcome, HarnessError> {
    parse_config(base_text, base_dir)?;
    let base: toml::Table = base_text
        .parse()
        .map_err(|e: toml::de::Error| HarnessError::config("<document>", e.to_string()))?;
    let points = plan(&base, axes, seeds, out_dir)?;
    let configs = points
        .iter()
        .map(|p| {
            let mut cfg = parse_config(&p.text, base_dir)?;
            // Runs already execute side by side.
            if parallel {
                cfg.parallel = false;
            }
            Ok(cfg)
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    fs::create_dir_all(out_dir).map_err(|e| HarnessError::io(out_dir, e))?;

    let jobs: Vec<(usize, &super::RunConfig)> = configs.iter().enumerate().collect();
    let reports = try_map_ordered(parallel, &jobs, |(i, cfg)| run_to_dir(cfg, &points[*i].dir))?;
    let runs: Vec<SweepRun> = points
        .into_iter()
        .zip(reports)
        .map(|(p, r)| SweepRun { dir: p.dir, labels: p.labels, seed: p.seed, summary: r.summary })
        .collect();

    let merged = out_dir.join("merged.csv");
    write_merged(&merged, axes, &runs)?;
    let stats = if seeds.is_empty() && !axes.iter().any(|a| a.path == "seed") {
        None
    } else {
        let path = out_dir.join("merged_stats.csv");
        write_stats(&path, axes, &runs)?;
        Some(path)
    };
    Ok(SweepOutcome { runs, merged, stats })
}
