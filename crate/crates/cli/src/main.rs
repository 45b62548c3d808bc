use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use fedglomo::algorithms::RunStatus;
use fedglomo::harness::{
    export_plotdata, load_config, run_to_dir, sweep, verify_alpha, verify_lemma, verify_quantizer, Axis,
    HarnessError,
};

/// Federated optimization simulator.
///
/// Exit codes: 0 success, 1 configuration error, 2 divergence, 3 I/O or
/// missing records, 4 failed verification.
#[derive(Parser)]
#[command(name = "fedglomo", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configuration.
    Run {
        config: PathBuf,
        /// Output directory [default: runs/<config name>]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a configuration over zipped axes.
    Sweep {
        config: PathBuf,
        /// Dotted key path, e.g. hyper.beta. Repeat for zipped axes.
        #[arg(long, required = true)]
        axis: Vec<String>,
        /// Comma separated values, one list per --axis.
        #[arg(long, required = true, allow_hyphen_values = true)]
        values: Vec<String>,
        /// Repeat every point once per seed and report mean and std.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Execute runs concurrently.
        #[arg(long)]
        parallel: bool,
        /// Output directory [default: sweeps/<config name>]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a property of the configured setup.
    Verify {
        check: Check,
        config: PathBuf,
    },
    /// Combine run directories into one tidy CSV.
    Export {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        #[arg(long, default_value = "plot.csv")]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Check {
    Quantizer,
    Lemma,
    Alpha,
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "run".to_string(), |s| s.to_string_lossy().into_owned())
}

fn execute(cli: Cli) -> Result<u8, HarnessError> {
    match cli.command {
        Command::Run { config, out } => {
            let cfg = load_config(&config)?;
            let dir = out.unwrap_or_else(|| Path::new("runs").join(stem(&config)));
            let report = run_to_dir(&cfg, &dir)?;
            let s = &report.summary;
            println!("wrote {}", dir.display());
            println!(
                "rounds {} final grad_sq_norm {:.6e} avg {:.6e} bits up {}",
                s.rounds_recorded, s.final_grad_sq_norm, s.avg_grad_sq_norm, s.total_bits_up
            );
            if let Some(t) = &s.theorem_check {
                println!("theorem bound {:.6e} holds {}", t.bound, t.holds);
            }
            if let RunStatus::Diverged { round } = s.status {
                eprintln!("diverged at round {round}");
                return Ok(2);
            }
            Ok(0)
        }
        Command::Sweep { config, axis, values, seeds, parallel, out } => {
            if axis.len() != values.len() {
                return Err(HarnessError::config("--values", "give one --values list per --axis"));
            }
            let text = std::fs::read_to_string(&config).map_err(|e| HarnessError::io(&config, e))?;
            let axes: Vec<Axis> = axis.iter().zip(&values).map(|(a, v)| Axis::parse(a, v)).collect();
            let dir = out.unwrap_or_else(|| Path::new("sweeps").join(stem(&config)));
            let outcome = sweep(&text, config.parent(), &axes, &seeds, parallel, &dir)?;
            println!("{} runs, merged table {}", outcome.runs.len(), outcome.merged.display());
            if let Some(stats) = &outcome.stats {
                println!("seed statistics {}", stats.display());
            }
            let diverged = outcome.runs.iter().filter(|r| r.summary.status != RunStatus::Completed).count();
            if diverged > 0 {
                eprintln!("{diverged} runs diverged");
                return Ok(2);
            }
            Ok(0)
        }
        Command::Verify { check, config } => {
            let cfg = load_config(&config)?;
            let report = match check {
                Check::Quantizer => verify_quantizer(&cfg)?,
                Check::Lemma => verify_lemma(&cfg)?,
                Check::Alpha => verify_alpha(&cfg)?,
            };
            for line in &report.lines {
                println!("{}: {line}", report.check);
            }
            println!("{}: {}", report.check, if report.passed { "pass" } else { "FAIL" });
            report.into_result()?;
            Ok(0)
        }
        Command::Export { dirs, out } => {
            let rows = export_plotdata(&dirs, &out)?;
            println!("wrote {rows} rows to {}", out.display());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
