//! Configuration, run orchestration, sweeps, verification routines and
//! plot-data export.

mod config;
mod export;
mod run;
mod sweep;
mod verify;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::algorithms::{run_experiment, AlgoError, Algorithm, Experiment, RunOutput};
use crate::numkit::ParamVector;
use crate::problems::{FederatedProblem, ProblemError};
use crate::quantizer::QuantizerSpec;
use crate::theory::{
    fedavg_eta, fedavg_rate_bound, glomo_beta, glomo_eta, glomo_range_warnings, glomo_rate_bound,
    lomo_eta, lomo_rate_bound, TheoryError, TheoryInputs,
};

pub use config::{
    load_config, parse_config, HyperparamSource, ProblemConfig, QuantizerConfig, RunConfig,
    TheoryConfig,
};
pub use export::{export_plotdata, read_records, write_plot_csv, PLOT_COLUMNS};
pub use run::{run_to_dir, AlphaSummary, EvalIterate, LemmaSummary, RunReport, RunSummary, TheoremCheck};
pub use sweep::{parse_axis_value, sweep, Axis, SweepOutcome, SweepRun};
pub use verify::{
    quantizer_unbiasedness, quantizer_variance_ratio, verify_alpha, verify_lemma, verify_quantizer,
    VerifyReport,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Algo(#[from] AlgoError),
    #[error(transparent)]
    Theory(#[from] TheoryError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
    #[error("missing records: {0}")]
    Gaps(String),
    #[error("verification failed: {0}")]
    VerifyFailed(String),
}

impl HarnessError {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Config { path: path.into(), message: message.into() }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }

    /// Process exit code: 1 configuration, 3 I/O, 4 failed verification.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Problem(ProblemError::Io(_) | ProblemError::Csv { .. }) => 3,
            Self::Io { .. } | Self::Format { .. } | Self::Gaps(_) => 3,
            Self::VerifyFailed(_) => 4,
            _ => 1,
        }
    }
}

/// Step sizes taken from the theorems, with the inputs that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub inputs: TheoryInputs,
    pub alpha_source: String,
    pub eta: f64,
    pub beta: Option<f64>,
    pub zeta: f64,
    pub rate_bound: f64,
    pub warnings: Vec<String>,
}

/// A configuration with its problem built and theorem step sizes applied.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub config: RunConfig,
    pub problem: FederatedProblem,
    pub quantizer: QuantizerSpec,
    pub w0: ParamVector,
    /// `f(w_0)`.
    pub f0: f64,
    pub theory: Option<TheoryReport>,
}

impl Prepared {
    pub fn experiment(&self) -> Experiment<'_> {
        let mut exp = Experiment::new(
            &self.problem,
            self.config.algorithm,
            self.config.hyper,
            self.quantizer,
            self.config.seed,
        );
        exp.parallel = self.config.parallel;
        exp.probes = self.config.probes;
        exp.combine_uncompressed = self.config.combine_uncompressed;
        exp.w0 = Some(self.w0.clone());
        exp
    }

    pub fn run(&self) -> Result<RunOutput, HarnessError> {
        Ok(run_experiment(&self.experiment())?)
    }
}

fn theory_report(cfg: &RunConfig, problem: &FederatedProblem, q: f64, f0: f64) -> Result<TheoryReport, HarnessError> {
    let n = problem.num_clients();
    let inputs = TheoryInputs {
        l: problem.smoothness_bound(),
        n,
        r: cfg.hyper.clients_per_round,
        e: cfg.hyper.local_steps,
        k: cfg.hyper.rounds,
        q,
        alpha: cfg.theory.alpha.unwrap_or(n as f64),
        f0,
        sigma2: cfg.theory.sigma2,
    };
    let alpha_source = if cfg.theory.alpha.is_some() { "config" } else { "n" }.to_string();
    let report = match cfg.algorithm {
        Algorithm::Fedglomo => {
            let eta = glomo_eta(&inputs)?;
            TheoryReport {
                inputs,
                alpha_source,
                eta,
                beta: Some(glomo_beta(&inputs, eta)?),
                zeta: 0.0,
                rate_bound: glomo_rate_bound(&inputs)?,
                warnings: glomo_range_warnings(&inputs),
            }
        }
        Algorithm::Fedlomo => {
            let step = lomo_eta(&inputs)?;
            TheoryReport {
                inputs,
                alpha_source,
                eta: step.eta,
                beta: None,
                zeta: step.zeta,
                rate_bound: lomo_rate_bound(&inputs)?,
                warnings: Vec::new(),
            }
        }
        Algorithm::Fedavg | Algorithm::Fedpaq => {
            let step = fedavg_eta(&inputs)?;
            TheoryReport {
                inputs,
                alpha_source,
                eta: step.eta,
                beta: None,
                zeta: step.zeta,
                rate_bound: fedavg_rate_bound(&inputs)?,
                warnings: Vec::new(),
            }
        }
    };
    Ok(report)
}

/// Builds the problem and, under the theorem source, replaces the step size
/// and momentum weight with the theory module's values.
pub fn prepare(cfg: &RunConfig) -> Result<Prepared, HarnessError> {
    let problem = cfg.build_problem()?;
    let quantizer = cfg.quantizer.spec()?;
    let w0 = problem.initial_point(cfg.seed);
    let f0 = problem.loss(&w0);
    let mut config = cfg.clone();
    let theory = match cfg.hyperparam_source {
        HyperparamSource::Manual => None,
        HyperparamSource::Theorem => {
            let report = theory_report(cfg, &problem, quantizer.variance_factor(problem.dim()), f0)?;
            config.hyper.eta0 = report.eta;
            if let Some(beta) = report.beta {
                config.hyper.beta = beta;
            }
            Some(report)
        }
    };
    Ok(Prepared { config, problem, quantizer, w0, f0, theory })
}
