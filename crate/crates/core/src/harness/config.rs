//! TOML run configuration: parsing with key paths in errors, default
//! filling, and the fully explicit echo written next to every run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::algorithms::{Algorithm, HyperParams, ProbeSchedule};
use crate::problems::{
    gen_synthetic, load_csv, partition_iid, partition_sorted_shards, problem_from_shards,
    FederatedProblem, PartitionScheme, PartitionSpec, ProblemKind, ShardModel, SyntheticSpec,
};
use crate::numkit::{stream, Purpose, RngKey};
use crate::quantizer::QuantizerSpec;

use super::HarnessError;

/// Client id used for problem-construction streams.
const DATA_STREAM: u64 = u64::MAX - 1;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HyperparamSource {
    #[default]
    Manual,
    Theorem,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProblemConfig {
    pub kind: ProblemKind,
    /// Number of clients `n`.
    pub clients: usize,
    pub features: usize,
    pub classes: usize,
    pub hidden: usize,
    pub samples_per_client: usize,
    pub heterogeneity: f64,
    pub noise: f64,
    pub weight_decay: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub smoothness: Option<f64>,
    /// Seed of the data generator; defaults to the run seed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_seed: Option<u64>,
    /// Labelled CSV data set; replaces the synthetic generator.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub partition: Option<PartitionSpec>,
}

impl Default for ProblemConfig {
    fn default() -> Self {
        let s = SyntheticSpec::default();
        Self {
            kind: s.kind,
            clients: s.clients,
            features: s.features,
            classes: s.classes,
            hidden: s.hidden,
            samples_per_client: s.samples_per_client,
            heterogeneity: s.heterogeneity,
            noise: s.noise,
            weight_decay: s.weight_decay,
            smoothness: None,
            data_seed: None,
            csv: None,
            partition: None,
        }
    }
}

impl ProblemConfig {
    fn is_heterogeneous(&self) -> bool {
        match (&self.csv, &self.partition) {
            (Some(_), Some(p)) => p.scheme == PartitionScheme::SortedShards,
            (Some(_), None) => true,
            (None, _) => self.heterogeneity > 0.0,
        }
    }

    /// Builds the federated problem. Relative CSV paths resolve against
    /// `base_dir`.
    pub fn build(&self, seed: u64, base_dir: Option<&Path>) -> Result<FederatedProblem, HarnessError> {
        let seed = self.data_seed.unwrap_or(seed);
        let Some(csv) = &self.csv else {
            return Ok(gen_synthetic(&SyntheticSpec {
                kind: self.kind,
                clients: self.clients,
                features: self.features,
                classes: self.classes,
                hidden: self.hidden,
                samples_per_client: self.samples_per_client,
                heterogeneity: self.heterogeneity,
                noise: self.noise,
                weight_decay: self.weight_decay,
                smoothness: self.smoothness,
                seed,
            })?);
        };
        let path = match base_dir {
            Some(dir) if csv.is_relative() => dir.join(csv),
            _ => csv.clone(),
        };
        let data = load_csv(&path, Some(self.classes))?;
        let spec = self.partition.unwrap_or(PartitionSpec {
            n_shards: 2 * self.clients,
            shards_per_client: 2,
            scheme: PartitionScheme::SortedShards,
        });
        let mut rng = stream(RngKey::new(seed, 0, DATA_STREAM, Purpose::Data));
        let shards = match spec.scheme {
            PartitionScheme::SortedShards => partition_sorted_shards(&data, &spec, &mut rng)?,
            PartitionScheme::Iid => partition_iid(&data, spec.n_clients(), &mut rng)?,
        };
        let model = ShardModel {
            kind: self.kind,
            classes: self.classes,
            hidden: self.hidden,
            weight_decay: self.weight_decay,
            smoothness: self.smoothness,
            seed,
        };
        Ok(problem_from_shards(shards, &model)?)
    }
}

/// `bits` sets `s = 2^(bits-1)` levels, `levels` sets `s` directly; neither
/// means no compression.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantizerConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bits: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub levels: Option<u32>,
}

impl QuantizerConfig {
    pub fn spec(&self) -> Result<QuantizerSpec, HarnessError> {
        let spec = match (self.bits, self.levels) {
            (Some(_), Some(_)) => {
                return Err(HarnessError::config("quantizer", "set either bits or levels, not both"))
            }
            (Some(b), None) => QuantizerSpec::from_bits(b),
            (None, Some(s)) => QuantizerSpec::stochastic(s),
            (None, None) => Ok(QuantizerSpec::identity()),
        };
        spec.map_err(|e| HarnessError::config("quantizer", e.to_string()))
    }

    pub fn is_set(&self) -> bool {
        self.bits.is_some() || self.levels.is_some()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoryConfig {
    /// Heterogeneity constant for theorem step sizes; `n` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    /// Local gradient variance for the FedAvg bound.
    pub sigma2: f64,
}

/// Hyperparameter table as written in config files. Batch sizes of 0 mean
/// full local batches and an exact anchor gradient.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct HyperSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    eta0: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    beta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    local_steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    rounds: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    clients_per_round: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    damping: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    lr_decay: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    momentum: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    full_participation_round0: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    full_batch_round0: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    anchor_batch: Option<usize>,
}

impl HyperSection {
    fn explicit(hp: &HyperParams) -> Self {
        Self {
            eta0: Some(hp.eta0),
            beta: Some(hp.beta),
            local_steps: Some(hp.local_steps),
            rounds: Some(hp.rounds),
            clients_per_round: Some(hp.clients_per_round),
            damping: Some(hp.damping),
            lr_decay: Some(hp.lr_decay),
            momentum: Some(hp.momentum),
            full_participation_round0: Some(hp.full_participation_round0),
            full_batch_round0: Some(hp.full_batch_round0),
            batch_size: Some(hp.batch_size.unwrap_or(0)),
            anchor_batch: Some(hp.anchor_batch.unwrap_or(0)),
        }
    }

    fn resolve(&self, problem: &ProblemConfig, n: usize, source: HyperparamSource) -> HyperParams {
        let d = HyperParams::default();
        let theorem = source == HyperparamSource::Theorem;
        let nonzero = |v: usize| (v > 0).then_some(v);
        HyperParams {
            eta0: self.eta0.unwrap_or(d.eta0),
            beta: self.beta.unwrap_or(d.beta),
            local_steps: self.local_steps.unwrap_or(d.local_steps),
            rounds: self.rounds.unwrap_or(d.rounds),
            clients_per_round: self.clients_per_round.unwrap_or(d.clients_per_round.min(n)),
            damping: self
                .damping
                .unwrap_or(if problem.is_heterogeneous() && !theorem { 0.8 } else { 1.0 }),
            lr_decay: self.lr_decay.unwrap_or(d.lr_decay),
            momentum: self.momentum.unwrap_or(d.momentum),
            full_participation_round0: self.full_participation_round0.unwrap_or(theorem),
            full_batch_round0: self.full_batch_round0.unwrap_or(theorem),
            batch_size: self.batch_size.map_or(d.batch_size, nonzero),
            anchor_batch: self.anchor_batch.and_then(nonzero),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    algorithm: Algorithm,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_parallel")]
    parallel: bool,
    #[serde(default)]
    hyperparam_source: HyperparamSource,
    #[serde(default)]
    combine_uncompressed: bool,
    #[serde(default)]
    problem: ProblemConfig,
    #[serde(default)]
    hyper: HyperSection,
    #[serde(default)]
    quantizer: QuantizerConfig,
    #[serde(default)]
    probes: ProbeSchedule,
    #[serde(default)]
    theory: TheoryConfig,
}

fn default_parallel() -> bool {
    true
}

/// A validated run configuration with every default filled in.
///
/// Under the theorem source, `hyper.eta0` and `hyper.beta` are replaced by
/// the theory module when the run is prepared.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub parallel: bool,
    pub hyperparam_source: HyperparamSource,
    pub combine_uncompressed: bool,
    pub problem: ProblemConfig,
    pub hyper: HyperParams,
    pub quantizer: QuantizerConfig,
    pub probes: ProbeSchedule,
    pub theory: TheoryConfig,
    /// Directory relative paths resolve against.
    pub base_dir: Option<PathBuf>,
}

#[derive(Serialize)]
struct Echo<'a> {
    algorithm: Algorithm,
    seed: u64,
    parallel: bool,
    hyperparam_source: HyperparamSource,
    combine_uncompressed: bool,
    problem: &'a ProblemConfig,
    hyper: HyperSection,
    quantizer: &'a QuantizerConfig,
    probes: &'a ProbeSchedule,
    theory: &'a TheoryConfig,
}

impl RunConfig {
    /// Number of clients the problem will have.
    pub fn num_clients(&self) -> usize {
        match (&self.problem.csv, &self.problem.partition) {
            (Some(_), Some(p)) => p.n_clients(),
            _ => self.problem.clients,
        }
    }

    /// Explicit TOML that parses back to this configuration.
    pub fn to_toml(&self) -> String {
        let mut problem = self.problem.clone();
        if let (Some(csv), Some(base)) = (&problem.csv, &self.base_dir) {
            if csv.is_relative() {
                problem.csv = Some(base.join(csv));
            }
        }
        let echo = Echo {
            algorithm: self.algorithm,
            seed: self.seed,
            parallel: self.parallel,
            hyperparam_source: self.hyperparam_source,
            combine_uncompressed: self.combine_uncompressed,
            problem: &problem,
            hyper: HyperSection::explicit(&self.hyper),
            quantizer: &self.quantizer,
            probes: &self.probes,
            theory: &self.theory,
        };
        toml::to_string(&echo).expect("config values are representable in TOML")
    }

    pub fn build_problem(&self) -> Result<FederatedProblem, HarnessError> {
        self.problem.build(self.seed, self.base_dir.as_deref())
    }

    fn validate(&self) -> Result<(), HarnessError> {
        let n = self.num_clients();
        if self.problem.csv.is_some() && self.problem.partition.is_none() && n == 0 {
            return Err(HarnessError::config("problem.clients", "must be positive"));
        }
        if self.hyper.clients_per_round > n {
            return Err(HarnessError::config(
                "hyper.clients_per_round",
                format!("r = {} exceeds the number of clients n = {n}", self.hyper.clients_per_round),
            ));
        }
        self.hyper
            .validate(n)
            .map_err(|e| HarnessError::config("hyper", e.to_string()))?;
        let spec = self.quantizer.spec()?;
        match self.algorithm {
            Algorithm::Fedavg if self.quantizer.is_set() => {
                return Err(HarnessError::config(
                    "quantizer",
                    "fedavg runs uncompressed; use algorithm = \"fedpaq\" for quantized uplinks",
                ))
            }
            Algorithm::Fedpaq if !self.quantizer.is_set() => {
                return Err(HarnessError::config("quantizer", "fedpaq needs quantizer.bits or quantizer.levels"))
            }
            _ => {}
        }
        if self.combine_uncompressed && (self.algorithm != Algorithm::Fedglomo || !spec.is_identity()) {
            return Err(HarnessError::config(
                "combine_uncompressed",
                "only available for fedglomo without a quantizer",
            ));
        }
        if let Some(alpha) = self.theory.alpha {
            if !(alpha > 0.0 && alpha <= n as f64) {
                return Err(HarnessError::config("theory.alpha", format!("must lie in (0, {n}]")));
            }
        }
        if self.hyperparam_source == HyperparamSource::Theorem
            && self.problem.kind == ProblemKind::MlpRelu
            && self.problem.smoothness.is_none()
        {
            return Err(HarnessError::config(
                "problem.smoothness",
                "theorem step sizes on mlp_relu need a declared smoothness surrogate",
            ));
        }
        Ok(())
    }
}

/// Parses and validates a configuration document.
pub fn parse_config(text: &str, base_dir: Option<&Path>) -> Result<RunConfig, HarnessError> {
    let de = toml::de::Deserializer::parse(text)
        .map_err(|e| HarnessError::config("<document>", e.to_string()))?;
    let raw: RawConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        HarnessError::config(&path, e.into_inner().to_string())
    })?;
    let n = match (&raw.problem.csv, &raw.problem.partition) {
        (Some(_), Some(p)) => p.n_clients(),
        _ => raw.problem.clients,
    };
    let mut hyper = raw.hyper.resolve(&raw.problem, n, raw.hyperparam_source);
    if raw.hyperparam_source == HyperparamSource::Theorem {
        hyper.lr_decay = 1.0;
    }
    let cfg = RunConfig {
        algorithm: raw.algorithm,
        seed: raw.seed,
        parallel: raw.parallel,
        hyperparam_source: raw.hyperparam_source,
        combine_uncompressed: raw.combine_uncompressed,
        problem: raw.problem,
        hyper,
        quantizer: raw.quantizer,
        probes: raw.probes,
        theory: raw.theory,
        base_dir: base_dir.map(Path::to_path_buf),
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Reads and parses a configuration file; relative paths inside it resolve
/// against the file's directory.
pub fn load_config(path: &Path) -> Result<RunConfig, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    parse_config(&text, path.parent())
}
