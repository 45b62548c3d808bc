//! Datasets, CSV ingestion and synthetic problem generators.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::numkit::{stream, ParamVector, Purpose, RngKey, RngStream};

use super::{
    ClientObjective, ClientShard, FederatedProblem, LocalObjective, LogisticClient, MlpClient,
    MlpShape, ProblemError, ProblemKind, QuadraticClient,
};

/// Client id used for streams shared by all clients.
const SHARED: u64 = u64::MAX;

/// Labeled samples, row-major features.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Vec<f64>,
    pub labels: Vec<u32>,
    pub p: usize,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.p..(i + 1) * self.p]
    }
}

/// Reads a CSV with a header row, feature columns and a final integer label
/// column. Labels must lie in `0..classes` when `classes` is given.
pub fn load_csv(path: &Path, classes: Option<usize>) -> Result<Dataset, ProblemError> {
    let err = |message: String| ProblemError::Csv {
        path: path.display().to_string(),
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| err(e.to_string()))?;
    let width = reader.headers().map_err(|e| err(e.to_string()))?.len();
    if width < 2 {
        return Err(err("need at least one feature column and a label column".into()));
    }
    let p = width - 1;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| err(e.to_string()))?;
        let row = line + 2;
        if record.len() != width {
            return Err(err(format!("row {row} has {} columns, expected {width}", record.len())));
        }
        for field in record.iter().take(p) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| err(format!("row {row}: bad feature value {field:?}")))?;
            if !v.is_finite() {
                return Err(err(format!("row {row}: non-finite feature")));
            }
            features.push(v);
        }
        let raw = record[p].trim();
        let label: u32 = raw
            .parse()
            .map_err(|_| err(format!("row {row}: label {raw:?} is not a nonnegative integer")))?;
        if let Some(c) = classes {
            if label as usize >= c {
                return Err(err(format!("row {row}: label {label} outside 0..{c}")));
            }
        }
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(err("no data rows".into()));
    }
    let classes = classes.unwrap_or_else(|| labels.iter().max().map_or(0, |&m| m as usize + 1).max(2));
    Ok(Dataset { features, labels, p, classes })
}

/// Model built on top of partitioned client data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShardModel {
    pub kind: ProblemKind,
    pub classes: usize,
    pub hidden: usize,
    pub weight_decay: f64,
    /// Surrogate smoothness for MLPs; estimated when absent.
    pub smoothness: Option<f64>,
    pub seed: u64,
}

pub fn problem_from_shards(
    shards: Vec<ClientShard>,
    model: &ShardModel,
) -> Result<FederatedProblem, ProblemError> {
    if model.classes < 2 {
        return Err(ProblemError::Invalid("need at least two classes".into()));
    }
    if let Some(bad) = shards.iter().flat_map(|s| &s.labels).find(|&&l| l as usize >= model.classes) {
        return Err(ProblemError::Invalid(format!("label {bad} outside 0..{}", model.classes)));
    }
    let clients: Vec<ClientObjective> = match model.kind {
        ProblemKind::Quadratic => {
            return Err(ProblemError::Invalid("quadratic problems are synthetic only".into()))
        }
        ProblemKind::LogisticL2 => shards
            .into_iter()
            .map(|s| {
                ClientObjective::Logistic(LogisticClient::new(
                    s.features,
                    s.labels,
                    s.p,
                    model.classes,
                    model.weight_decay,
                ))
            })
            .collect(),
        ProblemKind::MlpRelu => shards
            .into_iter()
            .map(|s| {
                let shape = MlpShape { inputs: s.p, hidden: model.hidden, classes: model.classes };
                ClientObjective::Mlp(MlpClient::new(shape, s.features, s.labels, model.weight_decay))
            })
            .collect(),
    };
    let smoothness = match (model.kind, model.smoothness) {
        (ProblemKind::MlpRelu, None) => Some(estimate_smoothness(&clients, model.seed)),
        (_, s) => s,
    };
    FederatedProblem::new(clients, smoothness)
}

/// Largest observed gradient Lipschitz ratio over random parameter pairs,
/// times a 1.5 safety factor.
fn estimate_smoothness(clients: &[ClientObjective], seed: u64) -> f64 {
    let mut rng = stream(RngKey::new(seed, 0, SHARED, Purpose::Probe));
    let dim = clients[0].dim();
    let mut worst: f64 = 0.0;
    for _ in 0..64 {
        let i = rng.below(clients.len());
        let x = ParamVector::from_vec((0..dim).map(|_| 0.5 * rng.normal()).collect());
        let y = ParamVector::from_vec((0..dim).map(|_| 0.5 * rng.normal()).collect());
        let num = clients[i].full_gradient(&x).sub(&clients[i].full_gradient(&y)).expect("same dim").norm();
        let den = x.sub(&y).expect("same dim").norm();
        if den > 0.0 {
            worst = worst.max(num / den);
        }
    }
    1.5 * worst
}

/// Parameters of a synthetic federated problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub kind: ProblemKind,
    pub clients: usize,
    /// Parameter dimension for quadratics; input features otherwise.
    pub features: usize,
    pub classes: usize,
    pub hidden: usize,
    pub samples_per_client: usize,
    /// 0 makes every client's data distribution identical.
    pub heterogeneity: f64,
    /// Per-sample scale of quadratic center offsets.
    pub noise: f64,
    pub weight_decay: f64,
    pub smoothness: Option<f64>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            kind: ProblemKind::Quadratic,
            clients: 50,
            features: 10,
            classes: 10,
            hidden: 16,
            samples_per_client: 20,
            heterogeneity: 1.0,
            noise: 1.0,
            weight_decay: 1e-4,
            smoothness: None,
            seed: 0,
        }
    }
}

pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<FederatedProblem, ProblemError> {
    if !(spec.heterogeneity >= 0.0 && spec.heterogeneity.is_finite()) {
        return Err(ProblemError::Invalid("heterogeneity must be a finite value >= 0".into()));
    }
    if spec.clients == 0 || spec.features == 0 || spec.samples_per_client == 0 {
        return Err(ProblemError::Invalid("clients, features and samples must be positive".into()));
    }
    match spec.kind {
        ProblemKind::Quadratic => gen_quadratic(spec),
        ProblemKind::LogisticL2 | ProblemKind::MlpRelu => {
            if spec.classes < 2 {
                return Err(ProblemError::Invalid("need at least two classes".into()));
            }
            let shards = gen_classification(spec);
            problem_from_shards(
                shards,
                &ShardModel {
                    kind: spec.kind,
                    classes: spec.classes,
                    hidden: spec.hidden,
                    weight_decay: spec.weight_decay,
                    smoothness: spec.smoothness,
                    seed: spec.seed,
                },
            )
        }
    }
}

fn random_rotation(d: usize, rng: &mut RngStream) -> nalgebra::DMatrix<f64> {
    let g = nalgebra::DMatrix::from_fn(d, d, |_, _| rng.normal());
    g.qr().q()
}

fn gen_quadratic(spec: &SyntheticSpec) -> Result<FederatedProblem, ProblemError> {
    let d = spec.features;
    let het = spec.heterogeneity;
    let mut shared = stream(RngKey::new(spec.seed, 0, SHARED, Purpose::Data));
    let rotation = random_rotation(d, &mut shared);
    let base_eigs: Vec<f64> = (0..d).map(|_| 0.1 + 0.9 * shared.uniform()).collect();
    let base_center: Vec<f64> = (0..d).map(|_| shared.normal()).collect();
    let clients = (0..spec.clients)
        .map(|i| {
            let mut rng = stream(RngKey::new(spec.seed, 0, i as u64, Purpose::Data));
            let eigs: Vec<f64> = base_eigs
                .iter()
                .map(|&l| (l * (1.0 + het * (rng.uniform() - 0.5))).max(0.05))
                .collect();
            let diag = nalgebra::DMatrix::from_diagonal(&nalgebra::DVector::from_vec(eigs));
            let a = &rotation * diag * rotation.transpose();
            // symmetrize away rounding so the eigen-solver sees an exact symmetric matrix
            let a = (&a + a.transpose()) * 0.5;
            let mut a_rows = Vec::with_capacity(d * d);
            for r in 0..d {
                for c in 0..d {
                    a_rows.push(a[(r, c)]);
                }
            }
            let center: Vec<f64> = base_center.iter().map(|&c| c + het * rng.normal()).collect();
            let offsets = (0..spec.samples_per_client)
                .map(|_| (0..d).map(|_| spec.noise * rng.normal()).collect())
                .collect();
            ClientObjective::Quadratic(QuadraticClient::new(a_rows, center, offsets))
        })
        .collect();
    FederatedProblem::new(clients, None)
}

fn gen_classification(spec: &SyntheticSpec) -> Vec<ClientShard> {
    let p = spec.features;
    let classes = spec.classes;
    let mut shared = stream(RngKey::new(spec.seed, 0, SHARED, Purpose::Data));
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..p).map(|_| shared.normal()).collect())
        .collect();
    (0..spec.clients)
        .map(|i| {
            let mut rng = stream(RngKey::new(spec.seed, 0, i as u64, Purpose::Data));
            let home: Vec<u32> = if classes == 2 {
                vec![(i % 2) as u32]
            } else {
                vec![((2 * i) % classes) as u32, ((2 * i + 1) % classes) as u32]
            };
            let mut features = Vec::with_capacity(spec.samples_per_client * p);
            let mut labels = Vec::with_capacity(spec.samples_per_client);
            for _ in 0..spec.samples_per_client {
                let skewed = rng.uniform() < spec.heterogeneity;
                let label = if skewed {
                    home[rng.below(home.len())]
                } else {
                    rng.below(classes) as u32
                };
                for &mu in &means[label as usize] {
                    features.push(mu + rng.normal());
                }
                labels.push(label);
            }
            ClientShard { client_id: i, features, labels, p }
        })
        .collect()
}

impl FederatedProblem {
    /// Deterministic starting point `w_0`: standard normal for quadratics,
    /// zeros for logistic models, scaled normal weights and zero biases for
    /// MLPs.
    pub fn initial_point(&self, seed: u64) -> ParamVector {
        let mut rng = stream(RngKey::new(seed, 0, SHARED, Purpose::Init));
        match &self.clients()[0] {
            ClientObjective::Quadratic(_) => {
                ParamVector::from_vec((0..self.dim()).map(|_| rng.normal()).collect())
            }
            ClientObjective::Logistic(_) => ParamVector::zeros(self.dim()),
            ClientObjective::Mlp(m) => {
                let s = m.shape();
                let mut w = Vec::with_capacity(s.dim());
                let scale1 = (2.0 / s.inputs as f64).sqrt();
                w.extend((0..s.hidden * s.inputs).map(|_| scale1 * rng.normal()));
                w.extend(std::iter::repeat_n(0.0, s.hidden));
                let scale2 = (1.0 / s.hidden as f64).sqrt();
                w.extend((0..s.classes * s.hidden).map(|_| scale2 * rng.normal()));
                w.extend(std::iter::repeat_n(0.0, s.classes));
                ParamVector::from_vec(w)
            }
        }
    }
}
