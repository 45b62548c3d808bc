//! Splitting a labeled dataset across clients.

use serde::{Deserialize, Serialize};

use crate::numkit::RngStream;

use super::{Dataset, ProblemError};

/// One client's local data.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientShard {
    pub client_id: usize,
    /// Row-major `m x p`.
    pub features: Vec<f64>,
    pub labels: Vec<u32>,
    pub p: usize,
}

impl ClientShard {
    pub fn num_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn distinct_labels(&self) -> usize {
        let mut l = self.labels.clone();
        l.sort_unstable();
        l.dedup();
        l.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionScheme {
    SortedShards,
    Iid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub n_shards: usize,
    pub shards_per_client: usize,
    pub scheme: PartitionScheme,
}

impl PartitionSpec {
    pub fn n_clients(&self) -> usize {
        self.n_shards / self.shards_per_client.max(1)
    }

    fn validate(&self) -> Result<(), ProblemError> {
        if self.shards_per_client == 0 || self.n_shards == 0 {
            return Err(ProblemError::Partition("shard counts must be positive".into()));
        }
        if !self.n_shards.is_multiple_of(self.shards_per_client) {
            return Err(ProblemError::Partition(format!(
                "{} shards do not split evenly into groups of {}",
                self.n_shards, self.shards_per_client
            )));
        }
        Ok(())
    }
}

fn gather(data: &Dataset, client_id: usize, rows: &[usize]) -> ClientShard {
    let mut features = Vec::with_capacity(rows.len() * data.p);
    let mut labels = Vec::with_capacity(rows.len());
    for &r in rows {
        features.extend_from_slice(data.row(r));
        labels.push(data.labels[r]);
    }
    ClientShard {
        client_id,
        features,
        labels,
        p: data.p,
    }
}

/// Sorts samples by label, cuts them into `n_shards` equal shards and deals
/// `shards_per_client` shards to each client uniformly without replacement.
pub fn partition_sorted_shards(
    data: &Dataset,
    spec: &PartitionSpec,
    rng: &mut RngStream,
) -> Result<Vec<ClientShard>, ProblemError> {
    spec.validate()?;
    let m = data.len();
    if !m.is_multiple_of(spec.n_shards) {
        return Err(ProblemError::Partition(format!(
            "{m} samples are not divisible into {} shards",
            spec.n_shards
        )));
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by_key(|&i| data.labels[i]);
    let shard_len = m / spec.n_shards;
    let mut shard_ids: Vec<usize> = (0..spec.n_shards).collect();
    rng.shuffle(&mut shard_ids);
    Ok(shard_ids
        .chunks(spec.shards_per_client)
        .enumerate()
        .map(|(client, shards)| {
            let rows: Vec<usize> = shards
                .iter()
                .flat_map(|&s| order[s * shard_len..(s + 1) * shard_len].iter().copied())
                .collect();
            gather(data, client, &rows)
        })
        .collect())
}

/// Uniformly random equal split across `n_clients`.
pub fn partition_iid(
    data: &Dataset,
    n_clients: usize,
    rng: &mut RngStream,
) -> Result<Vec<ClientShard>, ProblemError> {
    let m = data.len();
    if n_clients == 0 || !m.is_multiple_of(n_clients) {
        return Err(ProblemError::Partition(format!(
            "{m} samples are not divisible among {n_clients} clients"
        )));
    }
    let mut order: Vec<usize> = (0..m).collect();
    rng.shuffle(&mut order);
    let per = m / n_clients;
    Ok(order
        .chunks(per)
        .enumerate()
        .map(|(client, rows)| gather(data, client, rows))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{stream, Purpose, RngKey};

    fn sorted_dataset(classes: usize, per_class: usize) -> Dataset {
        let m = classes * per_class;
        let labels: Vec<u32> = (0..m).map(|i| (i / per_class) as u32).collect();
        // deliberately unsorted storage order
        let mut order: Vec<usize> = (0..m).collect();
        stream(RngKey::new(0, 0, 0, Purpose::Data)).shuffle(&mut order);
        let labels: Vec<u32> = order.iter().map(|&i| labels[i]).collect();
        let features = labels.iter().map(|&l| l as f64).collect();
        Dataset { features, labels, p: 1, classes }
    }

    #[test]
    fn two_shards_per_client_at_most_two_labels() {
        let data = sorted_dataset(10, 100);
        let spec = PartitionSpec { n_shards: 100, shards_per_client: 2, scheme: PartitionScheme::SortedShards };
        for seed in 0..20 {
            let mut r = stream(RngKey::new(seed, 0, 0, Purpose::Data));
            let shards = partition_sorted_shards(&data, &spec, &mut r).unwrap();
            assert_eq!(shards.len(), 50);
            for s in &shards {
                assert_eq!(s.num_samples(), 20);
                assert!(s.distinct_labels() <= 2);
            }
        }
    }

    #[test]
    fn one_shard_per_client_single_class() {
        let data = sorted_dataset(10, 100);
        let spec = PartitionSpec { n_shards: 10, shards_per_client: 1, scheme: PartitionScheme::SortedShards };
        let mut r = stream(RngKey::new(1, 0, 0, Purpose::Data));
        for s in partition_sorted_shards(&data, &spec, &mut r).unwrap() {
            assert_eq!(s.distinct_labels(), 1);
        }
    }

    #[test]
    fn divisibility_violation() {
        let data = sorted_dataset(3, 7);
        let spec = PartitionSpec { n_shards: 4, shards_per_client: 2, scheme: PartitionScheme::SortedShards };
        let mut r = stream(RngKey::new(1, 0, 0, Purpose::Data));
        assert!(matches!(
            partition_sorted_shards(&data, &spec, &mut r),
            Err(ProblemError::Partition(_))
        ));
    }

    #[test]
    fn iid_histograms_track_global() {
        // chi-square statistic of each client's histogram against the global
        // label distribution; 9 degrees of freedom, 99.9% quantile is 27.88.
        let data = sorted_dataset(10, 500);
        let mut r = stream(RngKey::new(2, 0, 0, Purpose::Data));
        let shards = partition_iid(&data, 10, &mut r).unwrap();
        let mut worst: f64 = 0.0;
        for s in &shards {
            let mut counts = [0f64; 10];
            for &l in &s.labels {
                counts[l as usize] += 1.0;
            }
            let expected = s.num_samples() as f64 / 10.0;
            let chi2: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
            worst = worst.max(chi2);
        }
        assert!(worst < 27.88, "chi2 {worst}");
    }
}
