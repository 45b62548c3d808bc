//! Dense vector arithmetic and keyed random streams.
//!
//! Every random draw in a simulation comes from an [`RngStream`] addressed by
//! an [`RngKey`]. Streams are ChaCha12 instances whose 256-bit key is the
//! packed `RngKey`, so two streams with the same key replay the same sequence
//! and the order in which different streams are consumed never matters. That
//! is what lets client updates run on any number of threads and still produce
//! bit-identical results.

use std::ops::{Index, IndexMut};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
}

/// Flat parameter vector of fixed dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    fn check_dim(&self, other: &Self) -> Result<(), NumError> {
        if self.dim() != other.dim() {
            return Err(NumError::DimensionMismatch {
                left: self.dim(),
                right: other.dim(),
            });
        }
        Ok(())
    }

    /// `self - other`.
    pub fn sub(&self, other: &Self) -> Result<Self, NumError> {
        self.check_dim(other)?;
        Ok(Self(
            self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect(),
        ))
    }

    /// `self + other`.
    pub fn add(&self, other: &Self) -> Result<Self, NumError> {
        self.check_dim(other)?;
        Ok(Self(
            self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect(),
        ))
    }

    pub fn scale(&self, a: f64) -> Self {
        Self(self.0.iter().map(|v| a * v).collect())
    }

    /// In-place `self += a * x`.
    pub fn axpy_in_place(&mut self, a: f64, x: &Self) -> Result<(), NumError> {
        self.check_dim(x)?;
        for (y, x) in self.0.iter_mut().zip(&x.0) {
            *y += a * x;
        }
        Ok(())
    }

    pub fn dot(&self, other: &Self) -> Result<f64, NumError> {
        self.check_dim(other)?;
        Ok(self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum())
    }

    pub fn norm(&self) -> f64 {
        sq_norm(self).sqrt()
    }
}

impl Index<usize> for ParamVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for ParamVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// Returns `a * x + y`.
pub fn axpy(a: f64, x: &ParamVector, y: &ParamVector) -> Result<ParamVector, NumError> {
    let mut out = y.clone();
    out.axpy_in_place(a, x)?;
    Ok(out)
}

pub fn sq_norm(x: &ParamVector) -> f64 {
    x.0.iter().map(|v| v * v).sum()
}

/// Arithmetic mean of equally sized vectors, summed in slice order.
pub fn mean(vectors: &[ParamVector]) -> Result<ParamVector, NumError> {
    let Some(first) = vectors.first() else {
        return Ok(ParamVector::zeros(0));
    };
    let mut acc = ParamVector::zeros(first.dim());
    for v in vectors {
        acc.axpy_in_place(1.0, v)?;
    }
    Ok(acc.scale(1.0 / vectors.len() as f64))
}

/// What a stream is used for. Part of the stream key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u32)]
pub enum Purpose {
    Batch = 1,
    Quantizer = 2,
    Sampling = 3,
    Init = 4,
    Data = 5,
    Probe = 6,
    EvalIterate = 7,
}

/// Address of a random stream.
///
/// `replica` distinguishes repeated draws under otherwise equal keys, such as
/// the resamples of a variance probe. It is zero for ordinary runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngKey {
    pub master_seed: u64,
    pub round: u64,
    pub client_id: u64,
    pub purpose: Purpose,
    pub replica: u32,
}

impl RngKey {
    pub fn new(master_seed: u64, round: u64, client_id: u64, purpose: Purpose) -> Self {
        Self {
            master_seed,
            round,
            client_id,
            purpose,
            replica: 0,
        }
    }

    pub fn with_replica(mut self, replica: u32) -> Self {
        self.replica = replica;
        self
    }

    fn seed_bytes(&self) -> [u8; 32] {
        let mut seed = [0u8; 32];
        seed[0..8].copy_from_slice(&self.master_seed.to_le_bytes());
        seed[8..16].copy_from_slice(&self.round.to_le_bytes());
        seed[16..24].copy_from_slice(&self.client_id.to_le_bytes());
        seed[24..28].copy_from_slice(&(self.purpose as u32).to_le_bytes());
        seed[28..32].copy_from_slice(&self.replica.to_le_bytes());
        seed
    }
}

/// Single-owner random stream; not shared across threads.
#[derive(Debug, Clone)]
pub struct RngStream {
    inner: ChaCha12Rng,
}

pub fn stream(key: RngKey) -> RngStream {
    RngStream {
        inner: ChaCha12Rng::from_seed(key.seed_bytes()),
    }
}

impl RngStream {
    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Standard normal draw (Box-Muller, one value per call).
    pub fn normal(&mut self) -> f64 {
        // 1 - U keeps the log argument in (0, 1].
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// `count` distinct indices from `0..n` in draw order.
    pub fn sample_indices(&mut self, n: usize, count: usize) -> Vec<usize> {
        rand::seq::index::sample(&mut self.inner, n, count).into_vec()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::RngCore;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::from_vec(v.to_vec())
    }

    #[test]
    fn axpy_examples() {
        let v = pv(&[1.5, -2.0, 3.0]);
        assert_eq!(axpy(0.0, &pv(&[9.0, 9.0, 9.0]), &v).unwrap(), v);
        assert_eq!(axpy(1.0, &v, &v.scale(-1.0)).unwrap(), ParamVector::zeros(3));
        assert_eq!(axpy(2.0, &pv(&[1.0, 2.0]), &pv(&[3.0, 4.0])).unwrap(), pv(&[5.0, 8.0]));
    }

    #[test]
    fn axpy_dimension_mismatch() {
        let err = axpy(1.0, &pv(&[1.0]), &pv(&[1.0, 2.0])).unwrap_err();
        assert_eq!(err, NumError::DimensionMismatch { left: 2, right: 1 });
    }

    #[test]
    fn sq_norm_examples() {
        assert_eq!(sq_norm(&ParamVector::zeros(5)), 0.0);
        assert_eq!(sq_norm(&pv(&[3.0, 4.0])), 25.0);

        let mut s = stream(RngKey::new(3, 0, 0, Purpose::Init));
        let v: Vec<f64> = (0..10).map(|_| s.normal()).collect();
        let mut naive = 0.0;
        for i in 0..v.len() {
            naive += v[i] * v[i];
        }
        let got = sq_norm(&pv(&v));
        assert!((got - naive).abs() <= 1e-12 * naive);
    }

    #[test]
    fn same_key_same_sequence() {
        let key = RngKey::new(11, 4, 7, Purpose::Batch);
        let mut a = stream(key);
        let mut b = stream(key);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    fn draws(key: RngKey, n: usize) -> Vec<u64> {
        let mut s = stream(key);
        (0..n).map(|_| s.next_u64()).collect()
    }

    #[test]
    fn distinct_keys_do_not_collide() {
        let base = RngKey::new(11, 4, 7, Purpose::Batch);
        let a = draws(base, 10_000);
        let other_client = draws(RngKey { client_id: 8, ..base }, 10_000);
        let other_purpose = draws(RngKey { purpose: Purpose::Quantizer, ..base }, 10_000);
        let other_replica = draws(base.with_replica(1), 10_000);
        for other in [&other_client, &other_purpose, &other_replica] {
            let set: std::collections::HashSet<_> = a.iter().collect();
            let shared = other.iter().filter(|x| set.contains(x)).count();
            assert_eq!(shared, 0);
        }
    }

    #[test]
    fn interleaving_does_not_matter() {
        let k1 = RngKey::new(1, 0, 0, Purpose::Batch);
        let k2 = RngKey::new(1, 0, 1, Purpose::Batch);
        let mut s1 = stream(k1);
        let mut s2 = stream(k2);
        let mut inter1 = Vec::new();
        let mut inter2 = Vec::new();
        for _ in 0..50 {
            inter1.push(s1.next_u64());
            inter2.push(s2.next_u64());
        }
        assert_eq!(inter1, draws(k1, 50));
        assert_eq!(inter2, draws(k2, 50));
    }

    #[test]
    fn normal_draws_have_unit_moments() {
        let mut s = stream(RngKey::new(5, 0, 0, Purpose::Data));
        let n = 200_000;
        let xs: Vec<f64> = (0..n).map(|_| s.normal()).collect();
        let m = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n as f64;
        assert!(m.abs() < 0.01, "mean {m}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    proptest! {
        #[test]
        fn axpy_norm_expansion(
            a in -10.0f64..10.0,
            pairs in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 1..40),
        ) {
            let x = ParamVector::from_vec(pairs.iter().map(|p| p.0).collect());
            let y = ParamVector::from_vec(pairs.iter().map(|p| p.1).collect());
            let direct = sq_norm(&axpy(a, &x, &y).unwrap());
            let expanded = a * a * sq_norm(&x) + 2.0 * a * x.dot(&y).unwrap() + sq_norm(&y);
            let scale = a * a * sq_norm(&x) + sq_norm(&y) + 1e-300;
            prop_assert!((direct - expanded).abs() <= 1e-9 * scale);
        }
    }
}
