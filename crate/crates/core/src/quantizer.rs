//! Unbiased stochastic quantization (QSGD-style) with exact bit accounting.
//!
//! Wire layout for stochastic mode, bits packed MSB-first and padded to a
//! byte boundary:
//!
//! ```text
//! [norm: f32, 32 bits][sign: 1 bit per coordinate][level: ceil(log2(s+1)) bits per coordinate]
//! ```
//!
//! A zero input encodes as the norm header alone. Identity mode sends each
//! coordinate as an f32 (32 bits per coordinate) but keeps the exact f64
//! values in memory, so uncompressed simulations are lossless.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numkit::{sq_norm, ParamVector, RngStream};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantizeError {
    #[error("level count must be at least 1")]
    ZeroLevels,
    #[error("input contains non-finite values")]
    NonFinite,
    #[error("level {level} at coordinate {index} exceeds s = {s}")]
    LevelOutOfRange { index: usize, level: u32, s: u32 },
    #[error("malformed quantized vector: {0}")]
    Malformed(String),
    #[error("wire payload too short: need {need} bytes, got {got}")]
    Truncated { need: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantMode {
    Stochastic,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantizerSpec {
    pub s: u32,
    pub mode: QuantMode,
}

impl QuantizerSpec {
    pub fn identity() -> Self {
        Self {
            s: 1,
            mode: QuantMode::Identity,
        }
    }

    pub fn stochastic(s: u32) -> Result<Self, QuantizeError> {
        if s == 0 {
            return Err(QuantizeError::ZeroLevels);
        }
        Ok(Self {
            s,
            mode: QuantMode::Stochastic,
        })
    }

    /// A "b-bit" quantizer: `s = 2^(b-1)` levels plus a sign bit.
    pub fn from_bits(bits: u32) -> Result<Self, QuantizeError> {
        if bits == 0 || bits > 31 {
            return Err(QuantizeError::Malformed(format!(
                "bit width {bits} outside 1..=31"
            )));
        }
        Self::stochastic(1 << (bits - 1))
    }

    pub fn is_identity(&self) -> bool {
        self.mode == QuantMode::Identity
    }

    /// Width of one level field.
    pub fn level_bits(&self) -> u32 {
        // ceil(log2(s + 1)) == number of bits needed to write s.
        u32::BITS - self.s.leading_zeros()
    }

    /// Relative variance factor `q` with `E||Q(x) - x||^2 <= q ||x||^2`.
    pub fn variance_factor(&self, d: usize) -> f64 {
        match self.mode {
            QuantMode::Identity => 0.0,
            QuantMode::Stochastic => {
                let d = d as f64;
                let s = self.s as f64;
                (d / (s * s)).min(d.sqrt() / s)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Payload {
    Exact(Vec<f64>),
    Levels { negative: Vec<bool>, levels: Vec<u32> },
}

/// Encoded client message.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedVector {
    spec: QuantizerSpec,
    dim: usize,
    norm: f64,
    payload: Payload,
    payload_bits: u64,
}

impl QuantizedVector {
    /// Builds a stochastic-mode message from raw parts, validating ranges.
    pub fn from_parts(
        s: u32,
        norm: f64,
        negative: Vec<bool>,
        levels: Vec<u32>,
    ) -> Result<Self, QuantizeError> {
        let spec = QuantizerSpec::stochastic(s)?;
        if !(norm.is_finite() && norm >= 0.0) {
            return Err(QuantizeError::Malformed(format!("norm {norm}")));
        }
        if negative.len() != levels.len() {
            return Err(QuantizeError::Malformed(
                "sign and level arrays differ in length".into(),
            ));
        }
        if let Some((index, &level)) = levels.iter().enumerate().find(|(_, &l)| l > s) {
            return Err(QuantizeError::LevelOutOfRange { index, level, s });
        }
        let dim = levels.len();
        let payload_bits = if norm == 0.0 {
            32
        } else {
            payload_bits(dim, &spec).exact
        };
        Ok(Self {
            spec,
            dim,
            norm,
            payload: Payload::Levels { negative, levels },
            payload_bits,
        })
    }

    pub fn spec(&self) -> QuantizerSpec {
        self.spec
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }

    /// Level indices; empty for identity messages.
    pub fn levels(&self) -> &[u32] {
        match &self.payload {
            Payload::Levels { levels, .. } => levels,
            Payload::Exact(_) => &[],
        }
    }

    /// Exact encoded length in bits under the wire format.
    pub fn payload_bits(&self) -> u64 {
        self.payload_bits
    }

    pub fn variance_factor(&self) -> f64 {
        self.spec.variance_factor(self.dim)
    }
}

fn validate_input(v: &ParamVector) -> Result<(), QuantizeError> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(QuantizeError::NonFinite)
    }
}

/// Applies `Q_D` to `v`.
pub fn quantize(
    v: &ParamVector,
    spec: &QuantizerSpec,
    rng: &mut RngStream,
) -> Result<QuantizedVector, QuantizeError> {
    validate_input(v)?;
    let dim = v.dim();
    let norm = sq_norm(v).sqrt();
    match spec.mode {
        QuantMode::Identity => Ok(QuantizedVector {
            spec: *spec,
            dim,
            norm,
            payload: Payload::Exact(v.as_slice().to_vec()),
            payload_bits: 32 * dim as u64,
        }),
        QuantMode::Stochastic => {
            if spec.s == 0 {
                return Err(QuantizeError::ZeroLevels);
            }
            let s = spec.s as f64;
            let mut negative = vec![false; dim];
            let mut levels = vec![0u32; dim];
            if norm > 0.0 {
                for (i, &x) in v.iter().enumerate() {
                    let u = (x.abs() / norm * s).min(s);
                    let floor = u.floor();
                    let p = u - floor;
                    let mut level = floor as u32;
                    // A draw is consumed for every coordinate so the stream
                    // position does not depend on the data.
                    if rng.uniform() < p {
                        level += 1;
                    }
                    levels[i] = level.min(spec.s);
                    negative[i] = level > 0 && x < 0.0;
                }
            }
            let payload_bits = if norm == 0.0 {
                32
            } else {
                payload_bits(dim, spec).exact
            };
            Ok(QuantizedVector {
                spec: *spec,
                dim,
                norm,
                payload: Payload::Levels { negative, levels },
                payload_bits,
            })
        }
    }
}

/// Reconstructs `norm * sign_i * level_i / s`.
pub fn decode(qv: &QuantizedVector) -> Result<ParamVector, QuantizeError> {
    match &qv.payload {
        Payload::Exact(values) => Ok(ParamVector::from_vec(values.clone())),
        Payload::Levels { negative, levels } => {
            let s = qv.spec.s;
            let mut out = Vec::with_capacity(levels.len());
            for (index, (&level, &neg)) in levels.iter().zip(negative).enumerate() {
                if level > s {
                    return Err(QuantizeError::LevelOutOfRange { index, level, s });
                }
                let mag = qv.norm * level as f64 / s as f64;
                out.push(if neg { -mag } else { mag });
            }
            Ok(ParamVector::from_vec(out))
        }
    }
}

/// Bit counts for one encoded vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PayloadBits {
    /// Exact length under the fixed-width wire format.
    pub exact: u64,
    /// The `2.8 d + 32` estimate for Elias-coded QSGD at `s = sqrt(d)`.
    pub nominal: f64,
}

pub fn payload_bits(d: usize, spec: &QuantizerSpec) -> PayloadBits {
    let d64 = d as u64;
    let exact = match spec.mode {
        QuantMode::Identity => 32 * d64,
        QuantMode::Stochastic => 32 + d64 * (1 + spec.level_bits() as u64),
    };
    PayloadBits {
        exact,
        nominal: 2.8 * d as f64 + 32.0,
    }
}

/// `C1 / C2 = (32 d K1) / ((2.8 d + 32) K2)`: total uplink cost of
/// full-precision rounds over QSGD rounds at `s = sqrt(d)`.
pub fn comm_cost_ratio(d: f64, k1: f64, k2: f64) -> f64 {
    (32.0 * d * k1) / ((2.8 * d + 32.0) * k2)
}

struct BitWriter {
    bytes: Vec<u8>,
    used: u64,
}

impl BitWriter {
    fn new() -> Self {
        Self {
            bytes: Vec::new(),
            used: 0,
        }
    }

    fn push(&mut self, value: u64, width: u32) {
        for shift in (0..width).rev() {
            let bit = (value >> shift) & 1;
            let pos = (self.used % 8) as u32;
            if pos == 0 {
                self.bytes.push(0);
            }
            if bit == 1 {
                *self.bytes.last_mut().expect("pushed above") |= 0x80 >> pos;
            }
            self.used += 1;
        }
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    pos: u64,
}

impl BitReader<'_> {
    fn take(&mut self, width: u32) -> u64 {
        let mut out = 0u64;
        for _ in 0..width {
            let byte = self.bytes[(self.pos / 8) as usize];
            let bit = (byte >> (7 - (self.pos % 8))) & 1;
            out = (out << 1) | bit as u64;
            self.pos += 1;
        }
        out
    }
}

/// Serializes to the wire format. Output length is `ceil(payload_bits / 8)`.
pub fn to_wire(qv: &QuantizedVector) -> Vec<u8> {
    let mut w = BitWriter::new();
    match &qv.payload {
        Payload::Exact(values) => {
            for &v in values {
                w.push((v as f32).to_bits() as u64, 32);
            }
        }
        Payload::Levels { negative, levels } => {
            w.push((qv.norm as f32).to_bits() as u64, 32);
            if qv.norm != 0.0 {
                for &neg in negative {
                    w.push(neg as u64, 1);
                }
                let width = qv.spec.level_bits();
                for &level in levels {
                    w.push(level as u64, width);
                }
            }
        }
    }
    debug_assert_eq!(w.used, qv.payload_bits);
    w.bytes
}

/// Parses a wire payload of known dimension and spec. The norm comes back
/// rounded to f32, as transmitted.
pub fn from_wire(
    bytes: &[u8],
    dim: usize,
    spec: &QuantizerSpec,
) -> Result<QuantizedVector, QuantizeError> {
    let need_header = match spec.mode {
        QuantMode::Identity => payload_bits(dim, spec).exact,
        QuantMode::Stochastic => 32,
    };
    let bytes_for = |bits: u64| bits.div_ceil(8) as usize;
    if bytes.len() < bytes_for(need_header) {
        return Err(QuantizeError::Truncated {
            need: bytes_for(need_header),
            got: bytes.len(),
        });
    }
    let mut r = BitReader { bytes, pos: 0 };
    match spec.mode {
        QuantMode::Identity => {
            let values: Vec<f64> = (0..dim)
                .map(|_| f32::from_bits(r.take(32) as u32) as f64)
                .collect();
            let v = ParamVector::from_vec(values);
            Ok(QuantizedVector {
                spec: *spec,
                dim,
                norm: v.norm(),
                payload: Payload::Exact(v.into_vec()),
                payload_bits: 32 * dim as u64,
            })
        }
        QuantMode::Stochastic => {
            let norm = f32::from_bits(r.take(32) as u32) as f64;
            if norm == 0.0 {
                return QuantizedVector::from_parts(spec.s, 0.0, vec![false; dim], vec![0; dim]);
            }
            let total = payload_bits(dim, spec).exact;
            if bytes.len() < bytes_for(total) {
                return Err(QuantizeError::Truncated {
                    need: bytes_for(total),
                    got: bytes.len(),
                });
            }
            let negative: Vec<bool> = (0..dim).map(|_| r.take(1) == 1).collect();
            let width = spec.level_bits();
            let levels: Vec<u32> = (0..dim).map(|_| r.take(width) as u32).collect();
            QuantizedVector::from_parts(spec.s, norm, negative, levels)
        }
    }
}
