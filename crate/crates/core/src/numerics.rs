//! Dense-vector primitives shared by every other module.
//!
//! Everything here is deterministic. Randomness goes through [`RngStream`],
//! which derives an independent ChaCha stream from a `(seed, label)` pair so
//! that one subsystem drawing more or fewer numbers never shifts another
//! subsystem's draws.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Default epsilon for [`layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// A dense, finite, non-empty real vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Vector(Vec<f64>);

impl Vector {
    /// Wraps `data`, rejecting empty input and NaN/Inf entries.
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::invalid("vector must have at least one entry"));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("vector"));
        }
        Ok(Vector(data))
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim > 0, "vector dimension must be positive");
        Vector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &Vector) -> Result<f64> {
        check_dims(self.dim(), other.dim())?;
        Ok(dot(&self.0, &other.0))
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    /// `self + scale * other`.
    pub fn add_scaled(&self, scale: f64, other: &Vector) -> Result<Vector> {
        check_dims(self.dim(), other.dim())?;
        let data: Vec<f64> = self
            .0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| a + scale * b)
            .collect();
        Vector::new(data)
    }

    pub fn sub(&self, other: &Vector) -> Result<Vector> {
        self.add_scaled(-1.0, other)
    }

    pub fn scale(&self, factor: f64) -> Result<Vector> {
        Vector::new(self.0.iter().map(|x| x * factor).collect())
    }

    /// Cosine similarity; zero vectors give 0.
    pub fn cosine(&self, other: &Vector) -> Result<f64> {
        let d = self.dot(other)?;
        let n = self.norm() * other.norm();
        Ok(if n == 0.0 { 0.0 } else { d / n })
    }
}

impl TryFrom<Vec<f64>> for Vector {
    type Error = Error;

    fn try_from(data: Vec<f64>) -> Result<Self> {
        Vector::new(data)
    }
}

impl From<Vector> for Vec<f64> {
    fn from(v: Vector) -> Self {
        v.0
    }
}

impl AsRef<[f64]> for Vector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

pub(crate) fn check_dims(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Mean and population variance.
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var)
}

/// `gain * (v - mean) / sqrt(var + eps) + bias` with population variance.
pub fn layer_norm(v: &Vector, gain: &Vector, bias: &Vector, eps: f64) -> Result<Vector> {
    check_dims(v.dim(), gain.dim())?;
    check_dims(v.dim(), bias.dim())?;
    if !(eps > 0.0) {
        return Err(Error::invalid("layer_norm eps must be positive"));
    }
    let (mean, var) = mean_var(v.as_slice());
    let inv = 1.0 / (var + eps).sqrt();
    let out = v
        .as_slice()
        .iter()
        .zip(gain.as_slice().iter().zip(bias.as_slice()))
        .map(|(x, (g, b))| g * (x - mean) * inv + b)
        .collect();
    Vector::new(out)
}

/// Logistic function of `x / temp`.
pub fn sigmoid_temp(x: f64, temp: f64) -> Result<f64> {
    if !(temp > 0.0) {
        return Err(Error::invalid("temperature must be positive"));
    }
    Ok(sigmoid(x / temp))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// KL(p ‖ q) in nats; terms with `p_i = 0` contribute nothing.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    check_dims(p.len(), q.len())?;
    for (name, dist) in [("p", p), ("q", q)] {
        if dist.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::invalid(format!("{name} is not a probability vector")));
        }
        let total: f64 = dist.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("{name} sums to {total}, not 1")));
        }
    }
    let mut kl = 0.0;
    for (pi, qi) in p.iter().zip(q) {
        if *pi == 0.0 {
            continue;
        }
        if *qi <= 0.0 {
            return Err(Error::invalid("q has zero mass where p is positive"));
        }
        kl += pi * (pi / qi).ln();
    }
    // Rounding can leave tiny negative values for p == q.
    Ok(kl.max(0.0))
}

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Hex SHA-256 over the little-endian bytes of a sequence of floats.
pub fn checksum_f64<'a>(chunks: impl IntoIterator<Item = &'a [f64]>) -> String {
    let mut hasher = Sha256::new();
    for chunk in chunks {
        for x in chunk {
            hasher.update(x.to_le_bytes());
        }
    }
    hex::encode(hasher.finalize())
}

/// A labelled, seedable random stream.
///
/// The same `(seed, label)` always yields the same draws on every platform.
/// Child streams created with [`RngStream::fork`] are independent of the
/// parent and of each other.
#[derive(Clone, Debug)]
pub struct RngStream {
    key: [u8; 32],
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, label: &str) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(seed.to_le_bytes());
        hasher.update(label.as_bytes());
        Self::from_key(hasher.finalize().into())
    }

    fn from_key(key: [u8; 32]) -> Self {
        RngStream {
            key,
            rng: ChaCha8Rng::from_seed(key),
        }
    }

    /// A child stream identified by `index`; does not advance `self`.
    pub fn fork(&self, index: u64) -> RngStream {
        let mut hasher = Sha256::new();
        hasher.update(self.key);
        hasher.update(index.to_le_bytes());
        Self::from_key(hasher.finalize().into())
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        self.rng.random_range(0..n)
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn range_inclusive(&mut self, lo: u64, hi: u64) -> u64 {
        assert!(lo <= hi);
        self.rng.random_range(lo..=hi)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.random::<u64>()
    }

    /// Fisher-Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i as u64 + 1) as usize;
            idx.swap(i, j);
        }
        idx
    }
}
