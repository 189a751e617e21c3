use bevgen_numcore::Tensor;
use rand::Rng;

use crate::{Error, Result};

/// Index of the code nearest to `v` in squared Euclidean distance.
///
/// Codes are scanned in index order and only a strictly smaller distance
/// replaces the incumbent, so ties resolve to the lowest index. A code is
/// abandoned as soon as its partial sum reaches the incumbent distance.
pub fn nearest_code(codes: &[f64], dim: usize, v: &[f64]) -> usize {
    debug_assert_eq!(v.len(), dim);
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (m, code) in codes.chunks_exact(dim).enumerate() {
        let mut d = 0.0;
        let mut pruned = false;
        for (a, b) in v.iter().zip(code) {
            let diff = a - b;
            d += diff * diff;
            if d >= best_d {
                pruned = true;
                break;
            }
        }
        if !pruned && d < best_d {
            best = m;
            best_d = d;
        }
    }
    best
}

/// Nearest code for each row of the `[N, dim]` buffer `features`.
pub fn nearest_codes(codes: &Tensor, features: &[f64]) -> Result<Vec<usize>> {
    let dim = codes.dim(-1);
    if codes.ndim() != 2 || !features.len().is_multiple_of(dim) {
        return Err(Error::Config(format!(
            "feature buffer of {} values does not match code dimension {dim}",
            features.len()
        )));
    }
    Ok(features
        .chunks_exact(dim)
        .map(|v| nearest_code(codes.data(), dim, v))
        .collect())
}

/// Ordered code vectors with per-code usage counts.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    /// `[M, n]` code vectors.
    pub vectors: Tensor,
    pub usage: Vec<u64>,
}

impl Codebook {
    pub fn new(vectors: Tensor) -> Result<Self> {
        if vectors.ndim() != 2 || vectors.shape()[0] < 2 {
            return Err(Error::Config(format!(
                "codebook needs shape [M >= 2, n], got {:?}",
                vectors.shape()
            )));
        }
        if !vectors.is_finite() {
            return Err(Error::Config("codebook vectors must be finite".into()));
        }
        let m = vectors.shape()[0];
        Ok(Self {
            vectors,
            usage: vec![0; m],
        })
    }

    /// Codes drawn uniformly from `[-1/M, 1/M]`.
    pub fn random<R: Rng>(size: usize, dim: usize, rng: &mut R) -> Result<Self> {
        let a = 1.0 / size.max(1) as f64;
        Self::new(Tensor::uniform(&[size, dim], -a, a, rng))
    }

    pub fn size(&self) -> usize {
        self.vectors.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }

    /// Tokens for an `[N, n]` feature buffer plus the quantized rows.
    pub fn quantize(&self, features: &[f64]) -> Result<(Vec<usize>, Vec<f64>)> {
        if !features.len().is_multiple_of(self.dim()) {
            return Err(Error::Config(format!(
                "feature length {} is not a multiple of code dimension {}",
                features.len(),
                self.dim()
            )));
        }
        let tokens = nearest_codes(&self.vectors, features)?;
        let quantized = self.lookup(&tokens)?;
        Ok((tokens, quantized))
    }

    /// Quantize and add the result to the usage counts.
    pub fn quantize_counting(&mut self, features: &[f64]) -> Result<(Vec<usize>, Vec<f64>)> {
        let out = self.quantize(features)?;
        for &t in &out.0 {
            self.usage[t] += 1;
        }
        Ok(out)
    }

    pub fn lookup(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        let (m, dim) = (self.size(), self.dim());
        let mut out = Vec::with_capacity(tokens.len() * dim);
        for &t in tokens {
            if t >= m {
                return Err(Error::Index {
                    what: "codebook token",
                    index: t,
                    size: m,
                });
            }
            out.extend_from_slice(self.vectors.row(t));
        }
        Ok(out)
    }
}
