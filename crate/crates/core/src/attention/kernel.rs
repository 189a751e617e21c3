//! Forward-only single-head kernels used for benchmarking and inference
//! cost measurements. Both score whole blocks, so their work matches
//! [`super::sparse_attention_flops`].

use super::SparseMask;
use crate::{Error, Result};

fn check(q: &[f64], k: &[f64], v: &[f64], d: usize, len: usize) -> Result<()> {
    if d == 0 || q.len() != len * d || k.len() != len * d || v.len() != len * d {
        return Err(Error::Config(format!(
            "kernel inputs must be [{len}, {d}] (got {}, {}, {})",
            q.len(),
            k.len(),
            v.len()
        )));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Softmax over the listed `(column, score)` pairs, then mix value rows.
fn mix(scores: &[(usize, f64)], v: &[f64], d: usize, out: &mut [f64]) {
    let max = scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    out.fill(0.0);
    for &(c, s) in scores {
        let e = (s - max).exp();
        total += e;
        for (o, &x) in out.iter_mut().zip(&v[c * d..(c + 1) * d]) {
            *o += e * x;
        }
    }
    out.iter_mut().for_each(|o| *o /= total);
}

/// Attention restricted to the active blocks of `mask`. `q`, `k`, `v` are
/// `[S, d]` with `S = mask.len()`.
pub fn sparse_attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    d: usize,
    mask: &SparseMask,
) -> Result<Vec<f64>> {
    let s = mask.len();
    check(q, k, v, d, s)?;
    let nb = mask.bev_tokens;
    let b = mask.block;
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; s * d];
    let mut scores = Vec::new();
    for r in 0..nb {
        scores.clear();
        for c in 0..=r {
            scores.push((
                c,
                dot(&q[r * d..(r + 1) * d], &k[c * d..(c + 1) * d]) * scale,
            ));
        }
        mix(&scores, v, d, &mut out[r * d..(r + 1) * d]);
    }
    let mut block_scores = vec![0.0; b * b];
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); b];
    for qb in 0..mask.blocks {
        let r0 = nb + qb * b;
        let r1 = (r0 + b).min(s);
        for (i, row) in rows.iter_mut().enumerate().take(r1 - r0) {
            row.clear();
            let r = r0 + i;
            for c in 0..nb {
                row.push((
                    c,
                    dot(&q[r * d..(r + 1) * d], &k[c * d..(c + 1) * d]) * scale,
                ));
            }
        }
        for kb in 0..=qb {
            if !mask.is_active(qb, kb) {
                continue;
            }
            let c0 = nb + kb * b;
            let c1 = (c0 + b).min(s);
            // Score the whole tile, then keep the causal part.
            for r in r0..r1 {
                for c in c0..c1 {
                    block_scores[(r - r0) * b + c - c0] =
                        dot(&q[r * d..(r + 1) * d], &k[c * d..(c + 1) * d]) * scale;
                }
            }
            for r in r0..r1 {
                for c in c0..c1.min(r + 1) {
                    rows[r - r0].push((c, block_scores[(r - r0) * b + c - c0]));
                }
            }
        }
        for r in r0..r1 {
            mix(&rows[r - r0], v, d, &mut out[r * d..(r + 1) * d]);
        }
    }
    Ok(out)
}

/// Causal attention scoring every pair, as a dense kernel would.
pub fn dense_attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    d: usize,
    len: usize,
) -> Result<Vec<f64>> {
    check(q, k, v, d, len)?;
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; len * d];
    let mut all = vec![0.0; len];
    let mut scores = Vec::with_capacity(len);
    for r in 0..len {
        for (c, a) in all.iter_mut().enumerate() {
            *a = dot(&q[r * d..(r + 1) * d], &k[c * d..(c + 1) * d]) * scale;
        }
        scores.clear();
        scores.extend(all[..=r].iter().copied().enumerate());
        mix(&scores, v, d, &mut out[r * d..(r + 1) * d]);
    }
    Ok(out)
}
