//! Biased causal self-attention and similarity-weighted sparse masking.
//!
//! Attention logits are `(q_r . k_c + beta_rc) / sqrt(d)`, where `beta` is
//! the camera bias: the cosine between the direction vectors of the two
//! positions plus a learned offset. The mask decides which `(r, c)` pairs
//! take part at all.

mod bias;
mod kernel;
mod mask;

pub use bias::{
    bias_offsets, build_bias, image_block, sequence_cosine, BiasOffsets, CameraBias, FullOffsets,
    OffsetScheme, RelativeOffsets,
};
pub use kernel::{dense_attention_forward, sparse_attention_forward};
pub use mask::{
    build_sparse_mask, causal_mask, mask_strategies, sparse_attention_flops, DenseMask,
    MaskRequest, MaskStrategy, ScoreFlops, SparseMask, SparseMaskStrategy,
};

use bevgen_numcore::Var;

use crate::{Error, Result};

/// Scaled dot-product attention with an additive logit bias.
///
/// `q` is `[.., L, d]`, `k` and `v` are `[.., L', d]`; `bias` is `[L, L']`
/// and `mask` holds `L * L'` flags (true = attend), both shared across the
/// leading (head) dimensions. A query row with no allowed key is an error.
pub fn biased_attention<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    bias: Option<Var<'t>>,
    mask: &[bool],
) -> Result<Var<'t>> {
    let qs = q.shape();
    let ks = k.shape();
    if qs.len() < 2 || ks.len() != qs.len() || *qs.last().unwrap() != *ks.last().unwrap() {
        return Err(Error::Config(format!(
            "attention shapes do not match: q {qs:?}, k {ks:?}"
        )));
    }
    let (l, lk, d) = (qs[qs.len() - 2], ks[ks.len() - 2], qs[qs.len() - 1]);
    let mut logits = q.matmul(k.transpose()?)?;
    if let Some(b) = bias {
        if b.shape() != [l, lk] {
            return Err(Error::Config(format!(
                "bias shape {:?} does not match logits {l}x{lk}",
                b.shape()
            )));
        }
        logits = logits.add(b)?;
    }
    let weights = logits
        .scale(1.0 / (d as f64).sqrt())
        .masked_softmax(mask, &[l, lk])?;
    Ok(weights.matmul(v)?)
}
