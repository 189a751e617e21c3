use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::registry::Registry;
use crate::{Error, Result};

/// Lower-triangular `len x len` mask.
pub fn causal_mask(len: usize) -> Vec<bool> {
    let mut m = vec![false; len * len];
    for r in 0..len {
        m[r * len..r * len + r + 1].fill(true);
    }
    m
}

/// Causal attention pattern over `bev_tokens + image_tokens` positions.
///
/// BEV queries attend causally among themselves and every image query
/// attends every BEV key. The image-query by image-key block is stored at
/// block granularity: a pair is allowed iff its block is active and the key
/// does not come after the query.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMask {
    pub bev_tokens: usize,
    pub image_tokens: usize,
    pub block: usize,
    /// Blocks per side of the (padded) image block.
    pub blocks: usize,
    /// `blocks x blocks`, row = query block.
    pub active: Vec<bool>,
    /// Window and diagonal blocks, always active.
    pub forced: Vec<bool>,
    pub density_target: f64,
    pub window: usize,
    pub warning: Option<String>,
}

impl SparseMask {
    pub fn len(&self) -> usize {
        self.bev_tokens + self.image_tokens
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every causal block active.
    pub fn full_causal(bev_tokens: usize, image_tokens: usize, block: usize) -> Self {
        let nb = image_tokens.div_ceil(block);
        let mut active = vec![false; nb * nb];
        for q in 0..nb {
            active[q * nb..q * nb + q + 1].fill(true);
        }
        Self {
            bev_tokens,
            image_tokens,
            block,
            blocks: nb,
            forced: active.clone(),
            active,
            density_target: 1.0,
            window: image_tokens,
            warning: None,
        }
    }

    pub fn is_active(&self, qb: usize, kb: usize) -> bool {
        self.active[qb * self.blocks + kb]
    }

    /// Active image blocks over all `blocks^2` blocks.
    pub fn density(&self) -> f64 {
        let n = self.active.iter().filter(|&&a| a).count();
        n as f64 / (self.blocks * self.blocks).max(1) as f64
    }

    pub fn allows(&self, r: usize, c: usize) -> bool {
        let nb = self.bev_tokens;
        if c > r || r >= self.len() {
            return false;
        }
        if c < nb {
            return true;
        }
        self.is_active((r - nb) / self.block, (c - nb) / self.block)
    }

    /// Token-level mask of the first `len` positions, row-major.
    pub fn prefix(&self, len: usize) -> Vec<bool> {
        let mut out = Vec::with_capacity(len * len);
        for r in 0..len {
            for c in 0..len {
                out.push(self.allows(r, c));
            }
        }
        out
    }

    pub fn to_dense(&self) -> Vec<bool> {
        self.prefix(self.len())
    }
}

/// Score multiply-accumulates of one head: image queries against image
/// keys (whole active blocks) and against BEV keys.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScoreFlops {
    pub image: u64,
    pub bev: u64,
}

impl ScoreFlops {
    pub fn total(&self) -> u64 {
        self.image + self.bev
    }

    /// Count of a dense kernel that scores every image-image pair.
    pub fn dense(mask: &SparseMask, head_dim: usize) -> Self {
        let side = (mask.blocks * mask.block) as u64;
        Self {
            image: side * side * head_dim as u64,
            bev: (mask.image_tokens * mask.bev_tokens * head_dim) as u64,
        }
    }
}

/// Exact score cost under `mask`; each active block costs `b^2 d`.
pub fn sparse_attention_flops(mask: &SparseMask, head_dim: usize) -> ScoreFlops {
    let blocks = mask.active.iter().filter(|&&a| a).count() as u64;
    let b = mask.block as u64;
    ScoreFlops {
        image: blocks * b * b * head_dim as u64,
        bev: (mask.image_tokens * mask.bev_tokens * head_dim) as u64,
    }
}

/// Split `extra` picks over rows with capacities `avail`, as evenly as the
/// capacities allow. Leftover single picks go to randomly chosen rows.
fn water_fill<R: Rng>(avail: &[usize], extra: usize, rng: &mut R) -> Vec<usize> {
    let mut level = 0;
    let taken = |l: usize| avail.iter().map(|&a| a.min(l)).sum::<usize>();
    let max = avail.iter().copied().max().unwrap_or(0);
    while level < max && taken(level + 1) <= extra {
        level += 1;
    }
    let mut quota: Vec<usize> = avail.iter().map(|&a| a.min(level)).collect();
    let mut left = extra - taken(level);
    let mut open: Vec<usize> = (0..avail.len()).filter(|&q| avail[q] > level).collect();
    open.shuffle(rng);
    for q in open {
        if left == 0 {
            break;
        }
        quota[q] += 1;
        left -= 1;
    }
    quota
}

/// Block-sparse causal mask over the image tokens.
///
/// `image_cosine` is the `image_tokens^2` cosine block in sequence order.
/// Per query block the diagonal block and the blocks covering the last
/// `window` tokens are forced on. The remaining budget, `round(density *
/// blocks^2)` minus the forced count, is split over query blocks and each
/// row draws its share from its causal candidates without replacement,
/// with probability proportional to the block-averaged `(cos + 1) / 2`.
pub fn build_sparse_mask(
    image_cosine: &[f64],
    image_tokens: usize,
    bev_tokens: usize,
    density: f64,
    window: usize,
    block: usize,
    seed: u64,
) -> Result<SparseMask> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::Config(format!(
            "mask density {density} is outside (0, 1]"
        )));
    }
    if block == 0 {
        return Err(Error::Config("mask block size must be positive".into()));
    }
    if image_cosine.len() != image_tokens * image_tokens {
        return Err(Error::Config(format!(
            "cosine block has {} entries for {image_tokens} image tokens",
            image_cosine.len()
        )));
    }
    let nb = image_tokens.div_ceil(block);
    let mut mask = SparseMask::full_causal(bev_tokens, image_tokens, block);
    mask.density_target = density;
    mask.window = window;
    mask.active.fill(false);
    mask.forced.fill(false);

    let back = window.div_ceil(block);
    for q in 0..nb {
        for k in q.saturating_sub(back)..=q {
            mask.forced[q * nb + k] = true;
        }
    }
    mask.active.copy_from_slice(&mask.forced);
    let forced = mask.forced.iter().filter(|&&f| f).count();
    let causal = nb * (nb + 1) / 2;
    let target = ((density * (nb * nb) as f64).round() as usize).min(causal);
    if target < forced {
        let msg = format!(
            "density {density} is below the forced density {:.4}; using the forced blocks only",
            forced as f64 / (nb * nb) as f64
        );
        log::warn!("{msg}");
        mask.warning = Some(msg);
        return Ok(mask);
    }

    // Average-pooled sampling weights.
    let mut weight = vec![0.0; nb * nb];
    for q in 0..nb {
        let rows = q * block..((q + 1) * block).min(image_tokens);
        for k in 0..=q {
            let cols = k * block..((k + 1) * block).min(image_tokens);
            let mut sum = 0.0;
            for r in rows.clone() {
                for c in cols.clone() {
                    sum += (image_cosine[r * image_tokens + c] + 1.0) / 2.0;
                }
            }
            weight[q * nb + k] = sum / (rows.len() * cols.len()) as f64;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let candidates: Vec<Vec<usize>> = (0..nb)
        .map(|q| (0..=q).filter(|&k| !mask.forced[q * nb + k]).collect())
        .collect();
    let avail: Vec<usize> = candidates.iter().map(Vec::len).collect();
    let quota = water_fill(&avail, target - forced, &mut rng);
    for (q, cands) in candidates.iter().enumerate() {
        // Weighted sampling without replacement: keep the `quota` largest
        // keys ln(u) / w.
        let mut keyed: Vec<(f64, usize)> = cands
            .iter()
            .map(|&k| {
                let u: f64 = 1.0 - rng.random::<f64>();
                let w = weight[q * nb + k];
                let key = if w > 0.0 {
                    u.ln() / w
                } else {
                    f64::NEG_INFINITY
                };
                (key, k)
            })
            .collect();
        keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(_, k) in keyed.iter().take(quota[q]) {
            mask.active[q * nb + k] = true;
        }
    }
    Ok(mask)
}

/// Everything a mask strategy may look at.
#[derive(Clone, Copy, Debug)]
pub struct MaskRequest<'a> {
    pub bev_tokens: usize,
    pub image_tokens: usize,
    pub image_cosine: &'a [f64],
    pub density: f64,
    pub window: usize,
    pub block: usize,
    pub seed: u64,
}

pub trait MaskStrategy: Send + Sync {
    fn name(&self) -> &'static str;
    fn build(&self, request: &MaskRequest) -> Result<SparseMask>;
}

/// Full causal attention.
pub struct DenseMask;

impl MaskStrategy for DenseMask {
    fn name(&self) -> &'static str {
        "dense"
    }

    fn build(&self, req: &MaskRequest) -> Result<SparseMask> {
        if req.block == 0 {
            return Err(Error::Config("mask block size must be positive".into()));
        }
        Ok(SparseMask::full_causal(
            req.bev_tokens,
            req.image_tokens,
            req.block,
        ))
    }
}

/// [`build_sparse_mask`].
pub struct SparseMaskStrategy;

impl MaskStrategy for SparseMaskStrategy {
    fn name(&self) -> &'static str {
        "sparse"
    }

    fn build(&self, req: &MaskRequest) -> Result<SparseMask> {
        build_sparse_mask(
            req.image_cosine,
            req.image_tokens,
            req.bev_tokens,
            req.density,
            req.window,
            req.block,
            req.seed,
        )
    }
}

/// Registry holding `dense` and `sparse`.
pub fn mask_strategies() -> Registry<dyn MaskStrategy> {
    let mut reg: Registry<dyn MaskStrategy> = Registry::new("attention mask");
    reg.register("dense", Arc::new(DenseMask));
    reg.register("sparse", Arc::new(SparseMaskStrategy));
    reg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn water_fill_is_even_and_capped() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q = water_fill(&[0, 1, 5, 5, 5], 8, &mut rng);
        assert_eq!(q.iter().sum::<usize>(), 8);
        assert_eq!(q[0], 0);
        assert_eq!(q[1], 1);
        assert!(q[2..].iter().all(|&x| x == 2 || x == 3));
        assert_eq!(water_fill(&[2, 2], 10, &mut rng), vec![2, 2]);
    }

    #[test]
    fn causal_mask_is_lower_triangular() {
        let m = causal_mask(3);
        assert_eq!(
            m,
            vec![true, false, false, true, true, false, true, true, true]
        );
    }

    #[test]
    fn bad_arguments_rejected() {
        let cos = vec![0.0; 16];
        assert!(build_sparse_mask(&cos, 4, 0, 0.0, 1, 2, 0).is_err());
        assert!(build_sparse_mask(&cos, 4, 0, 1.5, 1, 2, 0).is_err());
        assert!(build_sparse_mask(&cos, 4, 0, 0.5, 1, 0, 0).is_err());
        assert!(build_sparse_mask(&cos[..15], 4, 0, 0.5, 1, 2, 0).is_err());
        assert!(mask_strategies().get("strided").is_err());
    }
}
