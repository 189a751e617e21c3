use std::collections::BTreeMap;

use bevgen_numcore::Tape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::PriorModel;
use crate::{Error, Result};

/// Top-k sampling at temperature `T`; `T = 0` picks the argmax.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub top_k: usize,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_k: 32,
            seed: 0,
        }
    }
}

impl SamplingConfig {
    pub fn argmax() -> Self {
        Self {
            temperature: 0.0,
            top_k: 1,
            seed: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) || self.top_k == 0 {
            return Err(Error::Config(format!(
                "sampling needs temperature >= 0 and top_k >= 1 (got {}, {})",
                self.temperature, self.top_k
            )));
        }
        Ok(())
    }

    fn pick(&self, logits: &[f64], rng: &mut ChaCha8Rng) -> usize {
        let mut order: Vec<usize> = (0..logits.len()).collect();
        order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
        if self.temperature == 0.0 {
            return order[0];
        }
        order.truncate(self.top_k);
        let max = logits[order[0]];
        let w: Vec<f64> = order
            .iter()
            .map(|&i| ((logits[i] - max) / self.temperature).exp())
            .collect();
        let total: f64 = w.iter().sum();
        let mut u = rng.random::<f64>() * total;
        for (&i, &wi) in order.iter().zip(&w) {
            if u < wi {
                return i;
            }
            u -= wi;
        }
        *order.last().expect("top_k >= 1")
    }
}

/// Camera token grids for one BEV layout. Cameras in `provided` are copied
/// into the sequence as their turn comes and never sampled; the others are
/// drawn one token at a time in decoding order.
pub fn generate(
    model: &PriorModel,
    bev: &[usize],
    provided: &BTreeMap<usize, Vec<usize>>,
    sampling: &SamplingConfig,
) -> Result<Vec<Vec<usize>>> {
    Ok(generate_batch(
        model,
        &[bev.to_vec()],
        std::slice::from_ref(provided),
        sampling,
    )?
    .remove(0))
}

/// [`generate`] for several layouts at once. Sample `i` draws from its own
/// random stream, so its result does not depend on the batch around it.
pub fn generate_batch(
    model: &PriorModel,
    bevs: &[Vec<usize>],
    provided: &[BTreeMap<usize, Vec<usize>>],
    sampling: &SamplingConfig,
) -> Result<Vec<Vec<Vec<usize>>>> {
    sampling.validate()?;
    if bevs.len() != provided.len() {
        return Err(Error::Config("one provided-view map per layout".into()));
    }
    let layout = &model.layout;
    let per = layout.tokens_per_camera();
    for views in provided {
        for (&k, grid) in views {
            if k >= layout.cameras || grid.len() != per {
                return Err(Error::Config(format!(
                    "provided view {k} must be a camera below {} with {per} tokens (got {})",
                    layout.cameras,
                    grid.len()
                )));
            }
        }
    }
    let batch = bevs.len();
    let nb = layout.bev_tokens();
    let mc = model.config.camera_vocab;
    let mut ids: Vec<Vec<usize>> = bevs
        .iter()
        .map(|b| model.sequence_ids(b, &[]))
        .collect::<Result<_>>()?;
    let mut rngs: Vec<ChaCha8Rng> = (0..batch)
        .map(|i| {
            let mut r = ChaCha8Rng::seed_from_u64(sampling.seed);
            r.set_stream(i as u64);
            r
        })
        .collect();
    for &(k, i, j) in &layout.order {
        let copy: Vec<Option<usize>> = provided
            .iter()
            .map(|v| v.get(&k).map(|g| g[i * layout.latent_width + j]))
            .collect();
        if copy.iter().all(Option::is_some) {
            for (seq, c) in ids.iter_mut().zip(&copy) {
                seq.push(c.expect("checked"));
            }
            continue;
        }
        let len = ids[0].len();
        let flat: Vec<usize> = ids.iter().flatten().copied().collect();
        let tape = Tape::new();
        let p = model.store.bind(&tape);
        let hidden = model.hidden(&p, &flat, batch, None)?;
        let logits = model.logits(&p, hidden, len - 1, 1)?.value();
        for (b, seq) in ids.iter_mut().enumerate() {
            let t = match copy[b] {
                Some(t) => t,
                None => sampling.pick(&logits.data()[b * mc..(b + 1) * mc], &mut rngs[b]),
            };
            seq.push(t);
        }
    }
    ids.iter()
        .map(|seq| layout.camera_grids(&seq[nb..]))
        .collect()
}
