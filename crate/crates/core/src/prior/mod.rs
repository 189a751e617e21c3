//! GPT-style prior over BEV and camera tokens.
//!
//! A sequence is the BEV token grid followed by the camera tokens in
//! decoding order. The model predicts each camera token from everything
//! before it; BEV tokens are context only.

mod generate;
mod train;
mod weights;

pub use generate::{generate, generate_batch, SamplingConfig};
pub use train::{train, PriorTrainer, StepLog, TrainConfig};
pub use weights::{foreground_weights, weights_from_masks};

use bevgen_numcore::nn::{Bound, LayerNorm, Linear, ParamStore};
use bevgen_numcore::{Tensor, Var};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    bias_offsets, biased_attention, image_block, mask_strategies, sequence_cosine, CameraBias,
    MaskRequest, SparseMask,
};
use crate::geometry::{BevGeometry, CameraRig, DirectionField, DirectionOptions};
use crate::sequence::{decode_orders, EmbeddingTables, SequenceGeometry, SequenceLayout};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct PriorConfig {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    /// Hidden width of the MLP as a multiple of `width`.
    pub mlp_ratio: usize,
    pub dropout: f64,
    pub camera_vocab: usize,
    pub bev_vocab: usize,
    /// Decode order name (`center_out` or `raster`).
    pub order: String,
    pub camera_bias: bool,
    pub spatial_embed: bool,
    /// Bias offset parameterization (`relative` or `full`).
    pub offsets: String,
    /// Attention mask strategy (`dense` or `sparse`).
    pub attention: String,
    pub density: f64,
    pub window: usize,
    pub block: usize,
    pub mask_seed: u64,
    /// Use bare ray directions for camera tokens instead of `ray + t`.
    pub pure_direction: bool,
    pub normalize_directions: bool,
}

impl PriorConfig {
    /// Desk-scale defaults: width 128, 4 layers, 4 heads.
    pub fn desk(camera_vocab: usize, bev_vocab: usize) -> Self {
        Self {
            width: 128,
            layers: 4,
            heads: 4,
            mlp_ratio: 4,
            dropout: 0.0,
            camera_vocab,
            bev_vocab,
            order: "center_out".into(),
            camera_bias: true,
            spatial_embed: true,
            offsets: "relative".into(),
            attention: "dense".into(),
            density: 0.35,
            window: 24,
            block: 8,
            mask_seed: 0,
            pure_direction: false,
            normalize_directions: false,
        }
    }

    /// Every violated constraint, empty when valid.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.width == 0 || self.layers == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            out.push("width, layers, heads and mlp_ratio must be positive".into());
        } else if !self.width.is_multiple_of(self.heads) {
            out.push(format!(
                "width {} is not divisible by heads {}",
                self.width, self.heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            out.push(format!("dropout {} is outside [0, 1)", self.dropout));
        }
        if self.camera_vocab < 2 || self.bev_vocab < 2 {
            out.push("vocabularies need at least two codes".into());
        }
        if !decode_orders().contains(&self.order) {
            out.push(format!("unknown decode order {:?}", self.order));
        }
        if !bias_offsets().contains(&self.offsets) {
            out.push(format!("unknown bias offsets {:?}", self.offsets));
        }
        if !mask_strategies().contains(&self.attention) {
            out.push(format!("unknown attention mode {:?}", self.attention));
        }
        if !(self.density > 0.0 && self.density <= 1.0) {
            out.push(format!("density {} is outside (0, 1]", self.density));
        }
        if self.block == 0 {
            out.push("block must be positive".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

/// Pre-norm transformer over the shared vocabulary with a camera-vocabulary
/// output head. The head starts at zero, so an untrained model predicts
/// the uniform distribution.
#[derive(Debug)]
pub struct PriorModel {
    pub config: PriorConfig,
    pub store: ParamStore,
    pub layout: SequenceLayout,
    pub geometry: SequenceGeometry,
    pub embed: EmbeddingTables,
    blocks: Vec<Block>,
    final_norm: LayerNorm,
    head: Linear,
    pub bias: Option<CameraBias>,
    pub mask: SparseMask,
}

impl PriorModel {
    pub fn new(config: PriorConfig, rig: &CameraRig, bev: &BevGeometry, seed: u64) -> Result<Self> {
        config.validate()?;
        let order = decode_orders().get(&config.order)?;
        let layout = SequenceLayout::from_rig(rig, bev, order.as_ref())?;
        let dirs = DirectionField::new(
            rig,
            bev,
            DirectionOptions {
                pure_direction: config.pure_direction,
                normalize: config.normalize_directions,
            },
        )?;
        let geometry = SequenceGeometry::new(&layout, &dirs)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let e = config.width;
        let s = layout.len();
        let embed = EmbeddingTables::new(
            &mut store,
            config.camera_vocab,
            config.bev_vocab,
            s,
            e,
            config.spatial_embed,
            &mut rng,
        );
        let std = 0.02;
        let resid_std = std / (2.0 * config.layers as f64).sqrt();
        let blocks = (0..config.layers)
            .map(|l| {
                let name = |part: &str| format!("block{l}.{part}");
                Block {
                    ln1: LayerNorm::new(&mut store, &name("ln1"), e),
                    qkv: Linear::new(&mut store, &name("qkv"), e, 3 * e, std, true, &mut rng),
                    proj: Linear::new(&mut store, &name("proj"), e, e, resid_std, true, &mut rng),
                    ln2: LayerNorm::new(&mut store, &name("ln2"), e),
                    fc1: Linear::new(
                        &mut store,
                        &name("fc1"),
                        e,
                        config.mlp_ratio * e,
                        std,
                        true,
                        &mut rng,
                    ),
                    fc2: Linear::new(
                        &mut store,
                        &name("fc2"),
                        config.mlp_ratio * e,
                        e,
                        resid_std,
                        true,
                        &mut rng,
                    ),
                }
            })
            .collect();
        let final_norm = LayerNorm::new(&mut store, "final_norm", e);
        let head = Linear::zeroed(&mut store, "head", e, config.camera_vocab);

        let nb = layout.bev_tokens();
        let cosine = sequence_cosine(&dirs, &layout)?;
        let image_cosine = image_block(&cosine, nb);
        let mask = mask_strategies()
            .get(&config.attention)?
            .build(&MaskRequest {
                bev_tokens: nb,
                image_tokens: layout.camera_tokens(),
                image_cosine: &image_cosine,
                density: config.density,
                window: config.window,
                block: config.block,
                seed: config.mask_seed,
            })?;
        let bias = if config.camera_bias {
            let scheme = bias_offsets().get(&config.offsets)?;
            Some(CameraBias {
                cosine,
                offsets: scheme.create(&mut store, &layout),
            })
        } else {
            None
        };
        Ok(Self {
            config,
            store,
            layout,
            geometry,
            embed,
            blocks,
            final_norm,
            head,
            bias,
            mask,
        })
    }

    pub fn seq_len(&self) -> usize {
        self.layout.len()
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    /// Shared-vocabulary ids of a BEV prefix followed by camera tokens.
    pub fn sequence_ids(&self, bev: &[usize], cameras: &[usize]) -> Result<Vec<usize>> {
        let (mc, mb) = (self.config.camera_vocab, self.config.bev_vocab);
        if bev.len() != self.layout.bev_tokens() {
            return Err(Error::Config(format!(
                "expected {} BEV tokens, got {}",
                self.layout.bev_tokens(),
                bev.len()
            )));
        }
        if let Some(&t) = bev.iter().find(|&&t| t >= mb) {
            return Err(Error::Index {
                what: "BEV token",
                index: t,
                size: mb,
            });
        }
        if let Some(&t) = cameras.iter().find(|&&t| t >= mc) {
            return Err(Error::Index {
                what: "camera token",
                index: t,
                size: mc,
            });
        }
        Ok(bev
            .iter()
            .map(|&t| t + mc)
            .chain(cameras.iter().copied())
            .collect())
    }

    fn attend<'t>(
        &self,
        p: &Bound<'t>,
        block: &Block,
        x: Var<'t>,
        bias: Option<Var<'t>>,
        mask: &[bool],
    ) -> Result<Var<'t>> {
        let shape = x.shape();
        let (b, l, e) = (shape[0], shape[1], shape[2]);
        let h = self.config.heads;
        let dh = e / h;
        let qkv = block
            .qkv
            .forward(p, x)?
            .reshape(&[b, l, 3, h, dh])?
            .permute(&[2, 0, 3, 1, 4])?;
        let part =
            |i: usize| -> Result<Var<'t>> { Ok(qkv.narrow(0, i, 1)?.reshape(&[b, h, l, dh])?) };
        let out = biased_attention(part(0)?, part(1)?, part(2)?, bias, mask)?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, l, e])?;
        Ok(block.proj.forward(p, out)?)
    }

    /// Final hidden states `[B, L, E]` for `batch` equal-length prefixes of
    /// shared-vocabulary ids. `dropout_rng` enables dropout.
    pub fn hidden<'t>(
        &self,
        p: &Bound<'t>,
        ids: &[usize],
        batch: usize,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var<'t>> {
        let mut x = self.embed.embed_batch(p, ids, batch, &self.geometry)?;
        let len = x.shape()[1];
        let mask = self.mask.prefix(len);
        let bias = match &self.bias {
            Some(b) => Some(b.build(p, len)?),
            None => None,
        };
        let rate = self.config.dropout;
        let mut drop = |v: Var<'t>| -> Result<Var<'t>> {
            match dropout_rng.as_deref_mut() {
                Some(rng) if rate > 0.0 => {
                    let keep = 1.0 / (1.0 - rate);
                    let m: Vec<f64> = (0..v.value().numel())
                        .map(|_| {
                            if rng.random::<f64>() < rate {
                                0.0
                            } else {
                                keep
                            }
                        })
                        .collect();
                    let m = Tensor::new(&v.shape(), m)?;
                    Ok(v.mul(v.tape().constant(m))?)
                }
                _ => Ok(v),
            }
        };
        for block in &self.blocks {
            let a = self.attend(p, block, block.ln1.forward(p, x)?, bias, &mask)?;
            x = x.add(drop(a)?)?;
            let m = block.fc1.forward(p, block.ln2.forward(p, x)?)?.gelu();
            let m = block.fc2.forward(p, m)?;
            x = x.add(drop(m)?)?;
        }
        Ok(self.final_norm.forward(p, x)?)
    }

    /// Camera-vocabulary logits `[B, count, M_c]` at hidden positions
    /// `start .. start + count`.
    pub fn logits<'t>(
        &self,
        p: &Bound<'t>,
        hidden: Var<'t>,
        start: usize,
        count: usize,
    ) -> Result<Var<'t>> {
        Ok(self.head.forward(p, hidden.narrow(1, start, count)?)?)
    }
}

/// Token data of one training example.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    /// BEV token grid, raster order.
    pub bev: Vec<usize>,
    /// Camera token grids, indexed by camera, row-major.
    pub cameras: Vec<Vec<usize>>,
    /// Cross-entropy weight of every camera token, same layout.
    pub weights: Vec<Vec<f64>>,
}

/// Teacher-forcing inputs for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorBatch {
    pub size: usize,
    /// `B * (S - 1)` input ids.
    pub inputs: Vec<usize>,
    /// `B * S_img` camera targets in decoding order.
    pub targets: Vec<usize>,
    pub weights: Vec<f64>,
}

impl PriorBatch {
    pub fn new(model: &PriorModel, samples: &[&TrainSample]) -> Result<Self> {
        let s = model.seq_len();
        let mut batch = Self {
            size: samples.len(),
            inputs: Vec::with_capacity(samples.len() * (s - 1)),
            targets: Vec::new(),
            weights: Vec::new(),
        };
        for sample in samples {
            let cams = model.layout.camera_sequence(&sample.cameras)?;
            let ids = model.sequence_ids(&sample.bev, &cams)?;
            batch.inputs.extend_from_slice(&ids[..s - 1]);
            batch.targets.extend_from_slice(&cams);
            if sample.weights.len() != sample.cameras.len()
                || sample
                    .weights
                    .iter()
                    .zip(&sample.cameras)
                    .any(|(w, c)| w.len() != c.len())
            {
                return Err(Error::Config(
                    "weight grids do not match the camera grids".into(),
                ));
            }
            let w: Vec<Vec<f64>> = sample.weights.clone();
            batch.weights.extend(
                model
                    .layout
                    .order
                    .iter()
                    .map(|&(k, i, j)| w[k][i * model.layout.latent_width + j]),
            );
        }
        Ok(batch)
    }
}

/// Teacher-forced weighted cross-entropy over the camera positions.
pub fn prior_loss<'t>(
    model: &PriorModel,
    p: &Bound<'t>,
    batch: &PriorBatch,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<Var<'t>> {
    if batch.size == 0 {
        return Err(Error::Config("empty batch".into()));
    }
    let nb = model.layout.bev_tokens();
    let n_img = model.layout.camera_tokens();
    let hidden = model.hidden(p, &batch.inputs, batch.size, dropout_rng)?;
    let logits = model
        .logits(p, hidden, nb - 1, n_img)?
        .reshape(&[batch.size * n_img, model.config.camera_vocab])?;
    Ok(logits.cross_entropy(&batch.targets, &batch.weights)?)
}
