//! The stages behind the commands, usable without going through files.

use std::path::Path;
use std::time::Instant;

use bevgen_core::attention::{
    dense_attention_forward, image_block, mask_strategies, sequence_cosine, sparse_attention_flops,
    sparse_attention_forward, MaskRequest, ScoreFlops,
};
use bevgen_core::checkpoint::Checkpoint;
use bevgen_core::geometry::{BevGeometry, CameraRig, DirectionField, DirectionOptions};
use bevgen_core::prior::{
    generate_batch, weights_from_masks, PriorBatch, PriorModel, PriorTrainer, SamplingConfig,
    StepLog, TrainSample,
};
use bevgen_core::scenegen::{is_foreground, Image};
use bevgen_core::sequence::{decode_orders, SequenceLayout};
use bevgen_core::vq::{VqAutoencoder, VqStepStats, VqTrainer};
use bevgen_numcore::{Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::dataset::{Dataset, Record};
use crate::CliError;

pub const IMAGE_VQ: &str = "image_vq";
pub const BEV_VQ: &str = "bev_vq";
pub const PRIOR: &str = "prior";

/// Which tokenizer a stage-1 checkpoint holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VqKind {
    Image,
    Bev,
}

impl VqKind {
    pub fn name(self) -> &'static str {
        match self {
            VqKind::Image => IMAGE_VQ,
            VqKind::Bev => BEV_VQ,
        }
    }
}

pub fn new_vq(
    config: &RunConfig,
    kind: VqKind,
    rig: &CameraRig,
    geometry: &BevGeometry,
) -> Result<VqAutoencoder, CliError> {
    let vq = match kind {
        VqKind::Image => config.image_vq_config(rig.image_height, rig.image_width),
        VqKind::Bev => config.bev_vq_config(geometry),
    };
    if kind == VqKind::Image && vq.latent() != (rig.latent_height, rig.latent_width) {
        return Err(CliError::Config(format!(
            "image tokenizer latent {:?} does not match the rig's {}x{} token grid",
            vq.latent(),
            rig.latent_height,
            rig.latent_width
        )));
    }
    Ok(VqAutoencoder::new(vq, config.seed)?)
}

/// Training inputs of one tokenizer, `[C, H, W]` each.
pub fn vq_inputs(kind: VqKind, records: &[Record]) -> Vec<Vec<f64>> {
    match kind {
        VqKind::Image => records
            .iter()
            .flat_map(|r| r.images.iter().map(Image::to_chw))
            .collect(),
        VqKind::Bev => records.iter().map(|r| r.bev.data.clone()).collect(),
    }
}

/// Train a tokenizer for `steps` on shuffled batches of `inputs`.
pub fn train_vq(
    config: &RunConfig,
    model: VqAutoencoder,
    inputs: &[Vec<f64>],
    steps: usize,
    mut on_step: impl FnMut(&VqStepStats),
) -> Result<VqAutoencoder, CliError> {
    if inputs.is_empty() {
        return Err(CliError::Data("no training inputs".into()));
    }
    let c = &model.config;
    let shape = [config.vq_batch, c.channels, c.height, c.width];
    let mut trainer = VqTrainer::new(model, config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xda7a);
    let mut queue: Vec<usize> = Vec::new();
    for _ in 0..steps {
        let mut data = Vec::with_capacity(shape.iter().product());
        for _ in 0..config.vq_batch {
            if queue.is_empty() {
                queue = (0..inputs.len()).collect();
                queue.shuffle(&mut rng);
            }
            data.extend_from_slice(&inputs[queue.pop().expect("refilled")]);
        }
        let stats = trainer.step(&Tensor::new(&shape, data)?)?;
        on_step(&stats);
    }
    Ok(trainer.model)
}

fn missing(path: &Path, what: &str) -> CliError {
    CliError::Config(format!("missing {what} checkpoint {}", path.display()))
}

/// Rebuild a tokenizer from a checkpoint, using the configuration echoed
/// inside it.
pub fn load_vq(
    path: &Path,
    kind: VqKind,
    rig: &CameraRig,
    geometry: &BevGeometry,
) -> Result<VqAutoencoder, CliError> {
    if !path.exists() {
        return Err(missing(path, kind.name()));
    }
    let ck = Checkpoint::load_kind(path, kind.name())?;
    let config = RunConfig::parse(&ck.config)?;
    let mut model = new_vq(&config, kind, rig, geometry)?;
    ck.restore(&mut model.store)?;
    Ok(model)
}

/// Image and BEV tokenizers of a run.
pub struct Tokenizers {
    pub image: VqAutoencoder,
    pub bev: VqAutoencoder,
}

impl Tokenizers {
    pub fn load(work_dir: &Path, data: &Dataset) -> Result<Self, CliError> {
        Ok(Self {
            image: load_vq(
                &work_dir.join("image_vq.ckpt"),
                VqKind::Image,
                &data.rig,
                &data.geometry,
            )?,
            bev: load_vq(
                &work_dir.join("bev_vq.ckpt"),
                VqKind::Bev,
                &data.rig,
                &data.geometry,
            )?,
        })
    }

    pub fn encode_images(&self, images: &[Image]) -> Result<Vec<Vec<usize>>, CliError> {
        let c = &self.image.config;
        let data: Vec<f64> = images.iter().flat_map(Image::to_chw).collect();
        let t = Tensor::new(&[images.len(), 3, c.height, c.width], data)?;
        let tokens = self.image.encode_tokens(&t)?;
        let per = tokens.len() / images.len().max(1);
        Ok(tokens.chunks(per).map(<[usize]>::to_vec).collect())
    }

    pub fn decode_images(&self, grids: &[Vec<usize>]) -> Result<Vec<Image>, CliError> {
        let c = &self.image.config;
        let flat: Vec<usize> = grids.iter().flatten().copied().collect();
        let out = self.image.decode_tokens(&flat, grids.len())?;
        let plane = 3 * c.height * c.width;
        Ok(out
            .data()
            .chunks(plane)
            .map(|p| Image::from_chw(c.height, c.width, p))
            .collect())
    }

    pub fn encode_bev(&self, record: &Record) -> Result<Vec<usize>, CliError> {
        let c = &self.bev.config;
        let t = Tensor::new(&[1, c.channels, c.height, c.width], record.bev.data.clone())?;
        Ok(self.bev.encode_tokens(&t)?)
    }

    /// Token grids of every record, with loss weights from its masks.
    pub fn samples(
        &self,
        records: &[Record],
        rig: &CameraRig,
        w_fg: f64,
    ) -> Result<Vec<TrainSample>, CliError> {
        records
            .par_iter()
            .map(|r| {
                Ok(TrainSample {
                    bev: self.encode_bev(r)?,
                    cameras: self.encode_images(&r.images)?,
                    weights: weights_from_masks(&r.masks, rig, w_fg),
                })
            })
            .collect()
    }
}

pub fn new_prior(
    config: &RunConfig,
    rig: &CameraRig,
    geometry: &BevGeometry,
) -> Result<PriorModel, CliError> {
    let model = PriorModel::new(config.prior_config(), rig, geometry, config.seed)?;
    if let Some(w) = &model.mask.warning {
        log::warn!("{w}");
    }
    Ok(model)
}

pub fn save_prior(path: &Path, model: &PriorModel, config: &RunConfig) -> Result<(), CliError> {
    Checkpoint::from_store(PRIOR, &config.echo(), &model.store).save(path)?;
    Ok(())
}

/// A prior checkpoint and the configuration it was trained with.
pub fn load_prior(
    path: &Path,
    rig: &CameraRig,
    geometry: &BevGeometry,
) -> Result<(PriorModel, RunConfig), CliError> {
    if !path.exists() {
        return Err(missing(path, PRIOR));
    }
    let ck = Checkpoint::load_kind(path, PRIOR)?;
    let config = RunConfig::parse(&ck.config)?;
    let mut model = new_prior(&config, rig, geometry)?;
    ck.restore(&mut model.store)?;
    Ok((model, config))
}

/// Teacher-forced quality of a prior on a set of scenes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TeacherForced {
    /// Mean negative log-likelihood per camera token, nats.
    pub nll: f64,
    /// Fraction of camera tokens whose argmax prediction is correct.
    pub accuracy: f64,
    pub tokens: usize,
}

pub fn teacher_forced(
    model: &PriorModel,
    samples: &[TrainSample],
    batch: usize,
) -> Result<TeacherForced, CliError> {
    let nb = model.layout.bev_tokens();
    let n_img = model.layout.camera_tokens();
    let mc = model.config.camera_vocab;
    let mut nll = 0.0;
    let mut correct = 0usize;
    let mut tokens = 0usize;
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&TrainSample> = chunk.iter().collect();
        let b = PriorBatch::new(model, &refs)?;
        let tape = Tape::new();
        let p = model.store.bind(&tape);
        let hidden = model.hidden(&p, &b.inputs, b.size, None)?;
        let logits = model.logits(&p, hidden, nb - 1, n_img)?.value();
        for (row, &target) in logits.data().chunks(mc).zip(&b.targets) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            nll += lse - row[target];
            let best = (0..mc)
                .max_by(|&a, &c| row[a].total_cmp(&row[c]).then(c.cmp(&a)))
                .expect("nonempty vocabulary");
            correct += (best == target) as usize;
            tokens += 1;
        }
    }
    if tokens == 0 {
        return Err(CliError::Data("no scenes to evaluate".into()));
    }
    Ok(TeacherForced {
        nll: nll / tokens as f64,
        accuracy: correct as f64 / tokens as f64,
        tokens,
    })
}

/// One line of a training log.
#[derive(Clone, Debug, PartialEq)]
pub enum TrainEvent {
    Step(StepLog),
    /// Teacher-forced accuracy on the training scenes after `step` updates.
    Accuracy {
        step: usize,
        accuracy: f64,
    },
}

pub struct TrainOutcome {
    pub model: PriorModel,
    pub steps: usize,
    /// Last measured training accuracy, when early stopping is enabled.
    pub accuracy: Option<f64>,
}

/// Train a prior, optionally stopping once training accuracy reaches
/// `config.stop_accuracy`. `checkpoint` is called every
/// `config.checkpoint_every` steps.
pub fn train_prior(
    config: &RunConfig,
    model: PriorModel,
    samples: &[TrainSample],
    mut on_event: impl FnMut(&TrainEvent),
    mut checkpoint: impl FnMut(usize, &PriorModel) -> Result<(), CliError>,
) -> Result<TrainOutcome, CliError> {
    let mut trainer = PriorTrainer::new(model, config.train_config())?;
    let mut accuracy = None;
    while trainer.step < config.steps {
        let log = trainer.step(samples)?;
        on_event(&TrainEvent::Step(log));
        let done = trainer.step;
        if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 {
            checkpoint(done, &trainer.model)?;
        }
        if let Some(target) = config.stop_accuracy {
            if done % config.eval_every == 0 || done == config.steps {
                let acc = teacher_forced(&trainer.model, samples, config.eval_batch)?.accuracy;
                on_event(&TrainEvent::Accuracy {
                    step: done,
                    accuracy: acc,
                });
                accuracy = Some(acc);
                if acc >= target {
                    break;
                }
            }
        }
    }
    Ok(TrainOutcome {
        steps: trainer.step,
        model: trainer.model,
        accuracy,
    })
}

/// Camera grids for each layout, in chunks of `batch`. Chunk `c` samples
/// with seed `sampling.seed + c`.
pub fn generate_all(
    model: &PriorModel,
    bevs: &[Vec<usize>],
    provided: &[std::collections::BTreeMap<usize, Vec<usize>>],
    sampling: &SamplingConfig,
    batch: usize,
) -> Result<Vec<Vec<Vec<usize>>>, CliError> {
    let mut out = Vec::with_capacity(bevs.len());
    for (c, (b, p)) in bevs
        .chunks(batch.max(1))
        .zip(provided.chunks(batch.max(1)))
        .enumerate()
    {
        let cfg = SamplingConfig {
            seed: sampling.seed.wrapping_add(c as u64),
            ..sampling.clone()
        };
        out.extend(generate_batch(model, b, p, &cfg)?);
    }
    Ok(out)
}

/// Seeded permutation of `0..n` without fixed points (identity for n < 2).
pub fn derangement(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut perm = vec![0; n];
    for (i, &o) in order.iter().enumerate() {
        perm[o] = order[(i + 1) % n];
    }
    perm
}

pub fn foreground_mask(img: &Image) -> Vec<bool> {
    img.data
        .chunks_exact(3)
        .map(|p| is_foreground([p[0], p[1], p[2]]))
        .collect()
}

/// Intersection over union of two sets of per-camera masks, pooled over
/// cameras. Two empty masks agree perfectly.
pub fn mask_iou(pred: &[Vec<bool>], truth: &[Vec<bool>]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (p, t) in pred.iter().zip(truth) {
        for (&a, &b) in p.iter().zip(t) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Mean RGB of rows `rows` of `img`, on a 0..255 scale.
pub fn band_mean(img: &Image, rows: std::ops::Range<usize>) -> [f64; 3] {
    let mut sum = [0.0; 3];
    let mut n = 0.0f64;
    for v in rows {
        for u in 0..img.width {
            let c = img.get(v, u);
            for k in 0..3 {
                sum[k] += c[k] as f64;
            }
            n += 1.0;
        }
    }
    sum.map(|s| s / n.max(1.0))
}

/// Mean sky color (top quarter of the rows) and ground color (bottom
/// quarter) of a rendered view.
pub fn style_stats(img: &Image) -> ([f64; 3], [f64; 3]) {
    let q = img.height / 4;
    (
        band_mean(img, 0..q),
        band_mean(img, img.height - q..img.height),
    )
}

/// `|a - b|_1 / |b|_1`.
pub fn relative_color_error(a: [f64; 3], b: [f64; 3]) -> f64 {
    let diff: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
    diff / b.iter().sum::<f64>().max(1e-9)
}

/// One benchmark measurement.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub seq_len: usize,
    pub density: f64,
    pub block: usize,
    pub mode: String,
    pub flops: u64,
    pub wall_ns: u64,
}

/// Score-FLOPs and wall time of dense and block-sparse attention over the
/// configured grid. Direction cosines come from the run's rig, re-gridded
/// to each latent size.
pub fn bench_attention(config: &RunConfig) -> Result<Vec<BenchRow>, CliError> {
    let base = config.load_rig()?;
    let geometry = BevGeometry::desk();
    let order = decode_orders().get(if config.center_out {
        "center_out"
    } else {
        "raster"
    })?;
    let d = config.bench_head_dim;
    let mut rows = Vec::new();
    for &[h, w] in &config.bench_latents {
        let rig = CameraRig::new(
            base.cameras.clone(),
            (base.image_height.max(h), base.image_width.max(w)),
            (h, w),
            base.ring.clone(),
        )?;
        let layout = SequenceLayout::from_rig(&rig, &geometry, order.as_ref())?;
        let dirs = DirectionField::new(&rig, &geometry, DirectionOptions::default())?;
        let cosine = image_block(&sequence_cosine(&dirs, &layout)?, layout.bev_tokens());
        let (nb, n_img) = (layout.bev_tokens(), layout.camera_tokens());
        let len = layout.len();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut rand_vec =
            || -> Vec<f64> { (0..len * d).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let (q, k, v) = (rand_vec(), rand_vec(), rand_vec());
        for &block in &config.bench_blocks {
            let mut grid: Vec<(&str, f64)> = vec![("dense", 1.0)];
            grid.extend(config.bench_densities.iter().map(|&p| ("sparse", p)));
            for (mode, density) in grid {
                let mask = mask_strategies().get(mode)?.build(&MaskRequest {
                    bev_tokens: nb,
                    image_tokens: n_img,
                    image_cosine: &cosine,
                    density,
                    window: config.bench_window,
                    block,
                    seed: config.mask_seed,
                })?;
                if let Some(w) = &mask.warning {
                    log::warn!("{w}");
                }
                let mut best = u64::MAX;
                for _ in 0..config.bench_repeats {
                    let start = Instant::now();
                    let out = if mode == "dense" {
                        dense_attention_forward(&q, &k, &v, d, len)?
                    } else {
                        sparse_attention_forward(&q, &k, &v, d, &mask)?
                    };
                    std::hint::black_box(out);
                    best = best.min(start.elapsed().as_nanos() as u64);
                }
                rows.push(BenchRow {
                    seq_len: n_img,
                    density: if mode == "dense" { 1.0 } else { density },
                    block,
                    mode: mode.into(),
                    flops: sparse_attention_flops(&mask, d).total(),
                    wall_ns: best,
                });
            }
        }
    }
    Ok(rows)
}

/// Score-FLOPs of a model's mask next to a dense kernel's.
pub fn model_flops(model: &PriorModel) -> (ScoreFlops, ScoreFlops) {
    let dh = model.config.width / model.config.heads;
    (
        sparse_attention_flops(&model.mask, dh),
        ScoreFlops::dense(&model.mask, dh),
    )
}
