//! Run configuration: flat TOML key-value files with `include` support.
//!
//! A file may list other files under `include`; they are merged first, in
//! order, and the including file's own keys win. Paths in `include` are
//! relative to the including file.

use std::fs;
use std::path::{Path, PathBuf};

use bevgen_core::geometry::CameraRig;
use bevgen_core::prior::{PriorConfig, SamplingConfig, TrainConfig};
use bevgen_core::vq::VqConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds scene generation, initialization, shuffling and sampling.
    pub seed: u64,
    /// Directory holding every artifact of the run.
    pub work_dir: PathBuf,
    /// Dataset directory; `<work_dir>/data` when unset.
    pub data_dir: Option<PathBuf>,

    /// Built-in rig name, ignored when `rig_file` is set.
    pub rig: String,
    pub rig_file: Option<PathBuf>,
    pub scenes: usize,
    /// The last `heldout` scenes form the held-out split.
    pub heldout: usize,
    pub difficulty: f64,
    pub min_boxes: usize,
    pub max_boxes: usize,

    pub image_codebook: usize,
    pub bev_codebook: usize,
    pub code_dim: usize,
    pub image_vq_steps: usize,
    pub bev_vq_steps: usize,
    pub vq_batch: usize,
    pub vq_lr: f64,
    pub commitment: f64,

    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub dropout: f64,
    pub center_out: bool,
    pub camera_bias: bool,
    pub spatial_embed: bool,
    /// Learnable bias offsets: `relative` or `full`.
    pub offsets: String,
    /// `dense` or `sparse`.
    pub attention: String,
    pub density: f64,
    pub window: usize,
    pub block: usize,
    pub mask_seed: u64,
    pub pure_direction: bool,
    pub normalize_directions: bool,

    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: usize,
    pub clip: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Loss weight of camera tokens covering a vehicle.
    pub w_fg: f64,
    /// Write `prior_step<N>.ckpt` every this many steps; 0 disables.
    pub checkpoint_every: usize,
    /// Stop training once teacher-forced accuracy on the training split
    /// reaches this value (checked every `eval_every` steps).
    pub stop_accuracy: Option<f64>,
    pub eval_every: usize,

    pub temperature: f64,
    pub top_k: usize,
    pub sample_split: String,
    pub sample_count: usize,
    /// Cameras whose dataset images are given to the sampler.
    pub provided_views: Vec<usize>,
    /// Condition each scene on another scene's layout.
    pub shuffle_layouts: bool,

    pub eval_split: String,
    /// Prior checkpoints to evaluate; `<work_dir>/prior.ckpt` when empty.
    pub eval_priors: Vec<PathBuf>,
    /// Layouts used for the correspondence metric; 0 skips generation.
    pub iou_layouts: usize,
    pub eval_batch: usize,

    /// Per-camera latent grids `[h, w]` to benchmark.
    pub bench_latents: Vec<[usize; 2]>,
    pub bench_densities: Vec<f64>,
    pub bench_blocks: Vec<usize>,
    pub bench_window: usize,
    pub bench_head_dim: usize,
    pub bench_repeats: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let prior = PriorConfig::desk(256, 256);
        let train = TrainConfig::default();
        let sampling = SamplingConfig::default();
        Self {
            seed: 0,
            work_dir: PathBuf::from("run"),
            data_dir: None,
            rig: "front3".into(),
            rig_file: None,
            scenes: 256,
            heldout: 32,
            difficulty: 1.0,
            min_boxes: 1,
            max_boxes: 6,
            image_codebook: 256,
            bev_codebook: 256,
            code_dim: 32,
            image_vq_steps: 3000,
            bev_vq_steps: 1500,
            vq_batch: 16,
            vq_lr: 1e-3,
            commitment: 0.25,
            width: prior.width,
            layers: prior.layers,
            heads: prior.heads,
            mlp_ratio: prior.mlp_ratio,
            dropout: prior.dropout,
            center_out: true,
            camera_bias: prior.camera_bias,
            spatial_embed: prior.spatial_embed,
            offsets: prior.offsets,
            attention: prior.attention,
            density: prior.density,
            window: prior.window,
            block: prior.block,
            mask_seed: prior.mask_seed,
            pure_direction: prior.pure_direction,
            normalize_directions: prior.normalize_directions,
            steps: train.steps,
            batch_size: train.batch_size,
            lr: train.lr,
            warmup: train.warmup,
            clip: train.clip,
            weight_decay: train.weight_decay,
            beta1: train.beta1,
            beta2: train.beta2,
            w_fg: 5.0,
            checkpoint_every: 0,
            stop_accuracy: None,
            eval_every: 50,
            temperature: sampling.temperature,
            top_k: sampling.top_k,
            sample_split: "heldout".into(),
            sample_count: 4,
            provided_views: Vec::new(),
            shuffle_layouts: false,
            eval_split: "heldout".into(),
            eval_priors: Vec::new(),
            iou_layouts: 64,
            eval_batch: 16,
            bench_latents: vec![[4, 8], [8, 16]],
            bench_densities: vec![0.35, 1.0],
            bench_blocks: vec![16],
            bench_window: 96,
            bench_head_dim: 32,
            bench_repeats: 3,
        }
    }
}

/// Read `path` and its includes into one table.
fn merged_table(path: &Path, stack: &mut Vec<PathBuf>) -> Result<toml::Table, CliError> {
    let canon = path
        .canonicalize()
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if stack.contains(&canon) {
        return Err(CliError::Config(format!(
            "include cycle through {}",
            path.display()
        )));
    }
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut own: toml::Table = text
        .parse()
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let includes = match own.remove("include") {
        None => Vec::new(),
        Some(toml::Value::Array(items)) => items
            .into_iter()
            .map(|v| match v {
                toml::Value::String(s) => Ok(s),
                other => Err(CliError::Config(format!(
                    "{}: include entries must be strings, got {other}",
                    path.display()
                ))),
            })
            .collect::<Result<Vec<_>, _>>()?,
        Some(other) => {
            return Err(CliError::Config(format!(
                "{}: include must be an array of paths, got {other}",
                path.display()
            )))
        }
    };
    stack.push(canon);
    let base = path.parent().unwrap_or(Path::new("."));
    let mut table = toml::Table::new();
    for inc in includes {
        table.extend(merged_table(&base.join(inc), stack)?);
    }
    stack.pop();
    table.extend(own);
    Ok(table)
}

impl RunConfig {
    /// Load `path` with its includes and validate.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let table = merged_table(path, &mut Vec::new())?;
        Self::from_table(table)
    }

    /// Parse a single file's text (no includes) and validate.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let table: toml::Table = text.parse().map_err(|e| CliError::Config(format!("{e}")))?;
        Self::from_table(table)
    }

    /// Deserialize, reporting every unknown or mistyped key along with
    /// every constraint the remaining keys violate.
    fn from_table(mut table: toml::Table) -> Result<Self, CliError> {
        let mut problems = Vec::new();
        let keys: Vec<String> = table.keys().cloned().collect();
        for key in keys {
            let mut single = toml::Table::new();
            single.insert(key.clone(), table[&key].clone());
            if let Err(e) = toml::Value::Table(single).try_into::<Self>() {
                let msg = e.message().trim();
                if msg.starts_with("unknown field") {
                    problems.push(format!("{key}: unknown key"));
                } else {
                    problems.push(format!("{key}: {msg}"));
                }
                table.remove(&key);
            }
        }
        let config = toml::Value::Table(table)
            .try_into::<Self>()
            .map_err(|e| CliError::Config(e.message().trim().to_string()))?;
        problems.extend(config.problems());
        if problems.is_empty() {
            Ok(config)
        } else {
            Err(CliError::Config(problems.join("\n")))
        }
    }

    /// Every violated constraint, one message per problem.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.rig_file.is_none() {
            if let Err(e) = CameraRig::preset(&self.rig) {
                out.push(format!("rig: {e}"));
            }
        }
        if self.scenes == 0 {
            out.push("scenes must be positive".into());
        }
        if self.heldout >= self.scenes {
            out.push(format!(
                "heldout {} leaves no training scenes out of {}",
                self.heldout, self.scenes
            ));
        }
        if !(0.0..=1.0).contains(&self.difficulty) {
            out.push(format!("difficulty {} is outside [0, 1]", self.difficulty));
        }
        if self.min_boxes > self.max_boxes {
            out.push(format!(
                "min_boxes {} exceeds max_boxes {}",
                self.min_boxes, self.max_boxes
            ));
        }
        if self.vq_batch == 0 {
            out.push("vq_batch must be positive".into());
        }
        out.extend(self.prior_config().problems());
        out.extend(self.train_config().problems());
        if !(self.w_fg > 0.0 && self.w_fg.is_finite()) {
            out.push(format!("w_fg {} must be positive", self.w_fg));
        }
        if let Some(a) = self.stop_accuracy {
            if !(0.0..=1.0).contains(&a) {
                out.push(format!("stop_accuracy {a} is outside [0, 1]"));
            }
            if self.eval_every == 0 {
                out.push("eval_every must be positive when stop_accuracy is set".into());
            }
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            out.push(format!("temperature {} must be >= 0", self.temperature));
        }
        if self.top_k == 0 {
            out.push("top_k must be at least 1".into());
        }
        for (key, split) in [
            ("sample_split", &self.sample_split),
            ("eval_split", &self.eval_split),
        ] {
            if split != "train" && split != "heldout" {
                out.push(format!("{key} {split:?} must be \"train\" or \"heldout\""));
            }
        }
        if self.eval_batch == 0 {
            out.push("eval_batch must be positive".into());
        }
        for [h, w] in &self.bench_latents {
            if *h == 0 || *w == 0 {
                out.push(format!("bench_latents entry [{h}, {w}] must be positive"));
            }
        }
        for p in &self.bench_densities {
            if !(*p > 0.0 && *p <= 1.0) {
                out.push(format!("bench_densities entry {p} is outside (0, 1]"));
            }
        }
        if self.bench_blocks.contains(&0) {
            out.push("bench_blocks entries must be positive".into());
        }
        if self.bench_head_dim == 0 || self.bench_repeats == 0 {
            out.push("bench_head_dim and bench_repeats must be positive".into());
        }
        if let Err(e) = self.image_vq_config(32, 64).validate() {
            out.push(format!("image tokenizer: {e}"));
        }
        out
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(p.join("\n")))
        }
    }

    /// Canonical text of the resolved configuration, echoed into
    /// checkpoints and reports.
    pub fn echo(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of [`RunConfig::echo`], hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.echo().as_bytes()))
    }

    pub fn data_path(&self) -> PathBuf {
        self.data_dir
            .clone()
            .unwrap_or_else(|| self.work_dir.join("data"))
    }

    pub fn load_rig(&self) -> Result<CameraRig, CliError> {
        match &self.rig_file {
            Some(path) => CameraRig::load(path)
                .map_err(|e| CliError::Config(format!("rig_file {}: {e}", path.display()))),
            None => CameraRig::preset(&self.rig).map_err(|e| CliError::Config(e.to_string())),
        }
    }

    pub fn prior_config(&self) -> PriorConfig {
        PriorConfig {
            width: self.width,
            layers: self.layers,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            dropout: self.dropout,
            camera_vocab: self.image_codebook,
            bev_vocab: self.bev_codebook,
            order: if self.center_out {
                "center_out"
            } else {
                "raster"
            }
            .into(),
            camera_bias: self.camera_bias,
            spatial_embed: self.spatial_embed,
            offsets: self.offsets.clone(),
            attention: self.attention.clone(),
            density: self.density,
            window: self.window,
            block: self.block,
            mask_seed: self.mask_seed,
            pure_direction: self.pure_direction,
            normalize_directions: self.normalize_directions,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            warmup: self.warmup,
            clip: self.clip,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            seed: self.seed,
        }
    }

    pub fn sampling_config(&self) -> SamplingConfig {
        SamplingConfig {
            temperature: self.temperature,
            top_k: self.top_k,
            seed: self.seed,
        }
    }

    pub fn image_vq_config(&self, height: usize, width: usize) -> VqConfig {
        VqConfig {
            codebook_size: self.image_codebook,
            code_dim: self.code_dim,
            commitment: self.commitment,
            lr: self.vq_lr,
            ..VqConfig::image(height, width)
        }
    }

    pub fn bev_vq_config(&self, geometry: &bevgen_core::geometry::BevGeometry) -> VqConfig {
        VqConfig {
            codebook_size: self.bev_codebook,
            code_dim: self.code_dim,
            commitment: self.commitment,
            lr: self.vq_lr,
            ..VqConfig::bev(geometry)
        }
    }
}
