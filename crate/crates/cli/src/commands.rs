//! One function per subcommand. Each reads its inputs from the run's
//! work directory and writes its artifacts there.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use bevgen_core::checkpoint::{write_atomic, Checkpoint};
use bevgen_core::scenegen::Image;
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;
use crate::dataset::{self, Dataset};
use crate::pipeline::{
    self, bench_attention, derangement, foreground_mask, load_prior, mask_iou, model_flops,
    teacher_forced, train_prior, train_vq, vq_inputs, Tokenizers, TrainEvent, VqKind,
};
use crate::CliError;

fn open_data(config: &RunConfig) -> Result<Dataset, CliError> {
    Dataset::open(&config.data_path())
}

/// Append-only JSON-lines writer.
struct JsonLog {
    file: fs::File,
}

impl JsonLog {
    fn create(path: &Path) -> Result<Self, CliError> {
        Ok(Self {
            file: fs::File::create(path)?,
        })
    }

    fn write(&mut self, value: serde_json::Value) -> Result<(), CliError> {
        writeln!(self.file, "{value}")?;
        Ok(())
    }
}

/// Encode `img` as PNG.
pub fn png_bytes(img: &Image) -> Result<Vec<u8>, CliError> {
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, img.data.clone())
        .ok_or_else(|| CliError::Data("image buffer size mismatch".into()))?;
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| CliError::Data(format!("png: {e}")))?;
    Ok(out.into_inner())
}

pub fn read_png(path: &Path) -> Result<Image, CliError> {
    let img = image::open(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?
        .to_rgb8();
    Ok(Image {
        height: img.height() as usize,
        width: img.width() as usize,
        data: img.into_raw(),
    })
}

pub fn gen_data(config: &RunConfig) -> Result<(), CliError> {
    let dir = config.data_path();
    let data = dataset::generate(config, &dir)?;
    log::info!("wrote {} scenes to {}", data.len(), dir.display());
    Ok(())
}

pub fn train_vqs(config: &RunConfig) -> Result<(), CliError> {
    let data = open_data(config)?;
    let records = data.records(&data.split("train"))?;
    fs::create_dir_all(&config.work_dir)?;
    for (kind, steps) in [
        (VqKind::Image, config.image_vq_steps),
        (VqKind::Bev, config.bev_vq_steps),
    ] {
        let model = pipeline::new_vq(config, kind, &data.rig, &data.geometry)?;
        let inputs = vq_inputs(kind, &records);
        let mut log = JsonLog::create(&config.work_dir.join(format!("{}.jsonl", kind.name())))?;
        let mut err = Ok(());
        let model = train_vq(config, model, &inputs, steps, |s| {
            if err.is_ok() {
                err = log.write(json!({
                    "step": s.step,
                    "loss": s.loss,
                    "reconstruction": s.reconstruction,
                    "codebook": s.codebook,
                    "commitment": s.commitment,
                    "grad_norm": s.grad_norm,
                    "reseeded": s.reseeded,
                }));
            }
        })?;
        err?;
        let path = config.work_dir.join(format!("{}.ckpt", kind.name()));
        Checkpoint::from_store(kind.name(), &config.echo(), &model.store).save(&path)?;
        log::info!("wrote {}", path.display());
    }
    Ok(())
}

pub fn train_prior_cmd(config: &RunConfig) -> Result<(), CliError> {
    let data = open_data(config)?;
    let tok = Tokenizers::load(&config.work_dir, &data)?;
    let records = data.records(&data.split("train"))?;
    let samples = tok.samples(&records, &data.rig, config.w_fg)?;
    let model = pipeline::new_prior(config, &data.rig, &data.geometry)?;
    log::info!("prior has {} parameters", model.num_parameters());
    let mut log = JsonLog::create(&config.work_dir.join("prior.jsonl"))?;
    let mut err = Ok(());
    let outcome = train_prior(
        config,
        model,
        &samples,
        |e| {
            if err.is_err() {
                return;
            }
            err = log.write(match e {
                TrainEvent::Step(s) => json!({
                    "step": s.step,
                    "loss": s.loss,
                    "grad_norm": s.grad_norm,
                    "clipped_norm": s.clipped_norm,
                    "lr": s.lr,
                    "wall_ns": s.wall_ns,
                }),
                TrainEvent::Accuracy { step, accuracy } => json!({
                    "step": step,
                    "train_accuracy": accuracy,
                }),
            });
        },
        |step, model| {
            pipeline::save_prior(
                &config.work_dir.join(format!("prior_step{step}.ckpt")),
                model,
                config,
            )
        },
    )?;
    err?;
    let path = config.work_dir.join("prior.ckpt");
    pipeline::save_prior(&path, &outcome.model, config)?;
    log::info!("wrote {} after {} steps", path.display(), outcome.steps);
    Ok(())
}

#[derive(Serialize)]
struct TokenDump {
    scene: usize,
    layout_scene: usize,
    provided_views: Vec<usize>,
    bev_tokens: Vec<usize>,
    camera_tokens: Vec<Vec<usize>>,
}

pub fn sample(config: &RunConfig) -> Result<(), CliError> {
    let data = open_data(config)?;
    let tok = Tokenizers::load(&config.work_dir, &data)?;
    let (model, _) = load_prior(
        &config.work_dir.join("prior.ckpt"),
        &data.rig,
        &data.geometry,
    )?;
    for &k in &config.provided_views {
        if k >= data.rig.len() {
            return Err(CliError::Config(format!(
                "provided view {k} but the rig has {} cameras",
                data.rig.len()
            )));
        }
    }
    let split = data.split(&config.sample_split);
    let scenes: Vec<usize> = split.iter().copied().take(config.sample_count).collect();
    let layout_of: Vec<usize> = if config.shuffle_layouts {
        derangement(scenes.len(), config.seed)
            .into_iter()
            .map(|i| scenes[i])
            .collect()
    } else {
        scenes.clone()
    };
    let records = data.records(&scenes)?;
    let layouts = data.records(&layout_of)?;
    let bevs: Vec<Vec<usize>> = layouts
        .iter()
        .map(|r| tok.encode_bev(r))
        .collect::<Result<_, _>>()?;
    let provided: Vec<BTreeMap<usize, Vec<usize>>> = records
        .iter()
        .map(|r| {
            let views: Vec<Image> = config
                .provided_views
                .iter()
                .map(|&k| r.images[k].clone())
                .collect();
            let grids = if views.is_empty() {
                Vec::new()
            } else {
                tok.encode_images(&views)?
            };
            Ok(config.provided_views.iter().copied().zip(grids).collect())
        })
        .collect::<Result<_, CliError>>()?;
    let grids = pipeline::generate_all(
        &model,
        &bevs,
        &provided,
        &config.sampling_config(),
        config.eval_batch,
    )?;
    let out = config.work_dir.join("samples");
    for (n, &scene) in scenes.iter().enumerate() {
        let dir = out.join(format!("scene_{scene:05}"));
        fs::create_dir_all(&dir)?;
        for (k, img) in tok.decode_images(&grids[n])?.iter().enumerate() {
            write_atomic(&dir.join(format!("cam{k}.png")), &png_bytes(img)?)?;
        }
        let dump = TokenDump {
            scene,
            layout_scene: layout_of[n],
            provided_views: config.provided_views.clone(),
            bev_tokens: bevs[n].clone(),
            camera_tokens: grids[n].clone(),
        };
        let text = serde_json::to_string_pretty(&dump).expect("tokens serialize");
        write_atomic(&dir.join("tokens.json"), text.as_bytes())?;
    }
    log::info!("wrote {} samples to {}", scenes.len(), out.display());
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct Flags {
    pub center_out: bool,
    pub camera_bias: bool,
    pub spatial_embed: bool,
    pub attention: String,
    pub density: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct FlopsEntry {
    pub image: u64,
    pub bev: u64,
    pub dense_image: u64,
    pub dense_bev: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct EvalEntry {
    pub checkpoint: PathBuf,
    /// Hash and seed of the configuration the checkpoint was trained with.
    pub config_hash: String,
    pub seed: u64,
    pub flags: Flags,
    pub nll: f64,
    pub accuracy: f64,
    pub tokens: usize,
    /// Mean per-layout vehicle IoU of generated views against the oracle
    /// masks of their own layouts, and against a permuted layout.
    pub iou: Option<f64>,
    pub iou_shuffled: Option<f64>,
    pub iou_layouts: usize,
    pub flops: FlopsEntry,
}

#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub seed: u64,
    pub split: String,
    pub scenes: usize,
    pub results: Vec<EvalEntry>,
}

/// Wall-clock time of one evaluation phase.
#[derive(Clone, Debug, PartialEq)]
pub struct Timing {
    pub checkpoint: PathBuf,
    pub phase: &'static str,
    pub wall_ns: u64,
}

pub fn evaluate(config: &RunConfig) -> Result<(EvalReport, Vec<Timing>), CliError> {
    let data = open_data(config)?;
    let tok = Tokenizers::load(&config.work_dir, &data)?;
    let indices = data.split(&config.eval_split);
    let records = data.records(&indices)?;
    let samples = tok.samples(&records, &data.rig, 1.0)?;
    let priors = if config.eval_priors.is_empty() {
        vec![config.work_dir.join("prior.ckpt")]
    } else {
        config.eval_priors.clone()
    };
    let mut results = Vec::new();
    let mut timings = Vec::new();
    for path in priors {
        let (model, trained) = load_prior(&path, &data.rig, &data.geometry)?;
        let start = Instant::now();
        let tf = teacher_forced(&model, &samples, config.eval_batch)?;
        timings.push(Timing {
            checkpoint: path.clone(),
            phase: "teacher_forced",
            wall_ns: start.elapsed().as_nanos() as u64,
        });
        let n = config.iou_layouts.min(samples.len());
        let (iou, iou_shuffled) = if n > 0 {
            let start = Instant::now();
            let bevs: Vec<Vec<usize>> = samples[..n].iter().map(|s| s.bev.clone()).collect();
            let grids = pipeline::generate_all(
                &model,
                &bevs,
                &vec![BTreeMap::new(); n],
                &config.sampling_config(),
                config.eval_batch,
            )?;
            let masks: Vec<Vec<Vec<bool>>> = grids
                .iter()
                .map(|g| Ok(tok.decode_images(g)?.iter().map(foreground_mask).collect()))
                .collect::<Result<_, CliError>>()?;
            let perm = derangement(n, config.seed);
            let mean = |pick: &dyn Fn(usize) -> usize| {
                (0..n)
                    .map(|i| mask_iou(&masks[pick(i)], &records[i].masks))
                    .sum::<f64>()
                    / n as f64
            };
            timings.push(Timing {
                checkpoint: path.clone(),
                phase: "generate",
                wall_ns: start.elapsed().as_nanos() as u64,
            });
            (Some(mean(&|i| i)), Some(mean(&|i| perm[i])))
        } else {
            (None, None)
        };
        let (sparse, dense) = model_flops(&model);
        results.push(EvalEntry {
            checkpoint: path,
            config_hash: trained.hash(),
            seed: trained.seed,
            flags: Flags {
                center_out: trained.center_out,
                camera_bias: trained.camera_bias,
                spatial_embed: trained.spatial_embed,
                attention: trained.attention.clone(),
                density: trained.density,
            },
            nll: tf.nll,
            accuracy: tf.accuracy,
            tokens: tf.tokens,
            iou,
            iou_shuffled,
            iou_layouts: n,
            flops: FlopsEntry {
                image: sparse.image,
                bev: sparse.bev,
                dense_image: dense.image,
                dense_bev: dense.bev,
            },
        });
    }
    Ok((
        EvalReport {
            config_hash: config.hash(),
            seed: config.seed,
            split: config.eval_split.clone(),
            scenes: indices.len(),
            results,
        },
        timings,
    ))
}

pub fn eval(config: &RunConfig) -> Result<(), CliError> {
    let (report, timings) = evaluate(config)?;
    fs::create_dir_all(&config.work_dir)?;
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    write_atomic(&config.work_dir.join("eval.json"), text.as_bytes())?;
    let mut csv = String::from("checkpoint,phase,wall_ns,config_hash,seed\n");
    for t in &timings {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            t.checkpoint.display(),
            t.phase,
            t.wall_ns,
            report.config_hash,
            report.seed
        ));
    }
    write_atomic(&config.work_dir.join("eval_timing.csv"), csv.as_bytes())?;
    println!("{text}");
    Ok(())
}

pub fn bench_attn(config: &RunConfig) -> Result<(), CliError> {
    let rows = bench_attention(config)?;
    let mut csv = String::from("seq_len,density,block,mode,flops,wall_ns\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.seq_len, r.density, r.block, r.mode, r.flops, r.wall_ns
        ));
    }
    fs::create_dir_all(&config.work_dir)?;
    write_atomic(&config.work_dir.join("bench_attn.csv"), csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}
