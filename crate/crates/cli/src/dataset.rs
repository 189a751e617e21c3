//! On-disk toy datasets.
//!
//! A dataset directory holds `manifest.json` (human-readable index),
//! `rig.txt` (the camera rig) and one `scene_NNNNN.bin` record per scene.
//! Records are little-endian:
//!
//! ```text
//! magic "BEVGSMPL" | u32 version | u64 scene seed | u32 style index
//! u32 channels | u32 cells | f64 bev[channels * cells * cells]
//! u32 cameras | u32 height | u32 width
//! u8 rgb[cameras * height * width * 3] | u8 mask[cameras * height * width]
//! u32 boxes | per box: f64 center[3] | f64 size[3] | f64 yaw | u8 class | u8 rgb[3]
//! ```

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use bevgen_core::checkpoint::write_atomic;
use bevgen_core::geometry::{BevGeometry, BevLayout, CameraRig, ChannelKind, Vector3};
use bevgen_core::scenegen::{
    render_sample, sample_scene, Box3, Image, SceneConfig, VehicleClass, STYLES,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::CliError;

pub const RECORD_MAGIC: &[u8; 8] = b"BEVGSMPL";
pub const RECORD_VERSION: u32 = 1;

/// One rendered scene as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub seed: u64,
    pub style: usize,
    pub bev: BevLayout,
    pub images: Vec<Image>,
    pub masks: Vec<Vec<bool>>,
    pub boxes: Vec<Box3>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub index: usize,
    pub seed: u64,
    pub file: String,
    pub split: String,
    pub boxes: usize,
    pub style: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BevSchema {
    pub cells: usize,
    pub meters_per_cell: f64,
    pub latent: usize,
    /// `(name, "binary" | "continuous")` per channel.
    pub channels: Vec<(String, String)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub record_version: u32,
    pub rig_file: String,
    pub cameras: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub bev: BevSchema,
    pub scenes: Vec<SceneEntry>,
}

impl BevSchema {
    fn of(g: &BevGeometry) -> Self {
        Self {
            cells: g.cells,
            meters_per_cell: g.meters_per_cell,
            latent: g.latent,
            channels: g
                .channels
                .iter()
                .map(|(n, k)| {
                    let kind = match k {
                        ChannelKind::Binary => "binary",
                        ChannelKind::Continuous => "continuous",
                    };
                    (n.clone(), kind.to_string())
                })
                .collect(),
        }
    }

    fn geometry(&self) -> Result<BevGeometry, CliError> {
        let channels = self
            .channels
            .iter()
            .map(|(n, k)| match k.as_str() {
                "binary" => Ok((n.clone(), ChannelKind::Binary)),
                "continuous" => Ok((n.clone(), ChannelKind::Continuous)),
                other => Err(CliError::Data(format!("unknown channel kind {other:?}"))),
            })
            .collect::<Result<_, _>>()?;
        let g = BevGeometry {
            cells: self.cells,
            meters_per_cell: self.meters_per_cell,
            latent: self.latent,
            channels,
        };
        g.validate()?;
        Ok(g)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], CliError> {
        if self.bytes.len() < n {
            return Err(CliError::Data("truncated scene record".into()));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<usize, CliError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64, CliError> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64, CliError> {
        Ok(f64::from_bits(self.u64()?))
    }
}

impl Record {
    pub fn encode(&self) -> Vec<u8> {
        let g = &self.bev.geometry;
        let mut out = Vec::new();
        out.extend_from_slice(RECORD_MAGIC);
        put_u32(&mut out, RECORD_VERSION as usize);
        out.extend_from_slice(&self.seed.to_le_bytes());
        put_u32(&mut out, self.style);
        put_u32(&mut out, g.num_channels());
        put_u32(&mut out, g.cells);
        self.bev.data.iter().for_each(|&v| put_f64(&mut out, v));
        let (h, w) = self.images.first().map_or((0, 0), |i| (i.height, i.width));
        put_u32(&mut out, self.images.len());
        put_u32(&mut out, h);
        put_u32(&mut out, w);
        for img in &self.images {
            out.extend_from_slice(&img.data);
        }
        for m in &self.masks {
            out.extend(m.iter().map(|&b| b as u8));
        }
        put_u32(&mut out, self.boxes.len());
        for b in &self.boxes {
            for v in b.center.iter().chain(&b.size) {
                put_f64(&mut out, *v);
            }
            put_f64(&mut out, b.yaw);
            out.push(match b.class {
                VehicleClass::Car => 0,
                VehicleClass::Truck => 1,
            });
            out.extend_from_slice(&b.color);
        }
        out
    }

    pub fn decode(bytes: &[u8], geometry: &BevGeometry) -> Result<Self, CliError> {
        let mut r = Reader { bytes };
        if r.take(8)? != RECORD_MAGIC {
            return Err(CliError::Data("not a scene record (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != RECORD_VERSION as usize {
            return Err(CliError::Data(format!(
                "unsupported record version {version}"
            )));
        }
        let seed = r.u64()?;
        let style = r.u32()?;
        let (c, cells) = (r.u32()?, r.u32()?);
        if c != geometry.num_channels() || cells != geometry.cells {
            return Err(CliError::Data(format!(
                "record has a {c}x{cells}x{cells} layout, manifest says {}x{}x{}",
                geometry.num_channels(),
                geometry.cells,
                geometry.cells
            )));
        }
        let data = (0..c * cells * cells)
            .map(|_| r.f64())
            .collect::<Result<_, _>>()?;
        let bev = BevLayout::from_data(geometry.clone(), data)?;
        let (n, h, w) = (r.u32()?, r.u32()?, r.u32()?);
        let images = (0..n)
            .map(|_| {
                Ok(Image {
                    height: h,
                    width: w,
                    data: r.take(h * w * 3)?.to_vec(),
                })
            })
            .collect::<Result<_, CliError>>()?;
        let masks = (0..n)
            .map(|_| Ok(r.take(h * w)?.iter().map(|&b| b != 0).collect()))
            .collect::<Result<_, CliError>>()?;
        let count = r.u32()?;
        let mut boxes = Vec::with_capacity(count);
        for _ in 0..count {
            let v: Vec<f64> = (0..7).map(|_| r.f64()).collect::<Result<_, _>>()?;
            let class = match r.take(1)?[0] {
                0 => VehicleClass::Car,
                1 => VehicleClass::Truck,
                other => return Err(CliError::Data(format!("unknown vehicle class {other}"))),
            };
            let color = r.take(3)?.try_into().expect("3 bytes");
            boxes.push(Box3 {
                center: Vector3::new(v[0], v[1], v[2]),
                size: [v[3], v[4], v[5]],
                yaw: v[6],
                class,
                color,
            });
        }
        if !r.bytes.is_empty() {
            return Err(CliError::Data("trailing bytes after scene record".into()));
        }
        Ok(Self {
            seed,
            style,
            bev,
            images,
            masks,
            boxes,
        })
    }
}

/// An opened dataset directory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub rig: CameraRig,
    pub geometry: BevGeometry,
}

/// Seed of scene `index` in a run seeded with `seed`.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    (seed << 32) | index as u64
}

pub fn scene_config(config: &RunConfig) -> SceneConfig {
    SceneConfig {
        difficulty: config.difficulty,
        min_boxes: config.min_boxes,
        max_boxes: config.max_boxes,
        ..SceneConfig::default()
    }
}

/// Render `config.scenes` scenes into `dir`, in parallel across scenes.
pub fn generate(config: &RunConfig, dir: &Path) -> Result<Dataset, CliError> {
    let rig = config.load_rig()?;
    let geometry = BevGeometry::desk();
    let scene_cfg = scene_config(config);
    fs::create_dir_all(dir)?;
    let entries: Vec<SceneEntry> = (0..config.scenes)
        .into_par_iter()
        .map(|i| -> Result<SceneEntry, CliError> {
            let seed = scene_seed(config.seed, i);
            let scene = sample_scene(seed, &scene_cfg);
            let sample = render_sample(&scene, &rig, &geometry);
            let style = STYLES
                .iter()
                .position(|s| s.name == scene.style.name)
                .expect("palette style");
            let record = Record {
                seed,
                style,
                bev: sample.bev,
                images: sample.views.images,
                masks: sample.views.masks,
                boxes: scene.boxes,
            };
            let file = format!("scene_{i:05}.bin");
            write_atomic(&dir.join(&file), &record.encode())?;
            Ok(SceneEntry {
                index: i,
                seed,
                file,
                split: if i + config.heldout >= config.scenes {
                    "heldout"
                } else {
                    "train"
                }
                .into(),
                boxes: record.boxes.len(),
                style: scene.style.name.to_string(),
            })
        })
        .collect::<Result<_, _>>()?;
    rig.save(&dir.join("rig.txt"))?;
    let manifest = Manifest {
        record_version: RECORD_VERSION,
        rig_file: "rig.txt".into(),
        cameras: rig.len(),
        image_height: rig.image_height,
        image_width: rig.image_width,
        bev: BevSchema::of(&geometry),
        scenes: entries,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_atomic(&dir.join("manifest.json"), json.as_bytes())?;
    Ok(Dataset {
        dir: dir.to_path_buf(),
        manifest,
        rig,
        geometry,
    })
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path)
            .map_err(|e| CliError::Config(format!("dataset manifest {}: {e}", path.display())))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let rig = CameraRig::load(&dir.join(&manifest.rig_file))?;
        let geometry = manifest.bev.geometry()?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            rig,
            geometry,
        })
    }

    pub fn len(&self) -> usize {
        self.manifest.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.scenes.is_empty()
    }

    /// Scene indices of `split` (`train` or `heldout`), ascending.
    pub fn split(&self, split: &str) -> Vec<usize> {
        self.manifest
            .scenes
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.index)
            .collect()
    }

    pub fn record(&self, index: usize) -> Result<Record, CliError> {
        let entry = self
            .manifest
            .scenes
            .get(index)
            .ok_or_else(|| CliError::Data(format!("no scene {index}")))?;
        let mut bytes = Vec::new();
        fs::File::open(self.dir.join(&entry.file))?.read_to_end(&mut bytes)?;
        Record::decode(&bytes, &self.geometry)
    }

    pub fn records(&self, indices: &[usize]) -> Result<Vec<Record>, CliError> {
        indices.par_iter().map(|&i| self.record(i)).collect()
    }
}
