use nalgebra::Vector3;

use super::{BevGeometry, CameraRig};
use crate::Result;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DirectionOptions {
    /// Drop the `+ t` term and use the bare ray direction.
    pub pure_direction: bool,
    /// Scale camera vectors to unit length before they are embedded. Has no
    /// effect on cosine similarities.
    pub normalize: bool,
}

/// Per-token geometry for one rig and BEV grid.
///
/// Camera entries are indexed `(k, i, j)` row-major; BEV entries are the
/// latent cell centers `(x, y, 0)` in raster order.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectionField {
    pub cameras: usize,
    pub latent_height: usize,
    pub latent_width: usize,
    pub bev_side: usize,
    pub camera: Vec<Vector3<f64>>,
    /// Camera vectors recomputed at the vertical image center, one per
    /// camera token, used when an image token is compared with a BEV cell.
    pub center_row: Vec<Vector3<f64>>,
    pub bev: Vec<Vector3<f64>>,
}

impl DirectionField {
    pub fn new(rig: &CameraRig, bev: &BevGeometry, options: DirectionOptions) -> Result<Self> {
        let (h, w) = (rig.latent_height, rig.latent_width);
        let finish = |d: Vector3<f64>| {
            if options.normalize && d.norm() > 0.0 {
                d.normalize()
            } else {
                d
            }
        };
        let mut camera = Vec::with_capacity(rig.len() * h * w);
        let mut center_row = Vec::with_capacity(rig.len() * h * w);
        let v_mid = rig.image_height as f64 / 2.0;
        for k in 0..rig.len() {
            for i in 0..h {
                for j in 0..w {
                    let z = rig.token_pixel_center(k, i, j)?;
                    camera.push(finish(rig.direction_at(k, z, options.pure_direction)));
                    let zc = Vector3::new(z.x, v_mid, 1.0);
                    center_row.push(finish(rig.direction_at(k, zc, options.pure_direction)));
                }
            }
        }
        let mut cells = Vec::with_capacity(bev.tokens());
        for x in 0..bev.latent {
            for y in 0..bev.latent {
                let [px, py] = bev.bev_cell_coordinate(x, y)?;
                cells.push(Vector3::new(px, py, 0.0));
            }
        }
        Ok(Self {
            cameras: rig.len(),
            latent_height: h,
            latent_width: w,
            bev_side: bev.latent,
            camera,
            center_row,
            bev: cells,
        })
    }

    pub fn camera_tokens(&self) -> usize {
        self.camera.len()
    }

    pub fn bev_tokens(&self) -> usize {
        self.bev.len()
    }

    /// Flat camera-token index of `(k, i, j)`.
    pub fn camera_index(&self, k: usize, i: usize, j: usize) -> usize {
        (k * self.latent_height + i) * self.latent_width + j
    }
}

/// Cosine similarity, defined as 0 when either vector has zero norm.
pub fn cosine(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let denom = a.norm() * b.norm();
    if denom == 0.0 {
        0.0
    } else {
        (a.dot(b) / denom).clamp(-1.0, 1.0)
    }
}

/// Dense cosine-similarity matrix over all tokens in canonical order: BEV
/// tokens first, then camera tokens by `(k, i, j)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairwiseBias {
    pub bev_tokens: usize,
    pub size: usize,
    pub data: Vec<f64>,
}

impl PairwiseBias {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.size + c]
    }
}

/// Cosine similarity of every (query, key) pair. Image-image pairs compare
/// the full token vectors, image-BEV pairs compare the image vector taken at
/// the vertical image center with the BEV cell coordinate, and BEV query
/// rows stay zero.
pub fn pairwise_bias(dirs: &DirectionField) -> PairwiseBias {
    let nb = dirs.bev_tokens();
    let size = nb + dirs.camera_tokens();
    let mut data = vec![0.0; size * size];
    for (a, row) in data.chunks_mut(size).skip(nb).enumerate() {
        let (da, ca) = (&dirs.camera[a], &dirs.center_row[a]);
        for (c, out) in row[..nb].iter_mut().enumerate() {
            *out = cosine(ca, &dirs.bev[c]);
        }
        for (b, out) in row[nb..].iter_mut().enumerate() {
            *out = cosine(da, &dirs.camera[b]);
        }
    }
    PairwiseBias {
        bev_tokens: nb,
        size,
        data,
    }
}
