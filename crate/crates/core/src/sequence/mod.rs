//! Token ordering, sequence layout and the composite token embeddings.
//!
//! A sequence holds the `h_b * w_b` BEV tokens in raster order followed by
//! the `n * h_c * w_c` camera tokens in decoding order.

mod embed;
mod order;

use std::collections::HashMap;

pub use embed::{EmbeddingTables, SequenceGeometry};
pub use order::{center_out_order, decode_orders, CameraToken, CenterOut, DecodeOrder, Raster};

use crate::geometry::{BevGeometry, CameraRig};
use crate::{Error, Result};

/// Identity of the token at a sequence position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TokenSlot {
    Bev { x: usize, y: usize },
    Camera { k: usize, i: usize, j: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceLayout {
    pub cameras: usize,
    pub latent_height: usize,
    pub latent_width: usize,
    pub bev_side: usize,
    /// Camera tokens in emission order.
    pub order: Vec<CameraToken>,
    /// Emission step of each camera token, indexed `(k * h + i) * w + j`.
    step_of: Vec<usize>,
}

impl SequenceLayout {
    pub fn new(
        cameras: usize,
        latent: (usize, usize),
        bev_side: usize,
        order: Vec<CameraToken>,
    ) -> Result<Self> {
        let (h, w) = latent;
        let total = cameras * h * w;
        let mut step_of = vec![usize::MAX; total];
        if order.len() != total {
            return Err(Error::Config(format!(
                "order has {} entries for {total} camera tokens",
                order.len()
            )));
        }
        for (s, &(k, i, j)) in order.iter().enumerate() {
            if k >= cameras || i >= h || j >= w {
                return Err(Error::Config(format!(
                    "order entry {:?} out of range",
                    (k, i, j)
                )));
            }
            let flat = (k * h + i) * w + j;
            if step_of[flat] != usize::MAX {
                return Err(Error::Config(format!(
                    "order repeats token {:?}",
                    (k, i, j)
                )));
            }
            step_of[flat] = s;
        }
        Ok(Self {
            cameras,
            latent_height: h,
            latent_width: w,
            bev_side,
            order,
            step_of,
        })
    }

    pub fn from_rig(rig: &CameraRig, bev: &BevGeometry, order: &dyn DecodeOrder) -> Result<Self> {
        let (h, w) = (rig.latent_height, rig.latent_width);
        Self::new(rig.len(), (h, w), bev.latent, order.order(h, w, &rig.ring))
    }

    pub fn bev_tokens(&self) -> usize {
        self.bev_side * self.bev_side
    }

    pub fn camera_tokens(&self) -> usize {
        self.order.len()
    }

    pub fn tokens_per_camera(&self) -> usize {
        self.latent_height * self.latent_width
    }

    /// Total length `S`.
    pub fn len(&self) -> usize {
        self.bev_tokens() + self.camera_tokens()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn slot(&self, pos: usize) -> Result<TokenSlot> {
        let nb = self.bev_tokens();
        if pos < nb {
            Ok(TokenSlot::Bev {
                x: pos / self.bev_side,
                y: pos % self.bev_side,
            })
        } else if pos < self.len() {
            let (k, i, j) = self.order[pos - nb];
            Ok(TokenSlot::Camera { k, i, j })
        } else {
            Err(Error::Index {
                what: "sequence position",
                index: pos,
                size: self.len(),
            })
        }
    }

    pub fn position(&self, slot: TokenSlot) -> Result<usize> {
        match slot {
            TokenSlot::Bev { x, y } if x < self.bev_side && y < self.bev_side => {
                Ok(x * self.bev_side + y)
            }
            TokenSlot::Camera { k, i, j }
                if k < self.cameras && i < self.latent_height && j < self.latent_width =>
            {
                Ok(self.bev_tokens() + self.step_of[self.camera_flat(k, i, j)])
            }
            _ => Err(Error::Config(format!(
                "token {slot:?} is outside the layout"
            ))),
        }
    }

    /// Camera-major flat index `(k * h + i) * w + j`.
    pub fn camera_flat(&self, k: usize, i: usize, j: usize) -> usize {
        (k * self.latent_height + i) * self.latent_width + j
    }

    /// Index of sequence position `pos` in canonical order (BEV raster,
    /// then cameras by `(k, i, j)`), the order of
    /// [`crate::geometry::pairwise_bias`].
    pub fn canonical(&self, pos: usize) -> usize {
        let nb = self.bev_tokens();
        if pos < nb {
            pos
        } else {
            let (k, i, j) = self.order[pos - nb];
            nb + self.camera_flat(k, i, j)
        }
    }

    /// Camera index of a camera position, `None` for BEV positions.
    pub fn camera_at(&self, pos: usize) -> Option<usize> {
        pos.checked_sub(self.bev_tokens())
            .and_then(|s| self.order.get(s))
            .map(|t| t.0)
    }

    /// Interleave per-camera token grids (row-major `h x w` each, indexed by
    /// camera) into emission order.
    pub fn camera_sequence(&self, grids: &[Vec<usize>]) -> Result<Vec<usize>> {
        let per = self.tokens_per_camera();
        if grids.len() != self.cameras || grids.iter().any(|g| g.len() != per) {
            return Err(Error::Config(format!(
                "expected {} grids of {per} tokens",
                self.cameras
            )));
        }
        Ok(self
            .order
            .iter()
            .map(|&(k, i, j)| grids[k][i * self.latent_width + j])
            .collect())
    }

    /// Inverse of [`SequenceLayout::camera_sequence`].
    pub fn camera_grids(&self, seq: &[usize]) -> Result<Vec<Vec<usize>>> {
        if seq.len() != self.camera_tokens() {
            return Err(Error::Config(format!(
                "expected {} camera tokens, got {}",
                self.camera_tokens(),
                seq.len()
            )));
        }
        let mut grids = vec![vec![0; self.tokens_per_camera()]; self.cameras];
        for (&(k, i, j), &t) in self.order.iter().zip(seq) {
            grids[k][i * self.latent_width + j] = t;
        }
        Ok(grids)
    }
}

/// Forward and inverse maps between sequence positions and token slots.
#[derive(Clone, Debug)]
pub struct IndexMaps {
    pub forward: Vec<TokenSlot>,
    pub inverse: HashMap<TokenSlot, usize>,
}

pub fn seq_index_maps(layout: &SequenceLayout) -> IndexMaps {
    let forward: Vec<TokenSlot> = (0..layout.len())
        .map(|p| layout.slot(p).expect("in range"))
        .collect();
    let inverse = forward.iter().enumerate().map(|(p, &s)| (s, p)).collect();
    IndexMaps { forward, inverse }
}
