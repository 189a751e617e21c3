use bevgen_numcore::nn::{Bound, Linear, ParamId, ParamStore};
use bevgen_numcore::{Tensor, Var};
use rand::Rng;

use super::SequenceLayout;
use crate::geometry::DirectionField;
use crate::{Error, Result};

/// Geometric inputs of every sequence position: BEV cell coordinates
/// `[h_b * w_b, 2]` and camera direction vectors `[n * h_c * w_c, 3]`, both
/// in sequence order.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceGeometry {
    pub bev: Tensor,
    pub camera: Tensor,
}

impl SequenceGeometry {
    /// BEV coordinates are divided by the largest coordinate magnitude so
    /// they lie in `[-1, 1]`; camera vectors are used as given.
    pub fn new(layout: &SequenceLayout, dirs: &DirectionField) -> Result<Self> {
        if dirs.bev_tokens() != layout.bev_tokens()
            || dirs.camera_tokens() != layout.camera_tokens()
        {
            return Err(Error::Config(
                "direction field does not match the sequence layout".into(),
            ));
        }
        let scale = dirs
            .bev
            .iter()
            .map(|d| d.x.abs().max(d.y.abs()))
            .fold(0.0, f64::max)
            .max(f64::MIN_POSITIVE);
        let bev: Vec<f64> = dirs
            .bev
            .iter()
            .flat_map(|d| [d.x / scale, d.y / scale])
            .collect();
        let camera: Vec<f64> = layout
            .order
            .iter()
            .flat_map(|&(k, i, j)| {
                let d = dirs.camera[dirs.camera_index(k, i, j)];
                [d.x, d.y, d.z]
            })
            .collect();
        Ok(Self {
            bev: Tensor::new(&[dirs.bev_tokens(), 2], bev)?,
            camera: Tensor::new(&[layout.camera_tokens(), 3], camera)?,
        })
    }

    pub fn bev_tokens(&self) -> usize {
        self.bev.shape()[0]
    }
}

/// Token embedding `lambda`, geometry encoders `theta_c` (per-token linear
/// map of the 3-vector, a 1x1 convolution) and `theta_b`, and one learned
/// vector per sequence position.
#[derive(Clone, Debug)]
pub struct EmbeddingTables {
    pub token: ParamId,
    pub theta_camera: Linear,
    pub theta_bev: Linear,
    pub position: ParamId,
    /// Whether the geometry terms are added.
    pub spatial: bool,
    pub camera_vocab: usize,
    pub bev_vocab: usize,
}

impl EmbeddingTables {
    /// Camera tokens use ids `[0, camera_vocab)` and BEV tokens are shifted
    /// to `[camera_vocab, camera_vocab + bev_vocab)` in one shared table.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        camera_vocab: usize,
        bev_vocab: usize,
        seq_len: usize,
        width: usize,
        spatial: bool,
        rng: &mut R,
    ) -> Self {
        let std = 0.02;
        let token = store.add(
            "embed.token",
            Tensor::randn(&[camera_vocab + bev_vocab, width], std, rng),
            true,
        );
        let theta_camera = Linear::new(store, "embed.theta_camera", 3, width, std, true, rng);
        let theta_bev = Linear::new(store, "embed.theta_bev", 2, width, std, true, rng);
        let position = store.add(
            "embed.position",
            Tensor::randn(&[seq_len, width], std, rng),
            false,
        );
        Self {
            token,
            theta_camera,
            theta_bev,
            position,
            spatial,
            camera_vocab,
            bev_vocab,
        }
    }

    /// Embeddings `[L, E]` of the first `L = tokens.len()` positions.
    /// `tokens` holds shared-vocabulary ids.
    pub fn embed<'t>(
        &self,
        p: &Bound<'t>,
        tokens: &[usize],
        geom: &SequenceGeometry,
    ) -> Result<Var<'t>> {
        let len = tokens.len();
        Ok(self
            .embed_batch(p, tokens, 1, geom)?
            .reshape(&[len, self.width(p)])?)
    }

    /// Embeddings `[B, L, E]` of `batch` prefixes of equal length, given as
    /// `B * L` ids back to back.
    pub fn embed_batch<'t>(
        &self,
        p: &Bound<'t>,
        tokens: &[usize],
        batch: usize,
        geom: &SequenceGeometry,
    ) -> Result<Var<'t>> {
        let table = p.get(self.position);
        let seq_len = table.shape()[0];
        let len = if batch == 0 { 0 } else { tokens.len() / batch };
        if len == 0 || len > seq_len || len * batch != tokens.len() {
            return Err(Error::Index {
                what: "sequence length",
                index: len,
                size: seq_len,
            });
        }
        let mut shared = table.narrow(0, 0, len)?;
        if self.spatial {
            let tape = table.tape();
            let nb = geom.bev_tokens();
            let bev_len = len.min(nb);
            let bev_in = tape.constant(geom.bev.clone()).narrow(0, 0, bev_len)?;
            let mut geo = self.theta_bev.forward(p, bev_in)?;
            if len > nb {
                let cam_in = tape.constant(geom.camera.clone()).narrow(0, 0, len - nb)?;
                let cam = self.theta_camera.forward(p, cam_in)?;
                geo = Var::concat(&[geo, cam], 0)?;
            }
            shared = shared.add(geo)?;
        }
        let width = self.width(p);
        let lookup = p
            .get(self.token)
            .embedding(tokens)?
            .reshape(&[batch, len, width])?;
        Ok(lookup.add(shared)?)
    }

    fn width(&self, p: &Bound<'_>) -> usize {
        p.get(self.position).shape()[1]
    }
}
