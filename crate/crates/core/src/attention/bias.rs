use std::fmt::Debug;
use std::sync::Arc;

use bevgen_numcore::nn::{Bound, ParamId, ParamStore};
use bevgen_numcore::{Tensor, Var};

use crate::geometry::{pairwise_bias, DirectionField};
use crate::registry::Registry;
use crate::sequence::SequenceLayout;
use crate::{Error, Result};

/// Pairwise cosine matrix `[S, S]` in sequence order. Rows of BEV queries
/// are zero.
pub fn sequence_cosine(dirs: &DirectionField, layout: &SequenceLayout) -> Result<Tensor> {
    let canonical = pairwise_bias(dirs);
    let s = layout.len();
    if canonical.size != s {
        return Err(Error::Config(format!(
            "direction field has {} tokens, layout {s}",
            canonical.size
        )));
    }
    let idx: Vec<usize> = (0..s).map(|p| layout.canonical(p)).collect();
    let nb = layout.bev_tokens();
    let mut out = vec![0.0; s * s];
    for r in nb..s {
        for c in 0..s {
            out[r * s + c] = canonical.get(idx[r], idx[c]);
        }
    }
    Ok(Tensor::new(&[s, s], out)?)
}

/// Image-query, image-key block of an `[S, S]` matrix, row-major.
pub fn image_block(m: &Tensor, bev_tokens: usize) -> Vec<f64> {
    let s = m.shape()[0];
    (bev_tokens..s)
        .flat_map(|r| m.row(r)[bev_tokens..].iter().copied())
        .collect()
}

/// `beta = cosine + theta` with BEV-query rows zeroed. `offsets` is a
/// materialized `[S, S]` theta.
pub fn build_bias(
    dirs: &DirectionField,
    layout: &SequenceLayout,
    offsets: &Tensor,
) -> Result<Tensor> {
    let mut beta = sequence_cosine(dirs, layout)?;
    let s = layout.len();
    if offsets.shape() != [s, s] {
        return Err(Error::Config(format!(
            "offsets shape {:?}, expected [{s}, {s}]",
            offsets.shape()
        )));
    }
    let nb = layout.bev_tokens();
    for (i, (b, &o)) in beta.data_mut().iter_mut().zip(offsets.data()).enumerate() {
        if i / s >= nb {
            *b += o;
        }
    }
    Ok(beta)
}

/// Learnable offsets `theta` for a fixed layout.
pub trait BiasOffsets: Debug + Send + Sync {
    /// `theta` for the first `len` positions, `[len, len]`, BEV rows zero.
    fn offsets<'t>(&self, p: &Bound<'t>, len: usize) -> Result<Var<'t>>;
}

/// Factory that registers the offset parameters of one parameterization.
pub trait OffsetScheme: Send + Sync {
    fn name(&self) -> &'static str;
    fn create(&self, store: &mut ParamStore, layout: &SequenceLayout) -> Box<dyn BiasOffsets>;
}

fn check_len(len: usize, s: usize) -> Result<()> {
    if len == 0 || len > s {
        return Err(Error::Index {
            what: "bias length",
            index: len,
            size: s,
        });
    }
    Ok(())
}

fn row_mask(len: usize, nb: usize) -> Tensor {
    let mut m = Tensor::zeros(&[len, len]);
    if len > nb {
        m.data_mut()[nb * len..].fill(1.0);
    }
    m
}

/// One scalar per sequence distance `|r - c|` plus one per camera pair
/// (query camera, key camera or BEV). Parameters: `S + n * (n + 1)`.
#[derive(Clone, Debug)]
pub struct RelativeOffsets {
    pub distance: ParamId,
    pub camera_pair: ParamId,
    bev_tokens: usize,
    cameras: usize,
    /// Camera of each position, `None` for BEV.
    camera_of: Vec<Option<usize>>,
}

impl RelativeOffsets {
    pub fn new(store: &mut ParamStore, layout: &SequenceLayout) -> Self {
        let s = layout.len();
        let n = layout.cameras;
        Self {
            distance: store.add("bias.distance", Tensor::zeros(&[s, 1]), false),
            camera_pair: store.add("bias.camera_pair", Tensor::zeros(&[n * (n + 1), 1]), false),
            bev_tokens: layout.bev_tokens(),
            cameras: n,
            camera_of: (0..s).map(|p| layout.camera_at(p)).collect(),
        }
    }
}

impl BiasOffsets for RelativeOffsets {
    fn offsets<'t>(&self, p: &Bound<'t>, len: usize) -> Result<Var<'t>> {
        check_len(len, self.camera_of.len())?;
        let n = self.cameras;
        let mut dist = Vec::with_capacity(len * len);
        let mut pair = Vec::with_capacity(len * len);
        for r in 0..len {
            for c in 0..len {
                dist.push(r.abs_diff(c));
                let qk = self.camera_of[r].unwrap_or(0);
                pair.push(qk * (n + 1) + self.camera_of[c].unwrap_or(n));
            }
        }
        let theta = p
            .get(self.distance)
            .embedding(&dist)?
            .add(p.get(self.camera_pair).embedding(&pair)?)?
            .reshape(&[len, len])?;
        let tape = theta.tape();
        Ok(theta.mul(tape.constant(row_mask(len, self.bev_tokens)))?)
    }
}

/// An unconstrained `[S, S]` matrix.
#[derive(Clone, Debug)]
pub struct FullOffsets {
    pub theta: ParamId,
    bev_tokens: usize,
    len: usize,
}

impl FullOffsets {
    pub fn new(store: &mut ParamStore, layout: &SequenceLayout) -> Self {
        let s = layout.len();
        Self {
            theta: store.add("bias.full", Tensor::zeros(&[s, s]), false),
            bev_tokens: layout.bev_tokens(),
            len: s,
        }
    }
}

impl BiasOffsets for FullOffsets {
    fn offsets<'t>(&self, p: &Bound<'t>, len: usize) -> Result<Var<'t>> {
        check_len(len, self.len)?;
        let theta = p.get(self.theta).narrow(0, 0, len)?.narrow(1, 0, len)?;
        let tape = theta.tape();
        Ok(theta.mul(tape.constant(row_mask(len, self.bev_tokens)))?)
    }
}

struct RelativeScheme;

impl OffsetScheme for RelativeScheme {
    fn name(&self) -> &'static str {
        "relative"
    }

    fn create(&self, store: &mut ParamStore, layout: &SequenceLayout) -> Box<dyn BiasOffsets> {
        Box::new(RelativeOffsets::new(store, layout))
    }
}

struct FullScheme;

impl OffsetScheme for FullScheme {
    fn name(&self) -> &'static str {
        "full"
    }

    fn create(&self, store: &mut ParamStore, layout: &SequenceLayout) -> Box<dyn BiasOffsets> {
        Box::new(FullOffsets::new(store, layout))
    }
}

/// Registry holding `relative` and `full`.
pub fn bias_offsets() -> Registry<dyn OffsetScheme> {
    let mut reg: Registry<dyn OffsetScheme> = Registry::new("bias offsets");
    reg.register("relative", Arc::new(RelativeScheme));
    reg.register("full", Arc::new(FullScheme));
    reg
}

/// Fixed cosine term plus learned offsets, shared by every head and layer.
#[derive(Debug)]
pub struct CameraBias {
    /// `[S, S]` cosine in sequence order; treated as a constant.
    pub cosine: Tensor,
    pub offsets: Box<dyn BiasOffsets>,
}

impl CameraBias {
    pub fn new(
        store: &mut ParamStore,
        dirs: &DirectionField,
        layout: &SequenceLayout,
        scheme: &dyn OffsetScheme,
    ) -> Result<Self> {
        Ok(Self {
            cosine: sequence_cosine(dirs, layout)?,
            offsets: scheme.create(store, layout),
        })
    }

    /// `beta` for the first `len` positions.
    pub fn build<'t>(&self, p: &Bound<'t>, len: usize) -> Result<Var<'t>> {
        let theta = self.offsets.offsets(p, len)?;
        let tape = theta.tape();
        let cos = tape
            .constant(self.cosine.clone())
            .narrow(0, 0, len)?
            .narrow(1, 0, len)?;
        Ok(cos.add(theta)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{BevGeometry, CameraRig, DirectionOptions};
    use crate::sequence::CenterOut;
    use bevgen_numcore::Tape;

    fn setup() -> (DirectionField, SequenceLayout) {
        let rig = CameraRig::pair2();
        let bev = BevGeometry::desk();
        let dirs = DirectionField::new(&rig, &bev, DirectionOptions::default()).unwrap();
        (
            dirs,
            SequenceLayout::from_rig(&rig, &bev, &CenterOut).unwrap(),
        )
    }

    #[test]
    fn zero_offsets_give_the_cosine() {
        let (dirs, layout) = setup();
        let s = layout.len();
        let beta = build_bias(&dirs, &layout, &Tensor::zeros(&[s, s])).unwrap();
        assert_eq!(beta, sequence_cosine(&dirs, &layout).unwrap());
        let mut store = ParamStore::new();
        for name in ["relative", "full"] {
            let scheme = bias_offsets().get(name).unwrap();
            let bias = CameraBias::new(&mut store, &dirs, &layout, scheme.as_ref()).unwrap();
            let tape = Tape::new();
            let p = store.bind(&tape);
            assert_eq!(*bias.build(&p, s).unwrap().value(), beta);
        }
    }

    #[test]
    fn relative_offsets_index_distance_and_cameras() {
        let (_, layout) = setup();
        let mut store = ParamStore::new();
        let off = RelativeOffsets::new(&mut store, &layout);
        for (i, v) in store
            .get_mut(off.distance)
            .data_mut()
            .iter_mut()
            .enumerate()
        {
            *v = i as f64;
        }
        for (i, v) in store
            .get_mut(off.camera_pair)
            .data_mut()
            .iter_mut()
            .enumerate()
        {
            *v = 1000.0 * i as f64;
        }
        let tape = Tape::new();
        let p = store.bind(&tape);
        let s = layout.len();
        let theta = off.offsets(&p, s).unwrap().value();
        let nb = layout.bev_tokens();
        let (r, c) = (nb + 5, 3);
        let k = layout.camera_at(r).unwrap();
        assert_eq!(
            theta.get(&[r, c]),
            (r - c) as f64 + 1000.0 * (k * 3 + 2) as f64
        );
        let c2 = nb + 1;
        let k2 = layout.camera_at(c2).unwrap();
        assert_eq!(theta.get(&[r, c2]), 4.0 + 1000.0 * (k * 3 + k2) as f64);
        assert_eq!(theta.get(&[nb - 1, 0]), 0.0);
        assert!(off.offsets(&p, s + 1).is_err());
    }
}
