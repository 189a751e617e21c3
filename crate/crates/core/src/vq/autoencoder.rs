use bevgen_numcore::nn::{Bound, Conv, ParamId, ParamStore};
use bevgen_numcore::optim::{clip_global_norm, AdamW, AdamWConfig};
use bevgen_numcore::{ConvSpec, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::codebook::{nearest_codes, Codebook};
use crate::geometry::{BevGeometry, ChannelKind};
use crate::{Error, Result};

const POINTWISE: ConvSpec = ConvSpec {
    kernel: 1,
    stride: 1,
    pad: 0,
};

/// Reconstruction objective of an autoencoder.
#[derive(Clone, Debug, PartialEq)]
pub enum ReconKind {
    /// Mean absolute error, for images in `[0, 1]`.
    L1,
    /// Binary cross-entropy on binary channels plus squared error on
    /// continuous ones; one entry per input channel.
    Bev(Vec<ChannelKind>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct VqConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Output channels of each stride-2 encoder stage. The decoder mirrors
    /// them with transposed convolutions.
    pub hidden: Vec<usize>,
    pub code_dim: usize,
    pub codebook_size: usize,
    pub recon: ReconKind,
    /// Weight of the commitment term.
    pub commitment: f64,
    /// Codes unused for this many consecutive steps are re-seeded.
    pub dead_code_patience: u64,
    pub lr: f64,
}

impl VqConfig {
    /// RGB images with three downsampling stages.
    pub fn image(height: usize, width: usize) -> Self {
        Self {
            channels: 3,
            height,
            width,
            hidden: vec![16, 32, 32],
            code_dim: 32,
            codebook_size: 256,
            recon: ReconKind::L1,
            commitment: 0.25,
            dead_code_patience: 200,
            lr: 1e-3,
        }
    }

    /// BEV grids, downsampled to the geometry's latent side.
    pub fn bev(geometry: &BevGeometry) -> Self {
        let mut stages = 0;
        while geometry.cells >> stages > geometry.latent {
            stages += 1;
        }
        Self {
            channels: geometry.num_channels(),
            height: geometry.cells,
            width: geometry.cells,
            hidden: vec![32; stages],
            code_dim: 32,
            codebook_size: 256,
            recon: ReconKind::Bev(geometry.channels.iter().map(|(_, k)| *k).collect()),
            commitment: 0.25,
            dead_code_patience: 200,
            lr: 1e-3,
        }
    }

    pub fn downsample(&self) -> usize {
        1 << self.hidden.len()
    }

    pub fn latent(&self) -> (usize, usize) {
        let f = self.downsample();
        (self.height / f, self.width / f)
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.downsample();
        let mut bad = Vec::new();
        if !self.height.is_multiple_of(f)
            || !self.width.is_multiple_of(f)
            || self.height < f
            || self.width < f
        {
            bad.push(format!(
                "input {}x{} is not divisible by the downsampling factor {f}",
                self.height, self.width
            ));
        }
        if self.codebook_size < 2 {
            bad.push("codebook_size must be at least 2".into());
        }
        if self.code_dim == 0 || self.channels == 0 || self.hidden.contains(&0) {
            bad.push("channel counts must be positive".into());
        }
        if let ReconKind::Bev(kinds) = &self.recon {
            if kinds.len() != self.channels {
                bad.push(format!(
                    "{} channel kinds for {} channels",
                    kinds.len(),
                    self.channels
                ));
            }
        }
        if !(self.lr >= 0.0) || !(self.commitment >= 0.0) {
            bad.push("lr and commitment must be nonnegative".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

/// Encoder, codebook and decoder of one modality.
#[derive(Clone, Debug)]
pub struct VqAutoencoder {
    pub config: VqConfig,
    pub store: ParamStore,
    encoder: Vec<Conv>,
    to_code: Conv,
    from_code: Conv,
    decoder: Vec<Conv>,
    codebook: ParamId,
    /// Positions assigned to each code over all training steps.
    pub usage: Vec<u64>,
    last_used: Vec<u64>,
    pub step: u64,
}

/// Everything one forward pass produces.
pub struct VqForward<'t> {
    /// Encoder output rows `[B*h*w, n]` before quantization.
    pub features: Var<'t>,
    pub tokens: Vec<usize>,
    /// Quantized rows carrying straight-through gradients to `features`.
    pub quantized: Var<'t>,
    /// Raw decoder output `[B, C, H, W]` (logits for binary BEV channels).
    pub output: Var<'t>,
    pub codebook_loss: Var<'t>,
    pub commitment_loss: Var<'t>,
}

impl VqForward<'_> {
    /// Snapshot of the code assignment for [`VqAutoencoder::forward_frozen`].
    pub fn freeze(&self) -> FrozenAssignment {
        FrozenAssignment {
            tokens: self.tokens.clone(),
            features: (*self.features.value()).clone(),
            selected: (*self.quantized.value()).clone(),
        }
    }
}

/// Code assignment, encoder rows and selected codes at one parameter point.
#[derive(Debug, Clone)]
pub struct FrozenAssignment {
    pub tokens: Vec<usize>,
    pub features: Tensor,
    pub selected: Tensor,
}

impl VqAutoencoder {
    pub fn new(config: VqConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut encoder = Vec::new();
        let mut prev = config.channels;
        for (s, &c) in config.hidden.iter().enumerate() {
            encoder.push(Conv::new(
                &mut store,
                &format!("enc.{s}"),
                prev,
                c,
                ConvSpec::DOWN2,
                false,
                &mut rng,
            ));
            prev = c;
        }
        let to_code = Conv::new(
            &mut store,
            "enc.out",
            prev,
            config.code_dim,
            POINTWISE,
            false,
            &mut rng,
        );
        let from_code = Conv::new(
            &mut store,
            "dec.in",
            config.code_dim,
            prev,
            POINTWISE,
            false,
            &mut rng,
        );
        let mut decoder = Vec::new();
        for s in (0..config.hidden.len()).rev() {
            let out = if s == 0 {
                config.channels
            } else {
                config.hidden[s - 1]
            };
            decoder.push(Conv::new(
                &mut store,
                &format!("dec.{s}"),
                config.hidden[s],
                out,
                ConvSpec::DOWN2,
                true,
                &mut rng,
            ));
        }
        let book = Codebook::random(config.codebook_size, config.code_dim, &mut rng)?;
        let codebook = store.add("codebook", book.vectors, false);
        let m = config.codebook_size;
        Ok(Self {
            config,
            store,
            encoder,
            to_code,
            from_code,
            decoder,
            codebook,
            usage: vec![0; m],
            last_used: vec![0; m],
            step: 0,
        })
    }

    pub fn codebook(&self) -> Codebook {
        Codebook {
            vectors: self.store.get(self.codebook).clone(),
            usage: self.usage.clone(),
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<usize> {
        let c = &self.config;
        if shape.len() != 4 || shape[1..] != [c.channels, c.height, c.width] {
            return Err(Error::Config(format!(
                "input shape {shape:?} does not match [B, {}, {}, {}]",
                c.channels, c.height, c.width
            )));
        }
        Ok(shape[0])
    }

    fn encode_var<'t>(&self, p: &Bound<'t>, input: Var<'t>) -> Result<Var<'t>> {
        let mut h = input;
        for conv in &self.encoder {
            h = conv.forward(p, h)?.relu();
        }
        let z = self.to_code.forward(p, h)?;
        let s = z.shape();
        Ok(z.permute(&[0, 2, 3, 1])?
            .reshape(&[s[0] * s[2] * s[3], s[1]])?)
    }

    fn decode_var<'t>(&self, p: &Bound<'t>, rows: Var<'t>, batch: usize) -> Result<Var<'t>> {
        let (h, w) = self.config.latent();
        let n = self.config.code_dim;
        let z = rows.reshape(&[batch, h, w, n])?.permute(&[0, 3, 1, 2])?;
        let mut x = self.from_code.forward(p, z)?.relu();
        for (s, conv) in self.decoder.iter().enumerate() {
            x = conv.forward(p, x)?;
            if s + 1 < self.decoder.len() {
                x = x.relu();
            }
        }
        Ok(x)
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, input: Var<'t>) -> Result<VqForward<'t>> {
        let batch = self.check_input(&input.shape())?;
        let features = self.encode_var(p, input)?;
        let codes = p.get(self.codebook);
        let tokens = nearest_codes(&codes.value(), features.value().data())?;
        let selected = codes.embedding(&tokens)?;
        let quantized = features.straight_through((*selected.value()).clone())?;
        let codebook_loss = features.detach().sub(selected)?.square().mean();
        let commitment_loss = features
            .sub(selected.detach())?
            .square()
            .mean()
            .scale(self.config.commitment);
        let output = self.decode_var(p, quantized, batch)?;
        Ok(VqForward {
            features,
            tokens,
            quantized,
            output,
            codebook_loss,
            commitment_loss,
        })
    }

    /// Smooth surrogate of [`forward`] around the point `frozen` was taken
    /// at. Codes are not searched, the decoder sees
    /// `features + (selected - features0)` and every stop-gradient operand
    /// is replaced by its frozen value. At that point the value matches and
    /// the true gradient equals the straight-through gradient, which makes
    /// this the reference for finite-difference checks.
    ///
    /// [`forward`]: VqAutoencoder::forward
    pub fn forward_frozen<'t>(
        &self,
        p: &Bound<'t>,
        input: Var<'t>,
        frozen: &FrozenAssignment,
    ) -> Result<VqForward<'t>> {
        let batch = self.check_input(&input.shape())?;
        let tape = input.tape();
        let features = self.encode_var(p, input)?;
        let selected = p.get(self.codebook).embedding(&frozen.tokens)?;
        let z0 = tape.constant(frozen.features.clone());
        let e0 = tape.constant(frozen.selected.clone());
        let quantized = features.add(e0.sub(z0)?)?;
        let codebook_loss = z0.sub(selected)?.square().mean();
        let commitment_loss = features
            .sub(e0)?
            .square()
            .mean()
            .scale(self.config.commitment);
        let output = self.decode_var(p, quantized, batch)?;
        Ok(VqForward {
            features,
            tokens: frozen.tokens.clone(),
            quantized,
            output,
            codebook_loss,
            commitment_loss,
        })
    }

    /// Reconstruction loss of raw decoder output against the target.
    pub fn reconstruction_loss<'t>(&self, output: Var<'t>, target: Var<'t>) -> Result<Var<'t>> {
        match &self.config.recon {
            ReconKind::L1 => Ok(output.sub(target)?.abs().mean()),
            ReconKind::Bev(kinds) => {
                let (binary, continuous) = bev_loss_terms(output, target, kinds)?;
                match (binary, continuous) {
                    (Some(b), Some(c)) => b.add(c).map_err(Into::into),
                    (Some(t), None) | (None, Some(t)) => Ok(t),
                    (None, None) => Ok(output.tape().constant(Tensor::scalar(0.0))),
                }
            }
        }
    }

    /// Token grid `[B * h * w]` of each input in the batch, row-major.
    pub fn encode_tokens(&self, input: &Tensor) -> Result<Vec<usize>> {
        self.check_input(input.shape())?;
        let tape = Tape::new();
        let p = self.store.bind(&tape);
        let rows = self.encode_var(&p, tape.constant(input.clone()))?;
        nearest_codes(self.store.get(self.codebook), rows.value().data())
    }

    /// Decode token grids of `batch` inputs. Images are clamped to
    /// `[0, 1]`; binary BEV channels become probabilities.
    pub fn decode_tokens(&self, tokens: &[usize], batch: usize) -> Result<Tensor> {
        let (h, w) = self.config.latent();
        if tokens.len() != batch * h * w {
            return Err(Error::Config(format!(
                "{} tokens for {batch} grids of {h}x{w}",
                tokens.len()
            )));
        }
        let rows = self.codebook().lookup(tokens)?;
        let tape = Tape::new();
        let p = self.store.bind(&tape);
        let rows = tape.constant(Tensor::new(&[tokens.len(), self.config.code_dim], rows)?);
        let out = self.decode_var(&p, rows, batch)?.value();
        let mut out = (*out).clone();
        let (c, plane) = (self.config.channels, self.config.height * self.config.width);
        let data = out.data_mut();
        match &self.config.recon {
            ReconKind::L1 => data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0)),
            ReconKind::Bev(kinds) => {
                for (i, chunk) in data.chunks_mut(plane).enumerate() {
                    if kinds[i % c] == ChannelKind::Binary {
                        chunk
                            .iter_mut()
                            .for_each(|v| *v = 1.0 / (1.0 + (-*v).exp()));
                    }
                }
            }
        }
        Ok(out)
    }

    /// Reset codes idle for the configured patience to random rows of
    /// `features`. Returns how many were reset.
    fn reseed_dead_codes<R: Rng>(&mut self, features: &Tensor, rng: &mut R) -> usize {
        let patience = self.config.dead_code_patience;
        if patience == 0 {
            return 0;
        }
        let rows = features.shape()[0];
        let dim = self.config.code_dim;
        let mut reset = 0;
        for m in 0..self.config.codebook_size {
            if self.step - self.last_used[m] >= patience {
                let r = rng.random_range(0..rows);
                let src = features.row(r).to_vec();
                let book = self.store.get_mut(self.codebook).data_mut();
                book[m * dim..(m + 1) * dim].copy_from_slice(&src);
                self.last_used[m] = self.step;
                reset += 1;
            }
        }
        reset
    }
}

/// Binary cross-entropy over the binary channels and mean squared error
/// over the continuous channels, each `None` when no channel has that kind.
pub fn bev_loss_terms<'t>(
    output: Var<'t>,
    target: Var<'t>,
    kinds: &[ChannelKind],
) -> Result<(Option<Var<'t>>, Option<Var<'t>>)> {
    let pick = |v: Var<'t>, kind: ChannelKind| -> Result<Option<Var<'t>>> {
        let parts: Vec<Var<'t>> = kinds
            .iter()
            .enumerate()
            .filter(|(_, k)| **k == kind)
            .map(|(c, _)| v.narrow(1, c, 1))
            .collect::<std::result::Result<_, _>>()?;
        Ok(match parts.len() {
            0 => None,
            1 => Some(parts[0]),
            _ => Some(Var::concat(&parts, 1)?),
        })
    };
    let binary = match (
        pick(output, ChannelKind::Binary)?,
        pick(target, ChannelKind::Binary)?,
    ) {
        (Some(o), Some(t)) => Some(o.bce_with_logits(t)?),
        _ => None,
    };
    let continuous = match (
        pick(output, ChannelKind::Continuous)?,
        pick(target, ChannelKind::Continuous)?,
    ) {
        (Some(o), Some(t)) => Some(o.sub(t)?.square().mean()),
        _ => None,
    };
    Ok((binary, continuous))
}

/// Loss breakdown of one training step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VqStepStats {
    pub step: u64,
    pub loss: f64,
    pub reconstruction: f64,
    pub codebook: f64,
    pub commitment: f64,
    pub grad_norm: f64,
    pub reseeded: usize,
}

/// Adam training loop state for a [`VqAutoencoder`].
pub struct VqTrainer {
    pub model: VqAutoencoder,
    optimizer: AdamW,
    rng: ChaCha8Rng,
    /// Global gradient norm cap; infinite disables clipping.
    pub clip: f64,
}

impl VqTrainer {
    pub fn new(model: VqAutoencoder, seed: u64) -> Self {
        let config = AdamWConfig {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        let optimizer = AdamW::new(config, &model.store);
        Self {
            model,
            optimizer,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0de),
            clip: f64::INFINITY,
        }
    }

    /// One optimizer step on `batch` (`[B, C, H, W]`).
    pub fn step(&mut self, batch: &Tensor) -> Result<VqStepStats> {
        let model = &self.model;
        let tape = Tape::new();
        let p = model.store.bind(&tape);
        let input = tape.constant(batch.clone());
        let fwd = model.forward(&p, input)?;
        let recon = model.reconstruction_loss(fwd.output, input)?;
        let loss = recon.add(fwd.codebook_loss)?.add(fwd.commitment_loss)?;
        let value = loss.value().item();
        if !value.is_finite() {
            return Err(Error::Divergence {
                step: model.step as usize,
                loss: value,
            });
        }
        let grads = tape.backward(loss)?;
        let mut grads = p.grads(&grads);
        let grad_norm = clip_global_norm(&mut grads, self.clip);
        let stats = (
            recon.value().item(),
            fwd.codebook_loss.value().item(),
            fwd.commitment_loss.value().item(),
        );
        let features = (*fwd.features.value()).clone();
        let tokens = fwd.tokens;
        drop(p);

        let lr = self.model.config.lr;
        self.optimizer.step(&mut self.model.store, &grads, lr);
        let model = &mut self.model;
        model.step += 1;
        for &t in &tokens {
            model.usage[t] += 1;
            model.last_used[t] = model.step;
        }
        let reseeded = model.reseed_dead_codes(&features, &mut self.rng);
        Ok(VqStepStats {
            step: model.step,
            loss: value,
            reconstruction: stats.0,
            codebook: stats.1,
            commitment: stats.2,
            grad_norm,
            reseeded,
        })
    }
}
