//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) because later criteria share
//! an expensive fixture (a rendered dataset and trained tokenizers). Exits
//! with status 1 when any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use bevgen_cli::commands::{self, png_bytes, read_png, EvalReport};
use bevgen_cli::dataset::Dataset;
use bevgen_cli::pipeline::{
    self, relative_color_error, style_stats, teacher_forced, train_prior, Tokenizers, TrainEvent,
};
use bevgen_cli::RunConfig;
use bevgen_core::attention::{
    biased_attention, build_sparse_mask, image_block, sequence_cosine, sparse_attention_flops,
    ScoreFlops,
};
use bevgen_core::geometry::{BevGeometry, CameraRig, DirectionField, DirectionOptions};
use bevgen_core::prior::{
    generate, prior_loss, PriorBatch, PriorConfig, PriorModel, SamplingConfig, TrainSample,
};
use bevgen_core::sequence::{center_out_order, decode_orders, SequenceLayout};
use bevgen_core::vq::{nearest_codes, Codebook, VqAutoencoder, VqConfig, VqForward};
use bevgen_numcore::gradcheck::{random_projection, relative_error, GradCheck};
use bevgen_numcore::nn::ParamStore;
use bevgen_numcore::{ConvSpec, Result as NumResult, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Verdict = Result<(bool, String), String>;

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
    secs: f64,
}

fn check(name: &'static str, f: impl FnOnce() -> Verdict) -> Outcome {
    let start = Instant::now();
    let (pass, detail) = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(v)) => v,
        Ok(Err(e)) => (false, format!("error: {e}")),
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {msg}"))
        }
    };
    let secs = start.elapsed().as_secs_f64();
    println!(
        "{} {name}: {detail} ({secs:.1}s)",
        if pass { "PASS" } else { "FAIL" }
    );
    Outcome {
        name,
        pass,
        detail,
        secs,
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- gradients

const GRAD_TOL: f64 = 1e-4;

fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, -2.0, 2.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

type OpFn = Box<dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> NumResult<Var<'t>>>;

fn op_cases() -> Vec<(&'static str, Vec<Tensor>, OpFn)> {
    let a = || rand_t(&[3, 4], 1);
    let b = || rand_t(&[3, 4], 2);
    let row = || rand_t(&[4], 3);
    let bce_target = Tensor::uniform(&[3, 4], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(5));
    let mask = vec![true, false, true, true, true, false, false, true, true];
    vec![
        (
            "add",
            vec![a(), b()],
            Box::new(|_, v| random_projection(v[0].add(v[1])?, 1)),
        ),
        (
            "sub",
            vec![a(), row()],
            Box::new(|_, v| random_projection(v[0].sub(v[1])?, 1)),
        ),
        (
            "mul",
            vec![a(), row()],
            Box::new(|_, v| random_projection(v[0].mul(v[1])?, 1)),
        ),
        (
            "scale",
            vec![a()],
            Box::new(|_, v| random_projection(v[0].scale(-1.7), 1)),
        ),
        (
            "abs",
            vec![a()],
            Box::new(|_, v| random_projection(v[0].abs(), 1)),
        ),
        (
            "relu",
            vec![a()],
            Box::new(|_, v| random_projection(v[0].relu(), 1)),
        ),
        (
            "gelu",
            vec![a()],
            Box::new(|_, v| random_projection(v[0].gelu(), 1)),
        ),
        (
            "sigmoid",
            vec![a()],
            Box::new(|_, v| random_projection(v[0].sigmoid(), 1)),
        ),
        (
            "square",
            vec![a()],
            Box::new(|_, v| random_projection(v[0].square(), 1)),
        ),
        ("sum", vec![a()], Box::new(|_, v| Ok(v[0].square().sum()))),
        ("mean", vec![a()], Box::new(|_, v| Ok(v[0].square().mean()))),
        (
            "matmul",
            vec![rand_t(&[2, 3, 4], 6), rand_t(&[2, 4, 5], 7)],
            Box::new(|_, v| random_projection(v[0].matmul(v[1])?, 2)),
        ),
        (
            "matmul_shared",
            vec![rand_t(&[2, 3, 4], 8), rand_t(&[4, 5], 9)],
            Box::new(|_, v| random_projection(v[0].matmul(v[1])?, 2)),
        ),
        (
            "transpose",
            vec![rand_t(&[2, 3, 4], 10)],
            Box::new(|_, v| random_projection(v[0].transpose()?, 3)),
        ),
        (
            "permute",
            vec![rand_t(&[2, 3, 4], 11)],
            Box::new(|_, v| random_projection(v[0].permute(&[2, 0, 1])?, 3)),
        ),
        (
            "reshape",
            vec![rand_t(&[2, 3, 4], 12)],
            Box::new(|_, v| random_projection(v[0].reshape(&[4, 6])?, 3)),
        ),
        (
            "narrow",
            vec![a()],
            Box::new(|_, v| random_projection(v[0].narrow(1, 1, 2)?, 3)),
        ),
        (
            "concat",
            vec![a(), b()],
            Box::new(|_, v| random_projection(Var::concat(&[v[0], v[1]], 0)?, 3)),
        ),
        (
            "softmax",
            vec![rand_t(&[3, 4, 2], 13)],
            Box::new(|_, v| random_projection(v[0].softmax(1)?, 4)),
        ),
        (
            "masked_softmax",
            vec![rand_t(&[2, 3, 3], 14)],
            Box::new(move |_, v| random_projection(v[0].masked_softmax(&mask, &[3, 3])?, 4)),
        ),
        (
            "layer_norm",
            vec![a()],
            Box::new(|_, v| random_projection(v[0].layer_norm(), 5)),
        ),
        (
            "embedding",
            vec![rand_t(&[5, 3], 15)],
            Box::new(|_, v| random_projection(v[0].embedding(&[4, 0, 4, 2])?, 5)),
        ),
        (
            "cross_entropy",
            vec![rand_t(&[4, 6], 16)],
            Box::new(|_, v| v[0].cross_entropy(&[0, 5, 2, 2], &[1.0, 2.5, 0.0, 0.5])),
        ),
        (
            "bce_with_logits",
            vec![a()],
            Box::new(move |t, v| v[0].bce_with_logits(t.constant(bce_target.clone()))),
        ),
        (
            "conv2d",
            vec![
                rand_t(&[2, 2, 8, 6], 17),
                rand_t(&[3, 2, 4, 4], 18),
                rand_t(&[3], 19),
            ],
            Box::new(|_, v| random_projection(v[0].conv2d(v[1], v[2], ConvSpec::DOWN2)?, 7)),
        ),
        (
            "conv_transpose2d",
            vec![
                rand_t(&[2, 3, 2, 3], 20),
                rand_t(&[3, 2, 4, 4], 21),
                rand_t(&[2], 22),
            ],
            Box::new(|_, v| {
                random_projection(v[0].conv_transpose2d(v[1], v[2], ConvSpec::DOWN2)?, 7)
            }),
        ),
        (
            "biased_attention",
            vec![
                rand_t(&[2, 5, 4], 23),
                rand_t(&[2, 5, 4], 24),
                rand_t(&[2, 5, 4], 25),
                rand_t(&[5, 5], 26),
            ],
            Box::new(|_, v| {
                let causal: Vec<bool> = (0..25).map(|i| i % 5 <= i / 5).collect();
                let out = biased_attention(v[0], v[1], v[2], Some(v[3]), &causal).map_err(|e| {
                    bevgen_numcore::Error::Invalid {
                        op: "biased_attention",
                        msg: e.to_string(),
                    }
                })?;
                random_projection(out, 8)
            }),
        ),
    ]
}

/// Probe `probes` random entries of every parameter and compare the
/// analytic gradient with central differences of `value`.
fn store_gradcheck(
    store: &ParamStore,
    grads: &[Tensor],
    value: impl Fn(&ParamStore) -> f64,
    probes: usize,
    seed: u64,
) -> Vec<(String, f64)> {
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (slot, id) in store.ids().enumerate() {
        let n = store.get(id).numel();
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for _ in 0..probes.min(n) {
            let e = rng.random_range(0..n);
            let mut st = store.clone();
            st.get_mut(id).data_mut()[e] += h;
            let plus = value(&st);
            st.get_mut(id).data_mut()[e] -= 2.0 * h;
            let minus = value(&st);
            numeric.push((plus - minus) / (2.0 * h));
            analytic.push(grads[slot].data()[e]);
        }
        out.push((
            store.name(id).to_string(),
            relative_error(&analytic, &numeric),
        ));
    }
    out
}

fn randomize_params(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let t = store.get_mut(id);
        let noise = Tensor::randn(t.shape(), 0.3, &mut rng);
        for (x, n) in t.data_mut().iter_mut().zip(noise.data()) {
            *x += n;
        }
    }
}

fn prior_case(config: PriorConfig, seed: u64) -> Vec<(String, f64)> {
    let (mc, mb) = (config.camera_vocab, config.bev_vocab);
    let mut model =
        PriorModel::new(config, &CameraRig::pair2(), &BevGeometry::desk(), seed).expect("model");
    randomize_params(&mut model.store, seed + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    let samples: Vec<TrainSample> = (0..2)
        .map(|_| TrainSample {
            bev: (0..64).map(|_| rng.random_range(0..mb)).collect(),
            cameras: (0..2)
                .map(|_| (0..32).map(|_| rng.random_range(0..mc)).collect())
                .collect(),
            weights: (0..2)
                .map(|_| (0..32).map(|_| rng.random_range(1..4) as f64).collect())
                .collect(),
        })
        .collect();
    let batch = PriorBatch::new(&model, &samples.iter().collect::<Vec<_>>()).expect("batch");
    let tape = Tape::new();
    let p = model.store.bind(&tape);
    let loss = prior_loss(&model, &p, &batch, None).expect("loss");
    let grads = p.grads(&tape.backward(loss).expect("backward"));
    let value = |st: &ParamStore| {
        let tape = Tape::new();
        let p = st.bind(&tape);
        prior_loss(&model, &p, &batch, None)
            .expect("loss")
            .value()
            .item()
    };
    store_gradcheck(&model.store, &grads, value, 3, seed + 3)
}

/// The straight-through estimator is checked against its smooth surrogate:
/// the same loss with the code assignment and the quantization offset
/// frozen at the base parameters.
fn vq_case(config: VqConfig, input: Tensor, seed: u64) -> Vec<(String, f64)> {
    let mut model = VqAutoencoder::new(config, seed).expect("vq");
    randomize_params(&mut model.store, seed + 1);
    fn total<'t>(model: &VqAutoencoder, f: &VqForward<'t>, x: Var<'t>) -> Var<'t> {
        model
            .reconstruction_loss(f.output, x)
            .and_then(|r| Ok(r.add(f.codebook_loss)?.add(f.commitment_loss)?))
            .expect("loss")
    }
    let tape = Tape::new();
    let p = model.store.bind(&tape);
    let x = tape.constant(input.clone());
    let f = model.forward(&p, x).expect("forward");
    let frozen = f.freeze();
    let loss = total(&model, &f, x);
    let grads = p.grads(&tape.backward(loss).expect("backward"));
    let surrogate = |st: &ParamStore| {
        let tape = Tape::new();
        let p = st.bind(&tape);
        let x = tape.constant(input.clone());
        let f = model.forward_frozen(&p, x, &frozen).expect("forward");
        total(&model, &f, x).value().item()
    };
    let base = surrogate(&model.store);
    assert!(
        (base - loss.value().item()).abs() < 1e-12,
        "surrogate value differs"
    );
    store_gradcheck(&model.store, &grads, surrogate, 3, seed + 2)
}

/// Straight-through against `x + (target - x0)`, which has identity
/// Jacobian and the same value at `x0`.
fn straight_through_case() -> f64 {
    let x0 = rand_t(&[3, 4], 30);
    let target = rand_t(&[3, 4], 31);
    let w = rand_t(&[3, 4], 32);
    let tape = Tape::new();
    let x = tape.leaf(x0.clone());
    let loss = x
        .straight_through(target.clone())
        .and_then(|q| q.square().mul(tape.constant(w.clone())))
        .expect("loss")
        .sum();
    let grads = tape.backward(loss).expect("backward");
    let analytic = grads.get(x).expect("grad").data().to_vec();
    let surrogate = |xs: &[f64]| -> f64 {
        xs.iter()
            .zip(x0.data())
            .zip(target.data())
            .zip(w.data())
            .map(|(((xi, x0i), ti), wi)| wi * (xi + ti - x0i).powi(2))
            .sum()
    };
    let h = 1e-5;
    let numeric: Vec<f64> = (0..x0.numel())
        .map(|i| {
            let mut xs = x0.data().to_vec();
            xs[i] += h;
            let plus = surrogate(&xs);
            xs[i] -= 2.0 * h;
            (plus - surrogate(&xs)) / (2.0 * h)
        })
        .collect();
    relative_error(&analytic, &numeric)
}

fn gradient_suite() -> Verdict {
    let start = Instant::now();
    let mut worst: (String, f64) = (String::new(), 0.0);
    let mut count = 0;
    let mut note = |name: String, e: f64| {
        count += 1;
        if !(e < worst.1) {
            worst = (name, e);
        }
    };
    for (name, inputs, f) in op_cases() {
        let errs = GradCheck::default()
            .run(&inputs, |t, v| f(t, v))
            .map_err(err)?;
        for (i, e) in errs.into_iter().enumerate() {
            note(format!("{name}[{i}]"), e);
        }
    }
    note("straight_through".into(), straight_through_case());
    let tiny = PriorConfig {
        width: 8,
        layers: 2,
        heads: 2,
        mlp_ratio: 2,
        ..PriorConfig::desk(12, 6)
    };
    let variants = [
        ("dense+relative", PriorConfig { ..tiny.clone() }),
        (
            "sparse+relative",
            PriorConfig {
                attention: "sparse".into(),
                density: 0.5,
                window: 8,
                block: 8,
                ..tiny.clone()
            },
        ),
        (
            "full offsets",
            PriorConfig {
                offsets: "full".into(),
                ..tiny.clone()
            },
        ),
        (
            "raster, no bias, no spatial",
            PriorConfig {
                order: "raster".into(),
                camera_bias: false,
                spatial_embed: false,
                dropout: 0.0,
                ..tiny.clone()
            },
        ),
    ];
    for (i, (label, config)) in variants.into_iter().enumerate() {
        for (param, e) in prior_case(config, 100 + 10 * i as u64) {
            note(format!("prior_loss {label} {param}"), e);
        }
    }
    let image = VqConfig {
        hidden: vec![4, 4],
        code_dim: 4,
        codebook_size: 8,
        ..VqConfig::image(8, 8)
    };
    let img = Tensor::uniform(&[2, 3, 8, 8], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(200));
    for (param, e) in vq_case(image, img, 201) {
        note(format!("image vq loss {param}"), e);
    }
    let geometry = BevGeometry {
        cells: 8,
        latent: 2,
        ..BevGeometry::desk()
    };
    let bev = VqConfig {
        hidden: vec![4, 4],
        code_dim: 4,
        codebook_size: 8,
        ..VqConfig::bev(&geometry)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(210);
    let layout: Vec<f64> = (0..2 * 5 * 64)
        .map(|i| {
            if (i / 64) % 5 == 4 {
                rng.random_range(0.0..1.0)
            } else {
                rng.random_range(0..2) as f64
            }
        })
        .collect();
    let layout = Tensor::new(&[2, 5, 8, 8], layout).map_err(err)?;
    for (param, e) in vq_case(bev, layout, 211) {
        note(format!("bev vq loss {param}"), e);
    }
    let secs = start.elapsed().as_secs_f64();
    Ok((
        worst.1 < GRAD_TOL && secs < 120.0,
        format!(
            "{count} checks, worst {} = {:.2e} (tolerance {GRAD_TOL:.0e}), {secs:.1}s of 120s",
            worst.0, worst.1
        ),
    ))
}

// -------------------------------------------------------------- quantization

fn quantization_oracle() -> Verdict {
    let (m, dim, n) = (64, 6, 10_000);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    // Small integer coordinates make exact distance ties common; duplicated
    // codes make them certain.
    let mut codes: Vec<f64> = (0..m * dim)
        .map(|_| rng.random_range(-2..=2) as f64)
        .collect();
    for dup in [(5, 40), (11, 12), (0, 63)] {
        let src = codes[dup.0 * dim..(dup.0 + 1) * dim].to_vec();
        codes[dup.1 * dim..(dup.1 + 1) * dim].copy_from_slice(&src);
    }
    let features: Vec<f64> = (0..n * dim)
        .map(|_| rng.random_range(-2..=2) as f64)
        .collect();
    let book = Codebook::new(Tensor::new(&[m, dim], codes.clone()).map_err(err)?).map_err(err)?;
    let (tokens, quantized) = book.quantize(&features).map_err(err)?;
    let batch = nearest_codes(
        &Tensor::new(&[m, dim], codes.clone()).map_err(err)?,
        &features,
    )
    .map_err(err)?;
    let mut mismatches = 0;
    let mut ties = 0;
    for (i, v) in features.chunks(dim).enumerate() {
        let dist = |c: usize| -> f64 {
            codes[c * dim..(c + 1) * dim]
                .iter()
                .zip(v)
                .map(|(a, b)| (a - b) * (a - b))
                .sum()
        };
        let mut best = 0;
        for c in 1..m {
            if dist(c) < dist(best) {
                best = c;
            }
        }
        ties += ((0..m).filter(|&c| dist(c) == dist(best)).count() > 1) as usize;
        let lookup_ok = quantized[i * dim..(i + 1) * dim] == codes[best * dim..(best + 1) * dim];
        if tokens[i] != best || batch[i] != best || !lookup_ok {
            mismatches += 1;
        }
    }
    Ok((
        mismatches == 0,
        format!("{n} vectors, {ties} with tied nearest codes, {mismatches} mismatches"),
    ))
}

// ------------------------------------------------------------------ ordering

fn ordering_sweep() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let configs = 200;
    for c in 0..configs {
        let h = rng.random_range(1..=8);
        let w = rng.random_range(1..=16);
        let n = rng.random_range(1..=6);
        let mut ring: Vec<usize> = (0..n).collect();
        ring.shuffle(&mut rng);
        let order = center_out_order(h, w, &ring);
        let via_registry = decode_orders()
            .get("center_out")
            .map_err(err)?
            .order(h, w, &ring);
        if order != via_registry {
            return Ok((false, format!("config {c}: registry order differs")));
        }
        let mut sorted = order.clone();
        sorted.sort_unstable();
        let full: Vec<_> = (0..n)
            .flat_map(|k| (0..h).flat_map(move |i| (0..w).map(move |j| (k, i, j))))
            .collect();
        if sorted != full {
            return Ok((
                false,
                format!("config {c} ({n}x{h}x{w}): not a permutation"),
            ));
        }
        if order[0] != (ring[0], 0, w / 2) {
            return Ok((
                false,
                format!(
                    "config {c}: first token {:?}, front camera is {}",
                    order[0], ring[0]
                ),
            ));
        }
        if order.windows(2).any(|p| p[1].1 < p[0].1) {
            return Ok((false, format!("config {c}: a row follows a later row")));
        }
    }
    Ok((
        true,
        format!("{configs} random rigs: permutation, front-top-center start, rows in order"),
    ))
}

// --------------------------------------------------------------- sparse mask

fn sparse_mask_criterion() -> Verdict {
    // Four cameras with 8x16 token grids: 512 image tokens, 64 BEV tokens.
    let quad = CameraRig::quad4();
    let rig =
        CameraRig::new(quad.cameras.clone(), (32, 64), (8, 16), quad.ring.clone()).map_err(err)?;
    let geometry = BevGeometry::desk();
    let order = decode_orders().get("center_out").map_err(err)?;
    let layout = SequenceLayout::from_rig(&rig, &geometry, order.as_ref()).map_err(err)?;
    let dirs = DirectionField::new(&rig, &geometry, DirectionOptions::default()).map_err(err)?;
    let cos = image_block(
        &sequence_cosine(&dirs, &layout).map_err(err)?,
        layout.bev_tokens(),
    );
    let (s_img, nb, b, p, r, d) = (
        layout.camera_tokens(),
        layout.bev_tokens(),
        16,
        0.35,
        96,
        32,
    );
    if s_img != 512 {
        return Err(format!("fixture has {s_img} image tokens"));
    }
    let (mut lo, mut hi, mut worst_ratio) = (1.0f64, 0.0f64, 0.0f64);
    for seed in 0..100u64 {
        let m = build_sparse_mask(&cos, s_img, nb, p, r, b, seed).map_err(err)?;
        let density = m.density();
        lo = lo.min(density);
        hi = hi.max(density);
        if (density - p).abs() > 0.03 {
            return Ok((false, format!("seed {seed}: density {density:.4}")));
        }
        for t in 0..s_img {
            let row = nb + t;
            if (0..nb).any(|c| !m.allows(row, c)) {
                return Ok((false, format!("seed {seed}: query {t} misses a BEV key")));
            }
            if (row.saturating_sub(r).max(nb)..=row).any(|c| !m.allows(row, c)) {
                return Ok((false, format!("seed {seed}: query {t} misses its window")));
            }
        }
        let ratio =
            sparse_attention_flops(&m, d).image as f64 / ScoreFlops::dense(&m, d).image as f64;
        worst_ratio = worst_ratio.max(ratio);
    }
    Ok((
        worst_ratio <= 0.40,
        format!(
            "S_img=512 b=16 p=0.35 r=96 over 100 seeds: density in [{lo:.4}, {hi:.4}], \
             window and BEV keys always present, score FLOPs <= {worst_ratio:.3} x dense"
        ),
    ))
}

// ------------------------------------------------------------------- fixture

/// Dataset and tokenizers shared by the model-based criteria.
struct Fixture {
    _dir: tempfile::TempDir,
    config: RunConfig,
    data: Dataset,
    tok: Tokenizers,
    train_idx: Vec<usize>,
    train: Vec<TrainSample>,
    heldout: Vec<TrainSample>,
}

fn fixture() -> Result<Fixture, String> {
    let dir = tempfile::tempdir().map_err(err)?;
    let config = RunConfig {
        work_dir: dir.path().to_path_buf(),
        scenes: 320,
        heldout: 64,
        ..RunConfig::default()
    };
    config.validate().map_err(err)?;
    commands::gen_data(&config).map_err(err)?;
    commands::train_vqs(&config).map_err(err)?;
    let data = Dataset::open(&config.data_path()).map_err(err)?;
    let tok = Tokenizers::load(&config.work_dir, &data).map_err(err)?;
    let train_idx = data.split("train");
    let train = tok
        .samples(
            &data.records(&train_idx).map_err(err)?,
            &data.rig,
            config.w_fg,
        )
        .map_err(err)?;
    let heldout = tok
        .samples(
            &data.records(&data.split("heldout")).map_err(err)?,
            &data.rig,
            1.0,
        )
        .map_err(err)?;
    Ok(Fixture {
        _dir: dir,
        config,
        data,
        tok,
        train_idx,
        train,
        heldout,
    })
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_bevgen")
}

fn run_cli(args: &[&str], config: &Path) -> Result<(), String> {
    let out = Command::new(bin())
        .args(args)
        .arg("--config")
        .arg(config)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(err)?;
    if !out.status.success() {
        return Err(format!(
            "bevgen {} exited with {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(())
}

fn write_config(path: &Path, config: &RunConfig) -> Result<(), String> {
    fs::write(path, config.echo()).map_err(err)
}

// ------------------------------------------------------------------- overfit

const OVERFIT_SCENES: usize = 16;

fn overfit(fx: &Fixture) -> Verdict {
    let start = Instant::now();
    let config = RunConfig {
        steps: 2000,
        batch_size: 4,
        lr: 2e-3,
        stop_accuracy: Some(0.97),
        eval_every: 50,
        ..fx.config.clone()
    };
    let samples = &fx.train[..OVERFIT_SCENES];
    let model = pipeline::new_prior(&config, &fx.data.rig, &fx.data.geometry).map_err(err)?;
    let mut reached = None;
    let outcome = train_prior(
        &config,
        model,
        samples,
        |e| {
            if let TrainEvent::Accuracy { step, accuracy } = e {
                if *accuracy >= 0.90 && reached.is_none() {
                    reached = Some(*step);
                }
            }
        },
        |_, _| Ok(()),
    )
    .map_err(err)?;
    let tf = teacher_forced(&outcome.model, samples, 16).map_err(err)?;
    let regen = generate(
        &outcome.model,
        &samples[0].bev,
        &BTreeMap::new(),
        &SamplingConfig::argmax(),
    )
    .map_err(err)?;
    let total: usize = samples[0].cameras.iter().map(Vec::len).sum();
    let matched = regen
        .iter()
        .flatten()
        .zip(samples[0].cameras.iter().flatten())
        .filter(|(a, b)| a == b)
        .count();
    let regen_acc = matched as f64 / total as f64;
    let secs = start.elapsed().as_secs_f64();
    let pass = reached.is_some() && tf.accuracy >= 0.90 && regen_acc >= 0.90 && secs < 900.0;
    Ok((
        pass,
        format!(
            "{OVERFIT_SCENES} scenes, width {} x {} layers: teacher-forced accuracy >= 0.90 at step {}, \
             {:.3} after {} steps; argmax regeneration of scene 0 matches {:.3}; {secs:.0}s of 900s",
            config.width,
            config.layers,
            reached.map_or("never".to_string(), |s| s.to_string()),
            tf.accuracy,
            outcome.steps,
            regen_acc
        ),
    ))
}

// ------------------------------------------------------------------ ablation

/// Flag sets from weakest to strongest.
const ABLATIONS: [(&str, bool, bool, bool); 4] = [
    ("raster baseline", false, false, false),
    ("center-out", true, false, false),
    ("center-out + bias", true, true, false),
    ("center-out + bias + spatial", true, true, true),
];
const ABLATION_SEEDS: [u64; 3] = [0, 1, 2];

fn ablation_config(fx: &Fixture, flags: (bool, bool, bool), seed: u64) -> RunConfig {
    RunConfig {
        seed,
        width: 64,
        layers: 2,
        heads: 4,
        steps: 750,
        batch_size: 8,
        lr: 1e-3,
        dropout: 0.1,
        center_out: flags.0,
        camera_bias: flags.1,
        spatial_embed: flags.2,
        ..fx.config.clone()
    }
}

fn checkpoint_path(fx: &Fixture, a: usize, seed: u64) -> PathBuf {
    fx.config
        .work_dir
        .join(format!("ablation{a}_seed{seed}.ckpt"))
}

fn ablation(fx: &Fixture) -> Verdict {
    let start = Instant::now();
    let mut paths = Vec::new();
    for (a, &(_, c, b, s)) in ABLATIONS.iter().enumerate() {
        for &seed in &ABLATION_SEEDS {
            let config = ablation_config(fx, (c, b, s), seed);
            let model =
                pipeline::new_prior(&config, &fx.data.rig, &fx.data.geometry).map_err(err)?;
            let out = train_prior(&config, model, &fx.train, |_| {}, |_, _| Ok(())).map_err(err)?;
            let path = checkpoint_path(fx, a, seed);
            pipeline::save_prior(&path, &out.model, &config).map_err(err)?;
            paths.push(path);
        }
    }
    let eval = RunConfig {
        eval_split: "heldout".into(),
        eval_priors: paths,
        iou_layouts: 0,
        ..fx.config.clone()
    };
    let (report, _) = commands::evaluate(&eval).map_err(err)?;
    let per = ABLATION_SEEDS.len();
    let means: Vec<f64> = report
        .results
        .chunks(per)
        .map(|c| c.iter().map(|r| r.nll).sum::<f64>() / per as f64)
        .collect();
    let gaps: Vec<f64> = means.windows(2).map(|w| w[0] - w[1]).collect();
    let secs = start.elapsed().as_secs_f64();
    let pass = gaps.iter().all(|&g| g >= -0.01) && secs < 7200.0;
    let table: Vec<String> = ABLATIONS
        .iter()
        .zip(&means)
        .map(|((name, ..), m)| format!("{name} {m:.4}"))
        .collect();
    Ok((
        pass,
        format!(
            "held-out NLL over {} scenes, mean of {per} seeds: {}; gaps {:?}; {secs:.0}s of 7200s",
            report.scenes,
            table.join(" | "),
            gaps.iter().map(|g| format!("{g:+.4}")).collect::<Vec<_>>()
        ),
    ))
}

// ------------------------------------------------------------ correspondence

fn full_model_path(fx: &Fixture) -> PathBuf {
    checkpoint_path(fx, ABLATIONS.len() - 1, ABLATION_SEEDS[0])
}

fn correspondence(fx: &Fixture) -> Verdict {
    let eval = RunConfig {
        eval_split: "heldout".into(),
        eval_priors: vec![full_model_path(fx)],
        iou_layouts: 64,
        ..fx.config.clone()
    };
    let (report, _): (EvalReport, _) = commands::evaluate(&eval).map_err(err)?;
    let r = &report.results[0];
    let (iou, control) = (r.iou.unwrap_or(0.0), r.iou_shuffled.unwrap_or(1.0));
    Ok((
        r.iou_layouts == 64 && iou > control,
        format!(
            "vehicle IoU over {} held-out layouts: {iou:.4} conditioned vs {control:.4} with permuted layouts",
            r.iou_layouts
        ),
    ))
}

// ------------------------------------------------------------ view-conditioned

fn view_conditioned(fx: &Fixture) -> Verdict {
    fs::copy(full_model_path(fx), fx.config.work_dir.join("prior.ckpt")).map_err(err)?;
    let cams = fx.data.rig.len();
    let cfg_path = fx.config.work_dir.join("sample.toml");

    // Every view provided: outputs must equal the re-encoded inputs.
    let all = RunConfig {
        sample_split: "heldout".into(),
        sample_count: 8,
        provided_views: (0..cams).collect(),
        ..fx.config.clone()
    };
    write_config(&cfg_path, &all)?;
    run_cli(&["sample"], &cfg_path)?;
    let held = fx.data.split("heldout");
    let mut identical = 0;
    let mut compared = 0;
    for &scene in held.iter().take(8) {
        let rec = fx.data.record(scene).map_err(err)?;
        let grids = fx.tok.encode_images(&rec.images).map_err(err)?;
        let expect = fx.tok.decode_images(&grids).map_err(err)?;
        for (k, img) in expect.iter().enumerate() {
            let path = fx
                .config
                .work_dir
                .join(format!("samples/scene_{scene:05}/cam{k}.png"));
            let got = fs::read(&path).map_err(err)?;
            compared += 1;
            identical += (got == png_bytes(img).map_err(err)?) as usize;
        }
    }

    // Front view only: the other views should share its sky and ground.
    let front = fx.data.rig.ring[0];
    let count = held.len();
    let one = RunConfig {
        sample_split: "heldout".into(),
        sample_count: count,
        provided_views: vec![front],
        ..fx.config.clone()
    };
    write_config(&cfg_path, &one)?;
    run_cli(&["sample"], &cfg_path)?;
    let (mut sky_err, mut ground_err, mut gt_sky, mut gt_ground) = (0.0, 0.0, 0.0, 0.0);
    for &scene in &held {
        let rec = fx.data.record(scene).map_err(err)?;
        let (sky0, ground0) = style_stats(&rec.images[front]);
        let mean_over = |imgs: &[bevgen_core::scenegen::Image]| {
            let mut sky = [0.0; 3];
            let mut ground = [0.0; 3];
            for img in imgs {
                let (s, g) = style_stats(img);
                for c in 0..3 {
                    sky[c] += s[c] / imgs.len() as f64;
                    ground[c] += g[c] / imgs.len() as f64;
                }
            }
            (sky, ground)
        };
        let mut generated = Vec::new();
        let mut truth = Vec::new();
        for k in (0..cams).filter(|&k| k != front) {
            let path = fx
                .config
                .work_dir
                .join(format!("samples/scene_{scene:05}/cam{k}.png"));
            generated.push(read_png(&path).map_err(err)?);
            truth.push(rec.images[k].clone());
        }
        let (s, g) = mean_over(&generated);
        sky_err += relative_color_error(s, sky0) / count as f64;
        ground_err += relative_color_error(g, ground0) / count as f64;
        let (s, g) = mean_over(&truth);
        gt_sky += relative_color_error(s, sky0) / count as f64;
        gt_ground += relative_color_error(g, ground0) / count as f64;
    }
    let pass = identical == compared && sky_err <= 0.20 && ground_err <= 0.20;
    Ok((
        pass,
        format!(
            "all views provided: {identical}/{compared} PNGs byte-identical to re-encoded inputs; \
             front view only, {count} layouts: mean relative color error sky {sky_err:.3}, ground {ground_err:.3} \
             (limit 0.20; real views score {gt_sky:.3} / {gt_ground:.3})"
        ),
    ))
}

// --------------------------------------------------------------- determinism

/// Every file under `dir` with its bytes, timing fields removed.
fn snapshot(dir: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(err)? {
            let path = entry.map_err(err)?.path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let rel = path.strip_prefix(dir).map_err(err)?.to_path_buf();
            let name = rel.to_string_lossy().to_string();
            if name == "eval_timing.csv" || name == "run.toml" {
                continue;
            }
            let bytes = fs::read(&path).map_err(err)?;
            let bytes = if name.ends_with(".jsonl") {
                strip_jsonl_timing(&bytes)
            } else if name == "bench_attn.csv" {
                strip_csv_timing(&bytes)
            } else {
                bytes
            };
            out.insert(rel, bytes);
        }
    }
    Ok(out)
}

fn strip_jsonl_timing(bytes: &[u8]) -> Vec<u8> {
    String::from_utf8_lossy(bytes)
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).expect("json line");
            if let Some(o) = v.as_object_mut() {
                o.remove("wall_ns");
            }
            v.to_string() + "\n"
        })
        .collect::<String>()
        .into_bytes()
}

fn strip_csv_timing(bytes: &[u8]) -> Vec<u8> {
    String::from_utf8_lossy(bytes)
        .lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head).to_string() + "\n")
        .collect::<String>()
        .into_bytes()
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().map_err(err)?;
    let work = dir.path().join("run");
    let config = RunConfig {
        seed: 5,
        work_dir: work.clone(),
        scenes: 10,
        heldout: 4,
        image_vq_steps: 30,
        bev_vq_steps: 30,
        vq_batch: 4,
        width: 32,
        layers: 1,
        heads: 2,
        steps: 10,
        batch_size: 3,
        attention: "sparse".into(),
        density: 0.5,
        checkpoint_every: 5,
        stop_accuracy: Some(1.0),
        eval_every: 5,
        sample_count: 3,
        provided_views: vec![1],
        shuffle_layouts: true,
        iou_layouts: 3,
        bench_latents: vec![[4, 8]],
        bench_repeats: 1,
        ..RunConfig::default()
    };
    let cfg_path = dir.path().join("run.toml");
    write_config(&cfg_path, &config)?;
    let commands = [
        "gen-data",
        "train-vq",
        "train-prior",
        "sample",
        "eval",
        "bench-attn",
    ];
    let mut runs = Vec::new();
    for _ in 0..2 {
        if work.exists() {
            fs::remove_dir_all(&work).map_err(err)?;
        }
        for c in commands {
            run_cli(&[c], &cfg_path)?;
        }
        runs.push(snapshot(&work)?);
    }
    let (a, b) = (&runs[0], &runs[1]);
    let differing: Vec<String> = a
        .keys()
        .chain(b.keys())
        .filter(|k| a.get(*k) != b.get(*k))
        .map(|k| k.display().to_string())
        .collect();
    Ok((
        differing.is_empty() && !a.is_empty(),
        if differing.is_empty() {
            format!(
                "all 6 commands run twice with the same config and seed: {} artifacts bit-identical \
                 (wall-clock fields excluded)",
                a.len()
            )
        } else {
            format!("differing artifacts: {}", differing.join(", "))
        },
    ))
}

/// Criteria named on the command line (substring match), or all of them.
fn selected(name: &str) -> bool {
    let filters: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str()))
}

fn main() {
    let start = Instant::now();
    let mut outcomes = Vec::new();
    let quick: [(&'static str, fn() -> Verdict); 5] = [
        ("gradient suite", gradient_suite),
        ("quantization oracle", quantization_oracle),
        ("center-out ordering", ordering_sweep),
        ("sparse mask", sparse_mask_criterion),
        ("determinism", determinism),
    ];
    for (name, f) in quick {
        if selected(name) {
            outcomes.push(check(name, f));
        }
    }
    let model_checks = [
        "overfit",
        "ablation",
        "correspondence",
        "view-conditioned generation",
    ];
    if model_checks.iter().any(|n| selected(n)) {
        let fx_start = Instant::now();
        match fixture() {
            Ok(fx) => {
                println!(
                    "fixture: {} scenes, tokenizers trained ({:.0}s)",
                    fx.train_idx.len() + fx.heldout.len(),
                    fx_start.elapsed().as_secs_f64()
                );
                if selected(model_checks[0]) {
                    outcomes.push(check(model_checks[0], || overfit(&fx)));
                }
                // Correspondence and view conditioning reuse the strongest
                // ablation model, so they need the ablation run.
                let later = selected(model_checks[2]) || selected(model_checks[3]);
                if selected(model_checks[1]) || later {
                    outcomes.push(check(model_checks[1], || ablation(&fx)));
                }
                let trained = full_model_path(&fx).exists();
                for (name, f) in [
                    (model_checks[2], correspondence as fn(&Fixture) -> Verdict),
                    (model_checks[3], view_conditioned),
                ] {
                    if !selected(name) {
                        continue;
                    }
                    outcomes.push(check(name, || {
                        if !trained {
                            return Err("no trained model from the ablation run".into());
                        }
                        f(&fx)
                    }));
                }
            }
            Err(e) => {
                for name in model_checks.into_iter().filter(|n| selected(n)) {
                    outcomes.push(check(name, || Err(format!("fixture failed: {e}"))));
                }
            }
        }
    }
    let failed: Vec<&Outcome> = outcomes.iter().filter(|o| !o.pass).collect();
    println!(
        "\nacceptance: {} passed, {} failed in {:.0}s",
        outcomes.len() - failed.len(),
        failed.len(),
        start.elapsed().as_secs_f64()
    );
    for o in &failed {
        println!("  failed: {} ({}; {:.0}s)", o.name, o.detail, o.secs);
    }
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
