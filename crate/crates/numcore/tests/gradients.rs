use bevgen_numcore::gradcheck::{random_projection, GradCheck};
use bevgen_numcore::{matmul, ConvSpec, Result, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, -2.0, 2.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn assert_grads<F>(name: &str, inputs: &[Tensor], f: F)
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let errs = GradCheck::default().run(inputs, f).unwrap();
    for (i, e) in errs.iter().enumerate() {
        assert!(*e < TOL, "{name}: input {i} relative error {e:e}");
    }
}

#[test]
fn matmul_sum_gradient_is_ones_times_b_transpose() {
    let a = rand_t(&[4, 4], 1);
    let b = rand_t(&[4, 4], 2);
    // Finite differences of sum(a b) with respect to a.
    let h = 1e-5;
    let mut numeric = [0.0; 16];
    for e in 0..16 {
        let mut ap = a.clone();
        ap.data_mut()[e] += h;
        let mut am = a.clone();
        am.data_mut()[e] -= h;
        numeric[e] = (matmul(&ap, &b).unwrap().sum() - matmul(&am, &b).unwrap().sum()) / (2.0 * h);
    }
    let tape = Tape::new();
    let av = tape.leaf(a);
    let bv = tape.constant(b.clone());
    let loss = av.matmul(bv).unwrap().sum();
    let grads = tape.backward(loss).unwrap();
    let analytic = grads.get(av).unwrap();
    for i in 0..4 {
        for j in 0..4 {
            let expected: f64 = b.row(j).iter().sum(); // (ones * b^T)[i][j]
            assert!((analytic.get(&[i, j]) - expected).abs() < 1e-12);
            assert!((numeric[i * 4 + j] - expected).abs() < 1e-6);
        }
    }
}

#[test]
fn matmul_batched_and_shared() {
    assert_grads(
        "matmul",
        &[rand_t(&[2, 3, 4], 3), rand_t(&[2, 4, 5], 4)],
        |_, v| random_projection(v[0].matmul(v[1])?, 9),
    );
    assert_grads(
        "matmul-shared",
        &[rand_t(&[2, 3, 4], 5), rand_t(&[4, 5], 6)],
        |_, v| random_projection(v[0].matmul(v[1])?, 9),
    );
}

#[test]
fn softmax_jacobian_matches_within_1e6() {
    let x = rand_t(&[6], 7);
    for out_idx in 0..6 {
        let errs = GradCheck::default()
            .run(std::slice::from_ref(&x), |_, v| {
                v[0].softmax(0)?.narrow(0, out_idx, 1)?.reshape(&[])
            })
            .unwrap();
        assert!(errs[0] < 1e-6, "row {out_idx}: {}", errs[0]);
    }
    assert_grads("softmax-axis0", &[rand_t(&[3, 4, 2], 8)], |_, v| {
        random_projection(v[0].softmax(1)?, 1)
    });
}

#[test]
fn masked_softmax_gradient() {
    let mask = [true, false, true, true, true, false, false, true, true];
    assert_grads("masked_softmax", &[rand_t(&[2, 3, 3], 11)], |_, v| {
        random_projection(v[0].masked_softmax(&mask, &[3, 3])?, 2)
    });
}

#[test]
fn elementwise_suite() {
    let a = rand_t(&[3, 4], 20);
    let b = rand_t(&[3, 4], 21);
    let row = rand_t(&[4], 22);
    assert_grads("add", &[a.clone(), b.clone()], |_, v| {
        random_projection(v[0].add(v[1])?, 3)
    });
    assert_grads("sub-bcast", &[a.clone(), row.clone()], |_, v| {
        random_projection(v[0].sub(v[1])?, 3)
    });
    assert_grads("mul-bcast", &[a.clone(), row.clone()], |_, v| {
        random_projection(v[0].mul(v[1])?, 3)
    });
    assert_grads("gelu", std::slice::from_ref(&a), |_, v| {
        random_projection(v[0].gelu(), 4)
    });
    assert_grads("sigmoid", std::slice::from_ref(&a), |_, v| {
        random_projection(v[0].sigmoid(), 4)
    });
    assert_grads("square-mean", std::slice::from_ref(&a), |_, v| {
        Ok(v[0].square().mean())
    });
    assert_grads("layer_norm", std::slice::from_ref(&a), |_, v| {
        random_projection(v[0].layer_norm(), 5)
    });
    assert_grads("reshape-permute", &[rand_t(&[2, 3, 4], 23)], |_, v| {
        random_projection(v[0].reshape(&[3, 2, 4])?.permute(&[2, 0, 1])?, 6)
    });
    assert_grads("narrow-concat", &[a.clone(), b.clone()], |_, v| {
        let left = v[0].narrow(1, 1, 2)?;
        random_projection(Var::concat(&[left, v[1]], 1)?, 7)
    });
}

#[test]
fn embedding_and_losses() {
    assert_grads("embedding", &[rand_t(&[5, 3], 30)], |_, v| {
        random_projection(v[0].embedding(&[4, 0, 4, 2])?, 8)
    });
    assert_grads("cross_entropy", &[rand_t(&[4, 6], 31)], |_, v| {
        v[0].cross_entropy(&[0, 5, 2, 2], &[1.0, 2.5, 0.0, 0.5])
    });
    let targets = Tensor::uniform(&[2, 5], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(32));
    assert_grads("bce", &[rand_t(&[2, 5], 33)], move |t, v| {
        v[0].bce_with_logits(t.constant(targets.clone()))
    });
}

#[test]
fn convolutions() {
    assert_grads(
        "conv2d",
        &[
            rand_t(&[2, 2, 8, 6], 40),
            rand_t(&[3, 2, 4, 4], 41),
            rand_t(&[3], 42),
        ],
        |_, v| random_projection(v[0].conv2d(v[1], v[2], ConvSpec::DOWN2)?, 10),
    );
    assert_grads(
        "conv_transpose2d",
        &[
            rand_t(&[2, 3, 2, 3], 43),
            rand_t(&[3, 2, 4, 4], 44),
            rand_t(&[2], 45),
        ],
        |_, v| random_projection(v[0].conv_transpose2d(v[1], v[2], ConvSpec::DOWN2)?, 11),
    );
}

#[test]
fn seeded_forward_backward_is_bit_identical() {
    let run = || {
        let tape = Tape::new();
        let x = tape.leaf(rand_t(&[3, 5], 50));
        let w = tape.leaf(rand_t(&[5, 4], 51));
        let h = x.matmul(w).unwrap().gelu().layer_norm();
        let loss = h.cross_entropy(&[1, 3, 0], &[1.0, 1.0, 2.0]).unwrap();
        let g = tape.backward(loss).unwrap();
        (loss.value().item(), g.get(w).unwrap().clone())
    };
    let (l1, g1) = run();
    let (l2, g2) = run();
    assert_eq!(l1.to_bits(), l2.to_bits());
    assert_eq!(g1, g2);
}
