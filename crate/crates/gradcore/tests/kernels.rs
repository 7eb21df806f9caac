use gradcore::{grad_check, GradError, Graph, Kernel, KernelKind, Result, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Contracts a kernel output against a fixed random tensor so every output
/// coordinate contributes to the scalar being checked.
fn contract(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(random(g.value(y).shape(), &mut rng));
    let p = g.mul(y, w)?;
    g.apply(Kernel::SumReduce, &[p])
}

#[test]
fn relu_clamps_negatives() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
    let y = g.relu(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn mse_of_identical_tensors_is_zero() {
    let mut g = Graph::<f64>::new();
    let w = g.constant(t(&[4], &[0.3, -1.2, 7.0, 0.0]));
    let l = g.mse(w, w).unwrap();
    assert_eq!(g.value(l).item(), Some(0.0));
}

#[test]
fn conv2d_of_ones_sums_windows() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let w = g.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
    let y = g.apply(Kernel::Conv2d { stride: 1, padding: 0 }, &[x, w]).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1, 2, 2]);
    assert_eq!(g.value(y).data(), &[4.0; 4]);
}

#[test]
fn mse_against_zero_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(t(&[1], &[3.0]));
    let z = g.constant(Tensor::zeros(&[1]));
    let l = g.mse(x, z).unwrap();
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
}

#[test]
fn relu_subgradient_is_zero_for_negatives() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(t(&[2], &[-1.0, 2.0]));
    let y = g.relu(x).unwrap();
    let l = g.apply(Kernel::SumReduce, &[y]).unwrap();
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0]);
}

#[test]
fn unreachable_leaf_gets_exact_zero() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(t(&[2], &[1.0, 2.0]));
    let y = g.leaf(t(&[3], &[5.0, 6.0, 7.0]));
    let l = g.apply(Kernel::SumReduce, &[x]).unwrap();
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get(y).unwrap().data(), &[0.0, 0.0, 0.0]);
    assert_eq!(grads.get(y).unwrap().shape(), &[3]);
}

#[test]
fn backward_rejects_non_scalar_and_reuse() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(t(&[2], &[1.0, 2.0]));
    let y = g.relu(x).unwrap();
    assert!(matches!(g.backward(y), Err(GradError::NonScalarLoss(s)) if s == vec![2]));
    let l = g.apply(Kernel::SumReduce, &[y]).unwrap();
    g.backward(l).unwrap();
    assert_eq!(g.backward(l).err(), Some(GradError::TapeConsumed));
    assert_eq!(g.relu(x).err(), Some(GradError::TapeConsumed));
}

#[test]
fn shape_mismatch_names_kernel_and_shapes() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err();
    assert_eq!(
        err,
        GradError::ShapeMismatch {
            kind: KernelKind::Matmul,
            shapes: vec![vec![2, 3], vec![2, 3]]
        }
    );
    assert!(err.to_string().contains("Matmul"));
}

#[test]
fn kernel_ids_parse() {
    for k in KernelKind::ALL {
        assert_eq!(k.id().parse::<KernelKind>().unwrap(), k);
    }
    assert_eq!(
        "gelu".parse::<KernelKind>().unwrap_err(),
        GradError::UnknownKernel("gelu".into())
    );
}

#[test]
fn grad_check_square_sum() {
    let err = grad_check(
        |g, x| {
            let sq = g.mul(x, x)?;
            g.apply(Kernel::SumReduce, &[sq])
        },
        &t(&[2], &[1.0, 2.0]),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-7, "{err}");
}

#[test]
fn grad_check_constant_function() {
    let err = grad_check(
        |g, _x| Ok(g.constant(Tensor::scalar(3.5))),
        &t(&[3], &[1.0, 2.0, 3.0]),
        1e-5,
    )
    .unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn grad_check_rejects_non_scalar() {
    let res = grad_check(|g, x| g.relu(x), &t(&[2], &[1.0, 2.0]), 1e-5);
    assert!(matches!(res, Err(GradError::NonScalarLoss(_))));
}

fn check_smooth<F>(name: &str, point: Tensor<f64>, f: F)
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let err = grad_check(f, &point, 1e-5).unwrap();
    assert!(err < 1e-6, "{name}: max relative error {err}");
}

#[test]
fn smooth_kernels_pass_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let other = random(&[3, 4], &mut rng);
    let right = random(&[4, 5], &mut rng);
    let bias = random(&[4], &mut rng);

    check_smooth("matmul lhs", random(&[3, 4], &mut rng), |g, x| {
        let b = g.constant(right.clone());
        let y = g.matmul(x, b)?;
        contract(g, y, 1)
    });
    check_smooth("matmul rhs transposed", random(&[5, 4], &mut rng), |g, x| {
        let a = g.constant(other.clone());
        let y = g.matmul_t(a, x)?;
        contract(g, y, 2)
    });
    check_smooth("matmul lhs transposed", random(&[4, 3], &mut rng), |g, x| {
        let b = g.constant(right.clone());
        let y = g.apply(Kernel::Matmul { trans_a: true, trans_b: false }, &[x, b])?;
        contract(g, y, 3)
    });
    check_smooth("add", random(&[3, 4], &mut rng), |g, x| {
        let b = g.constant(other.clone());
        let y = g.add(x, b)?;
        contract(g, y, 4)
    });
    check_smooth("bias add", random(&[4], &mut rng), |g, x| {
        let a = g.constant(other.clone());
        let y = g.add(a, x)?;
        contract(g, y, 5)
    });
    check_smooth("mul", random(&[3, 4], &mut rng), |g, x| {
        let y = g.mul(x, x)?;
        contract(g, y, 6)
    });
    check_smooth("tanh", random(&[3, 4], &mut rng), |g, x| {
        let y = g.tanh(x)?;
        contract(g, y, 7)
    });
    check_smooth("softmax", random(&[3, 4], &mut rng), |g, x| {
        let y = g.apply(Kernel::Softmax, &[x])?;
        contract(g, y, 8)
    });
    check_smooth("log_softmax", random(&[3, 4], &mut rng), |g, x| {
        let y = g.apply(Kernel::LogSoftmax, &[x])?;
        contract(g, y, 9)
    });
    check_smooth("layernorm x", random(&[3, 4], &mut rng), |g, x| {
        let gamma = g.constant(bias.clone());
        let beta = g.constant(bias.clone());
        let y = g.apply(Kernel::LayerNorm { eps: 1e-5 }, &[x, gamma, beta])?;
        contract(g, y, 10)
    });
    check_smooth("layernorm gamma", random(&[4], &mut rng), |g, p| {
        let x = g.constant(other.clone());
        let y = g.apply(Kernel::LayerNorm { eps: 1e-5 }, &[x, p, p])?;
        contract(g, y, 11)
    });
    check_smooth("embedding_lookup", random(&[5, 3], &mut rng), |g, table| {
        let y = g.apply(Kernel::EmbeddingLookup { ids: vec![4, 0, 4, 2] }, &[table])?;
        contract(g, y, 12)
    });
    let image = random(&[2, 2, 5, 5], &mut rng);
    let filters = random(&[3, 2, 3, 3], &mut rng);
    check_smooth("conv2d input", image.clone(), |g, x| {
        let w = g.constant(filters.clone());
        let b = g.constant(Tensor::full(&[3], 0.1));
        let y = g.apply(Kernel::Conv2d { stride: 2, padding: 1 }, &[x, w, b])?;
        contract(g, y, 13)
    });
    check_smooth("conv2d weight", filters.clone(), |g, w| {
        let x = g.constant(image.clone());
        let y = g.apply(Kernel::Conv2d { stride: 1, padding: 1 }, &[x, w])?;
        contract(g, y, 14)
    });
    check_smooth("conv2d bias", random(&[3], &mut rng), |g, b| {
        let x = g.constant(image.clone());
        let w = g.constant(filters.clone());
        let y = g.apply(Kernel::Conv2d { stride: 1, padding: 0 }, &[x, w, b])?;
        contract(g, y, 15)
    });
    check_smooth("global_avg_pool", random(&[2, 3, 2, 2], &mut rng), |g, x| {
        let y = g.apply(Kernel::GlobalAvgPool, &[x])?;
        contract(g, y, 16)
    });
    check_smooth("mean_reduce", random(&[3, 4], &mut rng), |g, x| {
        let sq = g.mul(x, x)?;
        g.apply(Kernel::MeanReduce, &[sq])
    });
    check_smooth("concat", random(&[2, 4], &mut rng), |g, x| {
        let b = g.constant(other.clone());
        let y = g.concat(&[b, x, x])?;
        contract(g, y, 17)
    });
    check_smooth("slice_view + reshape", random(&[4, 3], &mut rng), |g, x| {
        let r = g.rows(x, 1, 3)?;
        let y = g.reshape(r, &[6])?;
        contract(g, y, 18)
    });
    for causal in [false, true] {
        let q = random(&[5, 4], &mut rng);
        let k = random(&[5, 4], &mut rng);
        let v = random(&[5, 4], &mut rng);
        for which in 0..3 {
            let point = [&q, &k, &v][which].clone();
            check_smooth(&format!("attention causal={causal} input={which}"), point, |g, x| {
                let mut parts = [q.clone(), k.clone(), v.clone()].map(|p| g.constant(p));
                parts[which] = x;
                let y = g.apply(Kernel::ScaledDotAttention { n_heads: 2, causal }, &parts)?;
                contract(g, y, 19)
            });
        }
    }
    check_smooth("cross_entropy", random(&[4, 3], &mut rng), |g, x| {
        g.cross_entropy(x, &[0, 2, 1, 2])
    });
    check_smooth("mse both sides", random(&[6], &mut rng), |g, x| {
        let sq = g.mul(x, x)?;
        g.mse(x, sq)
    });
}

/// Resamples until every coordinate sits at least `margin` away from a kink.
fn sample_with_margin(shape: &[usize], rng: &mut ChaCha8Rng, ok: impl Fn(&Tensor<f64>) -> bool) -> Tensor<f64> {
    loop {
        let p = random(shape, rng);
        if ok(&p) {
            return p;
        }
    }
}

#[test]
fn piecewise_kernels_pass_grad_check_away_from_kinks() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let relu_point = sample_with_margin(&[3, 4], &mut rng, |p| p.data().iter().all(|v| v.abs() >= 1e-3));
    let err = grad_check(
        |g, x| {
            let y = g.relu(x)?;
            contract(g, y, 20)
        },
        &relu_point,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-4, "relu: {err}");

    // every 2×2 window must have a unique maximum with a clear gap
    let pool_point = sample_with_margin(&[2, 2, 4, 5], &mut rng, |p| {
        let d = p.data();
        (0..4).all(|plane| {
            (0..2).all(|oi| {
                (0..2).all(|oj| {
                    let mut w: Vec<f64> = (0..2)
                        .flat_map(|di| (0..2).map(move |dj| (di, dj)))
                        .map(|(di, dj)| d[plane * 20 + (oi * 2 + di) * 5 + oj * 2 + dj])
                        .collect();
                    w.sort_by(|a, b| b.partial_cmp(a).unwrap());
                    w[0] - w[1] >= 1e-3
                })
            })
        })
    });
    let err = grad_check(
        |g, x| {
            let y = g.apply(Kernel::MaxPool2d { k: 2 }, &[x])?;
            contract(g, y, 21)
        },
        &pool_point,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-4, "maxpool2d: {err}");
}

#[test]
fn maxpool_ties_take_first_in_scan_order() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(t(&[1, 1, 2, 2], &[1.0, 1.0, 1.0, 1.0]));
    let y = g.apply(Kernel::MaxPool2d { k: 2 }, &[x]).unwrap();
    let l = g.apply(Kernel::SumReduce, &[y]).unwrap();
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn causal_attention_ignores_future_positions() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let q = random(&[4, 4], &mut rng);
    let k = random(&[4, 4], &mut rng);
    let v = random(&[4, 4], &mut rng);
    let run = |v: &Tensor<f64>| {
        let mut g = Graph::<f64>::new();
        let parts = [q.clone(), k.clone(), v.clone()].map(|p| g.constant(p));
        let y = g.apply(Kernel::ScaledDotAttention { n_heads: 2, causal: true }, &parts).unwrap();
        g.value(y).clone()
    };
    let base = run(&v);
    let mut changed = v.clone();
    changed.data_mut()[12..].iter_mut().for_each(|x| *x += 10.0);
    let after = run(&changed);
    assert_eq!(&base.data()[..12], &after.data()[..12]);
    assert_ne!(&base.data()[12..], &after.data()[12..]);
}

#[test]
fn forward_is_bit_identical_across_runs() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&[2, 3, 6, 6], &mut rng).cast::<f32>();
    let w = random(&[4, 3, 3, 3], &mut rng).cast::<f32>();
    let run = || {
        let mut g = Graph::<f32>::new();
        let xv = g.constant(x.clone());
        let wv = g.leaf(w.clone());
        let y = g.apply(Kernel::Conv2d { stride: 1, padding: 1 }, &[xv, wv]).unwrap();
        let y = g.relu(y).unwrap();
        let y = g.apply(Kernel::MaxPool2d { k: 2 }, &[y]).unwrap();
        let y = g.apply(Kernel::GlobalAvgPool, &[y]).unwrap();
        let l = g.cross_entropy(y, &[1, 3]).unwrap();
        let grads = g.backward(l).unwrap();
        (g.value(y).data().to_vec(), grads.get(wv).unwrap().data().to_vec())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(ga.iter().zip(&gb).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn constants_are_not_recorded() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::full(&[2], 1.0));
    let b = g.relu(a).unwrap();
    assert!(!g.requires_grad(b));
    assert_eq!(g.recorded_ops(), 0);
    let c = g.leaf(Tensor::full(&[2], 1.0));
    let d = g.add(b, c).unwrap();
    assert!(g.requires_grad(d));
    assert_eq!(g.recorded_ops(), 1);
}

/// Naive triple loop.
fn matmul_oracle(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    c
}

/// Direct sliding-window convolution.
#[allow(clippy::too_many_arguments)]
fn conv_oracle(x: &[f64], w: &[f64], c: usize, h: usize, wd: usize, o: usize, k: usize, pad: usize) -> Vec<f64> {
    let ho = h + 2 * pad - k + 1;
    let wo = wd + 2 * pad - k + 1;
    let mut out = vec![0.0; o * ho * wo];
    for oc in 0..o {
        for i in 0..ho {
            for j in 0..wo {
                let mut s = 0.0;
                for ic in 0..c {
                    for di in 0..k {
                        for dj in 0..k {
                            let (ii, jj) = ((i + di) as isize - pad as isize, (j + dj) as isize - pad as isize);
                            if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < wd {
                                s += x[(ic * h + ii as usize) * wd + jj as usize] * w[((oc * c + ic) * k + di) * k + dj];
                            }
                        }
                    }
                }
                out[(oc * ho + i) * wo + j] = s;
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..7, seed in any::<u64>(), spread in 0.1f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = random(&[rows, cols], &mut rng);
        x.data_mut().iter_mut().for_each(|v| *v *= spread);
        let mut g = Graph::<f64>::new();
        let xv = g.constant(x);
        let s = g.apply(Kernel::Softmax, &[xv]).unwrap();
        let ls = g.apply(Kernel::LogSoftmax, &[xv]).unwrap();
        for r in 0..rows {
            let row = &g.value(s).data()[r * cols..(r + 1) * cols];
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            for (p, lp) in row.iter().zip(&g.value(ls).data()[r * cols..(r + 1) * cols]) {
                if *p > 1e-300 {
                    prop_assert!((p.ln() - lp).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn matmul_matches_triple_loop(m in 1usize..6, k in 1usize..6, n in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&[m, k], &mut rng);
        let b = random(&[k, n], &mut rng);
        let expected = matmul_oracle(a.data(), b.data(), m, k, n);
        let mut g = Graph::<f64>::new();
        let (av, bv) = (g.constant(a), g.constant(b));
        let c = g.matmul(av, bv).unwrap();
        for (x, y) in g.value(c).data().iter().zip(&expected) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn conv2d_matches_direct_sum(c in 1usize..3, o in 1usize..3, side in 3usize..7, k in 1usize..4, pad in 0usize..2, seed in any::<u64>()) {
        prop_assume!(side + 2 * pad >= k);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[1, c, side, side], &mut rng);
        let w = random(&[o, c, k, k], &mut rng);
        let expected = conv_oracle(x.data(), w.data(), c, side, side, o, k, pad);
        let mut g = Graph::<f64>::new();
        let (xv, wv) = (g.constant(x), g.constant(w));
        let y = g.apply(Kernel::Conv2d { stride: 1, padding: pad }, &[xv, wv]).unwrap();
        prop_assert_eq!(g.value(y).len(), expected.len());
        for (a, b) in g.value(y).data().iter().zip(&expected) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
