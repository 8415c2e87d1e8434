use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use satcap::gradcheck::{grad_check, grad_check_many, DEFAULT_FLOOR};
use satcap::{Error, Graph, Mode, Tensor, Var};

const EPS: f64 = 1e-4;
const TOL: f64 = 1e-4;
const SEEDS: [u64; 3] = [11, 22, 33];

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Random values on a coarse dyadic grid; sums of products of these are
/// exact in f64 regardless of summation order.
fn dyadic(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-16i32..=16) as f64 / 8.0)
}

/// Weighted sum with fixed random weights so every output element matters.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> satcap::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = rand_t(g.shape(y), &mut rng);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn check_many(
    seed: u64,
    shapes: &[&[usize]],
    f: impl Fn(&mut Graph<f64>, &[Var]) -> satcap::Result<Var>,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<_> = shapes.iter().map(|s| rand_t(s, &mut rng)).collect();
    let r = grad_check_many(
        |g, v| {
            let y = f(g, v)?;
            project(g, y, seed)
        },
        &inputs,
        EPS,
        DEFAULT_FLOOR,
    )
    .unwrap();
    assert!(r.passes(TOL), "seed {seed}: {r:?}");
}

// ------------------------------------------------------------------ matmul

#[test]
fn matmul_identity_and_hand_sum() {
    let m = Tensor::<f64>::from_f64(&[2, 2], &[1.5, -2.0, 0.25, 7.0]).unwrap();
    assert_eq!(Tensor::identity(2).matmul(&m).unwrap(), m);

    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
    let b = g.constant(Tensor::from_f64(&[2, 1], &[1.0, 1.0]).unwrap());
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.shape(c), &[2, 1]);
    assert_eq!(g.value(c).data(), &[3.0, 7.0]);
}

#[test]
fn matmul_shape_mismatch_reports_both_shapes() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let msg = g.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3] x [2, 3]"), "{msg}");
}

#[test]
fn matmul_gradient_of_sum_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = rand_t(&[3, 4], &mut rng);
    let b = rand_t(&[4, 2], &mut rng);
    let r = grad_check_many(
        |g, v| {
            let c = g.matmul(v[0], v[1])?;
            g.sum(c)
        },
        &[a, b],
        EPS,
        0.0,
    )
    .unwrap();
    assert!(r.max_rel_err <= 1e-6, "{r:?}");
}

#[test]
fn bmm_gradients_all_transpose_combinations() {
    for seed in SEEDS {
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let sa: Vec<usize> = if ta { vec![2, 4, 3] } else { vec![2, 3, 4] };
            let sb: Vec<usize> = if tb { vec![2, 5, 4] } else { vec![2, 4, 5] };
            check_many(seed, &[&sa, &sb], |g, v| g.bmm(v[0], v[1], ta, tb));
        }
    }
}

#[test]
fn batched_matmul_agrees_with_plain_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = dyadic(&[2, 3, 4], &mut rng);
    let b = dyadic(&[4, 5], &mut rng);
    let mut g = Graph::<f64>::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let c = g.matmul(va, vb).unwrap();
    let flat = a.reshape(&[6, 4]).unwrap().matmul(&b).unwrap();
    assert_eq!(g.value(c).data(), flat.data());
}

// ------------------------------------------------------------------ convolution

/// Direct loop reference: batch, out-channel, out-row, out-col, in-channel, kernel row, kernel col.
fn conv_reference(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize, pad: usize, groups: usize) -> Tensor<f64> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, cg, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(cg * groups, c);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let out_per_group = co / groups;
    let mut out = vec![0.0; n * co * ho * wo];
    for bi in 0..n {
        for o in 0..co {
            let grp = o / out_per_group;
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = b.data()[o];
                    for ci in 0..cg {
                        for di in 0..kh {
                            for dj in 0..kw {
                                let ii = (i * stride + di) as isize - pad as isize;
                                let jj = (j * stride + dj) as isize - pad as isize;
                                if ii < 0 || jj < 0 || ii >= h as isize || jj >= wd as isize {
                                    continue;
                                }
                                acc += w.at(&[o, ci, di, dj]) * x.at(&[bi, grp * cg + ci, ii as usize, jj as usize]);
                            }
                        }
                    }
                    out[((bi * co + o) * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, co, ho, wo], out).unwrap()
}

fn run_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let mut g = Graph::new();
    let (vx, vw, vb) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
    let y = g.conv2d(vx, vw, Some(vb), stride, pad).unwrap();
    g.value(y).clone()
}

#[test]
fn conv_1x1_unit_kernel_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_t(&[1, 1, 5, 4], &mut rng);
    let y = run_conv(&x, &Tensor::ones(&[1, 1, 1, 1]), &Tensor::zeros(&[1]), 1, 0);
    assert_eq!(y, x);
}

#[test]
fn conv_3x3_box_sum_of_one_hot_center() {
    let mut x = vec![0.0; 9];
    x[4] = 1.0;
    let x = Tensor::new(&[1, 1, 3, 3], x).unwrap();
    let y = run_conv(&x, &Tensor::ones(&[1, 1, 3, 3]), &Tensor::zeros(&[1]), 1, 1);
    assert_eq!(y.shape(), &[1, 1, 3, 3]);
    assert!(y.data().iter().all(|&v| v == 1.0));
}

#[test]
fn conv_matches_naive_loops_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 1)] {
        let x = dyadic(&[2, 2, 4, 4], &mut rng);
        let w = dyadic(&[3, 2, k, k], &mut rng);
        let b = dyadic(&[3], &mut rng);
        let got = run_conv(&x, &w, &b, stride, pad);
        let want = conv_reference(&x, &w, &b, stride, pad, 1);
        assert_eq!(got, want, "stride {stride} pad {pad} k {k}");
    }
}

#[test]
fn conv_output_extent_follows_stride_arithmetic() {
    let x = Tensor::<f64>::zeros(&[1, 3, 32, 32]);
    let y = run_conv(&x, &Tensor::zeros(&[8, 3, 3, 3]), &Tensor::zeros(&[8]), 2, 1);
    assert_eq!(y.shape(), &[1, 8, 16, 16]);
}

#[test]
fn conv_channel_mismatch_is_dimension_error() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[1, 3, 4, 4]));
    let w = g.constant(Tensor::zeros(&[2, 2, 3, 3]));
    assert!(matches!(g.conv2d(x, w, None, 1, 1), Err(Error::Dimension { .. })));
}

#[test]
fn conv_gradients() {
    for seed in SEEDS {
        check_many(seed, &[&[2, 2, 4, 4], &[3, 2, 3, 3], &[3]], |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1));
        check_many(seed, &[&[2, 2, 5, 5], &[3, 2, 3, 3], &[3]], |g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 1));
        check_many(seed, &[&[2, 3, 3, 2], &[2, 3, 1, 1], &[2]], |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 0));
    }
}

fn run_dw(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::new();
    let (vx, vw, vb) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
    let y = g.depthwise_conv2d(vx, vw, Some(vb)).unwrap();
    g.value(y).clone()
}

#[test]
fn depthwise_center_kernel_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_t(&[2, 3, 4, 5], &mut rng);
    let w = Tensor::from_fn(&[3, 1, 3, 3], |i| if i % 9 == 4 { 1.0 } else { 0.0 });
    assert_eq!(run_dw(&x, &w, &Tensor::zeros(&[3])), x);
}

#[test]
fn depthwise_channels_are_independent() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_t(&[1, 4, 5, 5], &mut rng);
    let w = rand_t(&[4, 1, 3, 3], &mut rng);
    let b = rand_t(&[4], &mut rng);
    let base = run_dw(&x, &w, &b);
    let mut x2 = x.clone();
    for v in x2.data_mut()[..25].iter_mut() {
        *v += 3.0;
    }
    let pert = run_dw(&x2, &w, &b);
    assert_ne!(base.data()[..25], pert.data()[..25]);
    assert_eq!(base.data()[25..], pert.data()[25..]);
}

#[test]
fn depthwise_matches_grouped_conv_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = dyadic(&[2, 3, 4, 5], &mut rng);
    let w = dyadic(&[3, 1, 3, 3], &mut rng);
    let b = dyadic(&[3], &mut rng);
    assert_eq!(run_dw(&x, &w, &b), conv_reference(&x, &w, &b, 1, 1, 3));
}

#[test]
fn depthwise_rejects_non_3x3_kernel() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let w = g.constant(Tensor::zeros(&[2, 1, 5, 5]));
    assert!(matches!(g.depthwise_conv2d(x, w, None), Err(Error::Unsupported(_))));
}

#[test]
fn depthwise_gradients() {
    for seed in SEEDS {
        check_many(seed, &[&[2, 3, 4, 3], &[3, 1, 3, 3], &[3]], |g, v| g.depthwise_conv2d(v[0], v[1], Some(v[2])));
    }
}

// ------------------------------------------------------------------ normalization

fn bn_train(x: &Tensor<f64>, gamma: &Tensor<f64>, beta: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    let c = x.shape()[1];
    let mut g = Graph::new();
    let (vx, vg, vb) = (g.constant(x.clone()), g.constant(gamma.clone()), g.constant(beta.clone()));
    let (y, upd) = g
        .batch_norm(vx, vg, vb, &Tensor::zeros(&[c]), &Tensor::ones(&[c]), Mode::Train)
        .unwrap();
    let (rm, rv) = upd.unwrap();
    (g.value(y).clone(), rm, rv)
}

#[test]
fn batch_norm_train_standardizes_per_channel() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Tensor::from_fn(&[3, 2, 4, 4], |i| rng.random_range(-2.0..5.0) + (i % 7) as f64);
    let (y, rm, rv) = bn_train(&x, &Tensor::ones(&[2]), &Tensor::zeros(&[2]));
    for ch in 0..2 {
        let vals: Vec<f64> = (0..3)
            .flat_map(|n| y.data()[(n * 2 + ch) * 16..(n * 2 + ch + 1) * 16].to_vec())
            .collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(m.abs() < 1e-5, "mean {m}");
        assert!((v - 1.0).abs() < 1e-3, "var {v}");
    }
    // running stats moved 10% of the way toward the batch statistics
    assert!(rm.data().iter().all(|&m| m > 0.0));
    assert!(rv.data().iter().all(|&v| v != 1.0));
}

#[test]
fn batch_norm_eval_with_unit_stats_is_near_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_t(&[2, 3, 2, 2], &mut rng);
    let mut g = Graph::new();
    let (vx, vg, vb) = (g.constant(x.clone()), g.constant(Tensor::ones(&[3])), g.constant(Tensor::zeros(&[3])));
    let (y, upd) = g
        .batch_norm(vx, vg, vb, &Tensor::zeros(&[3]), &Tensor::ones(&[3]), Mode::Eval)
        .unwrap();
    assert!(upd.is_none());
    let scale = 1.0 / (1.0f64 + 1e-5).sqrt();
    for (a, b) in g.value(y).data().iter().zip(x.data()) {
        assert!((a - b * scale).abs() < 1e-15);
        assert!((a - b).abs() < 1e-5);
    }
}

#[test]
fn batch_norm_gradients() {
    for seed in SEEDS {
        for mode in [Mode::Train, Mode::Eval] {
            check_many(seed, &[&[3, 2, 2, 3], &[2], &[2]], |g, v| {
                let rm = Tensor::from_f64(&[2], &[0.1, -0.2]).unwrap();
                let rv = Tensor::from_f64(&[2], &[0.5, 2.0]).unwrap();
                Ok(g.batch_norm(v[0], v[1], v[2], &rm, &rv, mode)?.0)
            });
        }
    }
}

#[test]
fn layer_norm_constant_row_maps_to_beta() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full(&[2, 4], 3.5));
    let gamma = g.constant(Tensor::from_f64(&[4], &[2.0, -1.0, 0.5, 4.0]).unwrap());
    let beta = g.constant(Tensor::from_f64(&[4], &[0.1, 0.2, 0.3, 0.4]).unwrap());
    let y = g.layer_norm(x, gamma, beta).unwrap();
    assert_eq!(g.value(y).data(), &[0.1, 0.2, 0.3, 0.4, 0.1, 0.2, 0.3, 0.4]);
}

#[test]
fn layer_norm_rows_are_centered() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::uniform(&[5, 7], -10.0, 10.0, &mut rng));
    let gamma = g.constant(Tensor::ones(&[7]));
    let beta = g.constant(Tensor::zeros(&[7]));
    let y = g.layer_norm(x, gamma, beta).unwrap();
    for row in g.value(y).data().chunks(7) {
        assert!(row.iter().sum::<f64>().abs() / 7.0 < 1e-6);
    }
}

#[test]
fn layer_norm_gradients() {
    for seed in SEEDS {
        check_many(seed, &[&[3, 5], &[5], &[5]], |g, v| g.layer_norm(v[0], v[1], v[2]));
    }
}

// ------------------------------------------------------------------ softmax & activations

fn softmax_of(v: &[f64]) -> Vec<f64> {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64(&[v.len()], v).unwrap());
    let y = g.softmax(x, false).unwrap();
    g.value(y).data().to_vec()
}

#[test]
fn softmax_examples() {
    assert_eq!(softmax_of(&[0.0, 0.0]), vec![0.5, 0.5]);
    let y = softmax_of(&[1000.0, 0.0]);
    assert!((y[0] - 1.0).abs() <= 1e-12 && y[1].abs() <= 1e-12 && y.iter().all(|v| v.is_finite()));
}

#[test]
fn softmax_rejects_nan() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64(&[2], &[f64::NAN, 0.0]).unwrap());
    assert!(matches!(g.softmax(x, false), Err(Error::Numeric { .. })));
}

#[test]
fn softmax_jacobian_matches_finite_differences() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_t(&[3, 4], &mut rng);
        for out in 0..12 {
            let r = grad_check(
                |g, v| {
                    let y = g.softmax(v, false)?;
                    let sel = Tensor::from_fn(&[3, 4], |i| if i == out { 1.0 } else { 0.0 });
                    let sel = g.constant(sel);
                    let p = g.mul(y, sel)?;
                    g.sum(p)
                },
                &x,
                EPS,
            )
            .unwrap();
            assert!(r.passes(1e-5), "{r:?}");
        }
        check_many(seed, &[&[2, 3, 3]], |g, v| g.softmax(v[0], true));
    }
}

#[test]
fn causal_softmax_zeroes_future_entries() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[3, 3]));
    let y = g.softmax(x, true).unwrap();
    let d = g.value(y).data();
    assert_eq!(&d[0..3], &[1.0, 0.0, 0.0]);
    assert_eq!(&d[3..6], &[0.5, 0.5, 0.0]);
    assert!((d[6] - 1.0 / 3.0).abs() < 1e-15 && (d[8] - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn activation_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64(&[3], &[-1.0, 2.0, 0.0]).unwrap());
    let r = g.relu(x).unwrap();
    assert_eq!(g.value(r).data(), &[0.0, 2.0, 0.0]);
    let ge = g.gelu(x).unwrap();
    assert_eq!(g.value(ge).data()[2], 0.0);
    let s = g.sigmoid(x).unwrap();
    assert_eq!(g.value(s).data()[2], 0.5);
}

#[test]
fn activation_gradients() {
    for seed in SEEDS {
        check_many(seed, &[&[4, 5]], |g, v| g.gelu(v[0]));
        check_many(seed, &[&[4, 5]], |g, v| g.sigmoid(v[0]));
        check_many(seed, &[&[4, 5]], |g, v| g.relu(v[0]));
    }
    let x = Tensor::from_f64(&[5], &[-2.0, -0.5, 0.1, 0.7, 3.0]).unwrap();
    let r = grad_check(|g, v| {
        let y = g.gelu(v)?;
        g.sum(y)
    }, &x, EPS)
    .unwrap();
    assert!(r.passes(1e-5), "{r:?}");
}

// ------------------------------------------------------------------ elementwise, layout, losses

#[test]
fn elementwise_and_layout_gradients() {
    for seed in SEEDS {
        check_many(seed, &[&[2, 3, 4], &[2, 3, 4]], |g, v| g.add(v[0], v[1]));
        check_many(seed, &[&[2, 3, 4], &[1, 3, 1]], |g, v| g.add(v[0], v[1]));
        check_many(seed, &[&[2, 1, 4], &[2, 3, 4]], |g, v| g.sub(v[0], v[1]));
        check_many(seed, &[&[2, 3, 4], &[2, 1, 4]], |g, v| g.mul(v[0], v[1]));
        check_many(seed, &[&[2, 3]], |g, v| g.scale(v[0], 0.7));
        check_many(seed, &[&[2, 3], &[1]], |g, v| {
            let two = g.constant(Tensor::full(&[1], 2.0));
            let d = g.add(v[1], two)?;
            g.div_scalar(v[0], d)
        });
        check_many(seed, &[&[2, 3, 4]], |g, v| g.permute(v[0], &[2, 0, 1]));
        check_many(seed, &[&[2, 6]], |g, v| g.reshape(v[0], &[3, 4]));
        check_many(seed, &[&[2, 5, 3]], |g, v| g.narrow(v[0], 1, 1, 3));
        check_many(seed, &[&[2, 2, 3], &[2, 1, 3]], |g, v| g.concat(&[v[0], v[1]], 1));
        check_many(seed, &[&[3, 4]], |g, v| {
            let m = g.mean(v[0])?;
            g.reshape(m, &[1])
        });
        check_many(seed, &[&[5, 3]], |g, v| g.embedding(v[0], &[4, 0, 4, 2], &[2, 2]));
        check_many(seed, &[&[2, 3, 2, 2], &[2, 3, 2, 2]], |g, v| g.cosine(v[0], v[1], &[1], 1e-8));
        check_many(seed, &[&[2, 3, 2, 2], &[2, 3, 2, 2]], |g, v| g.cosine(v[0], v[1], &[2, 3], 1e-8));
        check_many(seed, &[&[3, 4]], |g, v| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            g.dropout(v[0], 0.3, &mut rng)
        });
    }
}

#[test]
fn cross_entropy_uniform_and_gradients() {
    let mut g = Graph::<f64>::new();
    let l = g.constant(Tensor::zeros(&[3, 4]));
    let loss = g.cross_entropy(l, &[0, 2, 3], &[true, true, true]).unwrap();
    assert!((g.value(loss).item() - 4f64.ln()).abs() < 1e-12);
    assert!((g.value(loss).item() - 1.386294).abs() < 1e-6);

    let mut margin_losses = Vec::new();
    for margin in [1.0, 5.0, 20.0, 60.0] {
        let mut g = Graph::<f64>::new();
        let l = g.constant(Tensor::from_f64(&[1, 3], &[margin, 0.0, 0.0]).unwrap());
        let loss = g.cross_entropy(l, &[0], &[true]).unwrap();
        margin_losses.push(g.value(loss).item());
    }
    assert!(margin_losses.windows(2).all(|w| w[1] < w[0]));
    assert!(*margin_losses.last().unwrap() < 1e-20);

    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_t(&[4, 5], &mut rng);
        let r = grad_check(|g, v| g.cross_entropy(v, &[1, 0, 4, 2], &[true, false, true, true]), &x, EPS).unwrap();
        assert!(r.passes(1e-5), "{r:?}");
    }
}

#[test]
fn cross_entropy_all_padding_is_error() {
    let mut g = Graph::<f64>::new();
    let l = g.constant(Tensor::zeros(&[2, 4]));
    assert!(matches!(g.cross_entropy(l, &[0, 0], &[false, false]), Err(Error::Contract(_))));
}

// ------------------------------------------------------------------ backward contract

#[test]
fn sum_of_weights_has_unit_gradient() {
    let mut g = Graph::<f64>::new();
    let w = g.leaf(Tensor::from_f64(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(), true);
    let s = g.sum(w).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.wrt(w).unwrap(), &Tensor::ones(&[2, 3]));
}

#[test]
fn composite_matmul_softmax_loss_matches_finite_differences() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = [rand_t(&[3, 4], &mut rng), rand_t(&[4, 5], &mut rng)];
        let r = grad_check_many(
            |g, v| {
                let z = g.matmul(v[0], v[1])?;
                let p = g.softmax(z, false)?;
                let q = g.mul(p, z)?;
                g.sum(q)
            },
            &inputs,
            EPS,
            DEFAULT_FLOOR,
        )
        .unwrap();
        assert!(r.passes(1e-4), "{r:?}");
    }
}

#[test]
fn second_backward_is_stale_tape_error() {
    let mut g = Graph::<f64>::new();
    let w = g.leaf(Tensor::ones(&[2]), true);
    let s = g.sum(w).unwrap();
    g.backward(s).unwrap();
    assert!(matches!(g.backward(s), Err(Error::StaleTape)));
    assert!(g.is_empty());
    assert!(matches!(g.relu(w), Err(Error::StaleTape)));
}

#[test]
fn non_scalar_loss_is_contract_error() {
    let mut g = Graph::<f64>::new();
    let w = g.leaf(Tensor::ones(&[2]), true);
    assert!(matches!(g.backward(w), Err(Error::Contract(_))));
}

#[test]
fn forward_is_bit_reproducible() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::uniform(&[2, 3, 6, 6], -1.0, 1.0, &mut rng));
        let w = g.constant(Tensor::uniform(&[4, 3, 3, 3], -1.0, 1.0, &mut rng));
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        let y = g.gelu(y).unwrap();
        g.value(y).clone()
    };
    assert_eq!(run().data(), run().data());
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_slices_sum_to_one(v in proptest::collection::vec(-1e4f64..1e4, 1..12)) {
            let y = softmax_of(&v);
            let s: f64 = y.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-6);
            prop_assert!(y.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }

        #[test]
        fn permute_round_trips(d0 in 1usize..4, d1 in 1usize..4, d2 in 1usize..4) {
            let t = Tensor::<f64>::from_fn(&[d0, d1, d2], |i| i as f64);
            let p = t.permute(&[1, 2, 0]).unwrap();
            prop_assert_eq!(p.permute(&[2, 0, 1]).unwrap(), t);
        }
    }
}
