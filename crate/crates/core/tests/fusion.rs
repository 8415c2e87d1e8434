mod common;

use common::*;
use proptest::prelude::*;
use satcap::config::{CosineAxis, FusionMethod, ModelConfig};
use satcap::fusion::{cosine_map, Fusion};
use satcap::nn::{Ctx, Init};
use satcap::{Graph, Mode, ParamStore, Tensor};

/// Cosine over the given axes of a `[N,C,H,W]` pair, by explicit enumeration.
fn cosine_oracle(a: &Tensor<f64>, b: &Tensor<f64>, axes: &[usize]) -> Vec<f64> {
    let s = a.shape().to_vec();
    let mut os = s.clone();
    for &ax in axes {
        os[ax] = 1;
    }
    let on: usize = os.iter().product();
    let mut out = vec![0.0; on];
    for (o, slot) in out.iter_mut().enumerate() {
        let mut oi = [0usize; 4];
        let mut r = o;
        for d in (0..4).rev() {
            oi[d] = r % os[d];
            r /= os[d];
        }
        let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
        for n in 0..s[0] {
            for c in 0..s[1] {
                for h in 0..s[2] {
                    for w in 0..s[3] {
                        let idx = [n, c, h, w];
                        if (0..4).any(|d| !axes.contains(&d) && idx[d] != oi[d]) {
                            continue;
                        }
                        let i = ((n * s[1] + c) * s[2] + h) * s[3] + w;
                        dot += a.data()[i] * b.data()[i];
                        na += a.data()[i] * a.data()[i];
                        nb += b.data()[i] * b.data()[i];
                    }
                }
            }
        }
        *slot = dot / (na.sqrt() * nb.sqrt()).max(1e-8);
    }
    out
}

fn sim(a: &Tensor<f64>, b: &Tensor<f64>, axis: CosineAxis) -> Option<Tensor<f64>> {
    let mut g = Graph::new();
    let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
    cosine_map(&mut g, x, y, axis).unwrap().map(|v| g.value(v).clone())
}

#[test]
fn channel_cosine_matches_per_location_oracle() {
    let a = randn(&[2, 3, 4, 5], 1);
    let b = randn(&[2, 3, 4, 5], 2);
    let s = sim(&a, &b, CosineAxis::Channel).unwrap();
    assert_eq!(s.shape(), &[2, 1, 4, 5]);
    let mut expect = Vec::new();
    for n in 0..2 {
        for p in 0..20 {
            let (mut d, mut x, mut y) = (0.0, 0.0, 0.0);
            for c in 0..3 {
                let i = (n * 3 + c) * 20 + p;
                d += a.data()[i] * b.data()[i];
                x += a.data()[i].powi(2);
                y += b.data()[i].powi(2);
            }
            expect.push(d / (x.sqrt() * y.sqrt()));
        }
    }
    assert_close(s.data(), &expect, 1e-6, "channel cosine");
    assert_close(s.data(), &cosine_oracle(&a, &b, &[1]), 1e-12, "enumeration oracle");
}

#[test]
fn every_axis_matches_the_averaged_oracle() {
    let a = randn(&[2, 3, 2, 4], 3);
    let b = randn(&[2, 3, 2, 4], 4);
    for &axis in CosineAxis::ALL {
        let groups = axis.reductions();
        match sim(&a, &b, axis) {
            None => assert!(groups.is_empty()),
            Some(s) => {
                // broadcast each group's map to the full shape and average
                let full: Vec<f64> = (0..a.numel())
                    .map(|i| {
                        let idx = [i / 24, (i / 8) % 3, (i / 4) % 2, i % 4];
                        groups
                            .iter()
                            .map(|axes| {
                                let o = cosine_oracle(&a, &b, axes);
                                let mut os = [2, 3, 2, 4];
                                for &ax in axes.iter() {
                                    os[ax] = 1;
                                }
                                let k = (0..4).fold(0, |acc, d| acc * os[d] + if os[d] == 1 { 0 } else { idx[d] });
                                o[k]
                            })
                            .sum::<f64>()
                            / groups.len() as f64
                    })
                    .collect();
                let mut g = Graph::new();
                let sv = g.constant(s);
                let z = g.constant(Tensor::zeros(&[2, 3, 2, 4]));
                let b = g.add(z, sv).unwrap();
                assert_close(g.value(b).data(), &full, 1e-12, axis.as_str());
            }
        }
    }
}

#[test]
fn self_similarity_is_one_and_orthogonal_is_zero() {
    let z = randn(&[1, 4, 3, 3], 5);
    let s = sim(&z, &z, CosineAxis::Channel).unwrap();
    assert!(s.data().iter().all(|v| (v - 1.0).abs() <= 1e-6));
    let a = Tensor::from_f64(&[1, 2, 1, 2], &[1.0, 2.0, 0.0, 1.0]).unwrap();
    let b = Tensor::from_f64(&[1, 2, 1, 2], &[0.0, 1.0, 1.0, 1.0]).unwrap();
    let s = sim(&a, &b, CosineAxis::Channel).unwrap();
    assert_eq!(s.data()[0], 0.0);
}

#[test]
fn shape_mismatch_is_dimension_error() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[1, 2, 2, 2]));
    let b = g.constant(Tensor::zeros(&[1, 2, 2, 3]));
    assert!(matches!(cosine_map(&mut g, a, b, CosineAxis::Channel), Err(satcap::Error::Dimension { .. })));
}

fn fusion(method: FusionMethod, axis: CosineAxis, c: usize, seed: u64) -> (Fusion, ParamStore<f64>) {
    let cfg = ModelConfig { model_dim: c, fusion_method: method, cosine_axis: axis, ..ModelConfig::default() };
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let f = Fusion::new(&mut Init::new(&mut store, &mut r), &cfg);
    (f, store)
}

fn fuse(f: &Fusion, store: &ParamStore<f64>, a: &Tensor<f64>, b: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>) {
    let mut cx = Ctx::new(store, Mode::Train);
    let (x, y) = (cx.g.constant(a.clone()), cx.g.constant(b.clone()));
    let m = f.merge(&mut cx, x, y).unwrap();
    let o = f.forward(&mut cx, x, y).unwrap();
    (cx.g.value(m).clone(), cx.g.value(o).clone())
}

#[test]
fn every_method_keeps_the_map_shape() {
    let a = randn(&[2, 4, 3, 3], 6);
    let b = randn(&[2, 4, 3, 3], 7);
    for &m in FusionMethod::ALL {
        let (f, s) = fusion(m, CosineAxis::Channel, 4, 8);
        let (_, o) = fuse(&f, &s, &a, &b);
        assert_eq!(o.shape(), &[2, 4, 3, 3], "{m}");
    }
}

#[test]
fn sub_of_identical_maps_merges_to_zero() {
    let a = randn(&[1, 4, 2, 2], 9);
    let (f, s) = fusion(FusionMethod::Sub, CosineAxis::Channel, 4, 10);
    let (m, _) = fuse(&f, &s, &a, &a);
    assert!(m.data().iter().all(|&v| v == 0.0));
}

#[test]
fn concat_path_matches_layer_by_layer_oracle() {
    let (n, c, h, w) = (2, 3, 2, 3);
    let l = h * w;
    let a = randn(&[n, c, h, w], 11);
    let b = randn(&[n, c, h, w], 12);
    let (f, s) = fusion(FusionMethod::Concat, CosineAxis::Channel, c, 13);
    let (_, out) = fuse(&f, &s, &a, &b);

    let cs = cosine_oracle(&a, &b, &[1]);
    let plus = |t: &Tensor<f64>| -> Vec<f64> { t.data().iter().enumerate().map(|(i, v)| v + cs[(i / (c * l)) * l + i % l]).collect() };
    let (pa, pb) = (plus(&a), plus(&b));
    let mut cat = Vec::new();
    for bi in 0..n {
        cat.extend_from_slice(&pa[bi * c * l..(bi + 1) * c * l]);
        cat.extend_from_slice(&pb[bi * c * l..(bi + 1) * c * l]);
    }
    let cba = |layer: &satcap::nn::ConvBnAct, x: &[f64], ci: usize, k: usize, act: fn(&[f64]) -> Vec<f64>| {
        let y = conv_same(x, n, ci, h, w, s.get(layer.conv.w).data(), c, k, 1);
        act(&bn_train(&y, n, c, l, s.get(layer.bn.gamma).data(), s.get(layer.bn.beta).data()))
    };
    let x = cba(f.reduce.as_ref().unwrap(), &cat, 2 * c, 1, relu);
    let y = cba(&f.res[0], &x, c, 1, relu);
    let y = cba(&f.res[1], &y, c, 3, relu);
    let y = cba(&f.res[2], &y, c, 1, |v| v.to_vec());
    assert_close(out.data(), &add(&y, &x), 1e-10, "concat fusion");
}

#[test]
fn sum_is_symmetric_and_concat_is_not() {
    let a = randn(&[1, 4, 2, 2], 14);
    let b = randn(&[1, 4, 2, 2], 15);
    let (f, s) = fusion(FusionMethod::Sum, CosineAxis::Channel, 4, 16);
    assert_eq!(fuse(&f, &s, &a, &b).1.data(), fuse(&f, &s, &b, &a).1.data());
    let (f, s) = fusion(FusionMethod::Concat, CosineAxis::Channel, 4, 16);
    assert_ne!(fuse(&f, &s, &a, &b).1.data(), fuse(&f, &s, &b, &a).1.data());
}

fn small_map() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (prop::collection::vec(-5.0f64..5.0, 24), prop::collection::vec(-5.0f64..5.0, 24))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cosine_is_bounded_symmetric_and_scale_free((a, b) in small_map(), lambda in 0.01f64..100.0, k in 0usize..8) {
        let axis = CosineAxis::ALL[k];
        let ta = Tensor::from_f64(&[1, 2, 3, 4], &a).unwrap();
        let tb = Tensor::from_f64(&[1, 2, 3, 4], &b).unwrap();
        if let Some(s) = sim(&ta, &tb, axis) {
            prop_assert!(s.data().iter().all(|v| (-1.0 - 1e-12..=1.0 + 1e-12).contains(v)));
            let swapped = sim(&tb, &ta, axis).unwrap();
            prop_assert_eq!(s.data(), swapped.data());
            let sa = ta.map(|v| v * lambda);
            let sb = tb.map(|v| v * lambda);
            let scaled = sim(&sa, &sb, axis).unwrap();
            for (x, y) in s.data().iter().zip(scaled.data()) {
                // only vectors that stay clear of the eps guard are scale-free
                prop_assert!((x - y).abs() <= 1e-6 || x.abs() < 1e-6);
            }
        }
    }
}
