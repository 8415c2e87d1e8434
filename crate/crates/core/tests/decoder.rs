mod common;

use common::*;
use rand::Rng;
use satcap::decoder::{argmax, Decoder};
use satcap::nn::{Ctx, Init};
use satcap::vocab::{tokenize, Vocab, END, PAD, START, UNK};
use satcap::{Mode, ParamStore, Tensor};

const C: usize = 8;
const H: usize = 2;
const V: usize = 11;

fn decoder(layers: usize, max_len: usize, seed: u64) -> (Decoder, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let d = Decoder::new(&mut Init::new(&mut store, &mut r), C, H, layers, 2, max_len, V);
    (d, store)
}

fn logits(d: &Decoder, s: &ParamStore<f64>, ids: &[usize], n: usize, t: usize, mem: &Tensor<f64>) -> Vec<f64> {
    let mut cx = Ctx::new(s, Mode::Eval);
    let m = cx.g.constant(mem.clone());
    let out = d.forward(&mut cx, ids, n, t, m).unwrap();
    cx.g.value(out.logits).data().to_vec()
}

#[test]
fn single_layer_matches_post_norm_oracle() {
    let (d, s) = decoder(1, 6, 1);
    let (t, hw) = (4, 3);
    let ids = [START, 5, 7, 4];
    let mem = randn(&[1, hw, C], 2);
    let got = logits(&d, &s, &ids, 1, t, &mem);

    let v = |id| s.get(id).data().to_vec();
    let table = v(d.embed.table);
    let pos = v(d.pos);
    let x: Vec<f64> = (0..t).flat_map(|i| (0..C).map(move |j| (i, j))).map(|(i, j)| table[ids[i] * C + j] + pos[i * C + j]).collect();
    let l = &d.layers[0];
    let ln = |x: &[f64], n: &satcap::nn::LayerNorm| layer_norm_rows(x, &v(n.gamma), &v(n.beta));
    let (sa, _) = mha(&MhaWeights::read(&s, &l.self_attn), &x, &x, t, t, C, H, true);
    let x1 = ln(&add(&x, &sa), &l.norm1);
    let (ca, _) = mha(&MhaWeights::read(&s, &l.cross_attn), &x1, mem.data(), t, hw, C, H, false);
    let x2 = ln(&add(&x1, &ca), &l.norm2);
    let hdn = relu(&add_row(&mm(&x2, &v(l.fc1.w), t, C, 2 * C), &v(l.fc1.b.unwrap())));
    let f = add_row(&mm(&hdn, &v(l.fc2.w), t, 2 * C, C), &v(l.fc2.b.unwrap()));
    let x3 = ln(&add(&x2, &f), &l.norm3);
    let expect = add_row(&mm(&x3, &v(d.out.w), t, C, V), &v(d.out.b.unwrap()));
    assert_close(&got, &expect, 1e-12, "decoder logits");
}

#[test]
fn future_tokens_never_change_earlier_logits() {
    let (d, s) = decoder(2, 8, 3);
    let t = 7;
    let mem = randn(&[1, 4, C], 4);
    let mut r = rng(5);
    let base: Vec<usize> = std::iter::once(START).chain((1..t).map(|_| r.random_range(3..V))).collect();
    let before = logits(&d, &s, &base, 1, t, &mem);
    for trial in 0..10 {
        let pos = r.random_range(1..t);
        let mut ids = base.clone();
        ids[pos] = (ids[pos] + 1 + r.random_range(0..V - 1)) % V;
        let after = logits(&d, &s, &ids, 1, t, &mem);
        assert_eq!(&before[..pos * V], &after[..pos * V], "trial {trial}: position {pos}");
        assert_ne!(&before[pos * V..], &after[pos * V..]);
    }
}

#[test]
fn single_token_shape_and_length_contract() {
    let (d, s) = decoder(1, 4, 6);
    let mem = randn(&[1, 2, C], 7);
    let mut cx = Ctx::new(&s, Mode::Eval);
    let m = cx.g.constant(mem);
    let out = d.forward(&mut cx, &[START], 1, 1, m).unwrap();
    assert_eq!(cx.g.shape(out.logits), &[1, 1, V]);
    let Err(err) = d.forward(&mut cx, &[START; 5], 1, 5, m) else { panic!("t > max_len accepted") };
    assert!(matches!(err, satcap::Error::Contract(_)), "{err}");
}

#[test]
fn attention_rows_are_distributions() {
    let (d, s) = decoder(1, 6, 8);
    let mem = randn(&[2, 5, C], 9);
    let mut cx = Ctx::new(&s, Mode::Eval);
    let m = cx.g.constant(mem);
    let out = d.forward(&mut cx, &[START, 4, 5, START, 6, 7], 2, 3, m).unwrap();
    assert_eq!(cx.g.shape(out.self_attn), &[2 * H, 3, 3]);
    assert_eq!(cx.g.shape(out.cross_attn), &[2 * H, 3, 5]);
    for (a, w) in [(out.self_attn, 3), (out.cross_attn, 5)] {
        for row in cx.g.value(a).data().chunks(w) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }
}

#[test]
fn rigged_end_logits_give_an_empty_caption() {
    let (d, mut s) = decoder(1, 6, 10);
    s.set(d.out.w, Tensor::zeros(&[C, V])).unwrap();
    let mut b = vec![0.0; V];
    b[END] = 5.0;
    s.set(d.out.b.unwrap(), Tensor::from_f64(&[V], &b).unwrap()).unwrap();
    let mem = randn(&[3, 4, C], 11);
    for dec in d.greedy(&s, &mem).unwrap() {
        assert!(dec.ids.is_empty());
        assert_eq!(dec.attention.shape(), &[1, H, 4]);
    }
    assert!(d.beam(&s, &randn(&[1, 4, C], 12), 3).unwrap().is_empty());
}

#[test]
fn greedy_is_deterministic_and_batch_independent() {
    let (d, s) = decoder(1, 7, 13);
    let mem = randn(&[3, 4, C], 14);
    let a = d.greedy(&s, &mem).unwrap();
    let b = d.greedy(&s, &mem).unwrap();
    assert_eq!(a, b);
    for (i, dec) in a.iter().enumerate() {
        let one = Tensor::new(&[1, 4, C], mem.data()[i * 4 * C..(i + 1) * 4 * C].to_vec()).unwrap();
        let solo = d.greedy(&s, &one).unwrap().remove(0);
        assert_eq!(solo.ids, dec.ids);
        assert_eq!(solo.attention.data(), dec.attention.data());
        let mean = dec.mean_attention();
        for row in mean.data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }
}

#[test]
fn greedy_follows_the_teacher_forced_argmax() {
    let (d, s) = decoder(1, 6, 15);
    let mem = randn(&[1, 3, C], 16);
    let dec = d.greedy(&s, &mem).unwrap().remove(0);
    let mut prefix = vec![START];
    prefix.extend(&dec.ids);
    if prefix.len() < 6 {
        prefix.push(END);
    }
    // re-score the decoded prefix in one teacher-forced pass
    let t = prefix.len() - 1;
    let lg = logits(&d, &s, &prefix[..t], 1, t, &mem);
    for i in 0..t {
        assert_eq!(argmax(&lg[i * V..(i + 1) * V]), prefix[i + 1]);
    }
}

#[test]
fn beam_of_width_one_is_greedy() {
    let (d, s) = decoder(1, 6, 17);
    for seed in 0..4 {
        let mem = randn(&[1, 3, C], 18 + seed);
        let g = d.greedy(&s, &mem).unwrap().remove(0).ids;
        assert_eq!(d.beam(&s, &mem, 1).unwrap(), g);
    }
}

#[test]
fn argmax_prefers_the_lowest_index() {
    assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
    assert_eq!(argmax(&[0.0, 0.0]), 0);
}

#[test]
fn uniform_logits_cost_log_vocab() {
    let (d, mut s) = decoder(1, 5, 19);
    s.set(d.out.w, Tensor::zeros(&[C, V])).unwrap();
    s.set(d.out.b.unwrap(), Tensor::zeros(&[V])).unwrap();
    let mem = randn(&[1, 2, C], 20);
    let mut cx = Ctx::new(&s, Mode::Eval);
    let m = cx.g.constant(mem);
    let out = d.forward(&mut cx, &[START, 4, 5], 1, 3, m).unwrap();
    let loss = cx.g.cross_entropy(out.logits, &[4, 5, END], &[true, true, true]).unwrap();
    assert!((cx.g.value(loss).item() - (V as f64).ln()).abs() <= 1e-6);
}

#[test]
fn vocabulary_contract() {
    let v = Vocab::build(["a b", "b c"], 1).unwrap();
    assert_eq!(&v.tokens()[4..], &["b", "a", "c"]);
    assert_eq!(v.id("zebra"), UNK);
    assert_eq!(v.encode("a zebra"), vec![v.id("a"), UNK]);
    assert_eq!((PAD, START, END, UNK), (0, 1, 2, 3));
    let caps = ["A Road appears in the Desert", "there is no change"];
    let v = Vocab::build(caps, 1).unwrap();
    for c in caps {
        assert_eq!(v.decode(&v.encode(c)), tokenize(c).join(" "));
    }
    let back = Vocab::from_text(&v.to_text()).unwrap();
    assert_eq!(back.tokens(), v.tokens());
    assert!(Vocab::build(std::iter::empty::<&str>(), 1).is_err());
}
