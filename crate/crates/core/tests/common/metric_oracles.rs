//! Brute-force metric oracles written from the metric definitions; they
//! share no code with the library.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use satcap::metrics::EvalRecord;

pub const WORDS: [&str; 6] = ["a", "road", "house", "the", "new", "no"];

pub fn rec(id: usize, h: &str, refs: &[String]) -> EvalRecord {
    EvalRecord {
        id: id.to_string(),
        hypothesis: h.to_string(),
        references: refs.to_vec(),
    }
}

pub fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_lowercase).collect()
}

pub fn sentence(r: &mut ChaCha8Rng, min: usize) -> String {
    let n = r.random_range(min..=8);
    (0..n).map(|_| WORDS[r.random_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
}

pub fn micro_corpus(seed: u64) -> Vec<EvalRecord> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let pairs = r.random_range(2..=5);
    (0..pairs)
        .map(|i| {
            let refs: Vec<String> = (0..r.random_range(1..=3)).map(|_| sentence(&mut r, 1)).collect();
            // hypotheses sometimes copy a reference so high-order matches occur
            let h = if r.random_bool(0.3) { refs[0].clone() } else { sentence(&mut r, 0) };
            rec(i, &h, &refs)
        })
        .collect()
}

/// Occurrences of `g` in `s`, by scanning every offset.
pub fn occurrences(s: &[String], g: &[String]) -> usize {
    if g.len() > s.len() {
        return 0;
    }
    (0..=s.len() - g.len()).filter(|&i| s[i..i + g.len()] == *g).count()
}

pub fn distinct_grams(s: &[String], n: usize) -> Vec<Vec<String>> {
    let mut out: Vec<Vec<String>> = Vec::new();
    if s.len() >= n {
        for i in 0..=s.len() - n {
            let g = s[i..i + n].to_vec();
            if !out.contains(&g) {
                out.push(g);
            }
        }
    }
    out
}

pub fn bleu_oracle(c: &[EvalRecord]) -> [f64; 4] {
    let mut matched = [0f64; 4];
    let mut total = [0f64; 4];
    let (mut hl, mut rl) = (0f64, 0f64);
    for p in c {
        let h = words(&p.hypothesis);
        let refs: Vec<Vec<String>> = p.references.iter().map(|s| words(s)).collect();
        hl += h.len() as f64;
        // closest reference length, shorter wins ties
        let mut best = refs[0].len();
        for r in &refs {
            let (d, bd) = (r.len().abs_diff(h.len()), best.abs_diff(h.len()));
            if d < bd || (d == bd && r.len() < best) {
                best = r.len();
            }
        }
        rl += best as f64;
        for n in 1..=4 {
            for g in distinct_grams(&h, n) {
                let cnt = occurrences(&h, &g);
                let cap = refs.iter().map(|r| occurrences(r, &g)).max().unwrap();
                matched[n - 1] += cnt.min(cap) as f64;
                total[n - 1] += cnt as f64;
            }
        }
    }
    let bp = if hl == 0.0 { 0.0 } else if hl > rl { 1.0 } else { (1.0 - rl / hl).exp() };
    let mut out = [0.0; 4];
    for n in 1..=4 {
        let ps: Vec<f64> = (0..n).map(|k| if total[k] == 0.0 { 0.0 } else { matched[k] / total[k] }).collect();
        out[n - 1] = if ps.iter().any(|&p| p == 0.0) {
            0.0
        } else {
            bp * ps.iter().product::<f64>().powf(1.0 / n as f64)
        };
    }
    out
}

pub fn is_subsequence(sub: &[&String], of: &[String]) -> bool {
    let mut it = of.iter();
    sub.iter().all(|w| it.any(|x| x == *w))
}

/// LCS by enumerating every subsequence of the hypothesis.
pub fn lcs_brute(h: &[String], r: &[String]) -> usize {
    (0u32..1 << h.len())
        .filter_map(|mask| {
            let sub: Vec<&String> = (0..h.len()).filter(|i| mask >> i & 1 == 1).map(|i| &h[i]).collect();
            is_subsequence(&sub, r).then_some(sub.len())
        })
        .max()
        .unwrap_or(0)
}

pub fn rouge_oracle(c: &[EvalRecord]) -> f64 {
    let b2 = 1.2f64 * 1.2;
    c.iter()
        .map(|p| {
            let h = words(&p.hypothesis);
            p.references
                .iter()
                .map(|r| {
                    let r = words(r);
                    let l = lcs_brute(&h, &r) as f64;
                    if l == 0.0 {
                        return 0.0;
                    }
                    let (prec, rec) = (l / h.len() as f64, l / r.len() as f64);
                    (1.0 + b2) * prec * rec / (rec + b2 * prec)
                })
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / c.len() as f64
}

/// Dense tf-idf vectors over an explicit n-gram dictionary.
pub fn cider_oracle(c: &[EvalRecord]) -> Vec<f64> {
    let docs: Vec<Vec<Vec<String>>> = c.iter().map(|p| p.references.iter().map(|s| words(s)).collect()).collect();
    let hyps: Vec<Vec<String>> = c.iter().map(|p| words(&p.hypothesis)).collect();
    let n_docs = c.len() as f64;
    let mut scores = vec![0.0; c.len()];
    for n in 1..=4 {
        let mut dict: Vec<Vec<String>> = Vec::new();
        for s in hyps.iter().chain(docs.iter().flatten()) {
            for g in distinct_grams(s, n) {
                if !dict.contains(&g) {
                    dict.push(g);
                }
            }
        }
        let idf: Vec<f64> = dict
            .iter()
            .map(|g| {
                let df = docs.iter().filter(|refs| refs.iter().any(|r| occurrences(r, g) > 0)).count();
                n_docs.ln() - (df.max(1) as f64).ln()
            })
            .collect();
        let vec_of = |s: &[String]| -> Vec<f64> { dict.iter().zip(&idf).map(|(g, w)| occurrences(s, g) as f64 * w).collect() };
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (i, h) in hyps.iter().enumerate() {
            let vh = vec_of(h);
            let mut acc = 0.0;
            for r in &docs[i] {
                let vr = vec_of(r);
                let mut dot: f64 = vh.iter().zip(&vr).map(|(a, b)| a.min(*b) * b).sum();
                if norm(&vh) != 0.0 && norm(&vr) != 0.0 {
                    dot /= norm(&vh) * norm(&vr);
                }
                let d = h.len() as f64 - r.len() as f64;
                acc += dot * (-d * d / 72.0).exp();
            }
            scores[i] += acc / docs[i].len() as f64 * 10.0 / 4.0;
        }
    }
    scores
}

