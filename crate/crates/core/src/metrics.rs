//! Corpus-level caption metrics: BLEU-1..4, ROUGE-L and CIDEr-D.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::tokenize;

pub const ROUGE_BETA: f64 = 1.2;
pub const CIDER_SIGMA: f64 = 6.0;
pub const MAX_N: usize = 4;

/// One scored pair in the JSON-lines exchange format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub hypothesis: String,
    pub references: Vec<String>,
}

/// Parses JSON lines, one [`EvalRecord`] per non-blank line.
pub fn read_jsonl(text: &str) -> Result<Vec<EvalRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: EvalRecord = serde_json::from_str(line)
            .map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
        if r.references.is_empty() {
            return Err(Error::Format(format!("line {}: pair `{}` has no references", i + 1, r.id)));
        }
        out.push(r);
    }
    Ok(out)
}

pub fn write_jsonl(records: &[EvalRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("records serialize"));
        s.push('\n');
    }
    s
}

/// Lowercased, whitespace-split hypothesis and references.
#[derive(Clone, Debug)]
pub struct Tokenized {
    pub hyp: Vec<String>,
    pub refs: Vec<Vec<String>>,
}

pub fn tokenize_corpus(records: &[EvalRecord]) -> Result<Vec<Tokenized>> {
    if records.is_empty() {
        return Err(Error::EmptyInput("metric corpus has no pairs".into()));
    }
    records
        .iter()
        .map(|r| {
            if r.references.is_empty() {
                return Err(Error::Format(format!("pair `{}` has no references", r.id)));
            }
            Ok(Tokenized {
                hyp: tokenize(&r.hypothesis),
                refs: r.references.iter().map(|s| tokenize(s)).collect(),
            })
        })
        .collect()
}

type Counts<'a> = HashMap<&'a [String], usize>;

fn ngrams(words: &[String], n: usize) -> Counts<'_> {
    let mut c = HashMap::new();
    if words.len() >= n {
        for g in words.windows(n) {
            *c.entry(g).or_insert(0) += 1;
        }
    }
    c
}

/// Corpus BLEU-1..4 with clipped counts, closest-reference brevity
/// penalty and no smoothing.
pub fn bleu(corpus: &[Tokenized]) -> Result<[f64; MAX_N]> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput("bleu over an empty corpus".into()));
    }
    let mut matched = [0usize; MAX_N];
    let mut total = [0usize; MAX_N];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for p in corpus {
        let h = p.hyp.len();
        hyp_len += h;
        ref_len += p
            .refs
            .iter()
            .map(Vec::len)
            .min_by_key(|&r| (r.abs_diff(h), r))
            .unwrap_or(0);
        for n in 1..=MAX_N {
            let hc = ngrams(&p.hyp, n);
            let mut max_ref: Counts<'_> = HashMap::new();
            for r in &p.refs {
                for (g, c) in ngrams(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, c) in &hc {
                matched[n - 1] += (*c).min(max_ref.get(g).copied().unwrap_or(0));
                total[n - 1] += c;
            }
        }
    }
    if hyp_len == 0 {
        return Ok([0.0; MAX_N]);
    }
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    let mut out = [0.0; MAX_N];
    let mut log_sum = 0.0;
    let mut zero = false;
    for n in 0..MAX_N {
        if matched[n] == 0 || total[n] == 0 {
            zero = true;
        } else {
            log_sum += (matched[n] as f64 / total[n] as f64).ln();
        }
        out[n] = if zero { 0.0 } else { bp * (log_sum / (n + 1) as f64).exp() };
    }
    Ok(out)
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure of one hypothesis against one reference.
pub fn rouge_l_pair(hyp: &[String], r: &[String]) -> f64 {
    if hyp.is_empty() || r.is_empty() {
        return 0.0;
    }
    let l = lcs(hyp, r) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let p = l / hyp.len() as f64;
    let rec = l / r.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * rec / (rec + b2 * p)
}

/// Best-reference ROUGE-L per pair, averaged over the corpus.
pub fn rouge_l(corpus: &[Tokenized]) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput("rouge_l over an empty corpus".into()));
    }
    let sum: f64 = corpus
        .iter()
        .map(|p| p.refs.iter().map(|r| rouge_l_pair(&p.hyp, r)).fold(0.0, f64::max))
        .sum();
    Ok(sum / corpus.len() as f64)
}

struct TfIdf {
    vecs: Vec<HashMap<Vec<String>, f64>>,
    norms: Vec<f64>,
    len: usize,
}

fn tfidf(words: &[String], df: &HashMap<Vec<String>, usize>, log_docs: f64) -> TfIdf {
    let mut vecs = Vec::with_capacity(MAX_N);
    let mut norms = Vec::with_capacity(MAX_N);
    for n in 1..=MAX_N {
        let mut v = HashMap::new();
        let mut norm = 0.0;
        // sorted for a fixed summation order
        let mut grams: Vec<(&[String], usize)> = ngrams(words, n).into_iter().collect();
        grams.sort();
        for (g, tf) in grams {
            let d = df.get(g).copied().unwrap_or(0).max(1) as f64;
            let w = tf as f64 * (log_docs - d.ln());
            norm += w * w;
            v.insert(g.to_vec(), w);
        }
        vecs.push(v);
        norms.push(norm.sqrt());
    }
    TfIdf { vecs, norms, len: words.len() }
}

fn cider_sim(h: &TfIdf, r: &TfIdf) -> [f64; MAX_N] {
    let delta = h.len as f64 - r.len as f64;
    let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
    let mut out = [0.0; MAX_N];
    for n in 0..MAX_N {
        let mut keys: Vec<&Vec<String>> = h.vecs[n].keys().collect();
        keys.sort();
        let mut val = 0.0;
        for g in keys {
            if let Some(&wr) = r.vecs[n].get(g) {
                val += h.vecs[n][g].min(wr) * wr;
            }
        }
        if h.norms[n] != 0.0 && r.norms[n] != 0.0 {
            val /= h.norms[n] * r.norms[n];
        }
        out[n] = val * penalty;
    }
    out
}

/// Per-pair CIDEr-D scores (each in `[0, 10]`).
pub fn cider_d_scores(corpus: &[Tokenized]) -> Result<Vec<f64>> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput("cider_d over an empty corpus".into()));
    }
    if corpus.len() == 1 {
        log::warn!("CIDEr-D on a single pair: every document frequency equals the corpus size, score is 0");
    }
    let mut df: HashMap<Vec<String>, usize> = HashMap::new();
    for p in corpus {
        let mut seen: HashSet<&[String]> = HashSet::new();
        for r in &p.refs {
            for n in 1..=MAX_N {
                seen.extend(ngrams(r, n).into_keys());
            }
        }
        for g in seen {
            *df.entry(g.to_vec()).or_insert(0) += 1;
        }
    }
    let log_docs = (corpus.len() as f64).ln();
    Ok(corpus
        .iter()
        .map(|p| {
            let h = tfidf(&p.hyp, &df, log_docs);
            let mut acc = [0.0; MAX_N];
            for r in &p.refs {
                let s = cider_sim(&h, &tfidf(r, &df, log_docs));
                for n in 0..MAX_N {
                    acc[n] += s[n];
                }
            }
            let mean_n = acc.iter().sum::<f64>() / MAX_N as f64;
            mean_n / p.refs.len() as f64 * 10.0
        })
        .collect())
}

pub fn cider_d(corpus: &[Tokenized]) -> Result<f64> {
    let s = cider_d_scores(corpus)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

/// Weights of BLEU-4, ROUGE-L and CIDEr-D/10 in the composite score.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CompositeWeights {
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider_d: f64,
}

impl Default for CompositeWeights {
    fn default() -> Self {
        CompositeWeights {
            bleu4: 1.0,
            rouge_l: 1.0,
            cider_d: 1.0,
        }
    }
}

/// Weighted mean of BLEU-4, ROUGE-L and CIDEr-D/10 (all fractions).
pub fn composite(bleu4: f64, rouge_l: f64, cider_d: f64, w: CompositeWeights) -> f64 {
    let total = w.bleu4 + w.rouge_l + w.cider_d;
    if total <= 0.0 {
        return 0.0;
    }
    (w.bleu4 * bleu4 + w.rouge_l * rouge_l + w.cider_d * cider_d / 10.0) / total
}

/// Metric values as fractions (CIDEr-D in `[0, 10]`).
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub pairs: usize,
    pub bleu: [f64; MAX_N],
    pub rouge_l: f64,
    pub cider_d: f64,
    pub composite: f64,
}

/// The ×100 display form used in JSON reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaledReport {
    pub pairs: usize,
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider_d: f64,
    pub composite: f64,
}

impl MetricReport {
    pub fn scaled(&self) -> ScaledReport {
        ScaledReport {
            pairs: self.pairs,
            bleu1: self.bleu[0] * 100.0,
            bleu2: self.bleu[1] * 100.0,
            bleu3: self.bleu[2] * 100.0,
            bleu4: self.bleu[3] * 100.0,
            rouge_l: self.rouge_l * 100.0,
            cider_d: self.cider_d * 100.0,
            composite: self.composite * 100.0,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self.scaled()).expect("report serializes")
    }
}

pub fn score_with(records: &[EvalRecord], w: CompositeWeights) -> Result<MetricReport> {
    let corpus = tokenize_corpus(records)?;
    let b = bleu(&corpus)?;
    let r = rouge_l(&corpus)?;
    let c = cider_d(&corpus)?;
    Ok(MetricReport {
        pairs: corpus.len(),
        bleu: b,
        rouge_l: r,
        cider_d: c,
        composite: composite(b[3], r, c, w),
    })
}

pub fn score(records: &[EvalRecord]) -> Result<MetricReport> {
    score_with(records, CompositeWeights::default())
}
