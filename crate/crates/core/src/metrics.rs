//! Corpus-level caption metrics: BLEU@1, BLEU@4 and CIDEr-D.
//!
//! Tokenization lowercases the input, deletes the 32 ASCII punctuation
//! characters
//!
//! ```text
//! ! " # $ % & ' ( ) * + , - . / : ; < = > ? @ [ \ ] ^ _ ` { | } ~
//! ```
//!
//! and splits on whitespace. It approximates, but does not reproduce, the PTB
//! tokenizer used by the COCO evaluation tools, so scores are close to but
//! not identical with that package.
//!
//! BLEU is unsmoothed: any order with zero clipped matches scores 0. CIDEr-D
//! uses n = 1..4, sigma = 6 and a factor of 10, with document frequencies
//! taken from the references of the evaluated corpus.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Parallelism};

pub const PUNCTUATION: &str = "!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~";

const CIDER_MAX_N: usize = 4;
const CIDER_SIGMA: f64 = 6.0;
const CIDER_SCALE: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalInstance {
    pub image_id: u64,
    pub candidate: String,
    pub references: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceScore {
    pub image_id: u64,
    pub cider: f64,
}

/// BLEU values are fractions in [0, 1]; multiply by 100 for the usual
/// presentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu1: f64,
    pub bleu4: f64,
    pub cider: f64,
    pub instance_count: usize,
    /// Set when the corpus has a single instance, which zeroes every IDF weight.
    pub idf_degenerate: bool,
    pub per_instance: Vec<InstanceScore>,
}

pub fn tokenize(s: &str) -> Vec<String> {
    let cleaned: String = s
        .chars()
        .filter(|c| !(c.is_ascii() && PUNCTUATION.contains(*c)))
        .flat_map(char::to_lowercase)
        .collect();
    cleaned.split_whitespace().map(str::to_owned).collect()
}

/// n-gram counts keyed by the space-joined tokens.
fn ngram_counts(tokens: &[String], n: usize) -> HashMap<String, usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.join(" ")).or_insert(0) += 1;
        }
    }
    out
}

struct Tokenized {
    candidate: Vec<String>,
    references: Vec<Vec<String>>,
}

fn tokenize_corpus(corpus: &[EvalInstance], mode: Parallelism) -> Result<Vec<Tokenized>> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if let Some(bad) = corpus.iter().find(|i| i.references.is_empty()) {
        return Err(Error::Config(format!(
            "instance {} has no references",
            bad.image_id
        )));
    }
    Ok(exec::map_slice(corpus, mode, |inst| Tokenized {
        candidate: tokenize(&inst.candidate),
        references: inst.references.iter().map(|r| tokenize(r)).collect(),
    }))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct BleuCounts {
    matches: [u64; 4],
    totals: [u64; 4],
    cand_len: u64,
    ref_len: u64,
}

impl BleuCounts {
    fn add(&mut self, o: &BleuCounts) {
        for n in 0..4 {
            self.matches[n] += o.matches[n];
            self.totals[n] += o.totals[n];
        }
        self.cand_len += o.cand_len;
        self.ref_len += o.ref_len;
    }

    fn score(&self, max_n: usize) -> f64 {
        if self.cand_len == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for n in 0..max_n {
            if self.matches[n] == 0 {
                return 0.0;
            }
            log_sum += (self.matches[n] as f64 / self.totals[n] as f64).ln();
        }
        let (c, r) = (self.cand_len as f64, self.ref_len as f64);
        let bp = if c < r { (1.0 - r / c).exp() } else { 1.0 };
        bp * (log_sum / max_n as f64).exp()
    }
}

fn bleu_counts(t: &Tokenized) -> BleuCounts {
    let c = t.candidate.len();
    // closest reference length, shorter one on ties
    let ref_len = t
        .references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&l| (l.abs_diff(c), l))
        .unwrap_or(0);
    let mut out = BleuCounts {
        cand_len: c as u64,
        ref_len: ref_len as u64,
        ..Default::default()
    };
    for n in 1..=4 {
        let cand = ngram_counts(&t.candidate, n);
        let mut max_ref: HashMap<String, usize> = HashMap::new();
        for r in &t.references {
            for (g, cnt) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(cnt);
            }
        }
        out.matches[n - 1] = cand
            .iter()
            .map(|(g, &cnt)| cnt.min(max_ref.get(g).copied().unwrap_or(0)) as u64)
            .sum();
        out.totals[n - 1] = c.saturating_sub(n - 1) as u64;
    }
    out
}

fn corpus_bleu_counts(tok: &[Tokenized], mode: Parallelism) -> BleuCounts {
    let mut total = BleuCounts::default();
    for c in exec::map_slice(tok, mode, bleu_counts) {
        total.add(&c);
    }
    total
}

/// Corpus BLEU over orders `1..=max_n` (1 to 4).
pub fn bleu(corpus: &[EvalInstance], max_n: usize) -> Result<f64> {
    if !(1..=4).contains(&max_n) {
        return Err(Error::Config(format!(
            "BLEU order must be 1..=4, got {max_n}"
        )));
    }
    let tok = tokenize_corpus(corpus, Parallelism::default())?;
    Ok(corpus_bleu_counts(&tok, Parallelism::default()).score(max_n))
}

/// TF-IDF weighted n-gram vectors of one sentence, one map per order.
struct CiderVector {
    weights: Vec<HashMap<String, f64>>,
    norms: Vec<f64>,
    len: usize,
}

fn cider_vector(tokens: &[String], df: &HashMap<String, usize>, log_n: f64) -> CiderVector {
    let mut weights = Vec::with_capacity(CIDER_MAX_N);
    let mut norms = Vec::with_capacity(CIDER_MAX_N);
    for n in 1..=CIDER_MAX_N {
        let mut w = HashMap::new();
        let mut sq = 0.0;
        for (g, tf) in ngram_counts(tokens, n) {
            let d = df.get(&g).copied().unwrap_or(0).max(1) as f64;
            let v = tf as f64 * (log_n - d.ln());
            sq += v * v;
            w.insert(g, v);
        }
        weights.push(w);
        norms.push(sq.sqrt());
    }
    CiderVector {
        weights,
        norms,
        len: tokens.len(),
    }
}

fn cider_sim(hyp: &CiderVector, r: &CiderVector) -> f64 {
    let delta = hyp.len as f64 - r.len as f64;
    let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
    let mut total = 0.0;
    for n in 0..CIDER_MAX_N {
        let mut val = 0.0;
        for (g, &h) in &hyp.weights[n] {
            if let Some(&rv) = r.weights[n].get(g) {
                val += h.min(rv) * rv;
            }
        }
        if hyp.norms[n] != 0.0 && r.norms[n] != 0.0 {
            val /= hyp.norms[n] * r.norms[n];
        }
        total += val * penalty;
    }
    total / CIDER_MAX_N as f64
}

fn cider_scores(tok: &[Tokenized], mode: Parallelism) -> Vec<f64> {
    let mut df: HashMap<String, usize> = HashMap::new();
    for t in tok {
        let mut seen = HashSet::new();
        for r in &t.references {
            for n in 1..=CIDER_MAX_N {
                seen.extend(ngram_counts(r, n).into_keys());
            }
        }
        for g in seen {
            *df.entry(g).or_insert(0) += 1;
        }
    }
    let log_n = (tok.len() as f64).ln();
    exec::map_slice(tok, mode, |t| {
        let hyp = cider_vector(&t.candidate, &df, log_n);
        let sum: f64 = t
            .references
            .iter()
            .map(|r| cider_sim(&hyp, &cider_vector(r, &df, log_n)))
            .sum();
        sum / t.references.len() as f64 * CIDER_SCALE
    })
}

/// Corpus CIDEr-D: the mean of per-instance scores.
pub fn cider(corpus: &[EvalInstance]) -> Result<f64> {
    Ok(evaluate(corpus, Parallelism::default())?.cider)
}

pub fn evaluate(corpus: &[EvalInstance], mode: Parallelism) -> Result<MetricReport> {
    let tok = tokenize_corpus(corpus, mode)?;
    let counts = corpus_bleu_counts(&tok, mode);
    let per = cider_scores(&tok, mode);
    let cider = per.iter().sum::<f64>() / per.len() as f64;
    Ok(MetricReport {
        bleu1: counts.score(1),
        bleu4: counts.score(4),
        cider,
        instance_count: corpus.len(),
        idf_degenerate: corpus.len() == 1,
        per_instance: corpus
            .iter()
            .zip(per)
            .map(|(i, c)| InstanceScore {
                image_id: i.image_id,
                cider: c,
            })
            .collect(),
    })
}
