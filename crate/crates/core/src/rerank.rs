//! Maximal Marginal Relevance re-ranking of a retrieved candidate pool.
//!
//! Greedy selection: at each step pick the unselected candidate maximising
//!
//! ```text
//! sim(D_i, Q) - lambda * max_{D_j in S} sim(D_i, D_j)
//! ```
//!
//! where `sim` is cosine similarity and the penalty is 0 while `S` is empty.
//! Equal scores go to the lower caption id. Any finite `lambda` is accepted;
//! negative values reward redundancy.

use serde::{Deserialize, Serialize};

use crate::datastore::CaptionRecord;
use crate::embedding::{cosine, EmbeddingVector};
use crate::error::{Error, Result};

pub const DEFAULT_POOL_SIZE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmrConfig {
    pub lambda: f64,
    #[serde(default = "default_pool_size")]
    pub pool_size: usize,
    /// Defaults to the pipeline's K when absent from a config file.
    #[serde(default)]
    pub select_count: Option<usize>,
}

fn default_pool_size() -> usize {
    DEFAULT_POOL_SIZE
}

impl MmrConfig {
    pub fn new(lambda: f64, pool_size: usize, select_count: usize) -> Result<Self> {
        let cfg = Self {
            lambda,
            pool_size,
            select_count: Some(select_count),
        };
        cfg.validate(select_count)?;
        Ok(cfg)
    }

    pub fn select_count_or(&self, k: usize) -> usize {
        self.select_count.unwrap_or(k)
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        let select = self.select_count_or(k);
        if !self.lambda.is_finite() {
            return Err(Error::Config(format!(
                "rerank.lambda must be finite, got {}",
                self.lambda
            )));
        }
        if select == 0 || self.pool_size == 0 {
            return Err(Error::Config(
                "rerank pool and selection sizes must be positive".into(),
            ));
        }
        if select > self.pool_size {
            return Err(Error::Config(format!(
                "rerank selects {select} items from a pool of {}",
                self.pool_size
            )));
        }
        Ok(())
    }
}

/// Indices into `candidates` in selection order. `candidates` pairs each
/// caption id with its embedding.
pub fn mmr_select(
    query: &[f64],
    candidates: &[(u64, &[f64])],
    lambda: f64,
    select_count: usize,
) -> Result<Vec<usize>> {
    if candidates.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    for (_, e) in candidates {
        Error::check_dim(query.len(), e.len())?;
    }
    let n = candidates.len();
    let relevance: Vec<f64> = candidates.iter().map(|(_, e)| cosine(e, query)).collect();
    // running max similarity to the selected set; None while S is empty
    let mut redundancy: Vec<Option<f64>> = vec![None; n];
    let mut taken = vec![false; n];
    let mut order = Vec::with_capacity(select_count.min(n));

    while order.len() < select_count.min(n) {
        let mut best: Option<(f64, u64, usize)> = None;
        for i in (0..n).filter(|&i| !taken[i]) {
            let penalty = redundancy[i].map_or(0.0, |m| lambda * m);
            let score = relevance[i] - penalty;
            let id = candidates[i].0;
            let better = match best {
                None => true,
                Some((bs, bid, _)) => score > bs || (score == bs && id < bid),
            };
            if better {
                best = Some((score, id, i));
            }
        }
        let (_, _, pick) = best.expect("an unselected candidate remains");
        taken[pick] = true;
        order.push(pick);
        for i in (0..n).filter(|&i| !taken[i]) {
            let s = cosine(candidates[i].1, candidates[pick].1);
            redundancy[i] = Some(redundancy[i].map_or(s, |m| m.max(s)));
        }
    }
    Ok(order)
}

pub fn mmr_rerank(
    query: &EmbeddingVector,
    candidates: &[(CaptionRecord, EmbeddingVector)],
    cfg: &MmrConfig,
) -> Result<Vec<CaptionRecord>> {
    let select = cfg.select_count_or(candidates.len());
    let pairs: Vec<(u64, &[f64])> = candidates
        .iter()
        .map(|(r, e)| (r.id, e.as_slice()))
        .collect();
    let order = mmr_select(query.as_slice(), &pairs, cfg.lambda, select)?;
    Ok(order.into_iter().map(|i| candidates[i].0.clone()).collect())
}
