use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datastore::{CaptionRecord, Datastore, DatastoreBuilder};
use crate::diagnostics::{self, KnorReport};
use crate::embedding::{EmbeddingMatrix, EmbeddingVector};
use crate::error::{Error, Result};
use crate::exec::{self, Parallelism};
use crate::format::{self, EmbeddingReader};
use crate::gap::inject_noise_with;
use crate::metrics::{self, EvalInstance, MetricReport};
use crate::prompt::{build_prompt, order_captions};
use crate::rerank::mmr_select;
use crate::rng::{item_rng, Purpose};

use super::config::{Correctors, PipelineConfig};
use super::decoder::{Decoder, DecoderRequest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemError {
    pub kind: String,
    pub message: String,
}

impl ItemError {
    fn from_error(e: &Error) -> Self {
        let kind = match e {
            Error::DimMismatch { .. } => "dim_mismatch",
            Error::InsufficientStore { .. } => "insufficient_store",
            Error::EmptyStore => "empty_store",
            Error::InvalidEmbedding(_) => "invalid_embedding",
            _ => "retrieval_error",
        };
        Self {
            kind: kind.into(),
            message: e.to_string(),
        }
    }
}

/// One line of `infer` output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CaptionOutput {
    Ok {
        image_id: u64,
        caption: String,
        prompt: String,
        /// Ids of the prompt captions, in prompt order.
        neighbor_ids: Vec<u64>,
    },
    Failed {
        image_id: u64,
        request_id: u64,
        error: ItemError,
    },
}

impl CaptionOutput {
    pub fn is_ok(&self) -> bool {
        matches!(self, CaptionOutput::Ok { .. })
    }
}

/// One line of `train-pairs` output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TrainingPair {
    Ok {
        prompt: String,
        target: String,
        target_id: u64,
        neighbor_ids: Vec<u64>,
        /// Row of the query in the text embedding file.
        input_embedding_ref: u64,
    },
    Failed {
        input_embedding_ref: u64,
        error: ItemError,
    },
}

impl TrainingPair {
    pub fn is_ok(&self) -> bool {
        matches!(self, TrainingPair::Ok { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IngestSummary {
    pub rows: usize,
    pub dim: usize,
    pub corrected: bool,
    pub noised: bool,
}

fn noise(e: &[f64], scale: f64, cfg: &PipelineConfig, purpose: Purpose, index: u64) -> Vec<f64> {
    inject_noise_with(
        e,
        scale,
        cfg.noise.std_mode,
        &mut item_rng(cfg.seed, purpose, index),
    )
}

/// Build a datastore from an embedding file and its caption JSONL, applying
/// the text-side correction and, if enabled, L-scaled noise to every row.
pub fn ingest(
    embeddings_path: &Path,
    captions_path: &Path,
    cfg: &PipelineConfig,
    correctors: &Correctors,
) -> Result<(Datastore, IngestSummary)> {
    let captions: Vec<CaptionRecord> = format::read_jsonl(captions_path)?;
    let mut reader = EmbeddingReader::open(embeddings_path)?;
    let header = reader.header();
    if header.count != captions.len() as u64 {
        return Err(Error::BuildError(format!(
            "{} has {} rows but {} has {} captions",
            embeddings_path.display(),
            header.count,
            captions_path.display(),
            captions.len()
        )));
    }
    if let Some(c) = &correctors.text_side {
        Error::check_dim(c.dim(), header.dim)?;
    }
    let noised = cfg.noise.datastore && cfg.l_noise > 0.0;
    let mut builder = DatastoreBuilder::new(header.dim, cfg.metric)?;
    builder.reserve(captions.len());
    for (i, (row, rec)) in reader.by_ref().zip(captions).enumerate() {
        let mut row = row?;
        if let Some(c) = &correctors.text_side {
            row = c.correct_slice(&row)?;
        }
        if noised {
            row = noise(&row, cfg.l_noise, cfg, Purpose::DatastoreNoise, i as u64);
        }
        builder.push(&row, rec)?;
    }
    let store = builder.finish();
    let summary = IngestSummary {
        rows: store.len(),
        dim: store.dim(),
        corrected: correctors.text_side.is_some(),
        noised,
    };
    Ok((store, summary))
}

struct Selected {
    /// Store rows in rank order.
    rows: Vec<usize>,
}

fn select_neighbors(store: &Datastore, query: &[f64], cfg: &PipelineConfig) -> Result<Selected> {
    match &cfg.rerank {
        None => {
            let res = store.knn_search_with(query, cfg.k, Parallelism::Sequential)?;
            Ok(Selected {
                rows: res.iter().map(|r| r.row).collect(),
            })
        }
        Some(mmr) => {
            let pool = store.knn_search_with(query, mmr.pool_size, Parallelism::Sequential)?;
            let embeddings: Vec<Vec<f64>> =
                pool.iter().map(|r| store.row_embedding(r.row)).collect();
            let cands: Vec<(u64, &[f64])> = pool
                .iter()
                .zip(&embeddings)
                .map(|(r, e)| (r.id, e.as_slice()))
                .collect();
            let order = mmr_select(query, &cands, mmr.lambda, mmr.select_count_or(cfg.k))?;
            Ok(Selected {
                rows: order.into_iter().map(|i| pool[i].row).collect(),
            })
        }
    }
}

fn infer_one(
    store: &Datastore,
    raw_query: &[f64],
    index: u64,
    cfg: &PipelineConfig,
    correctors: &Correctors,
) -> Result<(DecoderRequest, Vec<String>, Vec<u64>)> {
    let corrected = match &correctors.image_query {
        Some(c) => c.correct_slice(raw_query)?,
        None => raw_query.to_vec(),
    };
    let retrieval_query = if cfg.noise.infer_query && cfg.l_noise > 0.0 {
        noise(&corrected, cfg.l_noise, cfg, Purpose::QueryNoise, index)
    } else {
        corrected.clone()
    };
    let selected = select_neighbors(store, &retrieval_query, cfg)?;
    let ranked_texts: Vec<String> = selected
        .rows
        .iter()
        .map(|&r| store.record(r).text.clone())
        .collect();
    let prompt_rows = order_captions(&selected.rows, cfg.ordering.for_item(index));
    let texts: Vec<&str> = prompt_rows
        .iter()
        .map(|&r| store.record(r).text.as_str())
        .collect();
    let prompt = build_prompt(&texts)?;

    let mut input_embedding = corrected;
    let mut neighbor_embeddings: Vec<Vec<f64>> = prompt_rows
        .iter()
        .map(|&r| store.row_embedding(r))
        .collect();
    if cfg.noise.decoder_payload && cfg.b_noise > 0.0 {
        let mut rng = item_rng(cfg.seed, Purpose::PayloadNoise, index);
        input_embedding =
            inject_noise_with(&input_embedding, cfg.b_noise, cfg.noise.std_mode, &mut rng);
        for n in neighbor_embeddings.iter_mut() {
            *n = inject_noise_with(n, cfg.b_noise, cfg.noise.std_mode, &mut rng);
        }
    }
    let neighbor_ids = prompt_rows.iter().map(|&r| store.record(r).id).collect();
    Ok((
        DecoderRequest {
            prompt,
            input_embedding,
            neighbor_embeddings,
            request_id: index,
        },
        ranked_texts,
        neighbor_ids,
    ))
}

/// Caption every query row. Output order matches input order whatever the
/// degree of concurrency; at most `cfg.max_in_flight` items are in progress
/// at once.
pub fn infer(
    store: &Datastore,
    queries: &EmbeddingMatrix,
    image_ids: Option<&[u64]>,
    cfg: &PipelineConfig,
    correctors: &Correctors,
    decoder: &dyn Decoder,
    mode: Parallelism,
) -> Result<Vec<CaptionOutput>> {
    Error::check_dim(store.dim(), queries.dim())?;
    if let Some(ids) = image_ids {
        if ids.len() != queries.rows() {
            return Err(Error::PairMismatch {
                left: queries.rows(),
                right: ids.len(),
            });
        }
    }
    if let Some(c) = &correctors.image_query {
        Error::check_dim(c.dim(), queries.dim())?;
    }
    let mut out = Vec::with_capacity(queries.rows());
    for window in exec::blocks(queries.rows(), cfg.max_in_flight) {
        let start = window.start;
        out.extend(exec::map_range(window.len(), mode, |j| {
            let i = start + j;
            let image_id = image_ids.map_or(i as u64, |ids| ids[i]);
            let request_id = i as u64;
            let prepared = infer_one(store, queries.row(i), request_id, cfg, correctors);
            match prepared {
                Err(e) => CaptionOutput::Failed {
                    image_id,
                    request_id,
                    error: ItemError::from_error(&e),
                },
                Ok((req, ranked, neighbor_ids)) => match decoder.generate(&req, &ranked) {
                    Ok(resp) => CaptionOutput::Ok {
                        image_id,
                        caption: resp.caption,
                        prompt: req.prompt,
                        neighbor_ids,
                    },
                    Err(e) => CaptionOutput::Failed {
                        image_id,
                        request_id: e.request_id(),
                        error: ItemError {
                            kind: e.kind().into(),
                            message: e.to_string(),
                        },
                    },
                },
            }
        }));
    }
    Ok(out)
}

/// Decoder training examples: each text embedding retrieves K + 1 captions,
/// the nearest becoming the target. `caption_ids`, when given, names each
/// row's own caption for `exclude_self`.
pub fn make_training_pairs(
    store: &Datastore,
    text_embeddings: &EmbeddingMatrix,
    caption_ids: Option<&[u64]>,
    cfg: &PipelineConfig,
    correctors: &Correctors,
    mode: Parallelism,
) -> Result<Vec<TrainingPair>> {
    Error::check_dim(store.dim(), text_embeddings.dim())?;
    if let Some(ids) = caption_ids {
        if ids.len() != text_embeddings.rows() {
            return Err(Error::PairMismatch {
                left: text_embeddings.rows(),
                right: ids.len(),
            });
        }
    }
    if cfg.exclude_self && caption_ids.is_none() {
        return Err(Error::Config(
            "exclude_self needs the caption ids of the text embeddings".into(),
        ));
    }
    let k = cfg.train_k();
    let one = |i: usize| -> Result<TrainingPair> {
        let index = i as u64;
        let mut q = text_embeddings.row(i).to_vec();
        if let Some(c) = &correctors.text_side {
            q = c.correct_slice(&q)?;
        }
        if cfg.noise.train_query && cfg.l_noise > 0.0 {
            q = noise(&q, cfg.l_noise, cfg, Purpose::QueryNoise, index);
        }
        let exclude = if cfg.exclude_self {
            caption_ids.map(|ids| ids[i])
        } else {
            None
        };
        let bundle = store.retrieve_for_training(&EmbeddingVector::new(q)?, k, exclude)?;
        let ordered = order_captions(&bundle.prompt_captions, cfg.ordering.for_item(index));
        let target = bundle.target.expect("training bundles carry a target");
        Ok(TrainingPair::Ok {
            prompt: build_prompt(&ordered.iter().map(|c| c.text.as_str()).collect::<Vec<_>>())?,
            target: target.text,
            target_id: target.id,
            neighbor_ids: ordered.iter().map(|c| c.id).collect(),
            input_embedding_ref: index,
        })
    };
    Ok(exec::map_range(text_embeddings.rows(), mode, |i| {
        one(i).unwrap_or_else(|e| TrainingPair::Failed {
            input_embedding_ref: i as u64,
            error: ItemError::from_error(&e),
        })
    }))
}

#[derive(Debug, Clone, Deserialize)]
pub struct CandidateLine {
    pub image_id: u64,
    #[serde(default)]
    pub caption: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct ReferenceLine {
    pub image_id: u64,
    pub references: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalOutcome {
    #[serde(flatten)]
    pub report: MetricReport,
    /// Candidate ids with no references.
    pub unmatched_candidates: Vec<u64>,
    /// Reference ids with no usable candidate.
    pub unmatched_references: Vec<u64>,
}

/// Join candidates to references on `image_id` and score the matched pairs.
/// Candidates without a caption (failed items) count as unmatched.
pub fn evaluate_join(
    candidates: &[CandidateLine],
    references: &[ReferenceLine],
    mode: Parallelism,
) -> Result<EvalOutcome> {
    let mut refs: BTreeMap<u64, &ReferenceLine> = BTreeMap::new();
    for r in references {
        if refs.insert(r.image_id, r).is_some() {
            return Err(Error::Config(format!(
                "duplicate references for image {}",
                r.image_id
            )));
        }
    }
    let mut used = BTreeSet::new();
    let mut unmatched_candidates = Vec::new();
    let mut corpus = Vec::new();
    for c in candidates {
        match (refs.get(&c.image_id), &c.caption) {
            (Some(r), Some(caption)) if used.insert(c.image_id) => corpus.push(EvalInstance {
                image_id: c.image_id,
                candidate: caption.clone(),
                references: r.references.clone(),
            }),
            (Some(_), Some(_)) => {
                return Err(Error::Config(format!(
                    "duplicate candidate for image {}",
                    c.image_id
                )))
            }
            (None, _) => unmatched_candidates.push(c.image_id),
            (Some(_), None) => {}
        }
    }
    let unmatched_references: Vec<u64> = refs
        .keys()
        .filter(|id| !used.contains(*id))
        .copied()
        .collect();
    if !unmatched_candidates.is_empty() || !unmatched_references.is_empty() {
        log::warn!(
            "excluded {} candidates without references and {} references without candidates",
            unmatched_candidates.len(),
            unmatched_references.len()
        );
    }
    Ok(EvalOutcome {
        report: metrics::evaluate(&corpus, mode)?,
        unmatched_candidates,
        unmatched_references,
    })
}

/// KNOR with both query sets passed through the configured correction. With
/// `with_noise`, text queries also receive the training-time L noise.
pub fn knor_for_config(
    store: &Datastore,
    images: &EmbeddingMatrix,
    texts: &EmbeddingMatrix,
    k_values: &[usize],
    cfg: &PipelineConfig,
    correctors: &Correctors,
    with_noise: bool,
) -> Result<KnorReport> {
    let images = match &correctors.image_query {
        Some(c) => c.correct_matrix(images)?,
        None => images.clone(),
    };
    let texts = texts.map_rows(|i, row| {
        let mut q = match &correctors.text_side {
            Some(c) => c.correct_slice(row)?,
            None => row.to_vec(),
        };
        if with_noise && cfg.l_noise > 0.0 {
            q = noise(&q, cfg.l_noise, cfg, Purpose::QueryNoise, i as u64);
        }
        Ok(q)
    })?;
    diagnostics::knor(store, &images, &texts, k_values)
}
