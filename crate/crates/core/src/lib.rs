//! Retrieval core for text-only-trained image captioning.
//!
//! Image and text embeddings from a dual encoder sit in offset regions of the
//! shared space. This crate closes that gap with a per-dimension mean/std
//! mapping ([`gap`]), retrieves captions from an exact flat index
//! ([`datastore`]), optionally diversifies them with MMR ([`rerank`]),
//! assembles the decoder prompt ([`prompt`]), scores generated captions
//! ([`metrics`]) and measures the remaining gap ([`diagnostics`]).
//! [`pipeline`] ties these together behind the `gapcap` command line tool.
//!
//! With the default `parallel` feature the inner loops run on rayon; without
//! it they run sequentially with identical results.

pub mod datastore;
pub mod diagnostics;
pub mod embedding;
pub mod error;
pub mod exec;
pub mod format;
pub mod gap;
pub mod metrics;
pub mod pipeline;
pub mod prompt;
pub mod rerank;
pub mod rng;

pub use datastore::{CaptionRecord, Datastore, Metric, RetrievalBundle, SearchResult};
pub use embedding::{EmbeddingMatrix, EmbeddingVector};
pub use error::{Error, Result};
pub use exec::Parallelism;
pub use gap::{CorrectionMode, GapCorrector, ModalityStats, ModalityTag, NoiseConfig};
pub use prompt::OrderingPolicy;
pub use rerank::MmrConfig;
