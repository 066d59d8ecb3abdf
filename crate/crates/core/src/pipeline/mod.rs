//! Batch orchestration: ingest, inference, training-pair generation,
//! evaluation and diagnostics, plus the decoder wire protocol.

pub mod config;
pub mod decoder;
pub mod manifest;
pub mod run;

pub use config::{CorrectionDirection, Correctors, PipelineConfig};
pub use decoder::{Decoder, DecoderEndpoint, DecoderError, DecoderRequest, DecoderResponse};
pub use manifest::RunManifest;
pub use run::{CaptionOutput, TrainingPair};
