use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datastore::Metric;
use crate::error::{Error, Result};
use crate::gap::{
    CorrectionMode, GapCorrector, ModalityStats, NoiseStdMode, DEFAULT_EPSILON_FLOOR,
};
use crate::prompt::OrderingPolicy;
use crate::rerank::MmrConfig;

use super::decoder::DecoderEndpoint;

pub const DECODER_ENV: &str = "GAPCAP_DECODER";

/// Run configuration. Defaults: K = 4, L = 0.1, B = 0.125, decreasing
/// caption order, mean/std correction, no re-ranking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Captions per prompt at inference.
    #[serde(alias = "K")]
    pub k: usize,
    /// Captions per prompt when building training pairs; falls back to `k`.
    #[serde(alias = "K_train")]
    pub k_train: Option<usize>,
    /// Noise scale on the retrieval side.
    #[serde(alias = "L")]
    pub l_noise: f64,
    /// Noise scale on the decoder payload.
    #[serde(alias = "B")]
    pub b_noise: f64,
    pub noise: NoiseSettings,
    pub correction: CorrectionSettings,
    pub ordering: OrderingPolicy,
    pub rerank: Option<MmrConfig>,
    pub metric: Metric,
    pub seed: u64,
    pub decoder: DecoderSettings,
    /// Items processed concurrently before results are flushed in order.
    pub max_in_flight: usize,
    /// Drop the query's own caption from training retrieval.
    pub exclude_self: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            k: 4,
            k_train: None,
            l_noise: 0.1,
            b_noise: 0.125,
            noise: NoiseSettings::default(),
            correction: CorrectionSettings::default(),
            ordering: OrderingPolicy::Decreasing,
            rerank: None,
            metric: Metric::L2,
            seed: 0,
            decoder: DecoderSettings::default(),
            max_in_flight: 64,
            exclude_self: false,
        }
    }
}

/// Which embeddings receive noise. L-scaled noise goes to retrieval queries
/// or datastore rows; B-scaled noise goes to the vectors sent to the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSettings {
    pub std_mode: NoiseStdMode,
    pub train_query: bool,
    pub infer_query: bool,
    pub datastore: bool,
    pub decoder_payload: bool,
}

impl Default for NoiseSettings {
    fn default() -> Self {
        Self {
            std_mode: NoiseStdMode::Fixed,
            train_query: true,
            infer_query: false,
            datastore: false,
            decoder_payload: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectionDirection {
    /// Image queries are mapped into text space; the datastore and training
    /// queries stay as encoded.
    #[default]
    ImageToText,
    /// Datastore rows and training queries are mapped into image space;
    /// image queries stay as encoded.
    TextToImage,
}

impl std::str::FromStr for CorrectionDirection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image_to_text" => Ok(Self::ImageToText),
            "text_to_image" => Ok(Self::TextToImage),
            other => Err(Error::Config(format!(
                "unknown correction direction {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrectionSettings {
    pub mode: CorrectionMode,
    pub direction: CorrectionDirection,
    pub image_stats: Option<PathBuf>,
    pub text_stats: Option<PathBuf>,
    pub epsilon_floor: f64,
}

impl Default for CorrectionSettings {
    fn default() -> Self {
        Self {
            mode: CorrectionMode::MeanStd,
            direction: CorrectionDirection::ImageToText,
            image_stats: None,
            text_stats: None,
            epsilon_floor: DEFAULT_EPSILON_FLOOR,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderSettings {
    pub endpoint: DecoderEndpoint,
    pub timeout_ms: u64,
}

impl Default for DecoderSettings {
    fn default() -> Self {
        Self {
            endpoint: DecoderEndpoint::Top1,
            timeout_ms: 30_000,
        }
    }
}

/// Correctors resolved from a config, one per side that needs mapping.
#[derive(Debug, Clone, Default)]
pub struct Correctors {
    /// Applied to image queries at inference.
    pub image_query: Option<GapCorrector>,
    /// Applied to datastore rows at ingest and to training queries.
    pub text_side: Option<GapCorrector>,
}

impl PipelineConfig {
    /// Load from TOML, or JSON when the extension is `.json`. Relative stats
    /// paths are resolved against the config file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut cfg: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        if let Some(dir) = path.parent() {
            for p in [
                &mut cfg.correction.image_stats,
                &mut cfg.correction.text_stats,
            ]
            .into_iter()
            .flatten()
            {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    /// Replace the decoder endpoint from the environment when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(DECODER_ENV) {
            if !v.trim().is_empty() {
                self.decoder.endpoint = v.parse()?;
            }
        }
        Ok(())
    }

    pub fn train_k(&self) -> usize {
        self.k_train.unwrap_or(self.k)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k_train == Some(0) {
            return Err(Error::Config("K must be at least 1".into()));
        }
        for (name, v) in [("L", self.l_noise), ("B", self.b_noise)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if let Some(r) = &self.rerank {
            r.validate(self.k)?;
        }
        if self.max_in_flight == 0 {
            return Err(Error::Config("max_in_flight must be positive".into()));
        }
        if self.correction.epsilon_floor.is_nan() || self.correction.epsilon_floor <= 0.0 {
            return Err(Error::Config("epsilon_floor must be positive".into()));
        }
        Ok(())
    }

    pub fn correctors(&self) -> Result<Correctors> {
        let c = &self.correction;
        if c.mode == CorrectionMode::None {
            return Ok(Correctors::default());
        }
        let load = |p: &Option<PathBuf>, which: &str| -> Result<ModalityStats> {
            let p = p.as_ref().ok_or_else(|| {
                Error::Config(format!(
                    "correction mode {:?} needs correction.{which}_stats",
                    c.mode
                ))
            })?;
            ModalityStats::load(p)
        };
        let image = load(&c.image_stats, "image")?;
        let text = load(&c.text_stats, "text")?;
        Ok(match c.direction {
            CorrectionDirection::ImageToText => Correctors {
                image_query: Some(GapCorrector::new(image, text, c.mode, c.epsilon_floor)?),
                text_side: None,
            },
            CorrectionDirection::TextToImage => Correctors {
                image_query: None,
                text_side: Some(GapCorrector::new(text, image, c.mode, c.epsilon_floor)?),
            },
        })
    }
}
