//! Modality statistics, mean/std gap correction and Gaussian noise injection.
//!
//! Correction maps an embedding from a source modality's per-dimension
//! distribution onto a target's:
//!
//! ```text
//! out[d] = (e[d] - src.mean[d]) * tgt.std[d] / max(src.std[d], epsilon_floor) + tgt.mean[d]
//! ```
//!
//! Dimensions are treated independently. Standard deviations use the
//! population (divide-by-N) convention everywhere, including stats files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embedding::{euclidean, EmbeddingMatrix, EmbeddingVector};
use crate::error::{Error, Result};
use crate::exec::{self, Parallelism};
use crate::rng::{self, Rng};

pub const DEFAULT_EPSILON_FLOOR: f64 = 1e-8;
pub const STATS_FILE_VERSION: u32 = 1;

const STATS_BLOCK_ROWS: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModalityTag {
    Image,
    Text,
}

impl std::fmt::Display for ModalityTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModalityTag::Image => "image",
            ModalityTag::Text => "text",
        })
    }
}

impl std::str::FromStr for ModalityTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(ModalityTag::Image),
            "text" => Ok(ModalityTag::Text),
            other => Err(Error::Config(format!("unknown modality tag {other:?}"))),
        }
    }
}

/// Per-dimension mean and population standard deviation of one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub sample_count: u64,
    pub modality_tag: ModalityTag,
}

#[derive(Serialize, Deserialize)]
struct StatsFile {
    version: u32,
    dim: usize,
    modality_tag: ModalityTag,
    sample_count: u64,
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl ModalityStats {
    pub fn new(
        mean: Vec<f64>,
        std: Vec<f64>,
        sample_count: u64,
        modality_tag: ModalityTag,
    ) -> Result<Self> {
        if mean.is_empty() {
            return Err(Error::InvalidEmbedding("zero-dimensional stats".into()));
        }
        Error::check_dim(mean.len(), std.len())?;
        if sample_count < 2 {
            return Err(Error::StatsInsufficientData {
                rows: sample_count as usize,
            });
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidEmbedding("non-finite mean".into()));
        }
        if std.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidEmbedding(
                "standard deviations must be finite and non-negative".into(),
            ));
        }
        Ok(Self {
            mean,
            std,
            sample_count,
            modality_tag,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&StatsFile {
            version: STATS_FILE_VERSION,
            dim: self.dim(),
            modality_tag: self.modality_tag,
            sample_count: self.sample_count,
            mean: self.mean.clone(),
            std: self.std.clone(),
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_file_repr(serde_json::from_str(s)?)
    }

    fn from_file_repr(f: StatsFile) -> Result<Self> {
        if f.version != STATS_FILE_VERSION {
            return Err(Error::Config(format!(
                "unsupported stats file version {}",
                f.version
            )));
        }
        Error::check_dim(f.dim, f.mean.len())?;
        Self::new(f.mean, f.std, f.sample_count, f.modality_tag)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file =
            File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        let mut w = BufWriter::new(file);
        w.write_all(self.to_json()?.as_bytes())
            .and_then(|_| w.write_all(b"\n"))
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file =
            File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        Self::from_file_repr(serde_json::from_reader(BufReader::new(file))?)
    }
}

pub fn compute_stats(matrix: &EmbeddingMatrix, tag: ModalityTag) -> Result<ModalityStats> {
    compute_stats_with(matrix, tag, Parallelism::default())
}

/// Two-pass mean / population std. Rows are reduced in fixed blocks and the
/// block partials combined in block order, so the result does not depend on
/// the thread count.
pub fn compute_stats_with(
    matrix: &EmbeddingMatrix,
    tag: ModalityTag,
    mode: Parallelism,
) -> Result<ModalityStats> {
    let n = matrix.rows();
    if n < 2 {
        return Err(Error::StatsInsufficientData { rows: n });
    }
    let dim = matrix.dim();
    let blocks = exec::blocks(n, STATS_BLOCK_ROWS);

    let block_sums = |f: &(dyn Fn(usize, f64) -> f64 + Sync)| -> Vec<f64> {
        let partials = exec::map_slice(&blocks, mode, |range| {
            let mut acc = vec![0.0; dim];
            for i in range.clone() {
                for (d, (a, &x)) in acc.iter_mut().zip(matrix.row(i)).enumerate() {
                    *a += f(d, x);
                }
            }
            acc
        });
        let mut total = vec![0.0; dim];
        for p in partials {
            for (t, v) in total.iter_mut().zip(p) {
                *t += v;
            }
        }
        total
    };

    let mean: Vec<f64> = block_sums(&|_, x| x)
        .into_iter()
        .map(|s| s / n as f64)
        .collect();
    let std: Vec<f64> = block_sums(&|d, x| (x - mean[d]) * (x - mean[d]))
        .into_iter()
        .map(|s| (s / n as f64).sqrt())
        .collect();

    ModalityStats::new(mean, std, n as u64, tag)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectionMode {
    None,
    MeanOnly,
    #[default]
    MeanStd,
}

impl std::str::FromStr for CorrectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(CorrectionMode::None),
            "mean_only" => Ok(CorrectionMode::MeanOnly),
            "mean_std" => Ok(CorrectionMode::MeanStd),
            other => Err(Error::Config(format!("unknown correction mode {other:?}"))),
        }
    }
}

/// Maps embeddings from the source modality's distribution onto the target's.
#[derive(Debug, Clone)]
pub struct GapCorrector {
    source: ModalityStats,
    target: ModalityStats,
    mode: CorrectionMode,
    epsilon_floor: f64,
}

impl GapCorrector {
    pub fn new(
        source: ModalityStats,
        target: ModalityStats,
        mode: CorrectionMode,
        epsilon_floor: f64,
    ) -> Result<Self> {
        Error::check_dim(source.dim(), target.dim())?;
        if !(epsilon_floor > 0.0 && epsilon_floor.is_finite()) {
            return Err(Error::Config(format!(
                "epsilon_floor must be positive, got {epsilon_floor}"
            )));
        }
        Ok(Self {
            source,
            target,
            mode,
            epsilon_floor,
        })
    }

    /// The corrector for the opposite direction.
    pub fn inverse(&self) -> Self {
        Self {
            source: self.target.clone(),
            target: self.source.clone(),
            mode: self.mode,
            epsilon_floor: self.epsilon_floor,
        }
    }

    pub fn with_mode(mut self, mode: CorrectionMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn mode(&self) -> CorrectionMode {
        self.mode
    }

    pub fn dim(&self) -> usize {
        self.source.dim()
    }

    pub fn source(&self) -> &ModalityStats {
        &self.source
    }

    pub fn target(&self) -> &ModalityStats {
        &self.target
    }

    pub fn correct_slice(&self, e: &[f64]) -> Result<Vec<f64>> {
        Error::check_dim(self.dim(), e.len())?;
        let (src, tgt) = (&self.source, &self.target);
        Ok(match self.mode {
            CorrectionMode::None => e.to_vec(),
            CorrectionMode::MeanOnly => e
                .iter()
                .enumerate()
                .map(|(d, &x)| x - src.mean[d] + tgt.mean[d])
                .collect(),
            CorrectionMode::MeanStd => e
                .iter()
                .enumerate()
                .map(|(d, &x)| {
                    (x - src.mean[d]) * (tgt.std[d] / src.std[d].max(self.epsilon_floor))
                        + tgt.mean[d]
                })
                .collect(),
        })
    }

    pub fn correct(&self, e: &EmbeddingVector) -> Result<EmbeddingVector> {
        EmbeddingVector::new(self.correct_slice(e.as_slice())?)
    }

    pub fn correct_matrix(&self, m: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
        Error::check_dim(self.dim(), m.dim())?;
        m.map_rows(|_, row| self.correct_slice(row))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseStdMode {
    /// Every dimension uses the configured scale.
    #[default]
    Fixed,
    /// Each call draws per-dimension scales `|w| * scale`, `w ~ N(0, 1)`.
    Resampled,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseConfig {
    pub scale: f64,
    pub per_dim_std_mode: NoiseStdMode,
    pub seed: u64,
}

impl NoiseConfig {
    pub fn new(scale: f64, per_dim_std_mode: NoiseStdMode, seed: u64) -> Result<Self> {
        if !(scale >= 0.0 && scale.is_finite()) {
            return Err(Error::Config(format!(
                "noise scale must be finite and >= 0, got {scale}"
            )));
        }
        Ok(Self {
            scale,
            per_dim_std_mode,
            seed,
        })
    }
}

/// Adds `z_d * s_d` to each coordinate, with `z_d ~ N(0, 1)` drawn from `rng`.
///
/// Draw order per dimension is `z_d`, then `w_d` in resampled mode. A zero
/// scale returns the input without touching the generator.
pub fn inject_noise_with(e: &[f64], scale: f64, mode: NoiseStdMode, rng: &mut Rng) -> Vec<f64> {
    if scale == 0.0 {
        return e.to_vec();
    }
    e.iter()
        .map(|&x| {
            let z: f64 = rng.sample(StandardNormal);
            let s = match mode {
                NoiseStdMode::Fixed => scale,
                NoiseStdMode::Resampled => rng.sample::<f64, _>(StandardNormal).abs() * scale,
            };
            x + z * s
        })
        .collect()
}

/// A seeded noise source; successive calls continue the same stream.
#[derive(Debug, Clone)]
pub struct NoiseInjector {
    cfg: NoiseConfig,
    rng: Rng,
}

impl NoiseInjector {
    pub fn new(cfg: NoiseConfig) -> Self {
        Self {
            rng: rng::seeded(cfg.seed),
            cfg,
        }
    }

    pub fn inject(&mut self, e: &EmbeddingVector) -> EmbeddingVector {
        EmbeddingVector::from_trusted(inject_noise_with(
            e.as_slice(),
            self.cfg.scale,
            self.cfg.per_dim_std_mode,
            &mut self.rng,
        ))
    }
}

/// One-shot noise injection on a fresh generator seeded from `cfg.seed`.
pub fn inject_noise(e: &EmbeddingVector, cfg: &NoiseConfig) -> EmbeddingVector {
    NoiseInjector::new(*cfg).inject(e)
}

/// Mean Euclidean distance between `corrector(image_i)` and `text_i` over all
/// pairs. The corrector is applied to the image side only.
pub fn gap_radius(
    paired_image: &EmbeddingMatrix,
    paired_text: &EmbeddingMatrix,
    corrector: &GapCorrector,
) -> Result<f64> {
    gap_radius_with(paired_image, paired_text, corrector, Parallelism::default())
}

pub fn gap_radius_with(
    paired_image: &EmbeddingMatrix,
    paired_text: &EmbeddingMatrix,
    corrector: &GapCorrector,
    mode: Parallelism,
) -> Result<f64> {
    if paired_image.rows() != paired_text.rows() {
        return Err(Error::PairMismatch {
            left: paired_image.rows(),
            right: paired_text.rows(),
        });
    }
    Error::check_dim(paired_image.dim(), paired_text.dim())?;
    Error::check_dim(corrector.dim(), paired_image.dim())?;
    let n = paired_image.rows();
    if n == 0 {
        return Err(Error::InvalidEmbedding("no pairs to measure".into()));
    }
    let dists = exec::map_range(n, mode, |i| {
        corrector
            .correct_slice(paired_image.row(i))
            .map(|c| euclidean(&c, paired_text.row(i)))
    });
    let mut total = 0.0;
    for d in dists {
        total += d?;
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn stats(mean: &[f64], std: &[f64], tag: ModalityTag) -> ModalityStats {
        ModalityStats::new(mean.to_vec(), std.to_vec(), 10, tag).unwrap()
    }

    #[test]
    fn two_point_stats() {
        let m = EmbeddingMatrix::from_rows(&[[0.0, 0.0], [2.0, 2.0]]).unwrap();
        let s = compute_stats(&m, ModalityTag::Text).unwrap();
        assert_eq!(s.mean, vec![1.0, 1.0]);
        assert_eq!(s.std, vec![1.0, 1.0]);
        assert_eq!(s.sample_count, 2);
    }

    #[test]
    fn identical_rows_have_zero_std() {
        let v = [0.25, -3.0, 7.5];
        let m = EmbeddingMatrix::from_rows(&[v; 6]).unwrap();
        let s = compute_stats(&m, ModalityTag::Image).unwrap();
        assert_eq!(s.mean, v.to_vec());
        assert_eq!(s.std, vec![0.0; 3]);
    }

    #[test]
    fn too_few_rows() {
        let m = EmbeddingMatrix::from_rows(&[[1.0]]).unwrap();
        assert!(matches!(
            compute_stats(&m, ModalityTag::Text),
            Err(Error::StatsInsufficientData { rows: 1 })
        ));
    }

    #[test]
    fn gaussian_sample_stats_match_scalar_loop() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let normal = rand_distr::Normal::new(3.0, 2.0).unwrap();
        let rows: Vec<Vec<f64>> = (0..100)
            .map(|_| (0..5).map(|_| rng.sample(normal)).collect())
            .collect();
        let m = EmbeddingMatrix::from_rows(&rows).unwrap();
        let s = compute_stats(&m, ModalityTag::Image).unwrap();
        for d in 0..5 {
            // one-pass scalar oracle
            let (mut sum, mut sq) = (0.0, 0.0);
            for r in &rows {
                sum += r[d];
                sq += r[d] * r[d];
            }
            let mean = sum / 100.0;
            let std = (sq / 100.0 - mean * mean).sqrt();
            assert!((s.mean[d] - mean).abs() < 1e-10);
            assert!((s.std[d] - std).abs() < 1e-9);
            assert!((s.mean[d] - 3.0).abs() < 0.5);
            assert!((s.std[d] - 2.0).abs() < 0.5);
        }
    }

    #[test]
    fn sequential_and_parallel_stats_are_bit_identical() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<Vec<f64>> = (0..5000)
            .map(|_| (0..3).map(|_| rng.random::<f64>() * 100.0).collect())
            .collect();
        let m = EmbeddingMatrix::from_rows(&rows).unwrap();
        let a = compute_stats_with(&m, ModalityTag::Text, Parallelism::Parallel).unwrap();
        let b = compute_stats_with(&m, ModalityTag::Text, Parallelism::Sequential).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn hand_substitution() {
        let c = GapCorrector::new(
            stats(&[1.0], &[1.0], ModalityTag::Text),
            stats(&[10.0], &[3.0], ModalityTag::Image),
            CorrectionMode::MeanStd,
            DEFAULT_EPSILON_FLOOR,
        )
        .unwrap();
        assert_eq!(c.correct_slice(&[2.0]).unwrap(), vec![13.0]);
        assert_eq!(
            c.clone()
                .with_mode(CorrectionMode::MeanOnly)
                .correct_slice(&[2.0])
                .unwrap(),
            vec![11.0]
        );
        assert_eq!(
            c.with_mode(CorrectionMode::None)
                .correct_slice(&[2.0])
                .unwrap(),
            vec![2.0]
        );
    }

    #[test]
    fn identical_stats_are_identity() {
        let s = stats(&[0.5, -1.0], &[2.0, 0.3], ModalityTag::Text);
        let c = GapCorrector::new(s.clone(), s, CorrectionMode::MeanStd, 1e-8).unwrap();
        assert_eq!(c.correct_slice(&[4.0, 9.0]).unwrap(), vec![4.0, 9.0]);
    }

    #[test]
    fn zero_source_std_is_floored() {
        let c = GapCorrector::new(
            stats(&[1.0], &[0.0], ModalityTag::Text),
            stats(&[0.0], &[1.0], ModalityTag::Image),
            CorrectionMode::MeanStd,
            1e-8,
        )
        .unwrap();
        let out = c.correct_slice(&[1.0 + 1e-9]).unwrap();
        assert!(out[0].is_finite());
        assert!((out[0] - 0.1).abs() < 1e-6);
    }

    #[test]
    fn dim_checks() {
        let a = stats(&[0.0, 0.0], &[1.0, 1.0], ModalityTag::Text);
        let b = stats(&[0.0], &[1.0], ModalityTag::Image);
        assert!(matches!(
            GapCorrector::new(a.clone(), b, CorrectionMode::MeanStd, 1e-8),
            Err(Error::DimMismatch { .. })
        ));
        let c = GapCorrector::new(a.clone(), a, CorrectionMode::MeanStd, 1e-8).unwrap();
        assert!(matches!(
            c.correct_slice(&[1.0]),
            Err(Error::DimMismatch {
                expected: 2,
                actual: 1
            })
        ));
    }

    #[test]
    fn stats_json_round_trips_exactly() {
        let s = ModalityStats::new(
            vec![0.1, 1.0 / 3.0, -2.5e-17],
            vec![std::f64::consts::PI, 0.0, 1e300],
            12345,
            ModalityTag::Image,
        )
        .unwrap();
        let json = s.to_json().unwrap();
        assert!(json.contains("\"version\": 1"));
        assert!(json.contains("\"modality_tag\": \"image\""));
        assert_eq!(ModalityStats::from_json(&json).unwrap(), s);
    }

    #[test]
    fn noise_zero_scale_and_determinism() {
        let e = EmbeddingVector::new(vec![1.0, 2.0, 3.0]).unwrap();
        let zero = NoiseConfig::new(0.0, NoiseStdMode::Fixed, 1).unwrap();
        assert_eq!(inject_noise(&e, &zero), e);

        for mode in [NoiseStdMode::Fixed, NoiseStdMode::Resampled] {
            let cfg = NoiseConfig::new(0.5, mode, 99).unwrap();
            let a = inject_noise(&e, &cfg);
            let b = inject_noise(&e, &cfg);
            assert_eq!(a, b);
            assert_ne!(a, e);
        }
        assert!(NoiseConfig::new(-1.0, NoiseStdMode::Fixed, 0).is_err());
    }

    #[test]
    fn fixed_noise_has_configured_std() {
        let e = EmbeddingVector::new(vec![0.0; 4]).unwrap();
        let mut inj = NoiseInjector::new(NoiseConfig::new(0.1, NoiseStdMode::Fixed, 3).unwrap());
        let n = 10_000;
        let mut sq = [0.0; 4];
        for _ in 0..n {
            let out = inj.inject(&e);
            for (acc, v) in sq.iter_mut().zip(out.as_slice()) {
                *acc += v.powi(2);
            }
        }
        for s in sq {
            let std = (s / n as f64).sqrt();
            assert!((std - 0.1).abs() < 0.005, "std {std}");
        }
    }

    #[test]
    fn gap_radius_basics() {
        let img = EmbeddingMatrix::from_rows(&[[0.0, 1.0], [2.0, 3.0], [4.0, -1.0]]).unwrap();
        let txt = img
            .map_rows(|_, r| Ok(vec![r[0] + 5.0, r[1] - 2.0]))
            .unwrap();
        let si = compute_stats(&img, ModalityTag::Image).unwrap();
        let st = compute_stats(&txt, ModalityTag::Text).unwrap();
        let none = GapCorrector::new(si.clone(), si.clone(), CorrectionMode::None, 1e-8).unwrap();
        assert_eq!(gap_radius(&img, &img, &none).unwrap(), 0.0);

        let mean_only = GapCorrector::new(si, st, CorrectionMode::MeanOnly, 1e-8).unwrap();
        assert!(gap_radius(&img, &txt, &mean_only).unwrap() < 1e-12);

        let short = EmbeddingMatrix::from_rows(&[[0.0, 1.0]]).unwrap();
        assert!(matches!(
            gap_radius(&img, &short, &mean_only),
            Err(Error::PairMismatch { left: 3, right: 1 })
        ));
    }
}
