use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use gapcap::datastore::Datastore;
use gapcap::diagnostics;
use gapcap::error::{Error, Result};
use gapcap::exec::{self, Parallelism};
use gapcap::format::{self, read_jsonl};
use gapcap::gap::{compute_stats_with, CorrectionMode, ModalityTag};
use gapcap::metrics::EvalInstance;
use gapcap::pipeline::decoder;
use gapcap::pipeline::run::{self, CandidateLine, ReferenceLine};
use gapcap::pipeline::{CorrectionDirection, PipelineConfig, RunManifest};
use gapcap::prompt::OrderingPolicy;
use gapcap::rerank::{MmrConfig, DEFAULT_POOL_SIZE};
use gapcap::Metric;

const EXIT_ITEM_FAILURES: u8 = 1;
const EXIT_FATAL: u8 = 2;

#[derive(Parser)]
#[command(
    name = "gapcap",
    version,
    about = "Gap-corrected caption retrieval pipeline"
)]
struct Cli {
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Run every data-parallel loop on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute per-dimension modality statistics from an embedding file.
    Stats {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        tag: ModalityTag,
        #[arg(long)]
        out: PathBuf,
    },
    /// Correct caption embeddings and index them into a store file.
    Ingest {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        captions: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Caption image embeddings through retrieval, prompt and decoder.
    Infer {
        #[arg(long)]
        store: PathBuf,
        /// Image embedding file.
        #[arg(long)]
        queries: PathBuf,
        /// JSON Lines of {"image_id": n}, one per query row; row index otherwise.
        #[arg(long)]
        ids: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Build decoder training examples from text embeddings.
    TrainPairs {
        #[arg(long)]
        store: PathBuf,
        /// Text embedding file.
        #[arg(long)]
        texts: PathBuf,
        /// Caption JSONL aligned with the text rows, needed for exclude_self.
        #[arg(long)]
        captions: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Score captions with BLEU@1, BLEU@4 and CIDEr-D.
    Eval {
        /// Candidate JSONL ({"image_id", "caption"}), e.g. infer output.
        #[arg(long, requires = "references", conflicts_with = "input")]
        candidates: Option<PathBuf>,
        /// Reference JSONL ({"image_id", "references": [...]}).
        #[arg(long)]
        references: Option<PathBuf>,
        /// Combined JSONL ({"image_id", "candidate", "references"}).
        #[arg(long)]
        input: Option<PathBuf>,
        /// Report path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Modality-gap diagnostics.
    #[command(subcommand)]
    Diagnose(Diagnose),
}

#[derive(Subcommand)]
enum Diagnose {
    /// k-nearest-neighbour overlap between image and text keys.
    Knor {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        texts: PathBuf,
        /// Neighbourhood sizes to score, comma separated.
        #[arg(
            long = "k-values",
            value_delimiter = ',',
            default_value = "5,10,15,50,100"
        )]
        k_values: Vec<usize>,
        /// Add the L-scaled training noise to the text queries.
        #[arg(long)]
        noise: bool,
        /// Report path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[command(flatten)]
        config: Box<ConfigArgs>,
    },
    /// Write labelled embeddings as CSV for an external projection tool.
    Export {
        /// `label=path` pairs of embedding files.
        #[arg(long = "input", value_parser = parse_labelled, required = true)]
        inputs: Vec<(String, PathBuf)>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_labelled(s: &str) -> std::result::Result<(String, PathBuf), String> {
    let (label, path) = s
        .split_once('=')
        .ok_or_else(|| format!("expected label=path, got {s:?}"))?;
    Ok((label.to_string(), PathBuf::from(path)))
}

/// Config file plus per-field overrides. Precedence: flag, then the
/// GAPCAP_DECODER environment variable (decoder only), then the file.
#[derive(Args, Default)]
struct ConfigArgs {
    /// TOML or JSON pipeline config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    k_train: Option<usize>,
    #[arg(long)]
    l_noise: Option<f64>,
    #[arg(long)]
    b_noise: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mode: Option<CorrectionMode>,
    #[arg(long)]
    direction: Option<CorrectionDirection>,
    #[arg(long)]
    image_stats: Option<PathBuf>,
    #[arg(long)]
    text_stats: Option<PathBuf>,
    #[arg(long)]
    metric: Option<Metric>,
    /// decreasing, increasing or random:<seed>
    #[arg(long)]
    ordering: Option<OrderingPolicy>,
    /// Enable MMR re-ranking with this lambda.
    #[arg(long, allow_hyphen_values = true)]
    lambda: Option<f64>,
    #[arg(long)]
    pool_size: Option<usize>,
    /// top1, echo, exec:<cmd> or http://host:port
    #[arg(long)]
    decoder: Option<decoder::DecoderEndpoint>,
    #[arg(long)]
    timeout_ms: Option<u64>,
    #[arg(long)]
    exclude_self: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut c = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        c.apply_env()?;
        macro_rules! set {
            ($flag:ident => $($field:tt)+) => {
                if let Some(v) = self.$flag.clone() {
                    c.$($field)+ = v;
                }
            };
        }
        set!(k => k);
        set!(l_noise => l_noise);
        set!(b_noise => b_noise);
        set!(seed => seed);
        set!(mode => correction.mode);
        set!(direction => correction.direction);
        set!(metric => metric);
        set!(ordering => ordering);
        set!(decoder => decoder.endpoint);
        set!(timeout_ms => decoder.timeout_ms);
        if self.k_train.is_some() {
            c.k_train = self.k_train;
        }
        if self.image_stats.is_some() {
            c.correction.image_stats = self.image_stats.clone();
        }
        if self.text_stats.is_some() {
            c.correction.text_stats = self.text_stats.clone();
        }
        if let Some(lambda) = self.lambda {
            let base = c.rerank.unwrap_or(MmrConfig {
                lambda,
                pool_size: DEFAULT_POOL_SIZE,
                select_count: None,
            });
            c.rerank = Some(MmrConfig { lambda, ..base });
        }
        if let (Some(pool), Some(r)) = (self.pool_size, c.rerank.as_mut()) {
            r.pool_size = pool;
        }
        c.exclude_self |= self.exclude_self;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Deserialize)]
struct IdLine {
    image_id: u64,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(format!("creating {}", path.display()), e))
}

fn write_json(path: Option<&Path>, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match path {
        Some(p) => {
            std::fs::write(p, text).map_err(|e| Error::io(format!("writing {}", p.display()), e))
        }
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| Error::io("writing stdout", e)),
    }
}

fn finish_jsonl<T: serde::Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = create(path)?;
    format::write_jsonl_to(&mut w, items)?;
    w.flush()
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn run(cli: Cli) -> Result<u8> {
    let mode = if cli.sequential {
        Parallelism::Sequential
    } else {
        Parallelism::Parallel
    };
    let threads = if cli.sequential {
        1
    } else {
        exec::current_threads()
    };

    match cli.command {
        Command::Stats {
            embeddings,
            tag,
            out,
        } => {
            let m = format::read_embeddings(&embeddings)?;
            let stats = compute_stats_with(&m, tag, mode)?;
            stats.save(&out)?;
            log::info!(
                "{} stats over {} rows written to {}",
                tag,
                m.rows(),
                out.display()
            );
            Ok(0)
        }
        Command::Ingest {
            embeddings,
            captions,
            out,
            config,
        } => {
            let cfg = config.resolve()?;
            let correctors = cfg.correctors()?;
            let (store, summary) = run::ingest(&embeddings, &captions, &cfg, &correctors)?;
            store.save(&out)?;
            let mut manifest = RunManifest::new("ingest", &cfg, threads);
            manifest.input(&embeddings)?;
            manifest.input(&captions)?;
            manifest.output(&out)?;
            manifest.items = summary.rows;
            manifest.save(RunManifest::path_for(&out))?;
            log::info!("indexed {} rows of dim {}", summary.rows, summary.dim);
            Ok(0)
        }
        Command::Infer {
            store,
            queries,
            ids,
            out,
            config,
        } => {
            let cfg = config.resolve()?;
            let correctors = cfg.correctors()?;
            let ds = Datastore::load(&store)?;
            let q = format::read_embeddings(&queries)?;
            let image_ids: Option<Vec<u64>> = match &ids {
                Some(p) => Some(
                    read_jsonl::<IdLine>(p)?
                        .into_iter()
                        .map(|l| l.image_id)
                        .collect(),
                ),
                None => None,
            };
            let dec = decoder::connect(
                &cfg.decoder.endpoint,
                Duration::from_millis(cfg.decoder.timeout_ms),
            )?;
            let outputs = run::infer(
                &ds,
                &q,
                image_ids.as_deref(),
                &cfg,
                &correctors,
                dec.as_ref(),
                mode,
            )?;
            drop(dec);
            finish_jsonl(&out, &outputs)?;
            let failures = outputs.iter().filter(|o| !o.is_ok()).count();
            let mut manifest = RunManifest::new("infer", &cfg, threads);
            manifest.input(&store)?;
            manifest.input(&queries)?;
            if let Some(p) = &ids {
                manifest.input(p)?;
            }
            manifest.output(&out)?;
            manifest.items = outputs.len();
            manifest.failures = failures;
            manifest.save(RunManifest::path_for(&out))?;
            if failures > 0 {
                log::warn!("{failures} of {} items failed", outputs.len());
                return Ok(EXIT_ITEM_FAILURES);
            }
            Ok(0)
        }
        Command::TrainPairs {
            store,
            texts,
            captions,
            out,
            config,
        } => {
            let cfg = config.resolve()?;
            let correctors = cfg.correctors()?;
            let ds = Datastore::load(&store)?;
            let t = format::read_embeddings(&texts)?;
            let caption_ids: Option<Vec<u64>> = match &captions {
                Some(p) => Some(
                    read_jsonl::<gapcap::CaptionRecord>(p)?
                        .into_iter()
                        .map(|c| c.id)
                        .collect(),
                ),
                None => None,
            };
            let pairs =
                run::make_training_pairs(&ds, &t, caption_ids.as_deref(), &cfg, &correctors, mode)?;
            finish_jsonl(&out, &pairs)?;
            let failures = pairs.iter().filter(|p| !p.is_ok()).count();
            let mut manifest = RunManifest::new("train-pairs", &cfg, threads);
            manifest.input(&store)?;
            manifest.input(&texts)?;
            if let Some(p) = &captions {
                manifest.input(p)?;
            }
            manifest.output(&out)?;
            manifest.items = pairs.len();
            manifest.failures = failures;
            manifest.save(RunManifest::path_for(&out))?;
            Ok(if failures > 0 { EXIT_ITEM_FAILURES } else { 0 })
        }
        Command::Eval {
            candidates,
            references,
            input,
            out,
        } => {
            let outcome = match (candidates, references, input) {
                (Some(c), Some(r), None) => run::evaluate_join(
                    &read_jsonl::<CandidateLine>(&c)?,
                    &read_jsonl::<ReferenceLine>(&r)?,
                    mode,
                )?,
                (None, None, Some(i)) => {
                    let corpus: Vec<EvalInstance> = read_jsonl(&i)?;
                    let cands: Vec<CandidateLine> = corpus
                        .iter()
                        .map(|e| CandidateLine {
                            image_id: e.image_id,
                            caption: Some(e.candidate.clone()),
                        })
                        .collect();
                    let refs: Vec<ReferenceLine> = corpus
                        .into_iter()
                        .map(|e| ReferenceLine {
                            image_id: e.image_id,
                            references: e.references,
                        })
                        .collect();
                    run::evaluate_join(&cands, &refs, mode)?
                }
                _ => {
                    return Err(Error::Config(
                        "eval needs --candidates with --references, or --input".into(),
                    ))
                }
            };
            let r = &outcome.report;
            eprintln!(
                "BLEU@1 {:.1}  BLEU@4 {:.1}  CIDEr {:.1}  ({} instances)",
                r.bleu1 * 100.0,
                r.bleu4 * 100.0,
                r.cider * 100.0,
                r.instance_count
            );
            if r.idf_degenerate {
                log::warn!("single-instance corpus: CIDEr IDF weights are all zero");
            }
            write_json(out.as_deref(), &outcome)?;
            Ok(0)
        }
        Command::Diagnose(Diagnose::Knor {
            store,
            images,
            texts,
            k_values,
            noise,
            out,
            csv,
            config,
        }) => {
            let cfg = config.resolve()?;
            let correctors = cfg.correctors()?;
            let ds = Datastore::load(&store)?;
            let img = format::read_embeddings(&images)?;
            let txt = format::read_embeddings(&texts)?;
            let report =
                run::knor_for_config(&ds, &img, &txt, &k_values, &cfg, &correctors, noise)?;
            write_json(out.as_deref(), &report)?;
            if let Some(p) = csv {
                report.write_csv(create(&p)?)?;
            }
            Ok(0)
        }
        Command::Diagnose(Diagnose::Export { inputs, out }) => {
            let loaded: Vec<(String, gapcap::EmbeddingMatrix)> = inputs
                .into_iter()
                .map(|(label, p)| Ok((label, format::read_embeddings(&p)?)))
                .collect::<Result<_>>()?;
            let refs: Vec<(&str, &gapcap::EmbeddingMatrix)> =
                loaded.iter().map(|(l, m)| (l.as_str(), m)).collect();
            diagnostics::export_projection_input(&refs, &out)?;
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = exec::configure_threads(n) {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(EXIT_FATAL);
        }
    }
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_FATAL)
        }
    }
}
