//! Command-line front end. Every subcommand is a thin adapter over one
//! library call; machine-readable output goes to stdout (or `--out`),
//! diagnostics to stderr.
//!
//! Exit codes: 0 success, 1 validation or input error, 2 backend failure.

use std::collections::BTreeSet;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::embedding::{Embedding, LinearMapper};
use crate::error::{Error, Result};
use crate::eval::{self, GapSpec};
use crate::formats::{parse_meta, parse_queries, parse_vectors};
use crate::llm_client::{
    BackendConfig, CaptionBackend, HttpBackend, MockBackend, RecordingBackend, ReplayBackend, Transcript,
};
use crate::pipeline::{
    self, write_jsonl, AdaptMode, CaptionSettings, DomainProfile, RetrievalQuery, DEFAULT_MAX_TOKENS, DEFAULT_PROMPT,
};
use crate::projection::{project_detailed, ProjectionConfig};
use crate::retrieval::{
    derive_seed, retrieve_in_range, retrieve_topk, RetrievalConfig, RetrievalMode, DEFAULT_K, DEFAULT_S_MAX,
    DEFAULT_S_MIN,
};
use crate::store::{self, build_store, load_store, save_store, CaptionStore, RawRecord};

#[derive(Debug, Parser)]
#[command(
    name = "ragcap",
    version,
    about = "Retrieval-augmented captioning from precomputed embeddings"
)]
pub struct Cli {
    /// TOML run configuration; command-line flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build an embedding support from metadata plus vectors.
    BuildSupport(BuildArgs),
    /// Build a caption datastore from metadata plus vectors.
    BuildDatastore(BuildArgs),
    /// Concatenate two stores.
    Merge(MergeArgs),
    /// Drop entries whose source tag is excluded.
    Filter(FilterArgs),
    /// Retrieve captions for query embeddings.
    Retrieve(RetrieveArgs),
    /// Project query embeddings onto a support.
    Project(ProjectArgs),
    /// Write training examples (one JSON object per line).
    MakeTrainData(TrainArgs),
    /// Caption query embeddings.
    Caption(CaptionArgs),
    /// Replace or augment a support/datastore pair.
    Adapt(AdaptArgs),
    /// Modality-gap statistics for paired embeddings or a synthetic corpus.
    GapStats(GapArgs),
    /// Caption-reconstruction rate over a temperature sweep.
    Roundtrip(RoundtripArgs),
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    /// Metadata rows: `id<TAB>source<TAB>text`.
    #[arg(long, value_name = "FILE")]
    pub meta: PathBuf,
    /// Decimal vectors, one per line, in metadata order.
    #[arg(
        long,
        value_name = "FILE",
        conflicts_with = "embeddings",
        required_unless_present = "embeddings"
    )]
    pub vectors: Option<PathBuf>,
    /// Binary embedding file (store layout), in metadata order; rows need not be normalized.
    #[arg(long, value_name = "FILE")]
    pub embeddings: Option<PathBuf>,
    /// Store label; defaults to the output file stem.
    #[arg(long)]
    pub label: Option<String>,
    /// Output store path; metadata is written next to it with a `.tsv` suffix.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    /// First store (its entries come first).
    #[arg(long, value_name = "FILE")]
    pub a: PathBuf,
    /// Second store.
    #[arg(long, value_name = "FILE")]
    pub b: PathBuf,
    /// Drop later entries whose text exactly matches an earlier one.
    #[arg(long)]
    pub dedup: bool,
    /// Output store path.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    /// Input store.
    #[arg(long, value_name = "FILE")]
    pub store: PathBuf,
    /// Source tags to drop (comma-separated or repeated).
    #[arg(long, value_delimiter = ',')]
    pub exclude: Vec<String>,
    /// Output store path.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Training,
    Inference,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    /// Datastore to search (overrides `datastore` in the config).
    #[arg(long, value_name = "FILE")]
    pub datastore: Option<PathBuf>,
    /// Queries: `id<TAB>vector` per line.
    #[arg(long, value_name = "FILE")]
    pub queries: PathBuf,
    /// Number of captions per query.
    #[arg(long)]
    pub k: Option<usize>,
    /// `training` samples from the similarity window, `inference` takes the top-k.
    #[arg(long, value_enum, default_value = "inference")]
    pub mode: ModeArg,
    /// Lower similarity bound (training mode).
    #[arg(long, allow_hyphen_values = true)]
    pub s_min: Option<f64>,
    /// Upper similarity bound (training mode).
    #[arg(long, allow_hyphen_values = true)]
    pub s_max: Option<f64>,
    /// Base seed for window sampling; each query uses its own derived stream.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output file (default stdout).
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProjectArgs {
    /// Support store (overrides `support` in the config).
    #[arg(long, value_name = "FILE")]
    pub support: Option<PathBuf>,
    /// Queries: `id<TAB>vector` per line.
    #[arg(long, value_name = "FILE")]
    pub queries: PathBuf,
    /// Softmax temperature.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Emit the raw weighted sum instead of renormalizing it.
    #[arg(long)]
    pub raw: bool,
    /// Output file (default stdout).
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Caption corpus with text embeddings (one example per entry).
    #[arg(long, value_name = "FILE")]
    pub corpus: PathBuf,
    /// Datastore for similar-caption retrieval (overrides the config).
    #[arg(long, value_name = "FILE")]
    pub datastore: Option<PathBuf>,
    /// Mapper file; identity when absent.
    #[arg(long, value_name = "FILE")]
    pub mapper: Option<PathBuf>,
    /// Number of similar captions per example.
    #[arg(long)]
    pub k: Option<usize>,
    /// Lower similarity bound.
    #[arg(long, allow_hyphen_values = true)]
    pub s_min: Option<f64>,
    /// Upper similarity bound.
    #[arg(long, allow_hyphen_values = true)]
    pub s_max: Option<f64>,
    /// Base seed (required here or in the config).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fixed instruction prompt.
    #[arg(long)]
    pub prompt: Option<String>,
    /// Output file (default stdout).
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum BackendArg {
    Mock,
    Http,
    Replay,
}

#[derive(Debug, Args)]
pub struct CaptionArgs {
    /// Support store (overrides the config).
    #[arg(long, value_name = "FILE")]
    pub support: Option<PathBuf>,
    /// Datastore (overrides the config).
    #[arg(long, value_name = "FILE")]
    pub datastore: Option<PathBuf>,
    /// Mapper file; identity when absent.
    #[arg(long, value_name = "FILE")]
    pub mapper: Option<PathBuf>,
    /// Audio embeddings: `id<TAB>vector` per line.
    #[arg(long, value_name = "FILE")]
    pub queries: PathBuf,
    /// Generation backend.
    #[arg(long, value_enum, default_value = "mock")]
    pub backend: BackendArg,
    /// HTTP endpoint for `--backend http`.
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Per-request timeout in milliseconds.
    #[arg(long)]
    pub timeout_ms: Option<u64>,
    /// Retries after a transient failure.
    #[arg(long)]
    pub max_retries: Option<u32>,
    /// Maximum concurrent backend requests.
    #[arg(long)]
    pub max_in_flight: Option<usize>,
    /// Environment variable holding the bearer token.
    #[arg(long)]
    pub token_env: Option<String>,
    /// Transcript to answer from with `--backend replay`.
    #[arg(long, value_name = "FILE")]
    pub transcript: Option<PathBuf>,
    /// Record the exchanges of this run to a transcript file.
    #[arg(long, value_name = "FILE")]
    pub record: Option<PathBuf>,
    /// Projection temperature.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Feed the raw audio embedding to the decoder.
    #[arg(long)]
    pub no_projection: bool,
    /// Query the datastore with the projected embedding instead of the audio embedding.
    #[arg(long)]
    pub query_with_projection: bool,
    /// Captions retrieved per item.
    #[arg(long)]
    pub k: Option<usize>,
    /// Run seed (required here or in the config).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads.
    #[arg(long)]
    pub parallelism: Option<usize>,
    /// Fixed instruction prompt.
    #[arg(long)]
    pub prompt: Option<String>,
    /// Token budget sent to the backend.
    #[arg(long)]
    pub max_tokens: Option<u32>,
    /// Output file (default stdout).
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum AdaptArg {
    Replace,
    Augment,
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    /// Current support (overrides the config).
    #[arg(long, value_name = "FILE")]
    pub support: Option<PathBuf>,
    /// Current datastore (overrides the config).
    #[arg(long, value_name = "FILE")]
    pub datastore: Option<PathBuf>,
    /// Target-domain support captions.
    #[arg(long, value_name = "FILE")]
    pub new_support: PathBuf,
    /// Target-domain datastore captions.
    #[arg(long, value_name = "FILE")]
    pub new_datastore: PathBuf,
    /// `replace` swaps the stores, `augment` merges them (deduplicated by text).
    #[arg(long, value_enum)]
    pub mode: AdaptArg,
    /// Output path for the adapted support.
    #[arg(long, value_name = "FILE")]
    pub out_support: PathBuf,
    /// Output path for the adapted datastore.
    #[arg(long, value_name = "FILE")]
    pub out_datastore: PathBuf,
}

#[derive(Debug, Args)]
pub struct GapArgs {
    /// Generate a synthetic paired corpus instead of reading files.
    #[arg(long, conflicts_with_all = ["texts", "audio"])]
    pub synthetic: bool,
    /// Text store; row i pairs with audio row i.
    #[arg(long, value_name = "FILE", required_unless_present = "synthetic", requires = "audio")]
    pub texts: Option<PathBuf>,
    /// Audio embeddings: `id<TAB>vector` per line.
    #[arg(long, value_name = "FILE")]
    pub audio: Option<PathBuf>,
    /// Synthetic dimension.
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    /// Synthetic pair count.
    #[arg(long, default_value_t = 500)]
    pub pairs: usize,
    /// Synthetic modality offset norm.
    #[arg(long, default_value_t = 0.5)]
    pub offset: f64,
    /// Synthetic per-component noise deviation.
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    /// Synthetic seed (required with --synthetic, here or in the config).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct RoundtripArgs {
    /// Corpus installed as both support and datastore.
    #[arg(long, value_name = "FILE")]
    pub corpus: PathBuf,
    /// Temperatures to sweep.
    #[arg(long, value_delimiter = ',', default_values_t = [1e-6, 0.01, 0.1, 1.0])]
    pub taus: Vec<f64>,
    /// Emit JSON lines instead of a table.
    #[arg(long)]
    pub json: bool,
}

/// Declarative run configuration; every field can be overridden by a flag.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub support: Option<PathBuf>,
    pub datastore: Option<PathBuf>,
    pub mapper: Option<PathBuf>,
    pub seed: Option<u64>,
    pub parallelism: Option<usize>,
    pub prompt: Option<String>,
    pub max_tokens: Option<u32>,
    pub retrieval: RetrievalSection,
    pub projection: ProjectionSection,
    pub backend: BackendConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalSection {
    pub k: Option<usize>,
    pub s_min: Option<f64>,
    pub s_max: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectionSection {
    pub temperature: Option<f64>,
    pub renormalize_output: Option<bool>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }
}

fn pick<T: Clone>(flag: Option<T>, config: &Option<T>) -> Option<T> {
    flag.or_else(|| config.clone())
}

fn require_path(flag: &Option<PathBuf>, config: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    pick(flag.clone(), config)
        .ok_or_else(|| Error::InvalidConfig(format!("--{name} is required (or set `{name}` in the config file)")))
}

fn require_seed(flag: Option<u64>, cfg: &RunConfig) -> Result<u64> {
    pick(flag, &cfg.seed)
        .ok_or_else(|| Error::InvalidConfig("--seed is required (or set `seed` in the config file)".into()))
}

fn open_out(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(io::BufWriter::new(fs::File::create(p)?)),
        None => Box::new(io::BufWriter::new(io::stdout().lock())),
    })
}

fn load_mapper(path: &Option<PathBuf>, dim: usize) -> Result<LinearMapper> {
    match path {
        Some(p) => LinearMapper::load(p),
        None => Ok(LinearMapper::identity(dim)),
    }
}

fn read_queries(path: &Path) -> Result<Vec<(String, Embedding)>> {
    parse_queries(&fs::read_to_string(path)?)
}

/// Build a store from a metadata file and either decimal or binary vectors.
pub fn ingest(meta: &Path, vectors: Option<&Path>, embeddings: Option<&Path>, label: &str) -> Result<CaptionStore> {
    let rows = parse_meta(&fs::read_to_string(meta)?)?;
    let vecs = match (vectors, embeddings) {
        (Some(v), _) => parse_vectors(&fs::read_to_string(v)?)?,
        (None, Some(b)) => store::read_embedding_file(&fs::read(b)?)?.1,
        (None, None) => return Err(Error::InvalidConfig("--vectors or --embeddings is required".into())),
    };
    if rows.len() != vecs.len() {
        return Err(Error::CountMismatch {
            header: vecs.len() as u64,
            rows: rows.len() as u64,
        });
    }
    let records = rows
        .into_iter()
        .zip(vecs)
        .map(|(r, v)| RawRecord::new(r.id, r.text, v, r.source))
        .collect();
    build_store(records, label)
}

fn file_stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

#[derive(Serialize)]
struct HitRecord<'a> {
    id: &'a str,
    text: &'a str,
    similarity: f64,
}

#[derive(Serialize)]
struct RetrieveRecord<'a> {
    query_id: &'a str,
    hits: Vec<HitRecord<'a>>,
}

#[derive(Serialize)]
struct ProjectRecord<'a> {
    query_id: &'a str,
    embedding: &'a [f32],
    entropy: f64,
}

fn retrieval_config(
    cfg: &RunConfig,
    k: Option<usize>,
    s_min: Option<f64>,
    s_max: Option<f64>,
    mode: RetrievalMode,
    seed: u64,
) -> Result<RetrievalConfig> {
    let r = RetrievalConfig {
        k: pick(k, &cfg.retrieval.k).unwrap_or(DEFAULT_K),
        s_min: pick(s_min, &cfg.retrieval.s_min).unwrap_or(DEFAULT_S_MIN),
        s_max: pick(s_max, &cfg.retrieval.s_max).unwrap_or(DEFAULT_S_MAX),
        mode,
        seed,
    };
    r.validate()?;
    Ok(r)
}

fn projection_config(cfg: &RunConfig, tau: Option<f64>, raw: bool) -> Result<ProjectionConfig> {
    let mut p = ProjectionConfig::default();
    if let Some(t) = pick(tau, &cfg.projection.temperature) {
        p.temperature = t;
    }
    if let Some(r) = cfg.projection.renormalize_output {
        p.renormalize_output = r;
    }
    if raw {
        p.renormalize_output = false;
    }
    if !(p.temperature.is_finite() && p.temperature > 0.0) {
        return Err(Error::NonPositiveTemperature(p.temperature));
    }
    Ok(p)
}

/// Outcome of a subcommand that may have partially failed.
enum Status {
    Ok,
    ItemErrors { backend: bool },
}

fn run_command(cli: Cli) -> Result<Status> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::BuildSupport(a) | Command::BuildDatastore(a) => {
            let label = a.label.clone().unwrap_or_else(|| file_stem(&a.out));
            let s = ingest(&a.meta, a.vectors.as_deref(), a.embeddings.as_deref(), &label)?;
            save_store(&s, &a.out)?;
            eprintln!("wrote {} entries (dim {}) to {}", s.len(), s.dim(), a.out.display());
        }
        Command::Merge(a) => {
            let m = store::merge_stores(&load_store(&a.a)?, &load_store(&a.b)?, a.dedup)?;
            save_store(&m.store, &a.out)?;
            eprintln!(
                "merged {} entries ({} id collisions renamed, {} duplicates dropped)",
                m.store.len(),
                m.id_collisions,
                m.dropped_duplicates
            );
        }
        Command::Filter(a) => {
            let excluded: BTreeSet<String> = a.exclude.into_iter().filter(|s| !s.is_empty()).collect();
            let f = store::filter_by_source(&load_store(&a.store)?, &excluded);
            save_store(&f.store, &a.out)?;
            eprintln!("kept {}, removed {}, warnings {}", f.store.len(), f.removed, f.warnings);
        }
        Command::Retrieve(a) => {
            let ds = load_store(require_path(&a.datastore, &cfg.datastore, "datastore")?)?;
            let queries = read_queries(&a.queries)?;
            let (mode, seed) = match a.mode {
                ModeArg::Training => (RetrievalMode::Training, require_seed(a.seed, &cfg)?),
                ModeArg::Inference => (RetrievalMode::Inference, pick(a.seed, &cfg.seed).unwrap_or(0)),
            };
            let rcfg = retrieval_config(&cfg, a.k, a.s_min, a.s_max, mode, seed)?;
            let mut out = open_out(&a.out)?;
            for (id, q) in &queries {
                let hits = match mode {
                    RetrievalMode::Inference => retrieve_topk(q, &ds, rcfg.k)?,
                    RetrievalMode::Training => {
                        let item = RetrievalConfig {
                            seed: derive_seed(rcfg.seed, id),
                            ..rcfg.clone()
                        };
                        retrieve_in_range(q, &ds, &item)?
                    }
                };
                let rec = RetrieveRecord {
                    query_id: id,
                    hits: hits
                        .iter()
                        .map(|h| HitRecord {
                            id: &h.entry.id,
                            text: &h.entry.text,
                            similarity: h.similarity,
                        })
                        .collect(),
                };
                serde_json::to_writer(&mut out, &rec)?;
                out.write_all(b"\n")?;
            }
            out.flush()?;
        }
        Command::Project(a) => {
            let support = load_store(require_path(&a.support, &cfg.support, "support")?)?;
            let pcfg = projection_config(&cfg, a.tau, a.raw)?;
            let mut out = open_out(&a.out)?;
            for (id, q) in read_queries(&a.queries)? {
                let p = project_detailed(&q, &support, &pcfg)?;
                serde_json::to_writer(
                    &mut out,
                    &ProjectRecord {
                        query_id: &id,
                        embedding: p.embedding.as_slice(),
                        entropy: p.entropy(),
                    },
                )?;
                out.write_all(b"\n")?;
            }
            out.flush()?;
        }
        Command::MakeTrainData(a) => {
            let corpus = load_store(&a.corpus)?;
            let ds = load_store(require_path(&a.datastore, &cfg.datastore, "datastore")?)?;
            let mapper = load_mapper(&pick(a.mapper, &cfg.mapper), corpus.dim())?;
            let seed = require_seed(a.seed, &cfg)?;
            let rcfg = retrieval_config(&cfg, a.k, a.s_min, a.s_max, RetrievalMode::Training, seed)?;
            let prompt = pick(a.prompt, &cfg.prompt).unwrap_or_else(|| DEFAULT_PROMPT.into());
            let examples: Vec<_> = pipeline::make_training_examples(&corpus, &ds, &mapper, &rcfg, &prompt)?.collect();
            let mut out = open_out(&a.out)?;
            write_jsonl(&mut out, &examples)?;
            out.flush()?;
            let failed = examples.iter().filter(|e| e.is_err()).count();
            if failed > 0 {
                eprintln!("{failed} item(s) failed");
                return Ok(Status::ItemErrors { backend: false });
            }
        }
        Command::Caption(a) => return run_caption(a, &cfg),
        Command::Adapt(a) => {
            let support = load_store(require_path(&a.support, &cfg.support, "support")?)?;
            let datastore = load_store(require_path(&a.datastore, &cfg.datastore, "datastore")?)?;
            let profile = DomainProfile::new(support.label().to_string(), support, datastore)?;
            let new_support = load_store(&a.new_support)?;
            let new_datastore = load_store(&a.new_datastore)?;
            let mode = match a.mode {
                AdaptArg::Replace => AdaptMode::Replace,
                AdaptArg::Augment => AdaptMode::Augment,
            };
            let adapted = pipeline::adapt_domain(&profile, &new_support, &new_datastore, mode, None)?;
            save_store(&adapted.support, &a.out_support)?;
            save_store(&adapted.datastore, &a.out_datastore)?;
            eprintln!(
                "support {} entries, datastore {} entries",
                adapted.support.len(),
                adapted.datastore.len()
            );
        }
        Command::GapStats(a) => {
            let pairs = if a.synthetic {
                let spec = GapSpec::new(a.dim, a.pairs, a.offset, a.noise, require_seed(a.seed, &cfg)?);
                eval::synth_paired_corpus(&spec)?.pairs()
            } else {
                let texts = load_store(a.texts.as_ref().expect("required by clap"))?;
                let audio = read_queries(a.audio.as_ref().expect("required by clap"))?;
                if audio.len() != texts.len() {
                    return Err(Error::CountMismatch {
                        header: texts.len() as u64,
                        rows: audio.len() as u64,
                    });
                }
                audio
                    .into_iter()
                    .zip(texts.entries())
                    .map(|((_, a), t)| (a, t.embedding.clone()))
                    .collect()
            };
            let stats = eval::modality_gap_stats(&pairs)?;
            let mut out = open_out(&None)?;
            serde_json::to_writer(&mut out, &stats)?;
            out.write_all(b"\n")?;
            out.flush()?;
        }
        Command::Roundtrip(a) => {
            let corpus = load_store(&a.corpus)?;
            let rows = eval::roundtrip_reconstruction(&corpus, &a.taus, &MockBackend::new())?;
            let mut out = open_out(&None)?;
            if a.json {
                for r in &rows {
                    serde_json::to_writer(&mut out, r)?;
                    out.write_all(b"\n")?;
                }
            } else {
                out.write_all(eval::format_roundtrip_table(&rows).as_bytes())?;
            }
            out.flush()?;
        }
    }
    Ok(Status::Ok)
}

fn run_caption(a: CaptionArgs, cfg: &RunConfig) -> Result<Status> {
    let support = load_store(require_path(&a.support, &cfg.support, "support")?)?;
    let datastore = load_store(require_path(&a.datastore, &cfg.datastore, "datastore")?)?;
    let profile = DomainProfile::new(support.label().to_string(), support, datastore)?;
    let seed = require_seed(a.seed, cfg)?;
    let mut settings = CaptionSettings::new(load_mapper(&pick(a.mapper, &cfg.mapper), profile.dim())?);
    settings.projection = if a.no_projection {
        None
    } else {
        Some(projection_config(cfg, a.tau, false)?)
    };
    settings.retrieval = retrieval_config(cfg, a.k, None, None, RetrievalMode::Inference, seed)?;
    settings.retrieval_query = if a.query_with_projection {
        RetrievalQuery::Projected
    } else {
        RetrievalQuery::Audio
    };
    settings.fixed_prompt = pick(a.prompt, &cfg.prompt).unwrap_or_else(|| DEFAULT_PROMPT.into());
    settings.max_tokens = pick(a.max_tokens, &cfg.max_tokens).unwrap_or(DEFAULT_MAX_TOKENS);
    settings.parallelism = pick(a.parallelism, &cfg.parallelism).unwrap_or(1);
    if settings.parallelism == 0 {
        return Err(Error::InvalidConfig("--parallelism must be at least 1".into()));
    }

    let backend: Box<dyn CaptionBackend> = match a.backend {
        BackendArg::Mock => Box::new(MockBackend::new()),
        BackendArg::Replay => {
            let path = a
                .transcript
                .as_ref()
                .ok_or_else(|| Error::InvalidConfig("--transcript is required with --backend replay".into()))?;
            Box::new(ReplayBackend::new(Transcript::load(path)?))
        }
        BackendArg::Http => {
            let mut b = cfg.backend.clone();
            if let Some(e) = a.endpoint {
                b.endpoint = e;
            }
            if let Some(t) = a.timeout_ms {
                b.timeout_ms = t;
            }
            if let Some(r) = a.max_retries {
                b.max_retries = r;
            }
            if let Some(m) = a.max_in_flight {
                b.max_in_flight = m;
            }
            if a.token_env.is_some() {
                b.token_env = a.token_env;
            }
            Box::new(HttpBackend::new(b)?)
        }
    };

    let items = read_queries(&a.queries)?;
    let (results, transcript) = match &a.record {
        Some(_) => {
            let rec = RecordingBackend::new(backend);
            let r = pipeline::caption_batch(&items, &profile, &settings, &rec);
            (r, Some(rec.transcript()))
        }
        None => (pipeline::caption_batch(&items, &profile, &settings, &*backend), None),
    };
    let mut out = open_out(&a.out)?;
    write_jsonl(&mut out, &results)?;
    out.flush()?;
    if let (Some(path), Some(t)) = (&a.record, transcript) {
        t.save(path)?;
    }

    let errors: Vec<_> = results.iter().filter_map(|r| r.as_ref().err()).collect();
    for e in &errors {
        eprintln!("item {}: {}", e.item_id, e.error);
    }
    if errors.is_empty() {
        Ok(Status::Ok)
    } else {
        Ok(Status::ItemErrors {
            backend: errors.iter().any(|e| e.error.is_backend()),
        })
    }
}

pub fn exit_code_for(err: &Error) -> u8 {
    if err.is_backend() {
        2
    } else {
        1
    }
}

/// Parse arguments, run, and map the outcome to an exit code.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run_command(cli) {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::ItemErrors { backend }) => ExitCode::from(if backend { 2 } else { 1 }),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
