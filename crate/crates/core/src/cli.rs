//! The `ctes` command surface: `gen`, `train`, `index`, `query`, `eval`,
//! `bench`.
//!
//! A `--config FILE` of `key = value` lines supplies defaults for any flag of
//! the chosen subcommand (keys are long flag names without dashes); flags on
//! the command line win. Errors print one line to stderr:
//! `ctes: error: <kind>: <message>`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use crate::data::{self, split_queries, Corpus, DataError, DatasetSplit, EventSequence, RelevanceJudgments, DEFAULT_SPLIT};
use crate::datagen::{self, GenConfig, GenError, WarpFamily, WarpScope};
use crate::hashing::{HashConfig, HashError, HashIndex, Hasher};
use crate::mtpp::{ModelConfig, Variant};
use crate::retrieval::{
    self, evaluate, exhaustive_topk, EvalConfig, EvalReport, HashKind, IndexConfig, Pipeline, RankedResult, RetrievalError,
};
use crate::seed::derive;
use crate::trainer::{self, Ablation, Checkpoint, TrainConfig, TrainData, TrainError};
use crate::unwarp::UnwarpConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(#[from] DataError),
    #[error("{0}")]
    Gen(#[from] GenError),
    #[error("{0}")]
    Train(#[from] TrainError),
    #[error("{0}")]
    Hash(#[from] HashError),
    #[error("{0}")]
    Retrieval(#[from] RetrievalError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::Data(_) => "data",
            CliError::Gen(_) => "gen",
            CliError::Train(_) => "train",
            CliError::Hash(_) => "hash",
            CliError::Retrieval(_) => "retrieval",
            CliError::Io { .. } => "io",
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub const QUERIES_FILE: &str = "queries.jsonl";
pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const JUDGMENTS_FILE: &str = "judgments.tsv";
pub const SPLIT_FILE: &str = "split.tsv";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CURVE_FILE: &str = "loss_curve.txt";
pub const HASHER_FILE: &str = "hasher.bin";
pub const INDEX_FILE: &str = "index.bin";
pub const RESULTS_FILE: &str = "results.tsv";
pub const REPORT_FILE: &str = "report.txt";
pub const TRADEOFF_FILE: &str = "tradeoff.tsv";
pub const BENCH_FILE: &str = "bench.txt";

#[derive(Debug, Parser)]
#[command(name = "ctes", version, about = "Retrieval of continuous-time event sequences")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic benchmark.
    Gen(GenArgs),
    /// Train a relevance model.
    Train(TrainArgs),
    /// Build the hashed index over corpus Fisher vectors.
    Index(IndexArgs),
    /// Top-K retrieval for queries.
    Query(QueryArgs),
    /// Evaluate ranking quality and comparison savings.
    Eval(EvalArgs),
    /// Timings and the NDCG@10 vs reduction-factor tradeoff.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// key = value file supplying defaults for this subcommand's flags.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Root seed; each component derives its own stream from it.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads (default: available cores).
    #[arg(long)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum WarpArg {
    Identity,
    Affine,
    Quadratic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScopeArg {
    Global,
    PerQuery,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct GenArgs {
    #[command(flatten)]
    pub common: Common,
    /// Number of base sequences (one query each).
    #[arg(long, default_value_t = 80)]
    pub bases: usize,
    /// Number of marks.
    #[arg(long, default_value_t = 5)]
    pub marks: usize,
    /// Shortest base sequence.
    #[arg(long, default_value_t = 160)]
    pub base_len_min: usize,
    /// Longest base sequence.
    #[arg(long, default_value_t = 240)]
    pub base_len_max: usize,
    /// Fewest windows cut from a base.
    #[arg(long, default_value_t = 20)]
    pub windows_min: usize,
    /// Most windows cut from a base.
    #[arg(long, default_value_t = 30)]
    pub windows_max: usize,
    /// Shortest window.
    #[arg(long, default_value_t = 15)]
    pub window_len_min: usize,
    /// Longest window.
    #[arg(long, default_value_t = 40)]
    pub window_len_max: usize,
    /// Time warp applied to queries.
    #[arg(long, value_enum, default_value_t = WarpArg::Affine)]
    pub warp: WarpArg,
    /// Smallest affine warp factor.
    #[arg(long, default_value_t = 0.5)]
    pub warp_min: f64,
    /// Largest affine warp factor.
    #[arg(long, default_value_t = 2.0)]
    pub warp_max: f64,
    /// One warp factor for all queries, or one per query.
    #[arg(long, value_enum, default_value_t = ScopeArg::Global)]
    pub warp_scope: ScopeArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    #[value(name = "self")]
    SelfAttention,
    #[value(name = "cross")]
    CrossAttention,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::SelfAttention => Variant::SelfAttention,
            VariantArg::CrossAttention => Variant::CrossAttention,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AblationArg {
    Full,
    SimOnly,
    NoUnwarp,
}

impl From<AblationArg> for Ablation {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::Full => Ablation::Full,
            AblationArg::SimOnly => Ablation::SimOnly,
            AblationArg::NoUnwarp => Ablation::NoUnwarp,
        }
    }
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Directory written by `gen` (or laid out the same way).
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Point-process variant.
    #[arg(long, value_enum, default_value_t = VariantArg::SelfAttention)]
    pub variant: VariantArg,
    /// Which score components are learned.
    #[arg(long, value_enum, default_value_t = AblationArg::Full)]
    pub ablation: AblationArg,
    /// Hidden dimension D.
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    /// Longest sequence the model accepts.
    #[arg(long, default_value_t = 64)]
    pub max_len: usize,
    /// Width of both unwarp hidden layers.
    #[arg(long, default_value_t = 16)]
    pub unwarp_hidden: usize,
    /// Training epochs.
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    /// Adam learning rate.
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    /// Queries per optimizer step.
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    /// Margin of the pairwise hinge.
    #[arg(long, default_value_t = trainer::DEFAULT_MARGIN)]
    pub margin: f64,
    /// Weight of the model-independent similarity.
    #[arg(long, default_value_t = crate::relevance::DEFAULT_GAMMA)]
    pub gamma: f64,
    /// Sampled negatives per query and epoch.
    #[arg(long, default_value_t = trainer::DEFAULT_NEGATIVES)]
    pub negatives: usize,
    /// Pairs kept per query.
    #[arg(long, default_value_t = trainer::DEFAULT_MAX_PAIRS)]
    pub max_pairs: usize,
    /// Weight of the unwarp unbiasedness penalty.
    #[arg(long, default_value_t = 1.0)]
    pub reg_weight: f64,
    /// L2 coefficient.
    #[arg(long, default_value_t = trainer::DEFAULT_L2)]
    pub l2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum HashArg {
    Trained,
    Random,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct IndexArgs {
    #[command(flatten)]
    pub common: Common,
    /// Benchmark directory.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Self-attention checkpoint.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Trained hash network or random hyperplanes.
    #[arg(long, value_enum, default_value_t = HashArg::Trained)]
    pub hash: HashArg,
    /// Code length R (default: the model's hidden dimension).
    #[arg(long)]
    pub bits: Option<usize>,
    /// Hash tables M.
    #[arg(long, default_value_t = crate::hashing::DEFAULT_TABLES)]
    pub tables: usize,
    /// Bits per table L (default: 12, capped at R).
    #[arg(long)]
    pub bits_per_table: Option<usize>,
    /// Hash-network training epochs.
    #[arg(long, default_value_t = 200)]
    pub hash_epochs: usize,
    /// Hash-network learning rate.
    #[arg(long, default_value_t = 0.01)]
    pub hash_lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Valid,
    Test,
    All,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct QueryArgs {
    #[command(flatten)]
    pub common: Common,
    /// Benchmark directory.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Checkpoint used for query vectors and scoring.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Directory written by `index`; without it every corpus sequence is scored.
    #[arg(long, value_name = "DIR")]
    pub index: Option<PathBuf>,
    /// Cross-attention checkpoint used to rescore hashed candidates.
    #[arg(long, value_name = "FILE")]
    pub rescore: Option<PathBuf>,
    /// Results per query.
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Which queries to run.
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Benchmark directory.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Checkpoint used for query vectors and scoring.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Directory written by `index`; without it evaluation is exhaustive.
    #[arg(long, value_name = "DIR")]
    pub index: Option<PathBuf>,
    /// Cross-attention checkpoint used to rescore hashed candidates.
    #[arg(long, value_name = "FILE")]
    pub rescore: Option<PathBuf>,
    /// Non-relevant sequences sampled into each query's pool.
    #[arg(long, default_value_t = retrieval::DEFAULT_EVAL_NEGATIVES)]
    pub negatives: usize,
    /// Which queries to evaluate.
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct BenchArgs {
    #[command(flatten)]
    pub common: Common,
    /// Benchmark directory.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Self-attention checkpoint.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Comma-separated bits-per-table values to sweep.
    #[arg(long, default_value = "2,4,6,8,10,12", value_delimiter = ',')]
    pub bits_per_table: Vec<usize>,
    /// Hash tables M.
    #[arg(long, default_value_t = crate::hashing::DEFAULT_TABLES)]
    pub tables: usize,
    /// Hash-network training epochs.
    #[arg(long, default_value_t = 200)]
    pub hash_epochs: usize,
    /// Non-relevant sequences sampled into each query's pool.
    #[arg(long, default_value_t = retrieval::DEFAULT_EVAL_NEGATIVES)]
    pub negatives: usize,
    /// Results per query in the latency measurement.
    #[arg(long, default_value_t = 10)]
    pub k: usize,
}

/// Parses a `key = value` file. Blank lines and `#` comments are skipped.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("line {}: expected key = value", i + 1)))?;
        let key = k.trim().replace('_', "-");
        if key.is_empty() {
            return Err(CliError::Config(format!("line {}: empty key", i + 1)));
        }
        out.insert(key, v.trim().to_string());
    }
    Ok(out)
}

/// Splices config-file entries in front of the subcommand's own flags so
/// that the command line overrides them.
fn expand_config(args: Vec<String>) -> Result<Vec<String>, CliError> {
    let pos = args.iter().position(|a| a == "--config" || a.starts_with("--config="));
    let Some(pos) = pos else { return Ok(args) };
    let path = if let Some(p) = args[pos].strip_prefix("--config=") {
        p.to_string()
    } else {
        args.get(pos + 1).cloned().ok_or_else(|| CliError::Usage("--config needs a file".into()))?
    };
    let text = fs::read_to_string(&path).map_err(io_err(Path::new(&path)))?;
    let entries = parse_config(&text)?;
    let sub = args
        .iter()
        .skip(1)
        .position(|a| !a.starts_with('-'))
        .map(|i| i + 1)
        .ok_or_else(|| CliError::Usage("missing subcommand".into()))?;
    let mut spliced: Vec<String> = args[..=sub].to_vec();
    for (k, v) in entries {
        if k == "config" {
            continue;
        }
        spliced.push(format!("--{k}={v}"));
    }
    spliced.extend_from_slice(&args[sub + 1..]);
    Ok(spliced)
}

fn set_threads(n: Option<usize>) {
    if let Some(n) = n {
        // Fails only if the pool already exists (e.g. under a test harness).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(io_err(path))
}

fn require(path: &Path, what: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} not found: {}", path.display())))
    }
}

/// Loaded benchmark directory.
pub struct Dataset {
    pub queries: Corpus,
    pub corpus: Corpus,
    pub judgments: RelevanceJudgments,
    pub split: DatasetSplit,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self, CliError> {
        for f in [MANIFEST_FILE, QUERIES_FILE, CORPUS_FILE, JUDGMENTS_FILE, SPLIT_FILE] {
            require(&dir.join(f), "data file")?;
        }
        let manifest = parse_config(&fs::read_to_string(dir.join(MANIFEST_FILE)).map_err(io_err(&dir.join(MANIFEST_FILE)))?)?;
        let marks: usize = manifest
            .get("marks")
            .and_then(|m| m.parse().ok())
            .ok_or_else(|| CliError::Config("manifest lacks marks".into()))?;
        let queries = data::load_corpus(dir.join(QUERIES_FILE), marks)?;
        let corpus = data::load_corpus(dir.join(CORPUS_FILE), marks)?;
        let judgments = data::load_judgments(dir.join(JUDGMENTS_FILE))?;
        judgments.validate(&queries, &corpus)?;
        let split = read_split(&dir.join(SPLIT_FILE))?;
        Ok(Self {
            queries,
            corpus,
            judgments,
            split,
        })
    }

    pub fn pick(&self, which: SplitArg) -> Vec<&EventSequence> {
        let ids: Vec<&String> = match which {
            SplitArg::Train => self.split.train.iter().collect(),
            SplitArg::Valid => self.split.valid.iter().collect(),
            SplitArg::Test => self.split.test.iter().collect(),
            SplitArg::All => return self.queries.iter().collect(),
        };
        ids.into_iter().filter_map(|id| self.queries.get(id)).collect()
    }
}

fn write_split(path: &Path, split: &DatasetSplit) -> Result<(), CliError> {
    let mut s = String::new();
    for (name, ids) in [("train", &split.train), ("valid", &split.valid), ("test", &split.test)] {
        for id in ids {
            let _ = writeln!(s, "{id}\t{name}");
        }
    }
    write_file(path, &s)
}

fn read_split(path: &Path) -> Result<DatasetSplit, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut split = DatasetSplit {
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
        fractions: DEFAULT_SPLIT,
    };
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let (id, part) = line
            .split_once('\t')
            .ok_or_else(|| CliError::Config(format!("{}: line {}: expected id<TAB>split", path.display(), i + 1)))?;
        match part.trim() {
            "train" => split.train.push(id.to_string()),
            "valid" => split.valid.push(id.to_string()),
            "test" => split.test.push(id.to_string()),
            other => return Err(CliError::Config(format!("unknown split {other:?}"))),
        }
    }
    Ok(split)
}

pub fn cmd_gen(a: &GenArgs) -> Result<(), CliError> {
    let warp = match a.warp {
        WarpArg::Identity => WarpFamily::Identity,
        WarpArg::Affine => WarpFamily::Affine {
            lo: a.warp_min,
            hi: a.warp_max,
        },
        WarpArg::Quadratic => WarpFamily::Quadratic,
    };
    let cfg = GenConfig {
        bases: a.bases,
        base_len: (a.base_len_min, a.base_len_max),
        marks: a.marks,
        subsequences: (a.windows_min, a.windows_max),
        sub_len: (a.window_len_min, a.window_len_max),
        warp,
        warp_scope: match a.warp_scope {
            ScopeArg::Global => WarpScope::Global,
            ScopeArg::PerQuery => WarpScope::PerQuery,
        },
        seed: derive(a.common.seed, "datagen"),
        ..GenConfig::default()
    };
    let bench = datagen::generate(&cfg)?;
    let out = &a.common.out;
    ensure_dir(out)?;
    data::save_corpus(out.join(QUERIES_FILE), &bench.queries)?;
    data::save_corpus(out.join(CORPUS_FILE), &bench.corpus)?;
    data::save_judgments(out.join(JUDGMENTS_FILE), &bench.judgments)?;
    let split = split_queries(&bench.queries.ids(), DEFAULT_SPLIT, derive(a.common.seed, "split"))?;
    write_split(&out.join(SPLIT_FILE), &split)?;
    let mut m = String::new();
    let _ = writeln!(m, "marks={}", a.marks);
    let _ = writeln!(m, "seed={}", a.common.seed);
    let _ = writeln!(m, "queries={}", bench.queries.len());
    let _ = writeln!(m, "corpus={}", bench.corpus.len());
    let _ = writeln!(m, "relevance_ratio={}", bench.relevance_ratio());
    for (q, f) in &bench.warp_factors {
        let _ = writeln!(m, "warp.{q}={f}");
    }
    write_file(&out.join(MANIFEST_FILE), &m)
}

pub fn cmd_train(a: &TrainArgs) -> Result<(), CliError> {
    let ds = Dataset::load(&a.data)?;
    let seed = a.common.seed;
    let max_len = a.max_len.max(ds.corpus.max_len()).max(ds.queries.max_len());
    let model = ModelConfig {
        max_len,
        ..ModelConfig::new(a.variant.into(), a.dim, ds.corpus.mark_count())
    };
    let ucfg = UnwarpConfig {
        hidden: (a.unwarp_hidden, a.unwarp_hidden),
        ..UnwarpConfig::default()
    };
    let ablation: Ablation = a.ablation.into();
    let init = Checkpoint::init(model, ucfg, ablation, derive(seed, "init"));
    let cfg = TrainConfig {
        margin: a.margin,
        gamma: a.gamma,
        lr: a.lr,
        batch_size: a.batch_size,
        negatives: a.negatives,
        max_pairs: a.max_pairs,
        reg_weight: a.reg_weight,
        l2: a.l2,
        epochs: a.epochs,
        ablation,
        seed: derive(seed, "train"),
        ..TrainConfig::default()
    };
    let train = ds.pick(SplitArg::Train);
    let valid = ds.pick(SplitArg::Valid);
    let data = TrainData {
        train: &train,
        valid: &valid,
        corpus: &ds.corpus,
        judgments: &ds.judgments,
    };
    let out = trainer::train(init, &data, &cfg)?;
    ensure_dir(&a.common.out)?;
    let path = a.common.out.join(CHECKPOINT_FILE);
    out.best.save_to(&path).map_err(io_err(&path))?;
    write_file(&a.common.out.join(CURVE_FILE), &out.report.curve_text())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    require(path, "checkpoint")?;
    Ok(Checkpoint::load_from(path)?)
}

fn save_pipeline(dir: &Path, p: &Pipeline) -> Result<(), CliError> {
    ensure_dir(dir)?;
    let hp = dir.join(HASHER_FILE);
    let mut buf = Vec::new();
    p.hasher.save(&mut buf).map_err(io_err(&hp))?;
    fs::write(&hp, &buf).map_err(io_err(&hp))?;
    let ip = dir.join(INDEX_FILE);
    let mut buf = Vec::new();
    p.index.save(&mut buf).map_err(io_err(&ip))?;
    fs::write(&ip, &buf).map_err(io_err(&ip))
}

/// Rebuilds a pipeline from a saved hasher and index; Fisher vectors are
/// recomputed from the checkpoint.
fn load_pipeline(dir: &Path, ckpt: &Checkpoint, corpus: &Corpus) -> Result<Pipeline, CliError> {
    let hp = dir.join(HASHER_FILE);
    let ip = dir.join(INDEX_FILE);
    require(&hp, "hasher")?;
    require(&ip, "index")?;
    let hasher = Hasher::load(&mut fs::read(&hp).map_err(io_err(&hp))?.as_slice())?;
    let index = HashIndex::load(&mut fs::read(&ip).map_err(io_err(&ip))?.as_slice())?;
    let scorer = ckpt.scorer();
    let (vectors, excluded) = retrieval::corpus_vectors(&scorer, corpus)?;
    let cfg = IndexConfig {
        tables: index.tables.len(),
        bits_per_table: index.bits_per_table,
        seed: index.seed,
    };
    let p = Pipeline::with_hasher(scorer, vectors, excluded, hasher, &cfg)?;
    if p.index != index {
        return Err(CliError::Config("index does not match the checkpoint's corpus codes".into()));
    }
    Ok(p)
}

fn hash_kind(kind: HashArg, bits: usize, epochs: usize, lr: f64, seed: u64) -> HashKind {
    match kind {
        HashArg::Trained => HashKind::Trained(HashConfig {
            epochs,
            lr,
            seed: derive(seed, "hash"),
            ..HashConfig::new(bits)
        }),
        HashArg::Random => HashKind::Random {
            bits,
            seed: derive(seed, "hyperplanes"),
        },
    }
}

pub fn cmd_index(a: &IndexArgs) -> Result<(), CliError> {
    let ds = Dataset::load(&a.data)?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let bits = a.bits.unwrap_or(ckpt.model.config().dim);
    let kind = hash_kind(a.hash, bits, a.hash_epochs, a.hash_lr, a.common.seed);
    let cfg = IndexConfig {
        tables: a.tables,
        bits_per_table: a.bits_per_table.unwrap_or(crate::hashing::DEFAULT_BITS_PER_TABLE.min(bits)),
        seed: derive(a.common.seed, "index"),
    };
    let t = Instant::now();
    let p = Pipeline::build(&ds.corpus, ckpt.scorer(), &kind, &cfg)?;
    log::info!("index built in {:.2}s", t.elapsed().as_secs_f64());
    save_pipeline(&a.common.out, &p)?;
    let mut r = String::new();
    let _ = writeln!(r, "indexed={}", p.index.size);
    let _ = writeln!(r, "excluded={}", p.excluded.len());
    for (i, t) in p.index.tables.iter().enumerate() {
        let sizes: usize = t.buckets.values().map(Vec::len).sum();
        let _ = writeln!(r, "table.{i}.buckets={}", t.buckets.len());
        let _ = writeln!(r, "table.{i}.entries={sizes}");
    }
    write_file(&a.common.out.join(REPORT_FILE), &r)
}

fn rescorer(path: &Option<PathBuf>) -> Result<Option<Checkpoint>, CliError> {
    path.as_deref().map(load_checkpoint).transpose()
}

pub fn cmd_query(a: &QueryArgs) -> Result<(), CliError> {
    if a.k == 0 {
        return Err(CliError::Usage("--k must be at least 1".into()));
    }
    let ds = Dataset::load(&a.data)?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let rescore = rescorer(&a.rescore)?.map(|c| c.scorer());
    let queries = ds.pick(a.split);
    let mut results: Vec<RankedResult> = Vec::with_capacity(queries.len());
    match &a.index {
        Some(dir) => {
            let p = load_pipeline(dir, &ckpt, &ds.corpus)?;
            for q in queries {
                results.push(p.query_topk(q, a.k, &ds.corpus, rescore.as_ref())?);
            }
        }
        None => {
            let scorer = rescore.unwrap_or_else(|| ckpt.scorer());
            for q in queries {
                results.push(exhaustive_topk(q, a.k, &ds.corpus, &scorer, None)?);
            }
        }
    }
    ensure_dir(&a.common.out)?;
    let path = a.common.out.join(RESULTS_FILE);
    retrieval::save_results(&path, &results).map_err(io_err(&path))
}

fn save_report(dir: &Path, report: &EvalReport) -> Result<(), CliError> {
    ensure_dir(dir)?;
    write_file(&dir.join(REPORT_FILE), &report.to_kv())?;
    let path = dir.join(RESULTS_FILE);
    retrieval::save_results(&path, &report.rankings).map_err(io_err(&path))
}

pub fn cmd_eval(a: &EvalArgs) -> Result<(), CliError> {
    let ds = Dataset::load(&a.data)?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let rescore = rescorer(&a.rescore)?;
    let scorer = rescore.as_ref().unwrap_or(&ckpt).scorer();
    let cfg = EvalConfig {
        negatives: a.negatives,
        seed: derive(a.common.seed, "eval"),
    };
    let queries = ds.pick(a.split);
    let pipeline = a.index.as_deref().map(|d| load_pipeline(d, &ckpt, &ds.corpus)).transpose()?;
    let report = evaluate(&queries, &ds.corpus, &ds.judgments, &scorer, pipeline.as_ref(), &cfg)?;
    save_report(&a.common.out, &report)
}

pub fn cmd_bench(a: &BenchArgs) -> Result<(), CliError> {
    let ds = Dataset::load(&a.data)?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let scorer = ckpt.scorer();
    let queries = ds.pick(SplitArg::Test);
    let seed = a.common.seed;
    let eval = EvalConfig {
        negatives: a.negatives,
        seed: derive(seed, "eval"),
    };
    let bits = ckpt.model.config().dim;
    let mut out = String::new();
    let mut table = String::from("hash\tbits_per_table\treduction\tndcg10\tmap\n");

    let t = Instant::now();
    let (vectors, excluded) = retrieval::corpus_vectors(&scorer, &ds.corpus)?;
    let _ = writeln!(out, "fisher_vectors_seconds={}", t.elapsed().as_secs_f64());

    let exhaustive = evaluate(&queries, &ds.corpus, &ds.judgments, &scorer, None, &eval)?;
    let _ = writeln!(table, "exhaustive\t-\t{}\t{}\t{}", exhaustive.reduction, exhaustive.ndcg10, exhaustive.map);

    for kind in [HashArg::Trained, HashArg::Random] {
        let name = match kind {
            HashArg::Trained => "trained",
            HashArg::Random => "random",
        };
        let hk = hash_kind(kind, bits, a.hash_epochs, 0.01, seed);
        let t = Instant::now();
        let base = Pipeline::from_vectors(
            scorer.clone(),
            vectors.clone(),
            excluded.clone(),
            &hk,
            &IndexConfig {
                tables: a.tables,
                bits_per_table: 1,
                seed: derive(seed, "index"),
            },
        )?;
        let _ = writeln!(out, "{name}.hasher_seconds={}", t.elapsed().as_secs_f64());
        for &l in &a.bits_per_table {
            if l == 0 || l > bits {
                continue;
            }
            let cfg = IndexConfig {
                tables: a.tables,
                bits_per_table: l,
                seed: derive(seed, "index"),
            };
            let t = Instant::now();
            let p = base.reindex(&cfg)?;
            let _ = writeln!(out, "{name}.L{l}.index_seconds={}", t.elapsed().as_secs_f64());
            let r = evaluate(&queries, &ds.corpus, &ds.judgments, &scorer, Some(&p), &eval)?;
            let _ = writeln!(table, "{name}\t{l}\t{}\t{}\t{}", r.reduction, r.ndcg10, r.map);
            if l == crate::hashing::DEFAULT_BITS_PER_TABLE.min(bits) || Some(&l) == a.bits_per_table.last() {
                let t = Instant::now();
                for q in &queries {
                    p.query_topk(q, a.k, &ds.corpus, None)?;
                }
                let per = t.elapsed().as_secs_f64() / queries.len().max(1) as f64;
                let _ = writeln!(out, "{name}.L{l}.query_seconds={per}");
            }
        }
    }
    let cache: retrieval::VectorCache = vectors.iter().map(|v| (v.id.clone(), v.clone())).collect();
    let t = Instant::now();
    for q in &queries {
        exhaustive_topk(q, a.k, &ds.corpus, &scorer, Some(&cache))?;
    }
    let per = t.elapsed().as_secs_f64() / queries.len().max(1) as f64;
    let _ = writeln!(out, "exhaustive.query_seconds={per}");
    ensure_dir(&a.common.out)?;
    write_file(&a.common.out.join(BENCH_FILE), &out)?;
    write_file(&a.common.out.join(TRADEOFF_FILE), &table)
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, S>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let args = expand_config(args.into_iter().map(Into::into).collect())?;
    let matches = Cli::command().try_get_matches_from(args).map_err(|e| match e.kind() {
        clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => CliError::Usage(e.to_string()),
        _ => CliError::Usage(e.to_string().lines().next().unwrap_or("").trim_start_matches("error: ").to_string()),
    })?;
    let cli = Cli::from_arg_matches(&matches).map_err(|e| CliError::Usage(e.to_string()))?;
    match &cli.command {
        Command::Gen(a) => {
            set_threads(a.common.threads);
            cmd_gen(a)
        }
        Command::Train(a) => {
            set_threads(a.common.threads);
            cmd_train(a)
        }
        Command::Index(a) => {
            set_threads(a.common.threads);
            cmd_index(a)
        }
        Command::Query(a) => {
            set_threads(a.common.threads);
            cmd_query(a)
        }
        Command::Eval(a) => {
            set_threads(a.common.threads);
            cmd_eval(a)
        }
        Command::Bench(a) => {
            set_threads(a.common.threads);
            cmd_bench(a)
        }
    }
}

/// Entry point for the binary; returns the process exit code.
pub fn main() -> i32 {
    let args: Vec<String> = std::env::args().collect();
    if args.iter().skip(1).any(|a| a == "--help" || a == "-h" || a == "help" || a == "--version" || a == "-V") || args.len() == 1 {
        return match Cli::try_parse_from(&args) {
            Ok(_) => 0,
            Err(e) => {
                let _ = e.print();
                e.exit_code()
            }
        };
    }
    match run(args) {
        Ok(()) => 0,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("ctes: error: {}: {}", e.kind(), msg);
            match e {
                CliError::Usage(_) | CliError::Config(_) => 2,
                _ => 1,
            }
        }
    }
}
