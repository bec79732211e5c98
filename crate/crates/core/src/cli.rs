//! Command-line front end: one binary, one subcommand per pipeline step.
//!
//! Failures print a single line to stderr,
//! `error code=<n> kind=<kind> key=<key> msg="<text>"`, and exit with `code`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::error::{ContextKind, ContextValue, ErrorKind};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::cycletrain::{
    self, run_iterative, select_optimal, sha256_hex, train_stage, Checkpoint, Direction,
    EpochLog, StageSeeds, TrainConfig, LOSSES_CSV, MODEL_BIN, VAL_METRICS_JSON,
};
use crate::datagen::{self, CorpusConfig, GenMode, MANIFEST_NAME};
use crate::error::Error;
use crate::graphrepr::{compute_nodes, inter_graph, GraphDump, VarianceMode};
use crate::layout::netpbm::{PnmImage, PnmKind};
use crate::layout::{load_corpus, read_manifest, tensor_to_pnm, PairedSample};
use crate::losses::FeatureExtractor;
use crate::metrics::{self, EvalPair};
use crate::numerics::{Tape, Tensor};

pub const RUN_MANIFEST: &str = "run_manifest.json";
pub const CORPUS_CONFIG: &str = "corpus.json";
pub const SAMPLE_METRICS_CSV: &str = "sample_metrics.csv";
pub const CONTACT_SHEET: &str = "contact_sheet.ppm";
const DEFAULT_OUT_DIR: &str = "runs";

#[derive(Debug, Parser)]
#[command(name = "sgs", version, about = "Semantic-driven photo/sketch synthesis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a procedural paired photo/sketch corpus.
    Datagen(DatagenArgs),
    /// Train one direction (stage 0) and write a run directory.
    Train(TrainArgs),
    /// Train stage 0 and the iterative cycle stages for both directions.
    TrainIterative(TrainArgs),
    /// Run a trained generator over a corpus and write Netpbm images.
    Synthesize(SynthesizeArgs),
    /// Score a trained generator on a corpus.
    Eval(EvalArgs),
    /// Emit the graph nodes and edges of one sample as JSON.
    GraphDump(GraphDumpArgs),
}

#[derive(Debug, Args)]
pub struct DatagenArgs {
    /// Number of samples.
    #[arg(long, default_value_t = 32)]
    pub n: usize,
    /// Image side length (32, 64, 128 or 256).
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// aligned | deformed
    #[arg(long, default_value = "aligned")]
    pub mode: String,
    /// Fraction of samples wearing glasses.
    #[arg(long, default_value_t = 0.5)]
    pub glasses_fraction: f64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML key=value file, or a run manifest JSON to replay.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training corpus manifest.
    #[arg(long = "train")]
    pub train_manifest: Option<PathBuf>,
    /// Validation corpus manifest (defaults to the training corpus).
    #[arg(long = "val")]
    pub val_manifest: Option<PathBuf>,
    /// Directory holding run directories.
    #[arg(long = "out")]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub run_id: Option<String>,
    /// k (photo to sketch) | o (sketch to photo); ignored by train-iterative.
    #[arg(long)]
    pub direction: Option<String>,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

/// Flag overrides of training keys; each wins over the config file.
#[derive(Debug, Default, Args)]
pub struct TrainOverrides {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub lr: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub beta1: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub use_saliency: Option<bool>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    #[arg(long)]
    pub si_hidden: Option<usize>,
    /// instance | batch
    #[arg(long)]
    pub norm: Option<String>,
    #[arg(long)]
    pub disc_base_channels: Option<usize>,
    #[arg(long)]
    pub disc_layers: Option<usize>,
    /// cross_entropy | least_squares
    #[arg(long)]
    pub gan_mode: Option<String>,
    /// literal | masked
    #[arg(long)]
    pub variance_mode: Option<String>,
    /// Refinement stages after stage 0.
    #[arg(long)]
    pub stages: Option<usize>,
    /// Comma-separated taps: bottleneck, block1, block2, ...
    #[arg(long, value_delimiter = ',')]
    pub ict_taps: Option<Vec<String>>,
    #[arg(long)]
    pub feature_seed: Option<u64>,
    #[arg(long)]
    pub parsing_seed: Option<u64>,
    /// Content weight.
    #[arg(long, allow_negative_numbers = true)]
    pub alpha: Option<f64>,
    /// Perceptual weight.
    #[arg(long, allow_negative_numbers = true)]
    pub lambda: Option<f64>,
    /// Parsing cross-entropy weight.
    #[arg(long, allow_negative_numbers = true)]
    pub delta: Option<f64>,
    /// Intra-class graph weight.
    #[arg(long, allow_negative_numbers = true)]
    pub eta: Option<f64>,
    /// Inter-class graph weight.
    #[arg(long, allow_negative_numbers = true)]
    pub tau: Option<f64>,
    /// Cycle consistency weight.
    #[arg(long, allow_negative_numbers = true)]
    pub xi: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SynthesizeArgs {
    /// Stage directory holding model.bin and model.json.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Only the first N samples.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory (defaults to the checkpoint directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = TrainConfig::default().feature_seed)]
    pub feature_seed: u64,
}

#[derive(Debug, Args)]
pub struct GraphDumpArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Sample id (defaults to the first entry).
    #[arg(long)]
    pub id: Option<String>,
    /// photo | sketch
    #[arg(long, default_value = "photo")]
    pub side: String,
    /// literal | masked
    #[arg(long, default_value = "literal")]
    pub variance_mode: String,
    /// Output file (defaults to stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// A failure reported on one line.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub kind: &'static str,
    pub key: String,
    pub msg: String,
}

impl Failure {
    fn keyed(key: &str, err: Error) -> Self {
        let mut f = Failure::from(err);
        if f.key == "-" {
            f.key = key.to_string();
        }
        f
    }

    pub fn line(&self) -> String {
        let msg = serde_json::to_string(&self.msg).expect("string serializes");
        format!("error code={} kind={} key={} msg={msg}", self.code, self.kind, self.key)
    }
}

impl From<Error> for Failure {
    fn from(err: Error) -> Self {
        let code = err.exit_code();
        let (kind, key) = match &err {
            Error::Config { key, .. } => ("config", key.clone()),
            Error::Invalid(_) => ("invalid", "-".into()),
            Error::Shape(_) => ("shape", "-".into()),
            Error::Data(_) => ("data", "-".into()),
            Error::Io { .. } => ("io", "-".into()),
            Error::Numerical(_) => ("numerical", "-".into()),
        };
        Failure {
            code,
            kind,
            key,
            msg: err.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => return usage_failure(e),
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("{}", f.line());
            f.code
        }
    }
}

fn usage_failure(e: clap::Error) -> i32 {
    if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
        print!("{e}");
        return 0;
    }
    let key = match e.get(ContextKind::InvalidArg) {
        Some(ContextValue::String(s)) => s.split_whitespace().next().unwrap_or("-").to_string(),
        Some(ContextValue::Strings(v)) => v.first().cloned().unwrap_or_else(|| "-".into()),
        _ => "-".into(),
    };
    let first = e.to_string();
    let msg = first.lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
    let f = Failure {
        code: 2,
        kind: "usage",
        key,
        msg,
    };
    eprintln!("{}", f.line());
    2
}

fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::Datagen(a) => cmd_datagen(&a),
        Command::Train(a) => cmd_train(&a),
        Command::TrainIterative(a) => cmd_train_iterative(&a),
        Command::Synthesize(a) => cmd_synthesize(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::GraphDump(a) => cmd_graph_dump(&a),
    }
}

pub fn cmd_datagen(a: &DatagenArgs) -> CliResult<()> {
    let cfg = CorpusConfig {
        n: a.n,
        size: a.size,
        seed: a.seed,
        mode: a.mode.parse::<GenMode>()?,
        glasses_fraction: a.glasses_fraction,
    };
    let entries = datagen::generate_corpus(&cfg, &a.out)?;
    write_json(&a.out.join(CORPUS_CONFIG), &cfg)?;
    println!("{}", a.out.join(MANIFEST_NAME).display());
    eprintln!("wrote {} samples", entries.len());
    Ok(())
}

/// Everything a training run depends on besides the corpus files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub train_manifest: PathBuf,
    pub val_manifest: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub run_id: Option<String>,
    pub direction: Direction,
    pub training: TrainConfig,
}

impl RunConfig {
    /// Flat key table: run keys beside every training key.
    pub fn to_table(&self) -> toml::Table {
        let mut table = match toml::Value::try_from(&self.training).expect("training config serializes") {
            toml::Value::Table(t) => t,
            _ => unreachable!("struct serializes to a table"),
        };
        let path = |p: &Path| toml::Value::String(p.to_string_lossy().into_owned());
        table.insert("train_manifest".into(), path(&self.train_manifest));
        if let Some(v) = &self.val_manifest {
            table.insert("val_manifest".into(), path(v));
        }
        table.insert("out_dir".into(), path(&self.out_dir));
        if let Some(id) = &self.run_id {
            table.insert("run_id".into(), toml::Value::String(id.clone()));
        }
        table.insert("direction".into(), toml::Value::String(self.direction.tag().into()));
        table
    }

    pub fn from_table(mut table: toml::Table) -> Result<Self, Error> {
        let mut take_str = |key: &str| -> Result<Option<String>, Error> {
            match table.remove(key) {
                None => Ok(None),
                Some(toml::Value::String(s)) => Ok(Some(s)),
                Some(other) => Err(Error::config(key, format!("expected a string, got {other}"))),
            }
        };
        let train_manifest = take_str("train_manifest")?
            .map(PathBuf::from)
            .ok_or_else(|| Error::config("train_manifest", "required (--train)"))?;
        let val_manifest = take_str("val_manifest")?.map(PathBuf::from);
        let out_dir = take_str("out_dir")?.map_or_else(|| PathBuf::from(DEFAULT_OUT_DIR), PathBuf::from);
        let run_id = take_str("run_id")?;
        let direction = take_str("direction")?.as_deref().unwrap_or("k").parse()?;
        let training: TrainConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| {
            let msg = e.message().to_string();
            let key = offending_field(&msg).unwrap_or("config").to_string();
            Error::config(key, msg)
        })?;
        training.validate()?;
        if let Some(id) = &run_id {
            if id.is_empty() || id.contains(['/', '\\']) || id == "." || id == ".." {
                return Err(Error::config("run_id", format!("{id:?} is not a plain directory name")));
            }
        }
        Ok(Self {
            train_manifest,
            val_manifest,
            out_dir,
            run_id,
            direction,
            training,
        })
    }

    fn run_dir(&self, command: &str) -> PathBuf {
        let id = self.run_id.clone().unwrap_or_else(|| match command {
            "train" => format!("train-{}-s{}", self.direction, self.training.seed),
            _ => format!("{command}-s{}", self.training.seed),
        });
        self.out_dir.join(id)
    }
}

/// First backtick-quoted token of a deserializer message, e.g. the name in
/// "unknown field `foo`".
fn offending_field(msg: &str) -> Option<&str> {
    let start = msg.find('`')? + 1;
    let len = msg[start..].find('`')?;
    Some(&msg[start..start + len])
}

fn read_text(path: &Path, key: &str) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| Failure::keyed(key, Error::io(path, e)))
}

/// Config file (TOML table or a prior run manifest) overlaid with flags.
fn resolve_run_config(a: &TrainArgs) -> CliResult<(RunConfig, Option<RunManifest>)> {
    let (mut table, replayed) = match &a.config {
        None => (toml::Table::new(), None),
        Some(path) if path.extension().is_some_and(|e| e == "json") => {
            let text = read_text(path, "config")?;
            let manifest: RunManifest = serde_json::from_str(&text)
                .map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
            (manifest.config.clone(), Some(manifest))
        }
        Some(path) => {
            let text = read_text(path, "config")?;
            let table = toml::from_str::<toml::Table>(&text)
                .map_err(|e| Error::config("config", format!("{}: {}", path.display(), e.message())))?;
            (table, None)
        }
    };
    apply_overrides(&mut table, a);
    Ok((RunConfig::from_table(table)?, replayed))
}

fn apply_overrides(table: &mut toml::Table, a: &TrainArgs) {
    use toml::Value as V;
    let o = &a.overrides;
    let mut set = |key: &str, v: Option<V>| {
        if let Some(v) = v {
            table.insert(key.into(), v);
        }
    };
    let int = |v: Option<usize>| v.map(|n| V::Integer(n as i64));
    let seed = |v: Option<u64>| v.map(|n| V::Integer(n as i64));
    let float = |v: Option<f64>| v.map(V::Float);
    let text = |v: &Option<String>| v.clone().map(V::String);
    let path = |v: &Option<PathBuf>| v.as_ref().map(|p| V::String(p.to_string_lossy().into_owned()));
    set("train_manifest", path(&a.train_manifest));
    set("val_manifest", path(&a.val_manifest));
    set("out_dir", path(&a.out_dir));
    set("run_id", text(&a.run_id));
    set("direction", text(&a.direction));
    set("epochs", int(o.epochs));
    set("lr", float(o.lr));
    set("beta1", float(o.beta1));
    set("beta2", float(o.beta2));
    set("batch_size", int(o.batch_size));
    set("seed", seed(o.seed));
    set("image_size", int(o.image_size));
    set("depth", int(o.depth));
    set("use_saliency", o.use_saliency.map(V::Boolean));
    set("base_channels", int(o.base_channels));
    set("si_hidden", int(o.si_hidden));
    set("norm", text(&o.norm));
    set("disc_base_channels", int(o.disc_base_channels));
    set("disc_layers", int(o.disc_layers));
    set("gan_mode", text(&o.gan_mode));
    set("variance_mode", text(&o.variance_mode));
    set("stages", int(o.stages));
    set("ict_taps", o.ict_taps.clone().map(|v| V::Array(v.into_iter().map(V::String).collect())));
    set("feature_seed", seed(o.feature_seed));
    set("parsing_seed", seed(o.parsing_seed));
    let weights = [
        ("alpha", o.alpha),
        ("lambda", o.lambda),
        ("delta", o.delta),
        ("eta", o.eta),
        ("tau", o.tau),
        ("xi", o.xi),
    ];
    if weights.iter().any(|(_, v)| v.is_some()) {
        let entry = table.entry("weights").or_insert_with(|| V::Table(toml::Table::new()));
        if let V::Table(t) = entry {
            for (k, v) in weights {
                if let Some(v) = v {
                    t.insert(k.into(), V::Float(v));
                }
            }
        }
    }
}

/// SHA-256 over the manifest bytes followed by every referenced file in
/// manifest order.
pub fn corpus_digest(manifest: &Path) -> Result<String, Error> {
    use sha2::{Digest, Sha256};
    let base = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut hasher = Sha256::new();
    hasher.update(std::fs::read(manifest).map_err(|e| Error::io(manifest, e))?);
    for entry in read_manifest(manifest)? {
        for rel in [
            &entry.photo,
            &entry.sketch,
            &entry.saliency_photo,
            &entry.saliency_sketch,
            &entry.layout_photo,
            &entry.layout_sketch,
        ] {
            let path = base.join(rel);
            hasher.update(std::fs::read(&path).map_err(|e| Error::io(&path, e))?);
        }
    }
    Ok(hex::encode(hasher.finalize()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub manifest: PathBuf,
    pub sha256: String,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub stage: usize,
    pub direction: Direction,
    /// Relative to the run directory.
    pub dir: PathBuf,
    pub model_sha256: String,
    pub losses_sha256: String,
    pub seeds: StageSeeds,
    pub metrics: metrics::MetricSummary,
}

/// Replayable record of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    /// Flat config table, accepted back by `--config`.
    pub config: toml::Table,
    pub seed: u64,
    pub threads: usize,
    pub train_corpus: CorpusRecord,
    pub val_corpus: Option<CorpusRecord>,
    pub checkpoints: Vec<CheckpointRecord>,
    /// Selected stage per direction tag.
    pub selected: BTreeMap<String, usize>,
}

fn load_checked_corpus(path: &Path, key: &str, recorded: Option<&CorpusRecord>) -> CliResult<(Vec<PairedSample>, CorpusRecord)> {
    let samples = load_corpus(path).map_err(|e| Failure::keyed(key, e))?;
    let sha256 = corpus_digest(path).map_err(|e| Failure::keyed(key, e))?;
    if let Some(r) = recorded {
        if r.sha256 != sha256 {
            return Err(Failure::keyed(
                key,
                Error::data(format!("{} differs from the corpus recorded in the run manifest", path.display())),
            ));
        }
    }
    let record = CorpusRecord {
        manifest: path.to_path_buf(),
        sha256,
        samples: samples.len(),
    };
    Ok((samples, record))
}

struct Prepared {
    cfg: RunConfig,
    run_dir: PathBuf,
    train: Vec<PairedSample>,
    val: Option<Vec<PairedSample>>,
    train_record: CorpusRecord,
    val_record: Option<CorpusRecord>,
}

fn prepare(a: &TrainArgs, command: &str) -> CliResult<Prepared> {
    let (cfg, replayed) = resolve_run_config(a)?;
    let run_dir = cfg.run_dir(command);
    if run_dir.join(RUN_MANIFEST).exists() {
        return Err(Error::config("run_id", format!("{} already holds a run", run_dir.display())).into());
    }
    let (train, train_record) =
        load_checked_corpus(&cfg.train_manifest, "train_manifest", replayed.as_ref().map(|m| &m.train_corpus))?;
    let (val, val_record) = match &cfg.val_manifest {
        Some(path) => {
            let recorded = replayed.as_ref().and_then(|m| m.val_corpus.as_ref());
            let (v, r) = load_checked_corpus(path, "val_manifest", recorded)?;
            (Some(v), Some(r))
        }
        None => (None, None),
    };
    Ok(Prepared {
        cfg,
        run_dir,
        train,
        val,
        train_record,
        val_record,
    })
}

fn report_epoch(e: &EpochLog) {
    eprintln!(
        "stage {}{} epoch {} lr {:.3e} loss {:.6e} ict {:.6e}",
        e.stage,
        e.direction,
        e.epoch + 1,
        e.lr,
        e.mean_total,
        e.mean_ict
    );
}

fn checkpoint_record(run_dir: &Path, c: &Checkpoint, seed: u64) -> CliResult<CheckpointRecord> {
    let losses = c.dir.join(LOSSES_CSV);
    let bytes = std::fs::read(&losses).map_err(|e| Error::io(&losses, e))?;
    Ok(CheckpointRecord {
        stage: c.stage,
        direction: c.direction,
        dir: c.dir.strip_prefix(run_dir).unwrap_or(&c.dir).to_path_buf(),
        model_sha256: c.digest.clone(),
        losses_sha256: sha256_hex(&bytes),
        seeds: StageSeeds::derive(seed, c.stage, c.direction),
        metrics: c.metrics.clone(),
    })
}

fn finish_run(command: &str, p: &Prepared, checkpoints: &[Checkpoint], selected: BTreeMap<String, usize>) -> CliResult<()> {
    let manifest = RunManifest {
        command: command.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config: p.cfg.to_table(),
        seed: p.cfg.training.seed,
        threads: crate::workers::worker_count(),
        train_corpus: p.train_record.clone(),
        val_corpus: p.val_record.clone(),
        checkpoints: checkpoints
            .iter()
            .map(|c| checkpoint_record(&p.run_dir, c, p.cfg.training.seed))
            .collect::<CliResult<_>>()?,
        selected,
    };
    write_json(&p.run_dir.join(RUN_MANIFEST), &manifest)?;
    println!("{}", p.run_dir.display());
    Ok(())
}

pub fn cmd_train(a: &TrainArgs) -> CliResult<()> {
    let p = prepare(a, "train")?;
    let cfg = &p.cfg;
    let (models, log) = train_stage(&p.train, &cfg.training, 0, cfg.direction, None, &mut report_epoch)?;
    let val = p.val.as_deref().unwrap_or(&p.train);
    let checkpoint = cycletrain::persist_stage(&p.run_dir, 0, cfg.direction, &models, &log, val, &cfg.training)?;
    finish_run("train", &p, &[checkpoint], BTreeMap::new())
}

pub fn cmd_train_iterative(a: &TrainArgs) -> CliResult<()> {
    let p = prepare(a, "train-iterative")?;
    let val = p.val.as_deref().unwrap_or(&p.train);
    let run = run_iterative(&p.train, val, &p.cfg.training, &p.run_dir, &mut report_epoch)?;
    if let Some(s) = run.stages.iter().find(|s| s.frozen_unchanged == Some(false)) {
        return Err(Error::Numerical(format!("frozen generator changed during stage {}{}", s.stage, s.direction)).into());
    }
    let mut selected = BTreeMap::new();
    for direction in Direction::BOTH {
        let own: Vec<Checkpoint> = run.checkpoints.iter().filter(|c| c.direction == direction).cloned().collect();
        let best = select_optimal(&own)?;
        eprintln!("selected stage {} for direction {direction}", best.stage);
        selected.insert(direction.tag().to_string(), best.stage);
    }
    finish_run("train-iterative", &p, &run.checkpoints, selected)
}

fn require_checkpoint(dir: &Path) -> CliResult<()> {
    for name in [MODEL_BIN, cycletrain::MODEL_JSON] {
        if !dir.join(name).is_file() {
            return Err(Failure {
                code: 3,
                kind: "data",
                key: "checkpoint".into(),
                msg: format!("{} not found", dir.join(name).display()),
            });
        }
    }
    Ok(())
}

fn checkpoint_direction(g: &crate::network::Generator) -> CliResult<Direction> {
    let c = g.config();
    Direction::BOTH
        .into_iter()
        .find(|d| d.source_channels() == c.in_channels && d.target_channels() == c.out_channels)
        .ok_or_else(|| {
            Failure::keyed(
                "checkpoint",
                Error::data(format!("generator maps {} to {} channels", c.in_channels, c.out_channels)),
            )
        })
}

/// Generator, its direction and synthesized outputs for every sample.
fn synthesize_all(
    checkpoint: &Path,
    manifest: &Path,
    limit: Option<usize>,
) -> CliResult<(Direction, Vec<PairedSample>, Vec<Tensor>)> {
    require_checkpoint(checkpoint)?;
    let g = cycletrain::load_generator(checkpoint).map_err(|e| Failure::keyed("checkpoint", e))?;
    let direction = checkpoint_direction(&g)?;
    let mut samples = load_corpus(manifest).map_err(|e| Failure::keyed("manifest", e))?;
    if let Some(n) = limit {
        samples.truncate(n);
    }
    if samples.is_empty() {
        return Err(Failure::keyed("manifest", Error::data("corpus is empty")));
    }
    let fakes = samples
        .iter()
        .map(|s| {
            let v = direction.view(s);
            g.synthesize(v.source.image, v.source.saliency, v.source.layout)
                .map_err(|e| Failure::keyed("manifest", e))
        })
        .collect::<CliResult<Vec<_>>>()?;
    Ok((direction, samples, fakes))
}

fn to_rgb(t: &Tensor) -> Tensor {
    let s = t.shape();
    if s[0] == 3 {
        return t.clone();
    }
    let plane = t.data().to_vec();
    Tensor::new(&[3, s[1], s[2]], plane.repeat(3)).expect("three planes")
}

/// Rows of equally sized `[C, H, W]` tiles pasted into one RGB image.
pub fn contact_sheet(rows: &[Vec<Tensor>]) -> Result<PnmImage, Error> {
    let first = rows.first().and_then(|r| r.first()).ok_or_else(|| Error::invalid("empty contact sheet"))?;
    let (h, w) = (first.shape()[1], first.shape()[2]);
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let (sheet_h, sheet_w) = (h * rows.len(), w * cols);
    let mut data = vec![1.0; 3 * sheet_h * sheet_w];
    for (r, row) in rows.iter().enumerate() {
        for (c, tile) in row.iter().enumerate() {
            if tile.shape()[1..] != [h, w] {
                return Err(Error::shape(format!("tile {:?} differs from {h}x{w}", tile.shape())));
            }
            let rgb = to_rgb(tile);
            for ch in 0..3 {
                for y in 0..h {
                    let src = &rgb.data()[(ch * h + y) * w..(ch * h + y + 1) * w];
                    let at = (ch * sheet_h + r * h + y) * sheet_w + c * w;
                    data[at..at + w].copy_from_slice(src);
                }
            }
        }
    }
    tensor_to_pnm(&Tensor::new(&[3, sheet_h, sheet_w], data)?)
}

pub fn cmd_synthesize(a: &SynthesizeArgs) -> CliResult<()> {
    let (direction, samples, fakes) = synthesize_all(&a.checkpoint, &a.manifest, a.limit)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut rows = Vec::with_capacity(samples.len());
    for (s, fake) in samples.iter().zip(&fakes) {
        let img = tensor_to_pnm(fake)?;
        let ext = if img.kind == PnmKind::Gray { "pgm" } else { "ppm" };
        img.write(&a.out.join(format!("{}_{direction}.{ext}", s.id)))?;
        let v = direction.view(s);
        rows.push(vec![v.source.image.clone(), v.target.image.clone(), fake.clone()]);
    }
    contact_sheet(&rows)?.write(&a.out.join(CONTACT_SHEET))?;
    println!("{}", a.out.display());
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> CliResult<()> {
    let (direction, samples, fakes) = synthesize_all(&a.checkpoint, &a.manifest, None)?;
    let pairs: Vec<EvalPair> = samples
        .iter()
        .zip(fakes)
        .map(|(s, fake)| EvalPair {
            id: s.id.clone(),
            real: direction.view(s).target.image.clone(),
            fake,
        })
        .collect();
    let extractor = FeatureExtractor::new(direction.target_channels(), a.feature_seed);
    let report = metrics::evaluate(&pairs, &extractor, a.feature_seed)?;
    let out = a.out.as_deref().unwrap_or(&a.checkpoint);
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_json(&out.join(VAL_METRICS_JSON), &report.summary)?;
    let csv_path = out.join(SAMPLE_METRICS_CSV);
    std::fs::write(&csv_path, report.samples_csv()).map_err(|e| Error::io(&csv_path, e))?;
    println!("{}", serde_json::to_string(&report.summary).expect("summary serializes"));
    Ok(())
}

pub fn cmd_graph_dump(a: &GraphDumpArgs) -> CliResult<()> {
    let mode: VarianceMode = serde_json::from_value(serde_json::Value::String(a.variance_mode.clone()))
        .map_err(|_| Error::config("variance_mode", format!("expected literal|masked, got {:?}", a.variance_mode)))?;
    let entries = read_manifest(&a.manifest).map_err(|e| Failure::keyed("manifest", e))?;
    let entry = match &a.id {
        Some(id) => entries.iter().find(|e| &e.id == id).ok_or_else(|| Error::config("id", format!("{id:?} not in manifest")))?,
        None => entries.first().ok_or_else(|| Failure::keyed("manifest", Error::data("manifest is empty")))?,
    };
    let base = a.manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let sample = crate::layout::load_sample(entry, &base).map_err(|e| Failure::keyed("manifest", e))?;
    let (image, layout) = match a.side.as_str() {
        "photo" => (&sample.photo, &sample.layout_photo),
        "sketch" => (&sample.sketch, &sample.layout_sketch),
        other => return Err(Error::config("side", format!("expected photo|sketch, got {other:?}")).into()),
    };
    let tape = Tape::new();
    let nodes = compute_nodes(tape.constant(image.clone()), layout, mode)?;
    let dump = GraphDump::capture(&nodes, &inter_graph(&nodes)?);
    let text = serde_json::to_string_pretty(&dump).expect("dump serializes") + "\n";
    match &a.out {
        Some(path) => std::fs::write(path, text).map_err(|e| Error::io(path, e))?,
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| Error::io("<stdout>", e))?,
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}
