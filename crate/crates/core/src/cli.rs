//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 on runtime failures (backend, detection,
//! metrics), 2 on usage and configuration errors including missing inputs.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{
    Backend, BackendKind, Embedder, HttpBackend, HttpConfig, HttpEmbedder, ScriptedBackend, ScriptedEmbedder,
};
use crate::confidence::{AnswerProbability, ConfidenceConfig};
use crate::distill::{self, DistillMode};
use crate::engine::{self, DetectionResult, Detector, DtotConfig, FewShotMode, Statement};
use crate::eval::{self, LabeledDataset};
use crate::fewshot::{self, DevSet, FewShot};
use crate::promptgen::Templates;
use crate::selector::RelevanceMode;
use crate::tree::{self, ContextTree};

const DEFAULT_EMBED_DIM: usize = 256;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "dtot",
    version,
    about = "Confidence-gated context-tree prompting for toxic content detection"
)]
pub struct Cli {
    /// TOML file with default option values; command-line flags take precedence.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Increase log verbosity (-v info, -vv debug, -vvv trace).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Detect toxicity in one statement or every statement of a dataset.
    Detect(DetectArgs),
    /// Run detection over a labeled dataset and report metrics.
    Eval(EvalArgs),
    /// Build a distillation dataset from a trace or a live run.
    Distill(DistillArgs),
    /// Few-shot development set commands.
    #[command(subcommand)]
    Devset(DevsetCommand),
    /// Context tree commands.
    #[command(subcommand)]
    Tree(TreeCommand),
    /// Trace file commands.
    #[command(subcommand)]
    Trace(TraceCommand),
}

#[derive(Debug, Subcommand)]
pub enum DevsetCommand {
    /// Embed a labeled dataset into a devset index.
    Build(DevsetBuildArgs),
}

#[derive(Debug, Subcommand)]
pub enum TreeCommand {
    /// Check a context tree file.
    Validate { path: PathBuf },
}

#[derive(Debug, Subcommand)]
pub enum TraceCommand {
    /// Summarize a trace file.
    Inspect { path: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendChoice {
    Scripted,
    Http,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    BlackBox,
    WhiteBox,
}

impl From<KindArg> for BackendKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::BlackBox => BackendKind::BlackBox,
            KindArg::WhiteBox => BackendKind::WhiteBox,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ShotArg {
    ZeroShot,
    Fs,
    Fsr,
}

impl From<ShotArg> for FewShotMode {
    fn from(m: ShotArg) -> Self {
        match m {
            ShotArg::ZeroShot => FewShotMode::ZeroShot,
            ShotArg::Fs => FewShotMode::Fs,
            ShotArg::Fsr => FewShotMode::Fsr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DistillModeArg {
    WithLabels,
    WithoutLabels,
}

/// Options shared by every command that talks to a model.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// Context tree JSON file [default: built-in toxic tree].
    #[arg(long, value_name = "PATH")]
    pub tree: Option<PathBuf>,
    /// Model backend [default: scripted].
    #[arg(long, value_enum)]
    pub backend: Option<BackendChoice>,
    /// Scenario file for the scripted backend.
    #[arg(long, value_name = "PATH")]
    pub scenario: Option<PathBuf>,
    /// Backend kind [default: black-box].
    #[arg(long, value_enum)]
    pub kind: Option<KindArg>,
    /// Devset index for few-shot modes.
    #[arg(long, value_name = "PATH")]
    pub devset: Option<PathBuf>,
    /// Demonstrations per class [default: 3].
    #[arg(long)]
    pub k: Option<usize>,
    /// Lower rating bound of the unconfident band [default: 0].
    #[arg(long)]
    pub s_low: Option<u8>,
    /// Upper rating bound of the unconfident band [default: 90].
    #[arg(long)]
    pub s_high: Option<u8>,
    /// Confidence threshold [default: 0.9].
    #[arg(long)]
    pub s_delta: Option<f64>,
    /// Maximum prompting steps per statement [default: 2].
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Return the most confident step instead of the last one.
    #[arg(long)]
    pub return_best: bool,
    /// Use the raw answer probability instead of the Yes/No normalized one.
    #[arg(long)]
    pub raw_answer_probability: bool,
    /// Score candidate rationales by summed instead of mean log-probability.
    #[arg(long)]
    pub raw_relevance: bool,
    /// Directory with template overrides.
    #[arg(long, value_name = "DIR")]
    pub template_dir: Option<PathBuf>,
    /// Seed for sampling [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Concurrent detections [default: 1].
    #[arg(long)]
    pub parallelism: Option<usize>,
    /// Endpoint root for the http backend, e.g. https://host/v1.
    #[arg(long)]
    pub base_url: Option<String>,
    /// Model name for the http backend.
    #[arg(long)]
    pub model: Option<String>,
    /// Environment variable holding the API key [default: DTOT_API_KEY].
    #[arg(long)]
    pub api_key_env: Option<String>,
    /// Request timeout in seconds [default: 60].
    #[arg(long)]
    pub timeout: Option<u64>,
    /// Maximum concurrent http requests [default: 4].
    #[arg(long)]
    pub max_in_flight: Option<usize>,
    /// Embedding model for the http backend.
    #[arg(long)]
    pub embed_model: Option<String>,
    /// Embedding dimension of the built-in embedder [default: 256].
    #[arg(long)]
    pub embed_dim: Option<usize>,
    /// Seed of the built-in embedder [default: 0].
    #[arg(long)]
    pub embed_seed: Option<u64>,
    /// Log http requests and responses at info level; the API key is never logged.
    #[arg(long)]
    pub trace: bool,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Statement text.
    #[arg(long, conflicts_with = "input")]
    pub text: Option<String>,
    /// Statement id used for scenario lookup and traces.
    #[arg(long, default_value = "input")]
    pub id: String,
    /// Dataset (.csv or .jsonl) whose statements are all detected.
    #[arg(long, value_name = "PATH")]
    pub input: Option<PathBuf>,
    /// Few-shot mode [default: zero-shot].
    #[arg(long, value_enum)]
    pub mode: Option<ShotArg>,
    /// Write the step trace as JSONL (a manifest is written next to it).
    #[arg(long, value_name = "PATH")]
    pub trace_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Labeled dataset (.csv or .jsonl).
    #[arg(long, value_name = "PATH")]
    pub dataset: PathBuf,
    /// Few-shot mode [default: zero-shot].
    #[arg(long, value_enum)]
    pub mode: Option<ShotArg>,
    /// Drop entries with this toxicity level first.
    #[arg(long)]
    pub exclude_level: Option<u8>,
    /// Evaluate a seeded uniform sample of this many entries.
    #[arg(long)]
    pub sample: Option<usize>,
    /// Use black-box ratings divided by 100 as scores for AUC.
    #[arg(long)]
    pub rating_as_score: bool,
    /// Output directory for report, trace and manifest [default: out].
    #[arg(long, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Prior trace to build records from; without it detection runs live.
    #[arg(long, value_name = "PATH")]
    pub from_trace: Option<PathBuf>,
    /// Labeled dataset: gold labels, and statements for a live run.
    #[arg(long, value_name = "PATH")]
    pub dataset: Option<PathBuf>,
    /// Label mode [default: with-labels].
    #[arg(long, value_enum)]
    pub mode: Option<DistillModeArg>,
    /// Few-shot mode of the live run [default: zero-shot].
    #[arg(long, value_enum)]
    pub shot_mode: Option<ShotArg>,
    /// Output directory for records and manifest [default: out].
    #[arg(long, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DevsetBuildArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Labeled dataset (.csv or .jsonl) to embed.
    #[arg(long, value_name = "PATH")]
    pub dataset: PathBuf,
    /// Attach teacher rationales from this trace where the answer is right.
    #[arg(long, value_name = "PATH")]
    pub rationales_from: Option<PathBuf>,
    /// Output index file.
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
}

/// Values readable from `--config`. Keys use the flag names.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct FileConfig {
    pub tree: Option<PathBuf>,
    pub backend: Option<BackendChoice>,
    pub scenario: Option<PathBuf>,
    pub kind: Option<BackendKind>,
    pub mode: Option<FewShotMode>,
    pub devset: Option<PathBuf>,
    pub k: Option<usize>,
    pub s_low: Option<u8>,
    pub s_high: Option<u8>,
    pub s_delta: Option<f64>,
    pub max_steps: Option<usize>,
    pub return_best: Option<bool>,
    pub raw_answer_probability: Option<bool>,
    pub raw_relevance: Option<bool>,
    pub template_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub parallelism: Option<usize>,
    pub base_url: Option<String>,
    pub model: Option<String>,
    pub api_key_env: Option<String>,
    pub timeout: Option<u64>,
    pub max_in_flight: Option<usize>,
    pub embed_model: Option<String>,
    pub embed_dim: Option<usize>,
    pub embed_seed: Option<u64>,
    pub rating_as_score: Option<bool>,
}

impl FileConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config file {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| usage(format!("invalid config file {}: {e}", path.display())))
    }
}

/// Everything a run depends on, after merging flags over the config file.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub backend: BackendChoice,
    pub kind: BackendKind,
    pub tree: Option<PathBuf>,
    pub scenario: Option<PathBuf>,
    pub devset: Option<PathBuf>,
    pub template_dir: Option<PathBuf>,
    pub dtot: DtotConfig,
    pub seed: u64,
    pub parallelism: usize,
    pub base_url: Option<String>,
    pub model: Option<String>,
    pub api_key_env: String,
    pub timeout_secs: u64,
    pub max_in_flight: usize,
    pub embed_model: Option<String>,
    pub embed_dim: usize,
    pub embed_seed: u64,
    pub http_trace: bool,
}

impl RunConfig {
    pub fn resolve(args: &RunArgs, mode: Option<FewShotMode>, file: &FileConfig) -> CliResult<Self> {
        Self::resolve_with(args, mode, file, true)
    }

    /// `needs_model` is false for runs that make no completion calls; the
    /// backend then needs no scenario or endpoint.
    pub fn resolve_with(
        args: &RunArgs,
        mode: Option<FewShotMode>,
        file: &FileConfig,
        needs_model: bool,
    ) -> CliResult<Self> {
        let d = DtotConfig::default();
        let c = ConfidenceConfig::default();
        let answer_probability = if args.raw_answer_probability || file.raw_answer_probability == Some(true) {
            AnswerProbability::Raw
        } else {
            AnswerProbability::Normalized
        };
        let relevance = if args.raw_relevance || file.raw_relevance == Some(true) {
            RelevanceMode::Raw
        } else {
            RelevanceMode::LengthNormalized
        };
        let dtot = DtotConfig {
            max_steps: args.max_steps.or(file.max_steps).unwrap_or(d.max_steps),
            confidence: ConfidenceConfig {
                s_low: args.s_low.or(file.s_low).unwrap_or(c.s_low),
                s_high: args.s_high.or(file.s_high).unwrap_or(c.s_high),
                s_delta: args.s_delta.or(file.s_delta).unwrap_or(c.s_delta),
                answer_probability,
            },
            mode: mode.or(file.mode).unwrap_or_default(),
            k: args.k.or(file.k).unwrap_or(d.k),
            return_best: args.return_best || file.return_best.unwrap_or(false),
            relevance,
        };
        dtot.validate().map_err(usage)?;

        let cfg = RunConfig {
            backend: args.backend.or(file.backend).unwrap_or(BackendChoice::Scripted),
            kind: args.kind.map(Into::into).or(file.kind).unwrap_or(BackendKind::BlackBox),
            tree: args.tree.clone().or_else(|| file.tree.clone()),
            scenario: args.scenario.clone().or_else(|| file.scenario.clone()),
            devset: args.devset.clone().or_else(|| file.devset.clone()),
            template_dir: args.template_dir.clone().or_else(|| file.template_dir.clone()),
            dtot,
            seed: args.seed.or(file.seed).unwrap_or(0),
            parallelism: args.parallelism.or(file.parallelism).unwrap_or(1).max(1),
            base_url: args.base_url.clone().or_else(|| file.base_url.clone()),
            model: args.model.clone().or_else(|| file.model.clone()),
            api_key_env: args
                .api_key_env
                .clone()
                .or_else(|| file.api_key_env.clone())
                .unwrap_or_else(|| "DTOT_API_KEY".into()),
            timeout_secs: args.timeout.or(file.timeout).unwrap_or(60),
            max_in_flight: args.max_in_flight.or(file.max_in_flight).unwrap_or(4),
            embed_model: args.embed_model.clone().or_else(|| file.embed_model.clone()),
            embed_dim: args.embed_dim.or(file.embed_dim).unwrap_or(DEFAULT_EMBED_DIM),
            embed_seed: args.embed_seed.or(file.embed_seed).unwrap_or(0),
            http_trace: args.trace,
        };
        cfg.check_inputs(needs_model)?;
        Ok(cfg)
    }

    fn check_inputs(&self, needs_model: bool) -> CliResult<()> {
        for (what, path) in [
            ("tree file", &self.tree),
            ("scenario file", &self.scenario),
            ("devset file", &self.devset),
            ("template directory", &self.template_dir),
        ] {
            if let Some(p) = path {
                if !p.exists() {
                    return Err(usage(format!("{what} not found: {}", p.display())));
                }
            }
        }
        if self.dtot.mode != FewShotMode::ZeroShot && self.devset.is_none() {
            return Err(usage(format!(
                "--mode {} needs --devset",
                serde_json::to_value(self.dtot.mode).unwrap().as_str().unwrap()
            )));
        }
        match self.backend {
            _ if !needs_model => Ok(()),
            BackendChoice::Scripted if self.scenario.is_none() => {
                Err(usage("the scripted backend needs --scenario"))
            }
            BackendChoice::Http if self.base_url.is_none() || self.model.is_none() => {
                Err(usage("the http backend needs --base-url and --model"))
            }
            _ => Ok(()),
        }
    }
}

/// The loaded inputs of a run.
struct Session {
    config: RunConfig,
    tree: ContextTree,
    templates: Templates,
    backend: Box<dyn Backend>,
    embedder: Option<Box<dyn Embedder>>,
    devset: Option<DevSet>,
}

impl Session {
    fn open(config: RunConfig) -> CliResult<Self> {
        let tree = match &config.tree {
            Some(p) => ContextTree::load_path(p).map_err(|e| usage(format!("{}: {e}", p.display())))?,
            None => tree::default_tree(),
        };
        let templates = match &config.template_dir {
            Some(d) => Templates::load_dir(d).map_err(|e| usage(e.to_string()))?,
            None => Templates::builtin(),
        };
        let backend: Box<dyn Backend> = match config.backend {
            BackendChoice::Scripted => match &config.scenario {
                Some(p) => {
                    Box::new(ScriptedBackend::load_path(config.kind, p).map_err(|e| usage(e.to_string()))?)
                }
                None => Box::new(ScriptedBackend::new(config.kind, []).expect("empty scenario")),
            },
            BackendChoice::Http => {
                let mut h = HttpConfig::new(
                    config.base_url.clone().unwrap_or_default(),
                    config.model.clone().unwrap_or_default(),
                    config.kind,
                );
                h.api_key_env = Some(config.api_key_env.clone());
                h.timeout = Duration::from_secs(config.timeout_secs);
                h.max_in_flight = config.max_in_flight;
                h.trace = config.http_trace;
                Box::new(HttpBackend::new(h))
            }
        };
        let devset = match &config.devset {
            Some(p) => {
                let file = File::open(p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
                let d = DevSet::read_jsonl(BufReader::new(file))
                    .map_err(|e| usage(format!("{}: {e}", p.display())))?;
                if config.dtot.mode != FewShotMode::ZeroShot {
                    d.require_per_class(config.dtot.k).map_err(|e| usage(e.to_string()))?;
                }
                Some(d)
            }
            None => None,
        };
        let mut session = Session { config, tree, templates, backend, embedder: None, devset };
        if session.config.dtot.mode != FewShotMode::ZeroShot {
            let dim = session.devset.as_ref().and_then(DevSet::dimension);
            session.embedder = Some(session.make_embedder(dim)?);
        }
        Ok(session)
    }

    fn make_embedder(&self, dimension: Option<usize>) -> CliResult<Box<dyn Embedder>> {
        let c = &self.config;
        let dim = dimension.unwrap_or(c.embed_dim);
        Ok(match c.backend {
            BackendChoice::Scripted => Box::new(ScriptedEmbedder::new(dim, c.embed_seed)),
            BackendChoice::Http => {
                let model = c
                    .embed_model
                    .as_deref()
                    .ok_or_else(|| usage("the http backend needs --embed-model for embeddings"))?;
                Box::new(HttpEmbedder::new(
                    c.base_url.as_deref().unwrap_or_default(),
                    model,
                    dim,
                    Some(&c.api_key_env),
                    Duration::from_secs(c.timeout_secs),
                ))
            }
        })
    }

    fn detect_all(&self, statements: &[Statement]) -> CliResult<Vec<DetectionResult>> {
        let few = match (&self.devset, &self.embedder) {
            (Some(devset), Some(embedder)) => Some(FewShot { devset, embedder: embedder.as_ref() }),
            _ => None,
        };
        let mut detector =
            Detector::new(&self.tree, self.backend.as_ref(), &self.templates, self.config.dtot);
        if let Some(f) = &few {
            detector = detector.with_demonstrations(f);
        }
        let mut out = Vec::with_capacity(statements.len());
        for r in engine::detect_batch(&detector, statements, self.config.parallelism) {
            match r {
                Ok(d) => out.push(d),
                Err(e) => {
                    return Err(CliError::Runtime(anyhow::anyhow!(
                        "detection failed for {:?} after {} step(s): {}",
                        e.statement_id,
                        e.trace.len(),
                        e.kind
                    )))
                }
            }
        }
        Ok(out)
    }

    fn manifest(&self, command: &str, inputs: &[(&str, &Path)]) -> anyhow::Result<Manifest> {
        let mut files = Vec::new();
        for (role, path) in inputs {
            files.push(InputFile {
                role: role.to_string(),
                path: path.display().to_string(),
                sha256: file_hash(path)?,
            });
        }
        for (role, path) in [("scenario", &self.config.scenario), ("devset", &self.config.devset)] {
            if let Some(p) = path {
                files.push(InputFile {
                    role: role.to_string(),
                    path: p.display().to_string(),
                    sha256: file_hash(p)?,
                });
            }
        }
        Ok(Manifest {
            tool_version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            seed: self.config.seed,
            tree_hash: self.tree.content_hash(),
            template_hash: self.templates.content_hash(),
            config: self.config.clone(),
            inputs: files,
        })
    }
}

#[derive(Debug, Serialize)]
struct InputFile {
    role: String,
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest {
    tool_version: &'static str,
    command: String,
    seed: u64,
    tree_hash: String,
    template_hash: String,
    config: RunConfig,
    inputs: Vec<InputFile>,
}

fn file_hash(path: &Path) -> anyhow::Result<String> {
    let mut h = Sha256::new();
    let mut f = File::open(path).with_context(|| format!("hashing {}", path.display()))?;
    std::io::copy(&mut f, &mut h)?;
    Ok(hex::encode(h.finalize()))
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_trace_file(path: &Path, results: &[DetectionResult]) -> anyhow::Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    engine::write_trace(&mut w, results)?;
    w.flush()?;
    Ok(())
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn load_dataset(path: &Path) -> CliResult<LabeledDataset> {
    if !path.exists() {
        return Err(usage(format!("dataset not found: {}", path.display())));
    }
    eval::load_dataset_path(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn statements_of(dataset: &LabeledDataset) -> Vec<Statement> {
    dataset.entries.iter().map(|e| Statement::new(&e.id, &e.text)).collect()
}

fn load_trace(path: &Path) -> CliResult<Vec<DetectionResult>> {
    let file = File::open(path).map_err(|e| usage(format!("trace not found: {}: {e}", path.display())))?;
    engine::read_trace(BufReader::new(file)).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn print_result(r: &DetectionResult) {
    println!("id:         {}", r.statement_id);
    println!("answer:     {}", r.answer);
    println!("confidence: {:.4} ({:?})", r.final_confidence, r.final_decision);
    if let Some(rating) = r.toxicity_rating {
        println!("rating:     {rating}/100");
    }
    println!("path:       {}", r.context_path().join(" > "));
    println!("steps:      {}", r.trace.len());
    println!("rationale:  {}", r.rationale);
}

fn cmd_detect(args: &DetectArgs, file: &FileConfig) -> CliResult<()> {
    let config = RunConfig::resolve(&args.run, args.mode.map(Into::into), file)?;
    let (statements, input) = match (&args.text, &args.input) {
        (Some(t), None) => (vec![Statement::new(&args.id, t)], None),
        (None, Some(p)) => (statements_of(&load_dataset(p)?), Some(p.as_path())),
        _ => return Err(usage("give exactly one of --text or --input")),
    };
    let session = Session::open(config)?;
    let results = session.detect_all(&statements)?;
    if results.len() == 1 && input.is_none() {
        print_result(&results[0]);
    } else {
        for r in &results {
            println!(
                "{}\t{}\t{:.4}\t{}",
                r.statement_id,
                r.answer,
                r.final_confidence,
                r.context_path().join(" > ")
            );
        }
    }
    if let Some(path) = &args.trace_out {
        write_trace_file(path, &results)?;
        let inputs: Vec<(&str, &Path)> = input.map(|p| ("input", p)).into_iter().collect();
        let manifest = session.manifest("detect", &inputs)?;
        let mut mpath = path.clone().into_os_string();
        mpath.push(".manifest.json");
        write_json(Path::new(&mpath), &manifest)?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct ReportFile<'a> {
    seed: u64,
    #[serde(flatten)]
    report: &'a eval::EvalReport,
}

fn cmd_eval(args: &EvalArgs, file: &FileConfig) -> CliResult<()> {
    let config = RunConfig::resolve(&args.run, args.mode.map(Into::into), file)?;
    let mut dataset = load_dataset(&args.dataset)?;
    if let Some(level) = args.exclude_level {
        dataset = eval::filter_ambiguous(&dataset, level).map_err(|e| usage(e.to_string()))?;
    }
    if let Some(n) = args.sample {
        dataset = eval::sample_split(&dataset, 0, n, config.seed).map_err(|e| usage(e.to_string()))?.1;
    }
    if dataset.is_empty() {
        return Err(CliError::Runtime(anyhow::anyhow!(
            "dataset {} has no entries to evaluate",
            args.dataset.display()
        )));
    }
    let rating_as_score = args.rating_as_score || file.rating_as_score.unwrap_or(false);
    let session = Session::open(config)?;
    let results = session.detect_all(&statements_of(&dataset))?;
    let predictions = eval::predictions_for(&dataset, &results, session.config.kind, rating_as_score)
        .map_err(anyhow::Error::from)?;
    let report = eval::metrics(&predictions).map_err(anyhow::Error::from)?;

    let out_dir = args.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"));
    create_dir(&out_dir)?;
    std::fs::write(out_dir.join("report.txt"), report.to_text()).context("writing report.txt")?;
    write_json(&out_dir.join("report.json"), &ReportFile { seed: session.config.seed, report: &report })?;
    write_trace_file(&out_dir.join("trace.jsonl"), &results)?;
    write_json(&out_dir.join("manifest.json"), &session.manifest("eval", &[("dataset", &args.dataset)])?)?;
    print!("{}", report.to_text());
    Ok(())
}

fn cmd_distill(args: &DistillArgs, file: &FileConfig) -> CliResult<()> {
    let offline = args.from_trace.is_some();
    let config = RunConfig::resolve_with(&args.run, args.shot_mode.map(Into::into), file, !offline)?;
    let mode = match args.mode.unwrap_or(DistillModeArg::WithLabels) {
        DistillModeArg::WithLabels => DistillMode::WithLabels,
        DistillModeArg::WithoutLabels => DistillMode::WithoutLabels,
    };
    let dataset = args.dataset.as_deref().map(load_dataset).transpose()?;
    if mode == DistillMode::WithLabels && dataset.is_none() {
        return Err(usage("--mode with-labels needs --dataset for gold labels"));
    }
    let session = Session::open(config)?;
    let detections = match (&args.from_trace, &dataset) {
        (Some(t), _) => load_trace(t)?,
        (None, Some(d)) => session.detect_all(&statements_of(d))?,
        (None, None) => return Err(usage("give --from-trace or --dataset")),
    };
    let gold: Option<HashMap<String, u8>> =
        dataset.as_ref().map(|d| d.entries.iter().map(|e| (e.id.clone(), e.label)).collect());
    let records = distill::build_records(&detections, gold.as_ref(), mode, &session.tree, &session.templates)
        .map_err(anyhow::Error::from)?;

    let out_dir = args.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"));
    create_dir(&out_dir)?;
    let path = out_dir.join("distill.jsonl");
    let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    let n = distill::export_jsonl(&records, BufWriter::new(f)).map_err(anyhow::Error::from)?;
    if args.from_trace.is_none() {
        write_trace_file(&out_dir.join("trace.jsonl"), &detections)?;
    }
    let mut inputs: Vec<(&str, &Path)> = Vec::new();
    if let Some(t) = &args.from_trace {
        inputs.push(("trace", t));
    }
    if let Some(d) = &args.dataset {
        inputs.push(("dataset", d));
    }
    write_json(&out_dir.join("manifest.json"), &session.manifest("distill", &inputs)?)?;

    if n == 0 {
        log::warn!("no distillation records were produced");
    }
    println!("records:   {n}");
    match distill::mask_rate(&records) {
        Some(rate) => println!("mask rate: {rate:.4}"),
        None => println!("mask rate: N/A"),
    }
    println!("written:   {}", path.display());
    Ok(())
}

fn cmd_devset_build(args: &DevsetBuildArgs, file: &FileConfig) -> CliResult<()> {
    let config = RunConfig::resolve_with(&args.run, Some(FewShotMode::ZeroShot), file, false)?;
    let dataset = load_dataset(&args.dataset)?;
    let rationales = match &args.rationales_from {
        Some(p) => Some(fewshot::agreeing_rationales(&dataset, &load_trace(p)?)),
        None => None,
    };
    let k = config.dtot.k;
    let session = Session::open(config)?;
    let embedder = session.make_embedder(None)?;
    let devset = fewshot::build_devset(
        &dataset,
        embedder.as_ref(),
        k,
        rationales.as_ref(),
        session.config.parallelism,
    )
    .map_err(|e| match e {
        fewshot::FewShotError::ClassStarvation { .. } => usage(e.to_string()),
        other => CliError::Runtime(other.into()),
    })?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let f = File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut w = BufWriter::new(f);
    devset.write_jsonl(&mut w).map_err(anyhow::Error::from)?;
    w.flush().map_err(anyhow::Error::from)?;
    let mut inputs: Vec<(&str, &Path)> = vec![("dataset", &args.dataset)];
    if let Some(p) = &args.rationales_from {
        inputs.push(("rationales", p));
    }
    let mut mpath = args.out.clone().into_os_string();
    mpath.push(".manifest.json");
    write_json(Path::new(&mpath), &session.manifest("devset build", &inputs)?)?;
    println!(
        "devset: {} entries ({} toxic, {} benign), dimension {}",
        devset.len(),
        devset.class_count(crate::promptgen::DemoLabel::Toxic),
        devset.class_count(crate::promptgen::DemoLabel::Benign),
        devset.dimension().unwrap_or(0)
    );
    Ok(())
}

fn cmd_tree_validate(path: &Path) -> CliResult<()> {
    if !path.exists() {
        return Err(usage(format!("tree file not found: {}", path.display())));
    }
    let t = ContextTree::load_path(path)
        .map_err(|e| CliError::Runtime(anyhow::anyhow!("{}: {e}", path.display())))?;
    println!("ok: {} nodes, depth {}, hash {}", t.len(), t.depth(), t.content_hash());
    Ok(())
}

fn cmd_trace_inspect(path: &Path) -> CliResult<()> {
    for r in load_trace(path)? {
        println!(
            "{}\t{}\t{:.4}\t{:?}\tsteps={}\t{}",
            r.statement_id,
            r.answer,
            r.final_confidence,
            r.final_decision,
            r.trace.len(),
            r.context_path().join(" > ")
        );
    }
    Ok(())
}

pub fn run(cli: Cli) -> CliResult<()> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    match &cli.command {
        Command::Detect(a) => cmd_detect(a, &file),
        Command::Eval(a) => cmd_eval(a, &file),
        Command::Distill(a) => cmd_distill(a, &file),
        Command::Devset(DevsetCommand::Build(a)) => cmd_devset_build(a, &file),
        Command::Tree(TreeCommand::Validate { path }) => cmd_tree_validate(path),
        Command::Trace(TraceCommand::Inspect { path }) => cmd_trace_inspect(path),
    }
}

fn run_args(command: &Command) -> Option<&RunArgs> {
    match command {
        Command::Detect(a) => Some(&a.run),
        Command::Eval(a) => Some(&a.run),
        Command::Distill(a) => Some(&a.run),
        Command::Devset(DevsetCommand::Build(a)) => Some(&a.run),
        Command::Tree(_) | Command::Trace(_) => None,
    }
}

/// Parses `std::env::args`, runs, and returns the process exit code.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    let mut logger = env_logger::Builder::new();
    logger.filter_level(level);
    if run_args(&cli.command).is_some_and(|r| r.trace) && level < log::LevelFilter::Info {
        logger.filter_module("dtot::backend::http", log::LevelFilter::Info);
    }
    let _ = logger.parse_default_env().try_init();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("dtot").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn flags_override_config_file() {
        let cli = parse(&["detect", "--text", "x", "--s-high", "80", "--scenario", "Cargo.toml"]);
        let Command::Detect(a) = cli.command else { panic!() };
        let file: FileConfig = toml::from_str("s-high = 70\ns-low = 5\nmax-steps = 3\n").unwrap();
        let cfg = RunConfig::resolve(&a.run, None, &file).unwrap();
        assert_eq!(cfg.dtot.confidence.s_high, 80);
        assert_eq!(cfg.dtot.confidence.s_low, 5);
        assert_eq!(cfg.dtot.max_steps, 3);
    }

    #[test]
    fn fsr_without_devset_is_a_usage_error() {
        let cli = parse(&["detect", "--text", "x", "--mode", "fsr", "--scenario", "Cargo.toml"]);
        let Command::Detect(a) = cli.command else { panic!() };
        let err = RunConfig::resolve(&a.run, a.mode.map(Into::into), &FileConfig::default()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("--devset"), "{err}");
    }

    #[test]
    fn missing_tree_names_the_path() {
        let cli =
            parse(&["detect", "--text", "x", "--tree", "nowhere/tree.json", "--scenario", "Cargo.toml"]);
        let Command::Detect(a) = cli.command else { panic!() };
        let err = RunConfig::resolve(&a.run, None, &FileConfig::default()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("nowhere/tree.json"));
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        assert!(toml::from_str::<FileConfig>("s_high = 3\n").is_err());
    }
}
