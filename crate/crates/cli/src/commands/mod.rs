//! Subcommand implementations and the plumbing they share: config loading
//! with flag overrides, the bounded worker pool and exit-code classification.

pub mod ablate;
pub mod gate;
pub mod score;
pub mod sensitivity;
pub mod serve;
pub mod synth;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, Context as _};
use clap::{Args, ValueEnum};
use serde::Serialize;

use gls_core::config::{ProviderConfig, RunConfig, TranscriptConfig, TranscriptMode};
use gls_core::fusion::TOOL_VERSION;
use gls_core::providers::TranscriptRecorder;
use gls_core::{Evaluator, StabilityMode};

/// Exit status contract: 0 all cases scored, 2 partial failure, 3 config failure.
pub const EXIT_OK: u8 = 0;
pub const EXIT_IO: u8 = 1;
pub const EXIT_PARTIAL: u8 = 2;
pub const EXIT_CONFIG: u8 = 3;

/// A command failure, classified for the exit code.
#[derive(Debug)]
pub enum CliError {
    /// Invalid config, manifest, resources, transcript or flags.
    Config(anyhow::Error),
    /// Anything else that aborts the run (e.g. unwritable output).
    Io(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Io(_) => EXIT_IO,
        })
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(e) => write!(f, "configuration error: {}", render_chain(e)),
            CliError::Io(e) => write!(f, "error: {}", render_chain(e)),
        }
    }
}

/// `context: cause: …`, skipping causes whose text the previous link already
/// quotes (the core error types embed their source in their message).
pub fn render_chain(e: &anyhow::Error) -> String {
    let mut parts: Vec<String> = Vec::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if parts.last().is_some_and(|prev| prev.contains(&msg)) {
            continue;
        }
        parts.push(msg);
    }
    parts.join(": ")
}

pub type CliResult<T> = Result<T, CliError>;

pub trait ConfigContext<T> {
    fn config_err(self, what: &str) -> CliResult<T>;
    fn io_err(self, what: &str) -> CliResult<T>;
}

impl<T, E: Into<anyhow::Error>> ConfigContext<T> for Result<T, E> {
    fn config_err(self, what: &str) -> CliResult<T> {
        self.map_err(|e| CliError::Config(e.into().context(what.to_owned())))
    }
    fn io_err(self, what: &str) -> CliResult<T> {
        self.map_err(|e| CliError::Io(e.into().context(what.to_owned())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StabilityFlag {
    Skip,
    On,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TranscriptModeFlag {
    /// Replay when the file exists, record otherwise.
    Auto,
    Record,
    Replay,
}

/// Flags shared by every scoring subcommand.
#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// JSON run configuration; built-in defaults when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `output_dir` in the config).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Case-level worker pool size (default: CPU count).
    #[arg(long)]
    pub workers: Option<usize>,
    /// Overrides the baseline provider seed and the stain-perturbation seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Evaluate the stability axis (`on`) or renormalize it away (`skip`).
    #[arg(long, value_enum)]
    pub stability: Option<StabilityFlag>,
    /// Provider transcript to record to or replay from.
    #[arg(long)]
    pub transcript: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "auto", requires = "transcript")]
    pub transcript_mode: TranscriptModeFlag,
}

/// A validated configuration with every flag override applied.
pub struct Context {
    pub config: RunConfig,
    pub evaluator: Evaluator,
    pub recorder: Option<Arc<TranscriptRecorder>>,
    pub out_dir: PathBuf,
    pub pool: rayon::ThreadPool,
}

impl Context {
    pub fn load(args: &CommonArgs) -> CliResult<Self> {
        let mut config = match &args.config {
            Some(p) => RunConfig::load(p).config_err("loading config")?,
            None => RunConfig::default(),
        };
        apply_overrides(&mut config, args);
        config.validate().config_err("validating config")?;
        let resources = config.load_resources().config_err("loading resources")?;
        let hash = config.hash(&resources);
        let built = config.build_providers(&resources).config_err("building providers")?;
        let evaluator = Evaluator::new(built.providers, resources, config.eval.clone())
            .config_err("building evaluator")?
            .with_config_hash(hash)
            .with_transcript_hash(built.transcript_hash);
        let workers = config
            .workers
            .unwrap_or_else(|| std::thread::available_parallelism().map(usize::from).unwrap_or(1));
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .io_err("starting worker pool")?;
        let out_dir = config.output_dir.clone().unwrap_or_else(|| PathBuf::from("gls-out"));
        Ok(Self {
            config,
            evaluator,
            recorder: built.recorder,
            out_dir,
            pool,
        })
    }

    pub fn config_hash(&self) -> &str {
        self.evaluator.config_hash()
    }

    /// Writes the recorded transcript, if this run was recording.
    pub fn flush_transcript(&self) -> CliResult<()> {
        if let (Some(rec), Some(t)) = (&self.recorder, &self.config.transcript) {
            rec.transcript().save(&t.path).io_err("writing transcript")?;
            eprintln!(
                "recorded {} provider calls to {}",
                rec.transcript().len(),
                t.path.display()
            );
        }
        Ok(())
    }

    pub fn ensure_out_dir(&self) -> CliResult<()> {
        fs::create_dir_all(&self.out_dir).io_err("creating output directory")
    }
}

fn apply_overrides(config: &mut RunConfig, args: &CommonArgs) {
    if let Some(out) = &args.out {
        config.output_dir = Some(out.clone());
    }
    if let Some(w) = args.workers {
        config.workers = Some(w);
    }
    if let Some(seed) = args.seed {
        config.eval.stability_options.perturbation.seed = seed;
        match &mut config.providers {
            ProviderConfig::Baseline { seed: s, .. } => *s = seed,
            ProviderConfig::Remote(_) => {}
        }
    }
    if let Some(s) = args.stability {
        config.eval.stability = match s {
            StabilityFlag::Skip => StabilityMode::Skip,
            StabilityFlag::On => StabilityMode::On,
        };
    }
    if let Some(path) = &args.transcript {
        let mode = match args.transcript_mode {
            TranscriptModeFlag::Record => TranscriptMode::Record,
            TranscriptModeFlag::Replay => TranscriptMode::Replay,
            TranscriptModeFlag::Auto if path.exists() => TranscriptMode::Replay,
            TranscriptModeFlag::Auto => TranscriptMode::Record,
        };
        config.transcript = Some(TranscriptConfig {
            path: path.clone(),
            mode,
        });
    }
}

/// Case ids become file names, so they must be plain path components.
pub fn check_case_id(id: &str) -> CliResult<()> {
    let bad =
        id.is_empty() || id.starts_with('.') || id.chars().any(|c| matches!(c, '/' | '\\' | '\0') || c.is_control());
    if bad {
        return Err(CliError::Config(anyhow!("case id {id:?} is not usable as a file name")));
    }
    Ok(())
}

/// A per-case failure line in `errors.jsonl`.
#[derive(Debug, Clone, Serialize)]
pub struct ErrorRecord {
    pub case_id: String,
    pub stage: String,
    pub error: String,
    pub config_hash: String,
    pub tool_version: &'static str,
}

impl ErrorRecord {
    pub fn new(case_id: &str, stage: impl Into<String>, error: impl std::fmt::Display, config_hash: &str) -> Self {
        Self {
            case_id: case_id.to_owned(),
            stage: stage.into(),
            error: format!("{error:#}"),
            config_hash: config_hash.to_owned(),
            tool_version: TOOL_VERSION,
        }
    }
}

pub fn write_errors(path: &Path, errors: &[ErrorRecord]) -> CliResult<()> {
    let mut sorted = errors.to_vec();
    sorted.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    let mut buf = Vec::new();
    for e in &sorted {
        serde_json::to_writer(&mut buf, e).io_err("serializing error record")?;
        buf.push(b'\n');
    }
    fs::write(path, buf)
        .with_context(|| path.display().to_string())
        .io_err("writing errors file")
}

/// Any JSON artifact other than a bundle: payload plus provenance.
#[derive(Debug, Serialize)]
pub struct Artifact<'a, T: Serialize> {
    pub config_hash: &'a str,
    pub tool_version: &'static str,
    #[serde(flatten)]
    pub body: T,
}

pub fn write_json<T: Serialize>(path: &Path, config_hash: &str, body: T) -> CliResult<()> {
    let art = Artifact {
        config_hash,
        tool_version: TOOL_VERSION,
        body,
    };
    let mut text = serde_json::to_string_pretty(&art).io_err("serializing output")?;
    text.push('\n');
    fs::write(path, text)
        .with_context(|| path.display().to_string())
        .io_err("writing output")
}

pub fn write_text(path: &Path, text: &[u8]) -> CliResult<()> {
    let mut f = fs::File::create(path)
        .with_context(|| path.display().to_string())
        .io_err("creating output file")?;
    f.write_all(text).io_err("writing output file")
}
