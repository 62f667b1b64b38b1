//! Command-line driver for `rode-core`: JSON run configs, seeded runs and
//! write-once CSV/JSON artifacts.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Parser;
use serde::Serialize;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

pub mod commands;
pub mod config;

pub use config::{Command, RunConfig};

/// Environment variable that overrides the output directory.
pub const OUT_ENV: &str = "RODE_QCTL_OUT";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("did not converge: {0}")]
    NotConverged(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    /// 2 for config errors, 3 for numeric failures, 4 for nonconvergence,
    /// 1 for i/o errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::NotConverged(_) => 4,
            CliError::Io(_) => 1,
        }
    }
}

impl From<rode_core::Error> for CliError {
    fn from(e: rode_core::Error) -> Self {
        match e {
            rode_core::Error::InvalidArgument(m) => CliError::Config(m),
            other => CliError::Numeric(other.to_string()),
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Parser)]
#[command(name = "rode-qctl", version, about = "Random Schrödinger equation toolkit")]
pub struct Cli {
    #[arg(value_enum)]
    pub command: Command,
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (also settable via RODE_QCTL_OUT).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `key.path=value` assignments applied to the config before parsing.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArtifactEntry {
    pub file: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub toolkit_version: String,
    pub command: String,
    pub seed: u64,
    pub config: RunConfig,
    pub artifacts: Vec<ArtifactEntry>,
    pub summary: Map<String, Value>,
    pub wall_clock_seconds: f64,
}

/// Buffered artifact file.
pub type Sink = BufWriter<File>;

/// Write-once artifact directory.
pub struct Artifacts {
    dir: PathBuf,
    entries: Vec<ArtifactEntry>,
}

impl Artifacts {
    /// Creates `dir`, refusing one that already holds files.
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        if dir.exists() {
            if !dir.is_dir() {
                return Err(CliError::Io(format!("{} exists and is not a directory", dir.display())));
            }
            if fs::read_dir(dir)?.next().is_some() {
                return Err(CliError::Io(format!("{} already contains artifacts; refusing to overwrite", dir.display())));
            }
        }
        fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf(), entries: Vec::new() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Writes `name` once through `body`.
    pub fn write(&mut self, name: &str, body: impl FnOnce(&mut Sink) -> io::Result<()>) -> Result<(), CliError> {
        let path = self.dir.join(name);
        let file = OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
            CliError::Io(format!("cannot create {}: {e}", path.display()))
        })?;
        let mut w = BufWriter::new(file);
        body(&mut w)?;
        w.flush()?;
        drop(w);
        let data = fs::read(&path)?;
        self.entries.push(ArtifactEntry {
            file: name.to_string(),
            sha256: hex::encode(Sha256::digest(&data)),
            bytes: data.len() as u64,
        });
        Ok(())
    }

    fn finish(mut self, record: impl FnOnce(Vec<ArtifactEntry>) -> RunRecord) -> Result<RunRecord, CliError> {
        self.entries.sort_by(|a, b| a.file.cmp(&b.file));
        let rec = record(std::mem::take(&mut self.entries));
        let path = self.dir.join("run_record.json");
        let mut f = OpenOptions::new().write(true).create_new(true).open(&path)?;
        serde_json::to_writer_pretty(&mut f, &rec).map_err(|e| CliError::Io(e.to_string()))?;
        writeln!(f)?;
        Ok(rec)
    }
}

/// Summary scalars collected by a command.
#[derive(Debug, Default, Clone)]
pub struct Summary(pub Map<String, Value>);

impl Summary {
    pub fn set(&mut self, key: &str, v: impl Into<Value>) {
        self.0.insert(key.to_string(), v.into());
    }

    /// Non-finite floats are stored as strings so the record stays valid JSON.
    pub fn num(&mut self, key: &str, x: f64) {
        let v = serde_json::Number::from_f64(x).map_or_else(|| Value::String(x.to_string()), Value::Number);
        self.0.insert(key.to_string(), v);
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let text = match &cli.config {
        Some(p) => fs::read_to_string(p).map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?,
        None => String::new(),
    };
    let mut cfg = config::parse_config(&text, &cli.overrides)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Output directory: `--out`, then the environment variable, then the
/// config, then `runs/<command>-<seed>`.
pub fn output_dir(cli: &Cli, cfg: &RunConfig, env: Option<PathBuf>) -> PathBuf {
    cli.out
        .clone()
        .or(env)
        .or_else(|| cfg.output.clone())
        .unwrap_or_else(|| PathBuf::from(format!("runs/{}-{}", cli.command.name(), cfg.seed)))
}

/// Outcome of a run that produced artifacts: the record plus an optional
/// nonconvergence report.
pub struct RunOutcome {
    pub record: Option<RunRecord>,
    pub diagnostics: Vec<String>,
    pub failure: Option<CliError>,
}

/// Parses, validates and executes one command. Config errors abort before
/// any file is written.
pub fn run(cli: &Cli, env_out: Option<PathBuf>) -> Result<RunOutcome, CliError> {
    let cfg = load_config(cli)?;
    let diagnostics = cfg.diagnostics(cli.command);
    if cli.command == Command::Validate {
        return Ok(RunOutcome { record: None, diagnostics, failure: None });
    }
    if !diagnostics.is_empty() {
        return Err(CliError::Config(diagnostics.join("; ")));
    }
    let start = Instant::now();
    let mut artifacts = Artifacts::create(&output_dir(cli, &cfg, env_out))?;
    let mut summary = Summary::default();
    let failure = match commands::execute(cli.command, &cfg, &mut artifacts, &mut summary) {
        Ok(()) => None,
        Err(e @ CliError::NotConverged(_)) => Some(e),
        Err(e) => return Err(e),
    };
    summary.set("converged", failure.is_none());
    let elapsed = start.elapsed().as_secs_f64();
    let record = artifacts.finish(|entries| RunRecord {
        toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
        command: cli.command.name().to_string(),
        seed: cfg.seed,
        config: cfg.clone(),
        artifacts: entries,
        summary: summary.0,
        wall_clock_seconds: elapsed,
    })?;
    Ok(RunOutcome { record: Some(record), diagnostics: Vec::new(), failure })
}

/// Entry point used by the binary; returns the process exit code.
pub fn main_with(cli: Cli) -> i32 {
    let env_out = std::env::var_os(OUT_ENV).map(PathBuf::from);
    match run(&cli, env_out) {
        Ok(out) => {
            if cli.command == Command::Validate {
                if out.diagnostics.is_empty() {
                    let _ = writeln!(io::stdout(), "config is valid");
                    return 0;
                }
                for d in &out.diagnostics {
                    eprintln!("{d}");
                }
                return 2;
            }
            if let Some(rec) = &out.record {
                let _ = writeln!(io::stdout(), "{}", serde_json::to_string_pretty(&rec.summary).unwrap_or_default());
            }
            match out.failure {
                Some(e) => {
                    eprintln!("{e}");
                    e.exit_code()
                }
                None => 0,
            }
        }
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

/// Reads a previously written record as JSON.
pub fn read_record(dir: &Path) -> Result<Value, CliError> {
    let f = File::open(dir.join("run_record.json"))?;
    serde_json::from_reader(f).map_err(|e| CliError::Io(e.to_string()))
}
