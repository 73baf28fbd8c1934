//! The `ipt` command-line driver.
//!
//! Every command loads and validates its config before doing any work,
//! stages its artifacts in memory, and writes them plus a [`RunManifest`]
//! only after the run succeeds.

mod commands;
pub mod config;
pub mod lab;

use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;

pub use config::{LoadedConfig, Overrides, RunConfig};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(name = "ipt", version, about = "Instance-wise prompt tuning on a desk-scale frozen backbone")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON run config; flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Strategy name, e.g. `random-ipt` or `encoder-ipt-rnn`.
    #[arg(long, global = true)]
    pub strategy: Option<String>,
    /// Sweep axis: prompt-length, utilization-rate or strategy.
    #[arg(long, global = true)]
    pub axis: Option<String>,
    /// Comma-separated sweep values.
    #[arg(long, global = true)]
    pub values: Option<String>,
    /// Few-shot examples per label.
    #[arg(long, global = true)]
    pub k: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Write the synthetic task, category corpus and MLM sentences.
    GenData,
    /// Masked-LM pretraining of the backbone.
    PretrainBackbone,
    /// Train the category classifier whose embedding seeds Pretrained IPT.
    PretrainPrompts,
    /// Train one strategy on the frozen backbone.
    Train,
    /// Few-shot protocol: cross-validated grid search, then a final fit.
    FewShot,
    /// One run per value of a hyperparameter axis.
    Sweep,
    /// Projections, distance statistics and prompt case studies.
    Analyze,
    /// Markdown comparison of finished run directories.
    Report {
        /// Run directories to compare.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Self::GenData => "gen-data",
            Self::PretrainBackbone => "pretrain-backbone",
            Self::PretrainPrompts => "pretrain-prompts",
            Self::Train => "train",
            Self::FewShot => "few-shot",
            Self::Sweep => "sweep",
            Self::Analyze => "analyze",
            Self::Report { .. } => "report",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub started_at: String,
    pub finished_at: String,
    /// Artifact file names relative to the run directory.
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn load(run_dir: &Path) -> Result<Self> {
        crate::io::read_json(&run_dir.join(MANIFEST_FILE))
    }
}

/// Artifacts held in memory until the run finishes.
#[derive(Debug, Default)]
pub struct Outputs {
    files: Vec<(String, Vec<u8>)>,
}

impl Outputs {
    pub fn text(&mut self, name: &str, body: impl Into<String>) {
        self.files.push((name.to_string(), body.into().into_bytes()));
    }

    pub fn json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.text(name, s);
        Ok(())
    }

    pub fn jsonl<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<()> {
        let mut s = String::new();
        for r in rows {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        self.text(name, s);
        Ok(())
    }

    pub fn names(&self) -> Vec<String> {
        self.files.iter().map(|f| f.0.clone()).collect()
    }

    /// Writes every artifact, then the manifest last.
    fn commit(self, dir: &Path, manifest: &RunManifest) -> Result<()> {
        for (name, bytes) in &self.files {
            write_atomic(&dir.join(name), bytes)?;
        }
        crate::io::write_json(&dir.join(MANIFEST_FILE), manifest)
    }
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

/// Runs a parsed command line.
pub fn run(cli: &Cli) -> Result<()> {
    let overrides = Overrides {
        seed: cli.seed,
        strategy: cli.strategy.clone(),
        axis: cli.axis.clone(),
        values: cli.values.clone(),
        k: cli.k,
    };
    let loaded = LoadedConfig::load(cli.config.as_deref(), &overrides)?;
    loaded.config.validate()?;
    if cli.out.is_file() {
        return Err(Error::config(format!("--out {} is a file", cli.out.display())));
    }
    if cli.jobs == Some(0) {
        return Err(Error::config("--jobs must be positive"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs.unwrap_or(0))
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;

    let started_at = now();
    let outputs = pool.install(|| commands::dispatch(&cli.command, &loaded))?;
    let manifest = RunManifest {
        command: cli.command.name().to_string(),
        config_path: loaded.path.clone(),
        config_hash: loaded.hash.clone(),
        seed: loaded.config.seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        started_at,
        finished_at: now(),
        outputs: outputs.names(),
    };
    outputs.commit(&cli.out, &manifest)
}

/// Process exit code for a run outcome: 0, 2 for config errors, 1 otherwise.
pub fn exit_code(result: &Result<()>) -> u8 {
    match result {
        Ok(()) => 0,
        Err(e) if e.is_config() => 2,
        Err(_) => 1,
    }
}
