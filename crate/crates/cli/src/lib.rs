//! Command-line surface: training, analysis, ablation and complexity reports
//! driven by TOML run configs.

pub mod commands;
pub mod config;
pub mod corpus;
pub mod error;
pub mod train;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::corpus::{detokenize, ingest, tokenize, Corpus};
use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "xflab", version, about = "Attention-projection mixing laboratory")]
pub struct Cli {
    /// TOML run config.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Seed (overrides `seed`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on the configured corpus.
    Train {
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Write per-metric CSVs for a checkpoint.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated metric names (default: the config's list).
        #[arg(long, value_delimiter = ',')]
        metrics: Option<Vec<String>>,
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Parameter and FLOP accounting for a config.
    Complexity {
        /// Verify the published parameter counts, ratios and schedules.
        #[arg(long)]
        check_tables: bool,
    },
    /// Compare metrics with and without the anchor pathway.
    Ablate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Load a corpus and report its split.
    IngestCheck {
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
}

/// Config from `--config` (if any) with command-line overrides applied.
fn run_config(cli: &Cli) -> CliResult<Option<RunConfig>> {
    let Some(path) = &cli.config else { return Ok(None) };
    let mut cfg = RunConfig::load(path)?;
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(Some(cfg))
}

fn out_dir(cli: &Cli, cfg: Option<&RunConfig>) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| cfg.map(|c| c.out_dir.clone()))
        .unwrap_or_else(|| PathBuf::from("."))
}

fn load_corpus(flag: Option<&Path>, cfg: Option<&RunConfig>, seed: u64) -> CliResult<Option<Corpus>> {
    let path = flag.map(Path::to_path_buf).or_else(|| cfg.and_then(|c| c.data.corpus.clone()));
    let split = cfg.map_or(0.1, |c| c.data.split_frac);
    path.map(|p| ingest(&p, split, seed)).transpose()
}

pub fn run(cli: &Cli) -> CliResult<()> {
    let cfg = run_config(cli)?;
    let seed = cli.seed.or(cfg.as_ref().map(|c| c.seed)).unwrap_or(0);
    let out = out_dir(cli, cfg.as_ref());
    match &cli.command {
        Command::Train { resume } => {
            let cfg = cfg.ok_or_else(|| CliError::Config("train needs --config".into()))?;
            let corpus = load_corpus(None, Some(&cfg), seed)?
                .ok_or_else(|| CliError::Config("data.corpus: train needs a corpus".into()))?;
            let o = train::train(&cfg, &corpus, resume.as_deref())?;
            println!(
                "trained {} steps: loss {:.4} -> {:.4}{}; checkpoint {}",
                o.steps_run,
                o.initial_loss,
                o.final_loss,
                o.validation_loss.map_or(String::new(), |v| format!(", validation {v:.4}")),
                o.final_checkpoint.display()
            );
        }
        Command::Analyze { checkpoint, metrics, corpus } => {
            let analysis = cfg.as_ref().map(|c| c.analysis.clone()).unwrap_or_default();
            let metrics = metrics.clone().unwrap_or(analysis.metrics.clone());
            for m in &metrics {
                if !config::ALL_METRICS.contains(&m.as_str()) {
                    return Err(CliError::Config(format!("unknown metric `{m}`")));
                }
            }
            let corpus = load_corpus(corpus.as_deref(), cfg.as_ref(), seed)?;
            let o = commands::analyze(
                checkpoint,
                corpus.as_ref(),
                &metrics,
                analysis.sequences,
                analysis.variance_target,
                &out,
            )?;
            for p in &o.written {
                println!("wrote {}", p.display());
            }
        }
        Command::Complexity { check_tables } => {
            let model = cfg.as_ref().map(RunConfig::model_config).transpose()?;
            commands::complexity(model.as_ref(), *check_tables, &out)?;
        }
        Command::Ablate { checkpoint, corpus } => {
            let analysis = cfg.as_ref().map(|c| c.analysis.clone()).unwrap_or_default();
            let corpus = load_corpus(corpus.as_deref(), cfg.as_ref(), seed)?
                .ok_or_else(|| CliError::Config("ablate needs a corpus (data.corpus or --corpus)".into()))?;
            for p in commands::ablate(checkpoint, &corpus, analysis.sequences, analysis.variance_target, &out)? {
                println!("wrote {}", p.display());
            }
        }
        Command::IngestCheck { corpus } => {
            let c = load_corpus(corpus.as_deref(), cfg.as_ref(), seed)?
                .ok_or_else(|| CliError::Config("ingest-check needs a corpus (data.corpus or --corpus)".into()))?;
            let round_trip = detokenize(&tokenize(&c.bytes)) == c.bytes;
            println!(
                "bytes {}  train {}  validation {}  round-trip {}",
                c.bytes.len(),
                c.train().len(),
                c.validation().len(),
                if round_trip { "ok" } else { "FAILED" }
            );
            if !round_trip {
                return Err(CliError::Assertion("byte round-trip failed".into()));
            }
        }
    }
    Ok(())
}
