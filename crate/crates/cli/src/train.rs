//! Training loop: deterministic batches, periodic checkpoints, bitwise resume.

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use xflab_core::model::{CheckpointContainer, TransformerModel};
use xflab_core::optim::Optimizer;
use xflab_core::tensor::Element;

use crate::config::{Precision, RunConfig};
use crate::corpus::Corpus;
use crate::error::{CliError, CliResult};

pub const FINAL_CHECKPOINT: &str = "final.xfl";
pub const LOG_FILE: &str = "train_log.csv";
pub const RESOLVED_CONFIG: &str = "config.resolved.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub cross_entropy: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Loss of the first step this invocation ran, before its update.
    pub initial_loss: f64,
    /// Loss of the final model on the batch that would come next.
    pub final_loss: f64,
    pub validation_loss: Option<f64>,
    pub steps_run: u64,
    pub log: Vec<LogRecord>,
    pub final_checkpoint: PathBuf,
}

pub fn checkpoint_name(step: u64) -> String {
    format!("step_{step:06}.xfl")
}

/// Writes the resolved config next to the run's outputs.
pub fn echo_config(cfg: &RunConfig) -> CliResult<()> {
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join(RESOLVED_CONFIG), cfg.resolved()?.to_toml()?)?;
    Ok(())
}

pub fn train(cfg: &RunConfig, corpus: &Corpus, resume: Option<&Path>) -> CliResult<TrainOutcome> {
    train_with(cfg, corpus, resume, true)
}

/// [`train`] with optional progress lines on stdout; the CSV log is always written.
pub fn train_with(cfg: &RunConfig, corpus: &Corpus, resume: Option<&Path>, progress: bool) -> CliResult<TrainOutcome> {
    match cfg.train.precision {
        Precision::F32 => train_typed::<f32>(cfg, corpus, resume, progress),
        Precision::F64 => train_typed::<f64>(cfg, corpus, resume, progress),
    }
}

fn save<F: Element>(path: &Path, model: &TransformerModel<F>, opt: &Optimizer<F>, seed: u64) -> CliResult<()> {
    let mut c = model.to_container()?;
    opt.save_into(&mut c, model)?;
    c.meta.insert("run.seed".into(), seed.into());
    c.save(path)?;
    Ok(())
}

fn fault(step: u64, last_good: Option<&Path>, detail: String) -> CliError {
    let kept = match last_good {
        Some(p) => format!("last good checkpoint: {}", p.display()),
        None => "no checkpoint was written before the fault".into(),
    };
    CliError::NumericFault(format!("numeric fault at step {step}: {detail}; {kept}"))
}

fn train_typed<F: Element>(
    cfg: &RunConfig,
    corpus: &Corpus,
    resume: Option<&Path>,
    progress: bool,
) -> CliResult<TrainOutcome> {
    let model_cfg = cfg.model_config()?;
    echo_config(cfg)?;
    let (mut model, mut opt, mut last_good) = match resume {
        None => {
            let model = TransformerModel::<F>::build(model_cfg, cfg.seed)?;
            let opt = Optimizer::new(cfg.optim.clone(), &model)?;
            (model, opt, None)
        }
        Some(path) => {
            let c = CheckpointContainer::load(path)?;
            let model = TransformerModel::<F>::from_container(&c)?;
            if model.config() != &model_cfg {
                return Err(CliError::Config(format!(
                    "checkpoint {} was written for a different model config",
                    path.display()
                )));
            }
            let opt = Optimizer::load_from(&c, &model)?;
            if opt.config() != &cfg.optim {
                return Err(CliError::Config(format!(
                    "checkpoint {} was written with different optimizer settings",
                    path.display()
                )));
            }
            (model, opt, Some(path.to_path_buf()))
        }
    };

    let log_path = cfg.out_dir.join(LOG_FILE);
    let fresh_log = resume.is_none() || !log_path.exists();
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh_log)
        .truncate(fresh_log)
        .open(&log_path)?;
    let mut writer = csv::WriterBuilder::new().has_headers(fresh_log).from_writer(file);

    let (bs, seq) = (cfg.data.batch_size, cfg.model.seq_len);
    let total = cfg.optim.total_steps;
    let start = opt.step_count();
    let mut log = Vec::new();
    let mut initial_loss = f64::NAN;
    for step in start..total {
        let batch = corpus.train_batch(step, bs, seq)?;
        let (loss, mut grads) = model.loss_and_grads(&batch).map_err(|e| match e {
            e if e.is_numeric_fault() => fault(step, last_good.as_deref(), e.to_string()),
            e => e.into(),
        })?;
        if !loss.total.is_finite() {
            return Err(fault(step, last_good.as_deref(), format!("loss = {}", loss.total)));
        }
        if step == start {
            initial_loss = loss.total;
        }
        let report = opt.step(&mut model, &mut grads).map_err(|e| match e {
            e if e.is_numeric_fault() => fault(step, last_good.as_deref(), e.to_string()),
            e => e.into(),
        })?;
        if step % cfg.train.log_every == 0 || step + 1 == total {
            let rec = LogRecord {
                step,
                lr: cfg.optim.adamw_lr * report.lr_multiplier,
                loss: loss.total,
                cross_entropy: loss.cross_entropy,
                grad_norm: report.grad_norm,
            };
            if progress {
                println!(
                    "step {:>6}  lr {:.3e}  loss {:.4}  grad_norm {:.4}",
                    rec.step, rec.lr, rec.loss, rec.grad_norm
                );
            }
            writer.serialize(&rec)?;
            writer.flush()?;
            log.push(rec);
        }
        let done = step + 1;
        if done % cfg.train.checkpoint_every == 0 {
            let path = cfg.out_dir.join(checkpoint_name(done));
            save(&path, &model, &opt, cfg.seed)?;
            last_good = Some(path);
        }
    }

    let final_checkpoint = cfg.out_dir.join(FINAL_CHECKPOINT);
    save(&final_checkpoint, &model, &opt, cfg.seed)?;
    let final_loss = model.loss(&corpus.train_batch(total, bs, seq)?)?.total;
    let windows = corpus.eval_windows(bs, seq);
    let validation_loss = if windows.is_empty() {
        None
    } else {
        Some(model.loss(&windows)?.total)
    };
    Ok(TrainOutcome {
        initial_loss,
        final_loss,
        validation_loss,
        steps_run: total.saturating_sub(start),
        log,
        final_checkpoint,
    })
}
