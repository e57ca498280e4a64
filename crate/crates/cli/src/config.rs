//! TOML run configuration.
//!
//! The `[model]` section names a variant and sizes; mixing fields left out
//! take the variant's defaults. [`RunConfig::resolved`] fills every optional
//! field so the echoed file replays the run exactly.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use xflab_core::model::{Component, Granularity, ModelConfig, NormPolicy, Variant};
use xflab_core::optim::OptimConfig;

use crate::error::{CliError, CliResult};

/// 256 byte values plus one padding id.
pub const BYTE_VOCAB: usize = 257;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub model: ModelSection,
    pub optim: OptimConfig,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub analysis: AnalysisSection,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub variant: Variant,
    #[serde(default = "d_layers")]
    pub n_layers: usize,
    #[serde(default = "d_width")]
    pub d_model: usize,
    #[serde(default = "d_heads")]
    pub n_heads: usize,
    #[serde(default = "d_seq")]
    pub seq_len: usize,
    #[serde(default = "d_vocab")]
    pub vocab_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_ff: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gating: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub granularity: Option<Granularity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm_policy: Option<NormPolicy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub components: Option<Vec<Component>>,
    #[serde(default)]
    pub dynamic: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rope_theta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rmsnorm_eps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z_loss_weight: Option<f64>,
    #[serde(default)]
    pub tie_embeddings: bool,
}

fn d_layers() -> usize {
    4
}
fn d_width() -> usize {
    64
}
fn d_heads() -> usize {
    4
}
fn d_seq() -> usize {
    64
}
fn d_vocab() -> usize {
    BYTE_VOCAB
}

impl ModelSection {
    pub fn toy(variant: Variant) -> Self {
        Self {
            variant,
            n_layers: d_layers(),
            d_model: d_width(),
            n_heads: d_heads(),
            seq_len: d_seq(),
            vocab_size: d_vocab(),
            d_ff: None,
            gating: None,
            granularity: None,
            norm_policy: None,
            components: None,
            dynamic: false,
            rope_theta: None,
            rmsnorm_eps: None,
            z_loss_weight: None,
            tie_embeddings: false,
        }
    }

    /// Variant preset with this section's overrides applied, validated.
    pub fn to_model_config(&self) -> CliResult<ModelConfig> {
        let mut c = ModelConfig::preset(
            self.variant,
            self.n_layers,
            self.d_model,
            self.n_heads,
            self.vocab_size,
            self.seq_len,
        );
        if let Some(v) = self.d_ff {
            c.d_ff = v;
        }
        if let Some(v) = self.gating {
            c.gating = v;
        }
        if let Some(v) = self.granularity {
            c.mix.granularity = v;
        }
        if let Some(v) = self.norm_policy {
            c.mix.norm_policy = v;
        }
        if let Some(v) = &self.components {
            c.mix.components = v.clone();
        }
        c.mix.dynamic = self.dynamic;
        if let Some(v) = self.rope_theta {
            c.rope_theta = v;
        }
        if let Some(v) = self.rmsnorm_eps {
            c.rmsnorm_eps = v;
        }
        if let Some(v) = self.z_loss_weight {
            c.z_loss_weight = v;
        }
        c.tie_embeddings = self.tie_embeddings;
        c.validate().map_err(|e| match e {
            xflab_core::Error::Config { field, reason } => CliError::Config(format!("model.{field}: {reason}")),
            other => CliError::Config(other.to_string()),
        })?;
        Ok(c)
    }

    fn resolved(&self) -> CliResult<Self> {
        let c = self.to_model_config()?;
        Ok(Self {
            d_ff: Some(c.d_ff),
            gating: Some(c.gating),
            granularity: Some(c.mix.granularity),
            norm_policy: Some(c.mix.norm_policy),
            components: Some(c.mix.components.clone()),
            rope_theta: Some(c.rope_theta),
            rmsnorm_eps: Some(c.rmsnorm_eps),
            z_loss_weight: Some(c.z_loss_weight),
            ..self.clone()
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    /// Fraction of the corpus held out as a contiguous validation tail.
    #[serde(default = "d_split")]
    pub split_frac: f64,
    /// Sequences per optimizer step.
    #[serde(default = "d_batch")]
    pub batch_size: usize,
}

fn d_split() -> f64 {
    0.1
}
fn d_batch() -> usize {
    4
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            corpus: None,
            split_frac: d_split(),
            batch_size: d_batch(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "d_log")]
    pub log_every: u64,
    #[serde(default = "d_ckpt")]
    pub checkpoint_every: u64,
    #[serde(default = "d_precision")]
    pub precision: Precision,
}

fn d_log() -> u64 {
    10
}
fn d_ckpt() -> u64 {
    100
}
fn d_precision() -> Precision {
    Precision::F32
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            log_every: d_log(),
            checkpoint_every: d_ckpt(),
            precision: d_precision(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    #[serde(default = "d_metrics")]
    pub metrics: Vec<String>,
    /// Validation windows averaged per metric.
    #[serde(default = "d_sequences")]
    pub sequences: usize,
    #[serde(default = "d_target")]
    pub variance_target: f64,
}

pub const ALL_METRICS: [&str; 7] = [
    "entropy",
    "sink",
    "similarity",
    "pca",
    "gates",
    "layer_similarity",
    "lambda_ratio",
];

fn d_metrics() -> Vec<String> {
    ALL_METRICS.iter().map(|s| s.to_string()).collect()
}
fn d_sequences() -> usize {
    4
}
fn d_target() -> f64 {
    0.99
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            metrics: d_metrics(),
            sequences: d_sequences(),
            variance_target: d_target(),
        }
    }
}

impl RunConfig {
    /// Toy-sized config for `variant` with `steps` optimizer steps.
    pub fn toy(variant: Variant, steps: u64) -> Self {
        Self {
            seed: 0,
            out_dir: default_out_dir(),
            model: ModelSection::toy(variant),
            optim: OptimConfig::new(steps),
            data: DataSection::default(),
            train: TrainSection::default(),
            analysis: AnalysisSection::default(),
        }
    }

    pub fn from_toml(text: &str) -> CliResult<Self> {
        let de = toml::Deserializer::new(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let msg = inner.message().trim_end().to_string();
            if path == "." {
                CliError::Config(msg)
            } else {
                CliError::Config(format!("{path}: {msg}"))
            }
        })
    }

    /// Parses and validates a config file. A relative corpus path is taken
    /// relative to the file's directory and stored as an absolute path, so
    /// the echoed config replays from anywhere.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        if let (Some(corpus), Some(dir)) = (&cfg.data.corpus, path.parent()) {
            if corpus.is_relative() {
                let joined = dir.join(corpus);
                cfg.data.corpus = Some(std::path::absolute(&joined).unwrap_or(joined));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.model.to_model_config()?;
        self.optim.validate().map_err(|e| match e {
            xflab_core::Error::Config { field, reason } => CliError::Config(format!("optim.{field}: {reason}")),
            other => CliError::Config(other.to_string()),
        })?;
        let bad = |m: &str| Err(CliError::Config(m.to_string()));
        if !(self.data.split_frac > 0.0 && self.data.split_frac < 1.0) {
            return bad("data.split_frac: must lie strictly between 0 and 1");
        }
        if self.data.batch_size == 0 {
            return bad("data.batch_size: must be positive");
        }
        if self.train.log_every == 0 || self.train.checkpoint_every == 0 {
            return bad("train: log_every and checkpoint_every must be positive");
        }
        for m in &self.analysis.metrics {
            if !ALL_METRICS.contains(&m.as_str()) {
                return Err(CliError::Config(format!(
                    "analysis.metrics: unknown metric `{m}` (known: {})",
                    ALL_METRICS.join(", ")
                )));
            }
        }
        if !(self.analysis.variance_target > 0.0 && self.analysis.variance_target <= 1.0) {
            return bad("analysis.variance_target: must lie in (0, 1]");
        }
        if self.analysis.sequences == 0 {
            return bad("analysis.sequences: must be positive");
        }
        Ok(())
    }

    pub fn model_config(&self) -> CliResult<ModelConfig> {
        self.model.to_model_config()
    }

    /// Copy with every defaulted model field written out.
    pub fn resolved(&self) -> CliResult<Self> {
        Ok(Self {
            model: self.model.resolved()?,
            ..self.clone()
        })
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::Other(format!("serializing config: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_gets_defaults() {
        let cfg = RunConfig::from_toml("[model]\nvariant = \"gated\"\n[optim]\ntotal_steps = 5\n").unwrap();
        assert_eq!(cfg.model.d_model, 64);
        assert_eq!(cfg.model.vocab_size, BYTE_VOCAB);
        assert_eq!(cfg.train.log_every, 10);
        assert_eq!(cfg.train.checkpoint_every, 100);
        assert_eq!(cfg.optim.adamw_betas, (0.9, 0.95));
    }

    #[test]
    fn errors_carry_the_field_path() {
        let err = RunConfig::from_toml("[model]\nvariant = \"gated\"\nd_model = \"wide\"\n[optim]\ntotal_steps = 5\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("model.d_model"), "{err}");
        let err = RunConfig::from_toml("[model]\nvariant = \"gated\"\nbogus = 1\n[optim]\ntotal_steps = 5\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("bogus"), "{err}");
    }

    #[test]
    fn resolved_round_trips() {
        let mut cfg = RunConfig::toy(Variant::Exoformer, 7);
        cfg.model.granularity = Some(Granularity::Headwise);
        let r = cfg.resolved().unwrap();
        let back = RunConfig::from_toml(&r.to_toml().unwrap()).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.model_config().unwrap(), cfg.model_config().unwrap());
    }
}
