//! Diagnostics over activation traces and checkpoints.
//!
//! Per-layer metrics come back as a [`MetricTable`]: one row per layer,
//! numbered from 1, with the embedding output as row `-1` when the trace
//! holds it.

mod ablation;
mod lambda;
mod metrics;
mod pca;

pub use ablation::{anchor_ablation_report, AblationReport};
pub use lambda::{lambda_ratio_map, LambdaRatio, LambdaRatioMap, LAMBDA_EPS, NEAR_ZERO_THRESHOLD};
pub use metrics::{
    attention_entropy, first_token_attention, gate_profile, layer_similarity_matrix, token_similarity,
    GATE_SPARSITY_THRESHOLD,
};
pub use pca::{core_feature_count, pca_core_features, singular_values};

use std::io::Write;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row index used for the embedding output in metric tables.
pub const EMBEDDING_ROW: i64 = -1;

/// Per-layer activations captured during one forward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ActivationTrace {
    n_layers: usize,
    /// Embedding output `[T, d]` (the stack's input).
    pub embeddings: Option<Tensor<f64>>,
    /// Output of each block, `[T, d]`.
    pub hidden: Vec<Tensor<f64>>,
    /// Attention weights per block, `[h, T, T]`.
    pub attention: Vec<Tensor<f64>>,
    /// Gate activations `σ(Ĝ)` per block, `[T, d]`; empty without gating.
    pub gates: Vec<Tensor<f64>>,
}

impl ActivationTrace {
    pub fn new(n_layers: usize) -> Self {
        Self {
            n_layers,
            ..Default::default()
        }
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    fn require(&self, what: &str, len: usize) -> Result<()> {
        if len == 0 {
            return Err(Error::Missing(format!("trace has no {what}")));
        }
        if len != self.n_layers {
            return Err(Error::Contract(format!(
                "trace holds {len} {what} entries for {} layers",
                self.n_layers
            )));
        }
        Ok(())
    }

    /// `(row index, hidden state)` pairs, embeddings first when present.
    fn hidden_rows(&self) -> Result<Vec<(i64, &Tensor<f64>)>> {
        self.require("hidden states", self.hidden.len())?;
        let mut rows: Vec<(i64, &Tensor<f64>)> = Vec::with_capacity(self.hidden.len() + 1);
        if let Some(e) = &self.embeddings {
            rows.push((EMBEDDING_ROW, e));
        }
        rows.extend(self.hidden.iter().enumerate().map(|(i, h)| (i as i64 + 1, h)));
        Ok(rows)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub layer: i64,
    pub values: Vec<f64>,
}

/// A named per-layer metric with one or more value columns.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricTable {
    pub metric: String,
    pub columns: Vec<String>,
    pub rows: Vec<MetricRow>,
}

impl MetricTable {
    pub fn new(metric: &str, columns: &[&str]) -> Self {
        Self {
            metric: metric.to_string(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, layer: i64, values: Vec<f64>) {
        debug_assert_eq!(values.len(), self.columns.len());
        self.rows.push(MetricRow { layer, values });
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Values of column `col` for the transformer layers (embedding row excluded).
    pub fn layer_values(&self, col: usize) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.layer != EMBEDDING_ROW)
            .map(|r| r.values[col])
            .collect()
    }

    /// Arithmetic mean over transformer layers of column `col`.
    pub fn layer_mean(&self, col: usize) -> f64 {
        let v = self.layer_values(col);
        v.iter().sum::<f64>() / v.len() as f64
    }

    /// CSV with header `layer,<columns>`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["layer".to_string()];
        header.extend(self.columns.iter().cloned());
        out.write_record(&header).map_err(csv_err)?;
        for r in &self.rows {
            let mut rec = vec![r.layer.to_string()];
            rec.extend(r.values.iter().map(|v| v.to_string()));
            out.write_record(&rec).map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Input(format!("csv: {other:?}")),
    }
}

/// Cosine similarity, `None` if either vector is zero.
pub(crate) fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}
