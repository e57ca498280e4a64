use super::{pca_core_features, token_similarity, ActivationTrace, MetricTable};
use crate::error::{Error, Result};
use crate::model::{TraceOptions, TransformerModel};
use crate::tensor::Element;

/// Core features and token similarity per layer with and without the anchor.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub before: MetricTable,
    pub after: MetricTable,
}

fn summarize(traces: &[ActivationTrace], variance_target: f64, name: &str) -> Result<MetricTable> {
    let mut table = MetricTable::new(name, &["pca_features", "token_similarity"]);
    let mut sums: Vec<(i64, f64, f64)> = Vec::new();
    for tr in traces {
        let pca = pca_core_features(tr, variance_target)?;
        let sim = token_similarity(tr)?;
        if sums.is_empty() {
            sums = pca.rows.iter().map(|r| (r.layer, 0.0, 0.0)).collect();
        }
        for ((acc, p), s) in sums.iter_mut().zip(&pca.rows).zip(&sim.rows) {
            acc.1 += p.values[0];
            acc.2 += s.values[0];
        }
    }
    let n = traces.len() as f64;
    for (layer, p, s) in sums {
        table.push(layer, vec![p / n, s / n]);
    }
    Ok(table)
}

/// Runs each sequence through the model with and without its anchor and
/// averages the per-layer metrics over sequences.
pub fn anchor_ablation_report<F: Element>(
    model: &TransformerModel<F>,
    sequences: &[Vec<usize>],
    variance_target: f64,
) -> Result<AblationReport> {
    let ablated = model.ablate_anchor()?;
    if sequences.is_empty() {
        return Err(Error::Input("ablation report needs at least one sequence".into()));
    }
    let opts = TraceOptions {
        hidden: true,
        ..Default::default()
    };
    let mut before = Vec::with_capacity(sequences.len());
    let mut after = Vec::with_capacity(sequences.len());
    for seq in sequences {
        let full = model.forward_with(
            seq,
            &crate::model::ForwardOptions {
                trace: opts,
                ablate_anchor: false,
            },
        )?;
        before.push(full.trace.expect("trace requested"));
        after.push(ablated.forward_with(seq, opts)?.trace.expect("trace requested"));
    }
    Ok(AblationReport {
        before: summarize(&before, variance_target, "ablation_before")?,
        after: summarize(&after, variance_target, "ablation_after")?,
    })
}
