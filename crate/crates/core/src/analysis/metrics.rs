use super::{cosine, ActivationTrace, MetricTable};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gate activations below this count as closed.
pub const GATE_SPARSITY_THRESHOLD: f64 = 0.2;

fn attention_dims(a: &Tensor<f64>) -> Result<(usize, usize)> {
    let s = a.shape();
    if s.len() != 3 || s[1] != s[2] {
        return Err(Error::Shape(format!("attention matrix must be [h, T, T], got {s:?}")));
    }
    Ok((s[0], s[1]))
}

/// Mean over heads and queries of the row entropy `−Σ_{j≤t} A ln A`.
pub fn attention_entropy(trace: &ActivationTrace) -> Result<MetricTable> {
    trace.require("attention matrices", trace.attention.len())?;
    let mut table = MetricTable::new("entropy", &["entropy"]);
    for (i, a) in trace.attention.iter().enumerate() {
        let (h, t) = attention_dims(a)?;
        let mut total = 0.0;
        for row in a.data().chunks(t).enumerate().map(|(r, row)| &row[..=(r % t)]) {
            total -= row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>();
        }
        table.push(i as i64 + 1, vec![total / (h * t) as f64]);
    }
    Ok(table)
}

/// Mean attention on token 0 over heads and queries `t ≥ 1`.
pub fn first_token_attention(trace: &ActivationTrace) -> Result<MetricTable> {
    trace.require("attention matrices", trace.attention.len())?;
    let mut table = MetricTable::new("sink", &["sink"]);
    for (i, a) in trace.attention.iter().enumerate() {
        let (h, t) = attention_dims(a)?;
        if t < 2 {
            return Err(Error::Input(format!("sink mass needs at least 2 positions, got {t}")));
        }
        let mut total = 0.0;
        for head in 0..h {
            for q in 1..t {
                total += a.data()[(head * t + q) * t];
            }
        }
        table.push(i as i64 + 1, vec![total / (h * (t - 1)) as f64]);
    }
    Ok(table)
}

/// Mean pairwise cosine similarity between token representations of each
/// layer; zero rows are skipped and counted in `skipped_pairs`.
pub fn token_similarity(trace: &ActivationTrace) -> Result<MetricTable> {
    let mut table = MetricTable::new("similarity", &["similarity", "skipped_pairs"]);
    for (layer, h) in trace.hidden_rows()? {
        if h.rank() != 2 {
            return Err(Error::Shape(format!("hidden state must be [T, d], got {:?}", h.shape())));
        }
        let t = h.shape()[0];
        let (mut sum, mut count, mut skipped) = (0.0, 0usize, 0usize);
        for i in 0..t {
            for j in i + 1..t {
                match cosine(h.row(i), h.row(j)) {
                    Some(c) => {
                        sum += c;
                        count += 1;
                    }
                    None => skipped += 1,
                }
            }
        }
        let mean = if count > 0 { sum / count as f64 } else { f64::NAN };
        if skipped > 0 {
            log::warn!("token_similarity: layer {layer}: skipped {skipped} pairs with a zero vector");
        }
        table.push(layer, vec![mean, skipped as f64]);
    }
    Ok(table)
}

/// Mean gate activation and fraction below [`GATE_SPARSITY_THRESHOLD`] per
/// layer; an empty table when the trace has no gates.
pub fn gate_profile(trace: &ActivationTrace) -> Result<MetricTable> {
    let mut table = MetricTable::new("gates", &["mean", "sparsity"]);
    if trace.gates.is_empty() {
        return Ok(table);
    }
    trace.require("gate activations", trace.gates.len())?;
    for (i, g) in trace.gates.iter().enumerate() {
        let n = g.numel() as f64;
        let mean = g.data().iter().sum::<f64>() / n;
        let closed = g.data().iter().filter(|&&v| v < GATE_SPARSITY_THRESHOLD).count();
        table.push(i as i64 + 1, vec![mean, closed as f64 / n]);
    }
    Ok(table)
}

/// `L×L` matrix whose `(i, j)` entry is the mean over tokens of the cosine
/// between layer `i` and layer `j` hidden states. Tokens where either vector
/// is zero are skipped.
pub fn layer_similarity_matrix(trace: &ActivationTrace) -> Result<Vec<Vec<f64>>> {
    trace.require("hidden states", trace.hidden.len())?;
    let l = trace.hidden.len();
    let t = trace.hidden[0].shape()[0];
    let mut m = vec![vec![0.0; l]; l];
    for i in 0..l {
        for j in i..l {
            let (mut sum, mut count) = (0.0, 0usize);
            for tok in 0..t {
                if let Some(c) = cosine(trace.hidden[i].row(tok), trace.hidden[j].row(tok)) {
                    sum += c;
                    count += 1;
                }
            }
            let v = if i == j && count > 0 {
                1.0
            } else if count > 0 {
                sum / count as f64
            } else {
                f64::NAN
            };
            m[i][j] = v;
            m[j][i] = v;
        }
    }
    Ok(m)
}
