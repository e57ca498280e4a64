//! Attention block pieces: projections, QK normalization with rotary
//! embeddings, causal scaled dot-product attention, and the output gate.
//!
//! All tensors between stages are `[T, d]` with `d = h·d_k`; heads are split
//! only inside [`qknorm_rope`] and [`sdpa_causal`].

use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Var};

/// Tape handles for one layer's attention weights.
#[derive(Clone, Copy, Debug)]
pub struct AttentionLayerParams {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wg: Option<Var>,
    pub wo: Var,
    /// `[h, d_k]` gains, one row per head.
    pub q_norm: Var,
    pub k_norm: Var,
}

/// Per-layer projections, each `[T, d]`. `g` is present iff gating is on.
#[derive(Clone, Copy, Debug)]
pub struct ProjectionSet {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub g: Option<Var>,
}

impl ProjectionSet {
    pub fn get(&self, c: crate::model::Component) -> Option<Var> {
        use crate::model::Component::*;
        match c {
            Q => Some(self.q),
            K => Some(self.k),
            V => Some(self.v),
            G => self.g,
        }
    }
}

/// `H_prev · W` for every projection. `h_prev` must already be normalized.
pub fn project_components<F: Element>(
    tape: &mut Tape<F>,
    h_prev: Var,
    params: &AttentionLayerParams,
) -> Result<ProjectionSet> {
    let width = *tape.shape(h_prev).last().unwrap_or(&0);
    let rows = tape.shape(params.wq)[0];
    if width != rows {
        return Err(Error::Contract(format!(
            "project_components: input width {width} does not match weight rows {rows}"
        )));
    }
    Ok(ProjectionSet {
        q: tape.matmul(h_prev, params.wq),
        k: tape.matmul(h_prev, params.wk),
        v: tape.matmul(h_prev, params.wv),
        g: params.wg.map(|w| tape.matmul(h_prev, w)),
    })
}

/// Per-head RMSNorm then RoPE on the mixed queries and keys. Inputs are
/// `[T, d]`; outputs are `[h, T, d_k]`.
#[allow(clippy::too_many_arguments)]
pub fn qknorm_rope<F: Element>(
    tape: &mut Tape<F>,
    q_hat: Var,
    k_hat: Var,
    q_gain: Var,
    k_gain: Var,
    positions: &[usize],
    theta: f64,
    eps: f64,
) -> (Var, Var) {
    let heads = tape.shape(q_gain)[0];
    let one = |tape: &mut Tape<F>, x: Var, gain: Var| {
        let (t, d) = (tape.shape(x)[0], tape.shape(x)[1]);
        let x = tape.reshape(x, &[t, heads, d / heads]);
        let x = tape.rmsnorm(x, gain, eps);
        let x = tape.reshape(x, &[t, d]);
        let x = tape.split_heads(x, heads);
        tape.rope(x, positions, theta)
    };
    let q = one(tape, q_hat, q_gain);
    let k = one(tape, k_hat, k_gain);
    (q, k)
}

/// Causal softmax attention. `q`, `k` are `[h, T, d_k]`, `v_hat` is `[T, d]`.
/// Returns the merged output `[T, d]` and the attention weights `[h, T, T]`.
pub fn sdpa_causal<F: Element>(tape: &mut Tape<F>, q: Var, k: Var, v_hat: Var) -> (Var, Var) {
    let heads = tape.shape(q)[0];
    let dk = tape.shape(q)[2];
    let v = tape.split_heads(v_hat, heads);
    let scores = tape.bmm(q, k, true);
    let scores = tape.scale(scores, F::from_f64(1.0 / (dk as f64).sqrt()));
    let scores = tape.causal_mask(scores);
    let attn = tape.softmax(scores);
    let u = tape.bmm(attn, v, false);
    (tape.merge_heads(u), attn)
}

/// `(U ⊙ σ(Ĝ)) · W_O`, or `U · W_O` without a gate. Also returns the gate
/// activation when present.
pub fn gate_and_project<F: Element>(
    tape: &mut Tape<F>,
    u: Var,
    g_hat: Option<Var>,
    wo: Var,
) -> Result<(Var, Option<Var>)> {
    match g_hat {
        Some(g) => {
            if tape.shape(g) != tape.shape(u) {
                return Err(Error::Contract(format!(
                    "gate_and_project: gate {:?} vs output {:?}",
                    tape.shape(g),
                    tape.shape(u)
                )));
            }
            let gate = tape.sigmoid(g);
            let gated = tape.mul(u, gate);
            Ok((tape.matmul(gated, wo), Some(gate)))
        }
        None => Ok((tape.matmul(u, wo), None)),
    }
}
