//! Anchor construction and projection mixing.
//!
//! Every mixed projection has the form
//!
//! ```text
//! Ŝ = c1 ⊙ norm?(S_anc) + c2 ⊙ S_n
//! ```
//!
//! with `c = λ` for static mixing and `c = λ·γ` for dynamic mixing, where `γ`
//! is a per-token coefficient produced by a small MLP on the layer input.
//! Tensors arrive as `[T, d]`; mixing happens on the `[T, h, d_k]` view so the
//! coefficients can broadcast at scalar, headwise or elementwise granularity.

use crate::attention::ProjectionSet;
use crate::error::{Error, Result};
use crate::model::{AnchorKind, Component, Granularity, NormPolicy, DM_OUTPUTS};
use crate::tensor::{Element, Tape, Var};

/// Anchor sources for the four components, each `[T, d]`, computed once per
/// forward pass. `normalized` holds the RMS-normalized source when the norm
/// policy applies to that component.
#[derive(Clone, Debug)]
pub struct AnchorSet {
    pub provenance: AnchorKind,
    raw: [Option<Var>; 4],
    normalized: [Option<Var>; 4],
}

impl AnchorSet {
    pub fn raw(&self, c: Component) -> Option<Var> {
        self.raw[c.index()]
    }

    pub fn normalized(&self, c: Component) -> Option<Var> {
        self.normalized[c.index()]
    }

    /// What the mixing step consumes: the normalized source if one exists,
    /// otherwise the raw projection.
    pub fn source(&self, c: Component) -> Option<Var> {
        self.normalized[c.index()].or(self.raw[c.index()])
    }

    /// Applies per-head RMSNorm to the components selected by `policy`.
    /// `gains[c]` is the `[h, d_k]` gain for component `c`. Returns the
    /// components that were normalized, in `(Q, K, V, G)` order.
    pub fn normalize<F: Element>(
        &mut self,
        tape: &mut Tape<F>,
        components: &[Component],
        gains: &[Option<Var>; 4],
        policy: NormPolicy,
        eps: f64,
    ) -> Result<Vec<Component>> {
        let mut sites = Vec::new();
        for c in Component::ALL {
            if !components.contains(&c) || !policy.applies_to(c) {
                continue;
            }
            let raw = self.raw[c.index()].ok_or_else(|| {
                Error::Contract(format!("anchor component `{c}` was not captured"))
            })?;
            let gain = gains[c.index()]
                .ok_or_else(|| Error::Contract(format!("no anchor norm gain for `{c}`")))?;
            self.normalized[c.index()] = Some(headwise_rmsnorm(tape, raw, gain, eps));
            sites.push(c);
        }
        Ok(sites)
    }
}

fn headwise_rmsnorm<F: Element>(tape: &mut Tape<F>, x: Var, gain: Var, eps: f64) -> Var {
    let (t, d) = (tape.shape(x)[0], tape.shape(x)[1]);
    let heads = tape.shape(gain)[0];
    let x3 = tape.reshape(x, &[t, heads, d / heads]);
    let y = tape.rmsnorm(x3, gain, eps);
    tape.reshape(y, &[t, d])
}

/// Exogenous anchor: `H0 · W_anc^S` for each component with a weight.
pub fn make_exogenous_anchor<F: Element>(
    tape: &mut Tape<F>,
    h0: Var,
    weights: &[Option<Var>; 4],
) -> Result<AnchorSet> {
    let width = *tape.shape(h0).last().unwrap_or(&0);
    let mut raw = [None; 4];
    for (slot, w) in raw.iter_mut().zip(weights) {
        if let Some(w) = *w {
            if tape.shape(w)[0] != width {
                return Err(Error::Contract(format!(
                    "exogenous anchor: embedding width {width} vs weight {:?}",
                    tape.shape(w)
                )));
            }
            *slot = Some(tape.matmul(h0, w));
        }
    }
    Ok(AnchorSet {
        provenance: AnchorKind::Exogenous,
        raw,
        normalized: [None; 4],
    })
}

/// Internal anchor: aliases layer 1's pre-mixing projections, so gradients
/// through the anchor reach layer 1's weights.
pub fn capture_internal_anchor(layer1: Option<&ProjectionSet>) -> Result<AnchorSet> {
    let p = layer1.ok_or_else(|| {
        Error::Contract("internal anchor captured before layer 1 ran its projections".into())
    })?;
    Ok(AnchorSet {
        provenance: AnchorKind::InternalLayer1,
        raw: [Some(p.q), Some(p.k), Some(p.v), p.g],
        normalized: [None; 4],
    })
}

/// Reshapes a compact coefficient tensor to its broadcast view over `[T, h, d_k]`.
fn coefficient_view<F: Element>(tape: &mut Tape<F>, lambda: Var, heads: usize, head_dim: usize) -> Result<Var> {
    let n = tape.value(lambda).numel();
    let g = match n {
        1 => Granularity::Scalar,
        _ if n == heads && n != heads * head_dim => Granularity::Headwise,
        _ if n == heads * head_dim => Granularity::Elementwise,
        _ => {
            return Err(Error::Shape(format!(
                "mixing coefficient with {n} entries fits no granularity for h={heads}, d_k={head_dim}"
            )))
        }
    };
    Ok(tape.reshape(lambda, &g.broadcast_shape(heads, head_dim)))
}

/// Optional per-head RMSNorm applied to the anchor inside [`mix_component`].
#[derive(Clone, Copy, Debug)]
pub struct AnchorNorm {
    pub gain: Var,
    pub eps: f64,
}

/// Static mixing `λ1 ⊙ norm?(S_anc) + λ2 ⊙ S_n`. `s_anc = None` drops the
/// anchor term (ablation). Inputs and output are `[T, d]`.
pub fn mix_component<F: Element>(
    tape: &mut Tape<F>,
    s_anc: Option<Var>,
    s_n: Var,
    lambda1: Var,
    lambda2: Var,
    norm: Option<AnchorNorm>,
    heads: usize,
) -> Result<Var> {
    mix_impl(tape, s_anc, s_n, lambda1, lambda2, None, norm, heads)
}

/// `γ = σ(GELU(H_prev · W1) · W2 + b)`, shape `[T, 8]`, slot order
/// `(Q1, Q2, K1, K2, V1, V2, G1, G2)`.
pub fn dynamic_coefficients<F: Element>(tape: &mut Tape<F>, h_prev: Var, w1: Var, w2: Var, b: Var) -> Result<Var> {
    if tape.shape(w2).last() != Some(&DM_OUTPUTS) || tape.shape(b) != [DM_OUTPUTS] {
        return Err(Error::Contract(format!(
            "dynamic mixing module must produce {DM_OUTPUTS} coefficients, got W2 {:?}, b {:?}",
            tape.shape(w2),
            tape.shape(b)
        )));
    }
    let hidden = tape.matmul(h_prev, w1);
    let hidden = tape.gelu(hidden);
    let logits = tape.matmul(hidden, w2);
    let logits = tape.add(logits, b);
    Ok(tape.sigmoid(logits))
}

/// Slot of `γ` for component `c`; `path` is 1 (anchor) or 2 (current layer).
pub fn gamma_slot(c: Component, path: usize) -> usize {
    assert!(path == 1 || path == 2, "mixing path is 1 or 2");
    2 * c.index() + path - 1
}

/// Per-token column `slot` of `γ [T, 8]` as a `[T, 1, 1]` view.
pub fn gamma_column<F: Element>(tape: &mut Tape<F>, gamma: Var, slot: usize) -> Result<Var> {
    if tape.shape(gamma).len() != 2 || tape.shape(gamma)[1] != DM_OUTPUTS || slot >= DM_OUTPUTS {
        return Err(Error::Contract(format!(
            "γ slot {slot} out of the {DM_OUTPUTS}-slot layout (γ shape {:?})",
            tape.shape(gamma)
        )));
    }
    let t = tape.shape(gamma)[0];
    let col = tape.slice_last(gamma, slot, 1);
    Ok(tape.reshape(col, &[t, 1, 1]))
}

/// Dynamic mixing `(λ1·γ1) ⊙ norm?(S_anc) + (λ2·γ2) ⊙ S_n` with `γ1`, `γ2`
/// given as `[T, 1, 1]` per-token views (see [`gamma_column`]).
#[allow(clippy::too_many_arguments)]
pub fn dynamic_mix<F: Element>(
    tape: &mut Tape<F>,
    s_anc: Option<Var>,
    s_n: Var,
    lambda1: Var,
    lambda2: Var,
    gamma1: Var,
    gamma2: Var,
    norm: Option<AnchorNorm>,
    heads: usize,
) -> Result<Var> {
    mix_impl(tape, s_anc, s_n, lambda1, lambda2, Some((gamma1, gamma2)), norm, heads)
}

#[allow(clippy::too_many_arguments)]
fn mix_impl<F: Element>(
    tape: &mut Tape<F>,
    s_anc: Option<Var>,
    s_n: Var,
    lambda1: Var,
    lambda2: Var,
    gammas: Option<(Var, Var)>,
    norm: Option<AnchorNorm>,
    heads: usize,
) -> Result<Var> {
    let shape = tape.shape(s_n).to_vec();
    if shape.len() != 2 || shape[1] % heads != 0 {
        return Err(Error::Shape(format!("mixing input {shape:?} is not [T, h·d_k] for h={heads}")));
    }
    let (t, d) = (shape[0], shape[1]);
    let dk = d / heads;
    let view = [t, heads, dk];

    let mut coef2 = coefficient_view(tape, lambda2, heads, dk)?;
    if let Some((_, g2)) = gammas {
        coef2 = tape.mul(coef2, g2);
    }
    let cur = tape.reshape(s_n, &view);
    let mut out = tape.mul(coef2, cur);

    if let Some(anc) = s_anc {
        if tape.shape(anc) != shape.as_slice() {
            return Err(Error::Shape(format!(
                "anchor {:?} vs current projection {shape:?}",
                tape.shape(anc)
            )));
        }
        let anc = match norm {
            Some(n) => headwise_rmsnorm(tape, anc, n.gain, n.eps),
            None => anc,
        };
        let mut coef1 = coefficient_view(tape, lambda1, heads, dk)?;
        if let Some((g1, _)) = gammas {
            coef1 = tape.mul(coef1, g1);
        }
        let anc = tape.reshape(anc, &view);
        let term = tape.mul(coef1, anc);
        out = tape.add(term, out);
    }
    Ok(tape.reshape(out, &[t, d]))
}
