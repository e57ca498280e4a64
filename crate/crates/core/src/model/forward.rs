use crate::analysis::ActivationTrace;
use crate::attention::{gate_and_project, project_components, qknorm_rope, sdpa_causal, AttentionLayerParams};
use crate::error::{Error, Result};
use crate::mixing::{
    capture_internal_anchor, dynamic_coefficients, dynamic_mix, gamma_column, gamma_slot, make_exogenous_anchor,
    mix_component, AnchorSet,
};
use crate::tensor::{Element, Gradients, Tape, Tensor, Var};

use super::{AnchorKind, Component, TransformerModel};

/// What the forward pass records into an [`ActivationTrace`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TraceOptions {
    pub hidden: bool,
    pub attention: bool,
    pub gates: bool,
}

impl TraceOptions {
    pub fn all() -> Self {
        Self {
            hidden: true,
            attention: true,
            gates: true,
        }
    }

    pub fn any(&self) -> bool {
        self.hidden || self.attention || self.gates
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    pub trace: TraceOptions,
    /// Drop the anchor term from every mixed projection.
    pub ablate_anchor: bool,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput<F> {
    /// `[T, vocab]`.
    pub logits: Tensor<F>,
    pub trace: Option<ActivationTrace>,
    /// Anchor components that went through RMSNorm, in `(Q, K, V, G)` order.
    pub anchor_norm_sites: Vec<Component>,
}

/// Tape handles of the three loss terms (scalars).
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub cross_entropy: Var,
    pub z_loss: Var,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub cross_entropy: f64,
    /// Unweighted `mean(logsumexp²)`.
    pub z_loss: f64,
}

pub(crate) struct Graph {
    pub logits: Var,
    pub trace: Option<ActivationTrace>,
    pub anchor_norm_sites: Vec<Component>,
}

fn snapshot<F: Element>(tape: &Tape<F>, v: Var) -> Tensor<f64> {
    tape.value(v).to_f64()
}

impl<F: Element> TransformerModel<F> {
    /// Records every parameter on `tape`, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape<F>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .enumerate()
            .map(|(id, p)| {
                if trainable {
                    tape.param(p.tensor.clone(), id)
                } else {
                    tape.constant(p.tensor.clone())
                }
            })
            .collect()
    }

    pub(crate) fn validate_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if tokens.len() > self.config.seq_len {
            return Err(Error::Input(format!(
                "sequence length {} exceeds seq_len {}",
                tokens.len(),
                self.config.seq_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Input(format!(
                "token id {bad} out of range for vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Records the forward pass of one sequence on `tape` using parameter
    /// handles from [`bind`](Self::bind).
    pub(crate) fn forward_graph(
        &self,
        tape: &mut Tape<F>,
        vars: &[Var],
        tokens: &[usize],
        opts: &ForwardOptions,
    ) -> Result<Graph> {
        self.validate_tokens(tokens)?;
        if opts.ablate_anchor && !self.config.has_anchor() {
            return Err(Error::Contract(format!(
                "anchor ablation requested on variant `{}`, which has no anchor",
                self.config.variant
            )));
        }
        let cfg = &self.config;
        let lay = &self.layout;
        let eps = cfg.rmsnorm_eps;
        let heads = cfg.n_heads;
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let var = |id: usize| vars[id];
        let opt_var = |id: Option<usize>| id.map(|i| vars[i]);

        let mut trace = opts.trace.any().then(|| ActivationTrace::new(cfg.n_layers));

        let h0 = tape.embedding(var(lay.embed), tokens);
        if let (Some(tr), true) = (trace.as_mut(), opts.trace.hidden) {
            tr.embeddings = Some(snapshot(tape, h0));
        }

        let anchor_gains = lay.anchor_norm.map(opt_var);
        let mut anchors: Option<AnchorSet> = None;
        let mut anchor_norm_sites = Vec::new();
        if cfg.has_anchor() && cfg.mix.anchor_kind == AnchorKind::Exogenous {
            let mut set = make_exogenous_anchor(tape, h0, &lay.anchor_w.map(opt_var))?;
            anchor_norm_sites = set.normalize(tape, &cfg.mix.components, &anchor_gains, cfg.mix.norm_policy, eps)?;
            anchors = Some(set);
        }

        let mut x = h0;
        for (i, ids) in lay.layers.iter().enumerate() {
            let n = i + 1;
            let xn = tape.rmsnorm(x, var(ids.attn_norm), eps);
            let attn = AttentionLayerParams {
                wq: var(ids.wq),
                wk: var(ids.wk),
                wv: var(ids.wv),
                wg: opt_var(ids.wg),
                wo: var(ids.wo),
                q_norm: var(ids.q_norm),
                k_norm: var(ids.k_norm),
            };
            let mut proj = project_components(tape, xn, &attn)?;

            if n == 1 && cfg.has_anchor() && cfg.mix.anchor_kind == AnchorKind::InternalLayer1 {
                let mut set = capture_internal_anchor(Some(&proj))?;
                anchor_norm_sites =
                    set.normalize(tape, &cfg.mix.components, &anchor_gains, cfg.mix.norm_policy, eps)?;
                anchors = Some(set);
            }

            if cfg.mix.layer_mixes(n) {
                let set = anchors
                    .as_ref()
                    .ok_or_else(|| Error::Contract(format!("layer {n} mixes before an anchor exists")))?;
                let gamma = match ids.dm {
                    Some([w1, w2, b]) => Some(dynamic_coefficients(tape, xn, var(w1), var(w2), var(b))?),
                    None => None,
                };
                for &c in &cfg.mix.components {
                    let [l1, l2] = ids.lambdas[c.index()]
                        .ok_or_else(|| Error::Contract(format!("layer {n} has no coefficients for `{c}`")))?;
                    let s_n = proj
                        .get(c)
                        .ok_or_else(|| Error::Contract(format!("layer {n} has no `{c}` projection")))?;
                    let s_anc = if opts.ablate_anchor {
                        None
                    } else {
                        Some(set.source(c).ok_or_else(|| Error::Contract(format!("anchor lacks `{c}`")))?)
                    };
                    let mixed = match gamma {
                        Some(g) => {
                            let g1 = gamma_column(tape, g, gamma_slot(c, 1))?;
                            let g2 = gamma_column(tape, g, gamma_slot(c, 2))?;
                            dynamic_mix(tape, s_anc, s_n, var(l1), var(l2), g1, g2, None, heads)?
                        }
                        None => mix_component(tape, s_anc, s_n, var(l1), var(l2), None, heads)?,
                    };
                    match c {
                        Component::Q => proj.q = mixed,
                        Component::K => proj.k = mixed,
                        Component::V => proj.v = mixed,
                        Component::G => proj.g = Some(mixed),
                    }
                }
            }

            let (q, k) = qknorm_rope(tape, proj.q, proj.k, attn.q_norm, attn.k_norm, &positions, cfg.rope_theta, eps);
            let (u, weights) = sdpa_causal(tape, q, k, proj.v);
            let (o, gate) = gate_and_project(tape, u, proj.g, attn.wo)?;
            x = tape.add(x, o);

            let xn = tape.rmsnorm(x, var(ids.ffn_norm), eps);
            let g = tape.matmul(xn, var(ids.w_gate));
            let up = tape.matmul(xn, var(ids.w_up));
            let act = tape.swiglu(g, up);
            let f = tape.matmul(act, var(ids.w_down));
            x = tape.add(x, f);

            if let Some(tr) = trace.as_mut() {
                if opts.trace.hidden {
                    tr.hidden.push(snapshot(tape, x));
                }
                if opts.trace.attention {
                    tr.attention.push(snapshot(tape, weights));
                }
                if let (true, Some(g)) = (opts.trace.gates, gate) {
                    tr.gates.push(snapshot(tape, g));
                }
            }
        }

        let xf = tape.rmsnorm(x, var(lay.final_norm), eps);
        let head = match lay.lm_head {
            Some(id) => var(id),
            None => tape.transpose(var(lay.embed)),
        };
        let logits = tape.matmul(xf, head);
        tape.check()?;
        Ok(Graph {
            logits,
            trace,
            anchor_norm_sites,
        })
    }

    /// Logits `[T, vocab]` for one sequence.
    pub fn forward(&self, tokens: &[usize]) -> Result<Tensor<F>> {
        Ok(self.forward_with(tokens, &ForwardOptions::default())?.logits)
    }

    pub fn forward_with(&self, tokens: &[usize], opts: &ForwardOptions) -> Result<ForwardOutput<F>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let g = self.forward_graph(&mut tape, &vars, tokens, opts)?;
        Ok(ForwardOutput {
            logits: tape.value(g.logits).clone(),
            trace: g.trace,
            anchor_norm_sites: g.anchor_norm_sites,
        })
    }

    /// `CE + w·mean(logsumexp²)` over the rows of `logits [T, vocab]`.
    pub fn loss_graph(&self, tape: &mut Tape<F>, logits: Var, targets: &[usize]) -> Result<LossVars> {
        let rows = tape.shape(logits)[0];
        if targets.len() != rows {
            return Err(Error::Input(format!("{} targets for {rows} positions", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Input(format!("target id {bad} out of range")));
        }
        let lse = tape.logsumexp(logits);
        let picked = tape.gather(logits, targets);
        let nll = tape.sub(lse, picked);
        let ce = tape.mean(nll);
        let sq = tape.mul(lse, lse);
        let z = tape.mean(sq);
        let wz = tape.scale(z, F::from_f64(self.config.z_loss_weight));
        let total = tape.add(ce, wz);
        Ok(LossVars {
            total,
            cross_entropy: ce,
            z_loss: z,
        })
    }

    pub fn loss_on(
        &self,
        tape: &mut Tape<F>,
        vars: &[Var],
        batch: &[(Vec<usize>, Vec<usize>)],
        opts: &ForwardOptions,
    ) -> Result<LossVars> {
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let mut acc: Option<LossVars> = None;
        for (inputs, targets) in batch {
            let g = self.forward_graph(tape, vars, inputs, opts)?;
            let l = self.loss_graph(tape, g.logits, targets)?;
            acc = Some(match acc {
                None => l,
                Some(a) => LossVars {
                    total: tape.add(a.total, l.total),
                    cross_entropy: tape.add(a.cross_entropy, l.cross_entropy),
                    z_loss: tape.add(a.z_loss, l.z_loss),
                },
            });
        }
        let a = acc.expect("non-empty batch");
        let inv = F::from_f64(1.0 / batch.len() as f64);
        let out = LossVars {
            total: tape.scale(a.total, inv),
            cross_entropy: tape.scale(a.cross_entropy, inv),
            z_loss: tape.scale(a.z_loss, inv),
        };
        tape.check()?;
        Ok(out)
    }

    fn values(tape: &Tape<F>, l: &LossVars) -> LossValues {
        LossValues {
            total: tape.value(l.total).data()[0].as_f64(),
            cross_entropy: tape.value(l.cross_entropy).data()[0].as_f64(),
            z_loss: tape.value(l.z_loss).data()[0].as_f64(),
        }
    }

    /// Mean loss over `(inputs, targets)` pairs.
    pub fn loss(&self, batch: &[(Vec<usize>, Vec<usize>)]) -> Result<LossValues> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let l = self.loss_on(&mut tape, &vars, batch, &ForwardOptions::default())?;
        Ok(Self::values(&tape, &l))
    }

    /// Mean loss and gradients of the total loss, keyed by parameter index.
    pub fn loss_and_grads(&self, batch: &[(Vec<usize>, Vec<usize>)]) -> Result<(LossValues, Gradients<F>)> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, true);
        let l = self.loss_on(&mut tape, &vars, batch, &ForwardOptions::default())?;
        let grads = tape.backward(l.total)?;
        Ok((Self::values(&tape, &l), grads))
    }

    /// Inference view with the anchor term removed from every mixed projection.
    pub fn ablate_anchor(&self) -> Result<AblatedModel<'_, F>> {
        if !self.config.has_anchor() {
            return Err(Error::Contract(format!(
                "variant `{}` has no anchor to ablate",
                self.config.variant
            )));
        }
        Ok(AblatedModel { model: self })
    }
}

/// Borrowed model whose forward pass skips the anchor pathway.
#[derive(Clone, Copy, Debug)]
pub struct AblatedModel<'a, F> {
    model: &'a TransformerModel<F>,
}

impl<F: Element> AblatedModel<'_, F> {
    pub fn forward(&self, tokens: &[usize]) -> Result<Tensor<F>> {
        Ok(self.forward_with(tokens, TraceOptions::default())?.logits)
    }

    pub fn forward_with(&self, tokens: &[usize], trace: TraceOptions) -> Result<ForwardOutput<F>> {
        self.model.forward_with(
            tokens,
            &ForwardOptions {
                trace,
                ablate_anchor: true,
            },
        )
    }

    pub fn loss(&self, batch: &[(Vec<usize>, Vec<usize>)]) -> Result<LossValues> {
        let mut tape = Tape::new();
        let vars = self.model.bind(&mut tape, false);
        let opts = ForwardOptions {
            trace: TraceOptions::default(),
            ablate_anchor: true,
        };
        let l = self.model.loss_on(&mut tape, &vars, batch, &opts)?;
        Ok(TransformerModel::values(&tape, &l))
    }
}
