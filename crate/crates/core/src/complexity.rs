//! Closed-form parameter and FLOP accounting for anchor mixing, plus an
//! enumeration of the tensors a config constructs.

use serde::Serialize;

use crate::model::{AnchorKind, ModelConfig, DM_HIDDEN, DM_OUTPUTS};

/// `P_base = 11·L·d²`: 5d² attention (Q, K, V, G, O) and 6d² FFN per layer.
pub fn p_base(l: u64, d: u64) -> u64 {
    11 * l * d * d
}

/// Four anchor projections, shared across layers.
pub fn delta_p_anchor(d: u64) -> u64 {
    4 * d * d
}

/// Elementwise λ1, λ2 for four components in every layer.
pub fn delta_p_static(l: u64, d: u64) -> u64 {
    8 * l * d
}

/// First layer of the dynamic mixing MLP in every layer (the `d_DM × 8`
/// layer and biases are left out of the closed form).
pub fn delta_p_dm(l: u64, d: u64, d_dm: u64) -> u64 {
    l * d * d_dm
}

pub fn r_p_static(l: u64, d: u64) -> f64 {
    4.0 / (11.0 * l as f64) + 8.0 / (11.0 * d as f64)
}

pub fn r_p_dynamic(l: u64, d: u64, d_dm: u64) -> f64 {
    r_p_static(l, d) + d_dm as f64 / (11.0 * d as f64)
}

/// `C_base ≈ 2·P_base` FLOPs per token.
pub fn c_base(l: u64, d: u64) -> u64 {
    22 * l * d * d
}

pub fn delta_c_anchor(d: u64) -> u64 {
    8 * d * d
}

/// DM forward plus the 12d of elementwise mixing work per layer.
pub fn delta_c_dm(l: u64, d: u64, d_dm: u64) -> u64 {
    l * (2 * d * d_dm + 12 * d)
}

pub fn r_flops(l: u64, d: u64, d_dm: u64) -> f64 {
    8.0 / (22.0 * l as f64) + d_dm as f64 / (11.0 * d as f64) + 6.0 / (11.0 * d as f64)
}

/// Anchor share of [`r_flops`].
pub fn r_flops_anchor(l: u64) -> f64 {
    8.0 / (22.0 * l as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComplexityReport {
    pub n_layers: u64,
    pub d_model: u64,
    pub d_dm: u64,
    pub p_base: u64,
    pub delta_p_anchor: u64,
    pub delta_p_static: u64,
    pub delta_p_dm: u64,
    pub r_p_static: f64,
    pub r_p_dynamic: f64,
    pub c_base: u64,
    pub delta_c_anchor: u64,
    pub delta_c_dm: u64,
    pub r_flops: f64,
    pub r_flops_anchor: f64,
    pub enumerated_total: u64,
    pub enumerated_non_embedding: u64,
}

impl ComplexityReport {
    pub fn for_config(config: &ModelConfig) -> Self {
        let (l, d, dm) = (config.n_layers as u64, config.d_model as u64, DM_HIDDEN as u64);
        Self {
            n_layers: l,
            d_model: d,
            d_dm: dm,
            p_base: p_base(l, d),
            delta_p_anchor: delta_p_anchor(d),
            delta_p_static: delta_p_static(l, d),
            delta_p_dm: delta_p_dm(l, d, dm),
            r_p_static: r_p_static(l, d),
            r_p_dynamic: r_p_dynamic(l, d, dm),
            c_base: c_base(l, d),
            delta_c_anchor: delta_c_anchor(d),
            delta_c_dm: delta_c_dm(l, d, dm),
            r_flops: r_flops(l, d, dm),
            r_flops_anchor: r_flops_anchor(l),
            enumerated_total: enumerate_params(config, true),
            enumerated_non_embedding: enumerate_params(config, false),
        }
    }

    /// Aligned human-readable rendering.
    pub fn render(&self) -> String {
        let rows: Vec<(&str, String)> = vec![
            ("layers (L)", self.n_layers.to_string()),
            ("width (d)", self.d_model.to_string()),
            ("d_DM", self.d_dm.to_string()),
            ("P_base", self.p_base.to_string()),
            ("dP_anchor", self.delta_p_anchor.to_string()),
            ("dP_static", self.delta_p_static.to_string()),
            ("dP_DM", self.delta_p_dm.to_string()),
            ("R_P static", format!("{:.3}%", 100.0 * self.r_p_static)),
            ("R_P dynamic", format!("{:.3}%", 100.0 * self.r_p_dynamic)),
            ("C_base", self.c_base.to_string()),
            ("dC_anchor", self.delta_c_anchor.to_string()),
            ("dC_DM", self.delta_c_dm.to_string()),
            ("R_FLOPs", format!("{:.3}%", 100.0 * self.r_flops)),
            ("R_FLOPs anchor", format!("{:.3}%", 100.0 * self.r_flops_anchor)),
            ("params (all)", format!("{} ({})", self.enumerated_total, human(self.enumerated_total))),
            (
                "params (non-embedding)",
                format!("{} ({})", self.enumerated_non_embedding, human(self.enumerated_non_embedding)),
            ),
        ];
        let w = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        rows.iter().map(|(k, v)| format!("{k:<w$}  {v}\n")).collect()
    }
}

/// `453M`, `1.02B` style rendering.
pub fn human(n: u64) -> String {
    if n >= 1_000_000_000 {
        format!("{:.2}B", n as f64 / 1e9)
    } else if n >= 1_000_000 {
        format!("{:.0}M", n as f64 / 1e6)
    } else {
        n.to_string()
    }
}

/// Parameter count derived directly from the config's fields, counting
/// every tensor the model builds (norm gains, λ at their granularity, DM
/// biases included). Embedding table and untied LM head count as embeddings.
pub fn enumerate_params(config: &ModelConfig, include_embeddings: bool) -> u64 {
    let d = config.d_model as u64;
    let l = config.n_layers as u64;
    let h = config.n_heads as u64;
    let dk = d / h;
    let v = config.vocab_size as u64;
    let mix = &config.mix;
    let k = mix.components.len() as u64;

    let attn = if config.gating { 5 * d * d } else { 4 * d * d };
    let norms = 2 * d + 2 * h * dk;
    let ffn = 3 * d * config.d_ff as u64;
    let mut total = l * (attn + norms + ffn) + d;

    if k > 0 {
        if mix.anchor_kind == AnchorKind::Exogenous {
            total += k * d * d;
        }
        total += mix.normalized_components().len() as u64 * d;
        let mixing_layers = (1..=config.n_layers).filter(|&n| mix.layer_mixes(n)).count() as u64;
        let lam = mix.granularity.numel(config.n_heads, config.head_dim()) as u64;
        total += mixing_layers * 2 * k * lam;
        if mix.dynamic {
            let dm_hidden = DM_HIDDEN as u64;
            let dm_out = DM_OUTPUTS as u64;
            total += mixing_layers * (d * dm_hidden + dm_hidden * dm_out + dm_out);
        }
    }
    if include_embeddings {
        total += v * d;
        if !config.tie_embeddings {
            total += v * d;
        }
    }
    total
}

/// `(total_steps, warmdown_steps)`: both rounded up.
pub fn schedule_calc(tokens: u64, batch_tokens: u64, warmdown_frac: f64) -> (u64, u64) {
    assert!(batch_tokens > 0, "schedule_calc: zero batch size");
    let total = tokens.div_ceil(batch_tokens);
    // The small offset keeps exact products (e.g. 0.2 · 5) from rounding up.
    let warmdown = (warmdown_frac * total as f64 - 1e-9).ceil() as u64;
    (total, warmdown.min(total))
}
