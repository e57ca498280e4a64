use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Named architecture families. Each fixes part of the mixing setup; see
/// [`ModelConfig::validate`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Base,
    Gated,
    Resformer,
    Nuresformer,
    Exoformer,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Base,
        Variant::Gated,
        Variant::Resformer,
        Variant::Nuresformer,
        Variant::Exoformer,
    ];
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::Base => "base",
            Variant::Gated => "gated",
            Variant::Resformer => "resformer",
            Variant::Nuresformer => "nuresformer",
            Variant::Exoformer => "exoformer",
        };
        f.write_str(s)
    }
}

/// Attention pathway that can be mixed with an anchor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Q,
    K,
    V,
    G,
}

impl Component {
    pub const ALL: [Component; 4] = [Component::Q, Component::K, Component::V, Component::G];

    /// Position in the `(Q, K, V, G)` ordering used by the dynamic
    /// coefficient layout and by [`crate::mixing::AnchorSet`].
    pub fn index(self) -> usize {
        match self {
            Component::Q => 0,
            Component::K => 1,
            Component::V => 2,
            Component::G => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Component::Q => "q",
            Component::K => "k",
            Component::V => "v",
            Component::G => "g",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "q" => Some(Component::Q),
            "k" => Some(Component::K),
            "v" => Some(Component::V),
            "g" => Some(Component::G),
            _ => None,
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Shape of the mixing coefficients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Scalar,
    Headwise,
    Elementwise,
}

impl Granularity {
    /// Stored (compact) shape.
    pub fn shape(self, heads: usize, head_dim: usize) -> Vec<usize> {
        match self {
            Granularity::Scalar => vec![1],
            Granularity::Headwise => vec![heads],
            Granularity::Elementwise => vec![heads * head_dim],
        }
    }

    /// Shape that broadcasts against `[T, h, d_k]`.
    pub fn broadcast_shape(self, heads: usize, head_dim: usize) -> Vec<usize> {
        match self {
            Granularity::Scalar => vec![1],
            Granularity::Headwise => vec![heads, 1],
            Granularity::Elementwise => vec![heads, head_dim],
        }
    }

    pub fn numel(self, heads: usize, head_dim: usize) -> usize {
        self.shape(heads, head_dim).iter().product()
    }
}

/// Which anchor sources get RMS-normalized before mixing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormPolicy {
    Full,
    QkOnly,
    None,
}

impl NormPolicy {
    pub fn applies_to(self, component: Component) -> bool {
        match self {
            NormPolicy::Full => true,
            NormPolicy::QkOnly => matches!(component, Component::Q | Component::K),
            NormPolicy::None => false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorKind {
    /// Layer 1's own pre-mixing projections.
    InternalLayer1,
    /// Dedicated projections of the embedding output.
    Exogenous,
}

pub const DM_HIDDEN: usize = 16;
pub const DM_OUTPUTS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixSpec {
    pub granularity: Granularity,
    pub norm_policy: NormPolicy,
    /// Mixed pathways; empty means no mixing at all.
    #[serde(default)]
    pub components: Vec<Component>,
    pub anchor_kind: AnchorKind,
    #[serde(default)]
    pub dynamic: bool,
    /// Must match the value implied by `dynamic` when given (0.5 static, 1.0 dynamic).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_init: Option<f64>,
}

impl MixSpec {
    pub fn none() -> Self {
        Self {
            granularity: Granularity::Scalar,
            norm_policy: NormPolicy::None,
            components: Vec::new(),
            anchor_kind: AnchorKind::InternalLayer1,
            dynamic: false,
            lambda_init: None,
        }
    }

    pub fn lambda_init(&self) -> f64 {
        self.lambda_init.unwrap_or(if self.dynamic { 1.0 } else { 0.5 })
    }

    pub fn mixes(&self, c: Component) -> bool {
        self.components.contains(&c)
    }

    pub fn is_active(&self) -> bool {
        !self.components.is_empty()
    }

    /// Components whose anchor source is normalized under this spec.
    pub fn normalized_components(&self) -> Vec<Component> {
        self.components
            .iter()
            .copied()
            .filter(|&c| self.norm_policy.applies_to(c))
            .collect()
    }

    /// Whether layer `n` (1-based) mixes its projections with the anchor.
    pub fn layer_mixes(&self, layer: usize) -> bool {
        self.is_active()
            && match self.anchor_kind {
                AnchorKind::Exogenous => true,
                AnchorKind::InternalLayer1 => layer >= 2,
            }
    }

    fn canonicalize(&mut self) {
        self.components.sort();
        self.components.dedup();
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub mix: MixSpec,
    /// Sigmoid gate on the concatenated head outputs.
    pub gating: bool,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    #[serde(default = "default_rope_theta")]
    pub rope_theta: f64,
    #[serde(default = "default_eps")]
    pub rmsnorm_eps: f64,
    #[serde(default = "default_z_loss")]
    pub z_loss_weight: f64,
    #[serde(default)]
    pub tie_embeddings: bool,
}

fn default_rope_theta() -> f64 {
    500_000.0
}

fn default_eps() -> f64 {
    1e-6
}

fn default_z_loss() -> f64 {
    1e-5
}

impl ModelConfig {
    /// Default configuration of a variant at the given size, with
    /// `d_ff = 2·d_model` (SwiGLU with 6d² FFN parameters).
    pub fn preset(
        variant: Variant,
        n_layers: usize,
        d_model: usize,
        n_heads: usize,
        vocab_size: usize,
        seq_len: usize,
    ) -> Self {
        let all = Component::ALL.to_vec();
        let (mix, gating) = match variant {
            Variant::Base => (MixSpec::none(), false),
            Variant::Gated => (MixSpec::none(), true),
            Variant::Resformer => (
                MixSpec {
                    granularity: Granularity::Scalar,
                    norm_policy: NormPolicy::None,
                    components: vec![Component::V],
                    anchor_kind: AnchorKind::InternalLayer1,
                    dynamic: false,
                    lambda_init: None,
                },
                false,
            ),
            Variant::Nuresformer => (
                MixSpec {
                    granularity: Granularity::Elementwise,
                    norm_policy: NormPolicy::Full,
                    components: all,
                    anchor_kind: AnchorKind::InternalLayer1,
                    dynamic: false,
                    lambda_init: None,
                },
                true,
            ),
            Variant::Exoformer => (
                MixSpec {
                    granularity: Granularity::Elementwise,
                    norm_policy: NormPolicy::Full,
                    components: all,
                    anchor_kind: AnchorKind::Exogenous,
                    dynamic: false,
                    lambda_init: None,
                },
                true,
            ),
        };
        Self {
            variant,
            mix,
            gating,
            n_layers,
            d_model,
            n_heads,
            d_ff: 2 * d_model,
            vocab_size,
            seq_len,
            rope_theta: default_rope_theta(),
            rmsnorm_eps: default_eps(),
            z_loss_weight: default_z_loss(),
            tie_embeddings: false,
        }
    }

    pub fn with_mix(mut self, f: impl FnOnce(&mut MixSpec)) -> Self {
        f(&mut self.mix);
        self
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn has_anchor(&self) -> bool {
        self.mix.is_active()
    }

    /// Sorts/dedups the component list and checks every invariant; errors
    /// name the offending field.
    pub fn validate(&mut self) -> Result<()> {
        self.mix.canonicalize();
        let positive = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("seq_len", self.seq_len),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(
                "d_model",
                format!("{} is not divisible by n_heads = {}", self.d_model, self.n_heads),
            ));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::config(
                "n_heads",
                format!("head dimension {} must be even for rotary embeddings", self.head_dim()),
            ));
        }
        if !(self.rope_theta > 0.0 && self.rope_theta.is_finite()) {
            return Err(Error::config("rope_theta", "must be positive and finite"));
        }
        if !(self.rmsnorm_eps > 0.0 && self.rmsnorm_eps.is_finite()) {
            return Err(Error::config("rmsnorm_eps", "must be positive and finite"));
        }
        if !(self.z_loss_weight >= 0.0 && self.z_loss_weight.is_finite()) {
            return Err(Error::config("z_loss_weight", "must be non-negative and finite"));
        }

        let mix = &self.mix;
        match self.variant {
            Variant::Base | Variant::Gated => {
                if mix.is_active() {
                    return Err(Error::config(
                        "mix.components",
                        format!("variant `{}` does not mix; components must be empty", self.variant),
                    ));
                }
                let want = self.variant == Variant::Gated;
                if self.gating != want {
                    return Err(Error::config(
                        "gating",
                        format!("variant `{}` requires gating = {want}", self.variant),
                    ));
                }
            }
            Variant::Resformer => {
                if mix.components != [Component::V] {
                    return Err(Error::config("mix.components", "resformer mixes exactly [\"v\"]"));
                }
                if mix.granularity != Granularity::Scalar {
                    return Err(Error::config("mix.granularity", "resformer uses scalar coefficients"));
                }
                if mix.norm_policy != NormPolicy::None {
                    return Err(Error::config("mix.norm_policy", "resformer does not normalize the anchor"));
                }
                if mix.anchor_kind != AnchorKind::InternalLayer1 {
                    return Err(Error::config("mix.anchor_kind", "resformer anchors on layer 1"));
                }
                if mix.dynamic {
                    return Err(Error::config("mix.dynamic", "resformer mixing is static"));
                }
            }
            Variant::Nuresformer => {
                if mix.anchor_kind != AnchorKind::InternalLayer1 {
                    return Err(Error::config("mix.anchor_kind", "nuresformer requires internal_layer1"));
                }
            }
            Variant::Exoformer => {
                if mix.anchor_kind != AnchorKind::Exogenous {
                    return Err(Error::config("mix.anchor_kind", "exoformer requires exogenous"));
                }
            }
        }
        if mix.mixes(Component::G) && !self.gating {
            return Err(Error::config("mix.components", "mixing \"g\" requires gating = true"));
        }
        if mix.dynamic && !mix.is_active() {
            return Err(Error::config("mix.dynamic", "dynamic mixing needs at least one component"));
        }
        if let Some(v) = mix.lambda_init {
            let want = if mix.dynamic { 1.0 } else { 0.5 };
            if v != want {
                return Err(Error::config(
                    "mix.lambda_init",
                    format!("must be {want} when dynamic = {}", mix.dynamic),
                ));
            }
        }
        Ok(())
    }

    pub fn validated(mut self) -> Result<Self> {
        self.validate()?;
        Ok(self)
    }
}
