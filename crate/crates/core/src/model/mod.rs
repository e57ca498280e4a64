//! Pre-norm decoder stack with optional anchor mixing.

mod checkpoint;
mod config;
mod forward;

pub use checkpoint::{CheckpointContainer, StoredTensor, CHECKPOINT_MAGIC};
pub use config::{
    AnchorKind, Component, Granularity, MixSpec, ModelConfig, NormPolicy, Variant, DM_HIDDEN, DM_OUTPUTS,
};
pub use forward::{AblatedModel, ForwardOptions, ForwardOutput, LossValues, LossVars, TraceOptions};

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Element, ParamId, Tensor};

#[derive(Clone, Debug)]
pub struct ParamEntry<F> {
    pub name: String,
    pub tensor: Tensor<F>,
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Normal,
    Zero,
    Ones,
    Fill(f64),
}

#[derive(Clone, Debug)]
pub(crate) struct LayerIds {
    pub attn_norm: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wg: Option<ParamId>,
    pub wo: ParamId,
    pub q_norm: ParamId,
    pub k_norm: ParamId,
    /// `lambdas[c][0]` is λ1, `lambdas[c][1]` is λ2, indexed by [`Component::index`].
    pub lambdas: [Option<[ParamId; 2]>; 4],
    pub dm: Option<[ParamId; 3]>,
    pub ffn_norm: ParamId,
    pub w_gate: ParamId,
    pub w_up: ParamId,
    pub w_down: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub embed: ParamId,
    pub anchor_w: [Option<ParamId>; 4],
    pub anchor_norm: [Option<ParamId>; 4],
    pub layers: Vec<LayerIds>,
    pub final_norm: ParamId,
    pub lm_head: Option<ParamId>,
}

/// Collects `(name, shape, init)` in construction order.
struct Planner {
    specs: Vec<(String, Vec<usize>, Init)>,
}

impl Planner {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> ParamId {
        self.specs.push((name, shape, init));
        self.specs.len() - 1
    }
}

fn plan(config: &ModelConfig) -> (Layout, Vec<(String, Vec<usize>, Init)>) {
    let d = config.d_model;
    let h = config.n_heads;
    let dk = config.head_dim();
    let mix = &config.mix;
    let mut p = Planner { specs: Vec::new() };

    let embed = p.add("embed.weight".into(), vec![config.vocab_size, d], Init::Normal);

    let mut anchor_w = [None; 4];
    let mut anchor_norm = [None; 4];
    for c in Component::ALL {
        if !mix.mixes(c) {
            continue;
        }
        if mix.anchor_kind == AnchorKind::Exogenous {
            anchor_w[c.index()] = Some(p.add(format!("anchor.{c}.weight"), vec![d, d], Init::Normal));
        }
        if mix.norm_policy.applies_to(c) {
            anchor_norm[c.index()] = Some(p.add(format!("anchor_norm.{c}.gain"), vec![h, dk], Init::Ones));
        }
    }

    let lambda_shape = mix.granularity.shape(h, dk);
    let lambda_init = Init::Fill(mix.lambda_init());
    let mut layers = Vec::with_capacity(config.n_layers);
    for n in 1..=config.n_layers {
        let attn_norm = p.add(format!("layer{n}.attn_norm.gain"), vec![d], Init::Ones);
        let wq = p.add(format!("layer{n}.attn.wq"), vec![d, d], Init::Normal);
        let wk = p.add(format!("layer{n}.attn.wk"), vec![d, d], Init::Normal);
        let wv = p.add(format!("layer{n}.attn.wv"), vec![d, d], Init::Normal);
        let wg = config
            .gating
            .then(|| p.add(format!("layer{n}.attn.wg"), vec![d, d], Init::Normal));
        let wo = p.add(format!("layer{n}.attn.wo"), vec![d, d], Init::Zero);
        let q_norm = p.add(format!("layer{n}.attn.q_norm.gain"), vec![h, dk], Init::Ones);
        let k_norm = p.add(format!("layer{n}.attn.k_norm.gain"), vec![h, dk], Init::Ones);

        let mut lambdas = [None; 4];
        let mut dm = None;
        if mix.layer_mixes(n) {
            for c in &mix.components {
                let l1 = p.add(format!("layer{n}.mix.{c}.lambda1"), lambda_shape.clone(), lambda_init);
                let l2 = p.add(format!("layer{n}.mix.{c}.lambda2"), lambda_shape.clone(), lambda_init);
                lambdas[c.index()] = Some([l1, l2]);
            }
            if mix.dynamic {
                dm = Some([
                    p.add(format!("layer{n}.dm.w1"), vec![d, DM_HIDDEN], Init::Normal),
                    p.add(format!("layer{n}.dm.w2"), vec![DM_HIDDEN, DM_OUTPUTS], Init::Zero),
                    p.add(format!("layer{n}.dm.b"), vec![DM_OUTPUTS], Init::Zero),
                ]);
            }
        }

        let ffn_norm = p.add(format!("layer{n}.ffn_norm.gain"), vec![d], Init::Ones);
        let w_gate = p.add(format!("layer{n}.ffn.w_gate"), vec![d, config.d_ff], Init::Normal);
        let w_up = p.add(format!("layer{n}.ffn.w_up"), vec![d, config.d_ff], Init::Normal);
        let w_down = p.add(format!("layer{n}.ffn.w_down"), vec![config.d_ff, d], Init::Normal);
        layers.push(LayerIds {
            attn_norm,
            wq,
            wk,
            wv,
            wg,
            wo,
            q_norm,
            k_norm,
            lambdas,
            dm,
            ffn_norm,
            w_gate,
            w_up,
            w_down,
        });
    }
    let final_norm = p.add("final_norm.gain".into(), vec![d], Init::Ones);
    let lm_head = (!config.tie_embeddings).then(|| p.add("lm_head.weight".into(), vec![d, config.vocab_size], Init::Zero));

    (
        Layout {
            embed,
            anchor_w,
            anchor_norm,
            layers,
            final_norm,
            lm_head,
        },
        p.specs,
    )
}

/// Decoder-only transformer with its parameters.
#[derive(Clone, Debug)]
pub struct TransformerModel<F> {
    config: ModelConfig,
    params: Vec<ParamEntry<F>>,
    index: HashMap<String, ParamId>,
    pub(crate) layout: Layout,
}

impl<F: Element> TransformerModel<F> {
    /// Builds and initializes a model. Matrices are drawn from N(0, 1/d)
    /// except the attention output projections, the LM head and the dynamic
    /// mixing output layer, which start at zero. Values are drawn in f64, so
    /// f32 and f64 models built from one seed agree up to rounding.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        let config = config.validated()?;
        let (layout, specs) = plan(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / (config.d_model as f64).sqrt())
            .map_err(|e| Error::config("d_model", e.to_string()))?;
        let params = specs
            .into_iter()
            .map(|(name, shape, init)| {
                let tensor = match init {
                    Init::Normal => Tensor::from_fn(&shape, |_| F::from_f64(normal.sample(&mut rng))),
                    Init::Zero => Tensor::zeros(&shape),
                    Init::Ones => Tensor::ones(&shape),
                    Init::Fill(v) => Tensor::full(&shape, F::from_f64(v)),
                };
                ParamEntry { name, tensor }
            })
            .collect();
        Ok(Self::assemble(config, layout, params))
    }

    /// Builds a model from named tensors; every expected tensor must be
    /// present with the right shape and no extras are allowed.
    pub fn from_named(config: ModelConfig, mut tensors: HashMap<String, Tensor<F>>) -> Result<Self> {
        let config = config.validated()?;
        let (layout, specs) = plan(&config);
        let mut problems = Vec::new();
        let mut params = Vec::with_capacity(specs.len());
        for (name, shape, _) in specs {
            match tensors.remove(&name) {
                Some(t) if t.shape() == shape.as_slice() => params.push(ParamEntry { name, tensor: t }),
                Some(t) => {
                    problems.push(format!("`{name}`: expected shape {shape:?}, found {:?}", t.shape()));
                }
                None => problems.push(format!("`{name}`: missing")),
            }
        }
        let mut extra: Vec<_> = tensors.into_keys().collect();
        extra.sort();
        problems.extend(extra.into_iter().map(|n| format!("`{n}`: not part of this model")));
        if !problems.is_empty() {
            return Err(Error::TensorMismatch(problems));
        }
        Ok(Self::assemble(config, layout, params))
    }

    fn assemble(config: ModelConfig, layout: Layout, params: Vec<ParamEntry<F>>) -> Self {
        let index = params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        Self {
            config,
            params,
            index,
            layout,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[ParamEntry<F>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [ParamEntry<F>] {
        &mut self.params
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.param_id(name).map(|i| &self.params[i].tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.param_id(name).map(move |i| &mut self.params[i].tensor)
    }

    /// Replaces a parameter's value; the shape must match.
    pub fn set(&mut self, name: &str, value: Tensor<F>) -> Result<()> {
        let t = self
            .get_mut(name)
            .ok_or_else(|| Error::Missing(format!("parameter `{name}`")))?;
        if t.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                t.shape(),
                value.shape()
            )));
        }
        *t = value;
        Ok(())
    }

    /// Fills every mixing coefficient named `layer*.mix.*.lambda{path}`.
    pub fn fill_lambdas(&mut self, path: usize, value: f64) {
        let suffix = format!(".lambda{path}");
        for p in &mut self.params {
            if p.name.contains(".mix.") && p.name.ends_with(&suffix) {
                p.tensor.data_mut().fill(F::from_f64(value));
            }
        }
    }

    /// Copies every parameter of `other` whose name and shape match one of
    /// ours. Returns the number copied.
    pub fn copy_matching<G: Element>(&mut self, other: &TransformerModel<G>) -> usize {
        let mut n = 0;
        for p in &mut self.params {
            if let Some(src) = other.get(&p.name) {
                if src.shape() == p.tensor.shape() {
                    p.tensor = src.cast();
                    n += 1;
                }
            }
        }
        n
    }

    /// Adds N(0, std²) noise to every parameter, including zero-initialized ones.
    pub fn perturb(&mut self, seed: u64, std: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).expect("finite std");
        for p in &mut self.params {
            for v in p.tensor.data_mut() {
                *v = *v + F::from_f64(normal.sample(&mut rng));
            }
        }
    }

    pub fn cast<G: Element>(&self) -> TransformerModel<G> {
        TransformerModel {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| ParamEntry {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                })
                .collect(),
            index: self.index.clone(),
            layout: self.layout.clone(),
        }
    }

    /// Total parameter count, optionally excluding the embedding table and
    /// LM head.
    pub fn num_params(&self, include_embeddings: bool) -> usize {
        self.params
            .iter()
            .filter(|p| include_embeddings || !(p.name == "embed.weight" || p.name == "lm_head.weight"))
            .map(|p| p.tensor.numel())
            .sum()
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let c = CheckpointContainer::load(path)?;
        Self::from_container(&c).map_err(|e| match e {
            Error::TensorMismatch(_) | Error::Config { .. } => e,
            other => Error::Checkpoint {
                path: path.to_path_buf(),
                reason: other.to_string(),
            },
        })
    }

    /// Container holding the config and every parameter tensor.
    pub fn to_container(&self) -> Result<CheckpointContainer> {
        let mut c = CheckpointContainer::new();
        c.set_config(&self.config)?;
        for p in &self.params {
            c.insert(&p.name, &p.tensor);
        }
        Ok(c)
    }

    /// Rebuilds a model from a container; tensors outside the model's
    /// namespace (`optim.*`) are ignored.
    pub fn from_container(c: &CheckpointContainer) -> Result<Self> {
        let config: ModelConfig = c.config()?;
        let mut tensors = HashMap::new();
        for name in c.names() {
            if name.starts_with("optim.") {
                continue;
            }
            tensors.insert(name.to_string(), c.get::<F>(name)?);
        }
        Self::from_named(config, tensors)
    }

    /// Checks a container's tensors against `config` without building.
    pub fn check_container(config: &ModelConfig, c: &CheckpointContainer) -> Result<()> {
        let (_, specs) = plan(&config.clone().validated()?);
        let mut problems = Vec::new();
        for (name, shape, _) in specs {
            match c.entry(&name) {
                Some(e) if e.shape == shape => {}
                Some(e) => problems.push(format!("`{name}`: expected shape {shape:?}, found {:?}", e.shape)),
                None => problems.push(format!("`{name}`: missing")),
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::TensorMismatch(problems))
        }
    }
}

/// Parameter names and shapes a config would construct, in build order.
pub fn parameter_shapes(config: &ModelConfig) -> Result<Vec<(String, Vec<usize>)>> {
    let config = config.clone().validated()?;
    Ok(plan(&config).1.into_iter().map(|(n, s, _)| (n, s)).collect())
}
