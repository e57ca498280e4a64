//! AdamW, a simplified Muon, gradient clipping and the linear LR schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CheckpointContainer, TransformerModel};
use crate::tensor::{Element, Gradients, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    #[serde(default = "default_adamw_lr")]
    pub adamw_lr: f64,
    #[serde(default = "default_betas")]
    pub adamw_betas: (f64, f64),
    #[serde(default = "default_adamw_eps")]
    pub adamw_eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Skip decay on coordinates where it opposes the optimizer update.
    #[serde(default)]
    pub cautious: bool,
    #[serde(default)]
    pub muon_enabled: bool,
    #[serde(default = "default_muon_lr")]
    pub muon_lr: f64,
    #[serde(default = "default_muon_momentum")]
    pub muon_momentum: f64,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    #[serde(default)]
    pub warmup_steps: u64,
    #[serde(default)]
    pub warmdown_steps: u64,
    pub total_steps: u64,
}

fn default_adamw_lr() -> f64 {
    3e-3
}
fn default_betas() -> (f64, f64) {
    (0.9, 0.95)
}
fn default_adamw_eps() -> f64 {
    1e-8
}
fn default_muon_lr() -> f64 {
    0.02
}
fn default_muon_momentum() -> f64 {
    0.95
}
fn default_clip() -> f64 {
    1.0
}

impl OptimConfig {
    pub fn new(total_steps: u64) -> Self {
        Self {
            adamw_lr: default_adamw_lr(),
            adamw_betas: default_betas(),
            adamw_eps: default_adamw_eps(),
            weight_decay: 0.0,
            cautious: false,
            muon_enabled: false,
            muon_lr: default_muon_lr(),
            muon_momentum: default_muon_momentum(),
            clip_norm: default_clip(),
            warmup_steps: 0,
            warmdown_steps: 0,
            total_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let field = |f: &str, r: &str| Err(Error::config(f, r));
        if self.warmup_steps + self.warmdown_steps > self.total_steps {
            return field("warmup_steps", "warmup + warmdown exceeds total_steps");
        }
        if !(self.adamw_lr > 0.0 && self.adamw_lr.is_finite()) {
            return field("adamw_lr", "must be positive and finite");
        }
        let (b1, b2) = self.adamw_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return field("adamw_betas", "both betas must lie in [0, 1)");
        }
        if !(self.adamw_eps > 0.0) {
            return field("adamw_eps", "must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return field("weight_decay", "must be non-negative");
        }
        if self.muon_enabled && !(self.muon_lr > 0.0 && (0.0..1.0).contains(&self.muon_momentum)) {
            return field("muon_lr", "muon needs lr > 0 and momentum in [0, 1)");
        }
        if !(self.clip_norm > 0.0) {
            return field("clip_norm", "must be positive");
        }
        Ok(())
    }
}

/// Schedule multiplier: linear ramp over `warmup_steps`, 1 on the plateau,
/// linear decay to 0 over the last `warmdown_steps`.
pub fn lr_at(step: u64, cfg: &OptimConfig) -> f64 {
    let step = step.min(cfg.total_steps);
    if step < cfg.warmup_steps {
        return step as f64 / cfg.warmup_steps as f64;
    }
    let decay_start = cfg.total_steps - cfg.warmdown_steps;
    if cfg.warmdown_steps > 0 && step > decay_start {
        return (cfg.total_steps - step) as f64 / cfg.warmdown_steps as f64;
    }
    1.0
}

/// How a parameter is optimized: weight matrices may decay and may use
/// Muon, everything else is a 1D parameter (norm gains, λ, biases). Per-head
/// norm gains are stored as `[h, d_k]` but are still gains.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Matrix,
    Vector,
}

impl ParamKind {
    pub fn of(name: &str, shape: &[usize]) -> Self {
        if shape.len() == 2 && !name.ends_with(".gain") {
            ParamKind::Matrix
        } else {
            ParamKind::Vector
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClipReport {
    /// Global L2 norm before clipping.
    pub norm: f64,
    /// Factor applied to every gradient (1 when unclipped).
    pub scale: f64,
}

/// Scales all gradients by `max_norm / norm` when the global norm exceeds
/// `max_norm`. A non-finite norm aborts with an error and leaves `grads` as is.
pub fn clip_grad_norm<F: Element>(grads: &mut Gradients<F>, max_norm: f64) -> Result<ClipReport> {
    let norm = grads.global_norm();
    if !norm.is_finite() {
        let bad: Vec<String> = grads
            .iter()
            .filter(|(_, g)| !g.all_finite())
            .map(|(id, _)| id.to_string())
            .collect();
        return Err(Error::NumericFault {
            op: format!("gradient norm (non-finite gradients for params [{}])", bad.join(", ")),
            node: 0,
        });
    }
    let scale = if norm > max_norm { max_norm / norm } else { 1.0 };
    if scale != 1.0 {
        grads.scale(F::from_f64(scale));
    }
    Ok(ClipReport { norm, scale })
}

/// Hyperparameters of one AdamW update.
#[derive(Clone, Copy, Debug)]
pub struct AdamWParams {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub decay: f64,
    pub cautious: bool,
}

/// One decoupled AdamW update with bias correction. `step` is the 1-based
/// update count after this step.
pub fn adamw_step<F: Element>(
    param: &mut Tensor<F>,
    grad: &Tensor<F>,
    m: &mut Tensor<F>,
    v: &mut Tensor<F>,
    step: u64,
    h: &AdamWParams,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != m.shape() || param.shape() != v.shape() {
        return Err(Error::Shape(format!(
            "adamw: param {:?}, grad {:?}, state {:?}/{:?}",
            param.shape(),
            grad.shape(),
            m.shape(),
            v.shape()
        )));
    }
    let (b1, b2) = h.betas;
    let bc1 = 1.0 - b1.powi(step as i32);
    let bc2 = 1.0 - b2.powi(step as i32);
    for (((p, &g), m), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(m.data_mut())
        .zip(v.data_mut())
    {
        let g = g.as_f64();
        let mi = b1 * m.as_f64() + (1.0 - b1) * g;
        let vi = b2 * v.as_f64() + (1.0 - b2) * g * g;
        *m = F::from_f64(mi);
        *v = F::from_f64(vi);
        let dir = (mi / bc1) / ((vi / bc2).sqrt() + h.eps);
        let mut x = p.as_f64();
        if h.decay != 0.0 && (!h.cautious || x * dir >= 0.0) {
            x -= h.lr * h.decay * x;
        }
        x -= h.lr * dir;
        *p = F::from_f64(x);
    }
    Ok(())
}

const NS_ITERS: usize = 5;
const POWER_ITERS: usize = 20;

/// Approximate orthogonal polar factor of a `rows × cols` matrix: scale by a
/// power-iteration estimate of the spectral norm, then apply the cubic
/// Newton–Schulz map `X ← 1.5·X − 0.5·X·Xᵀ·X` a fixed number of times.
pub fn newton_schulz(x: &[f64], rows: usize, cols: usize, iters: usize) -> Vec<f64> {
    assert_eq!(x.len(), rows * cols, "newton_schulz: shape mismatch");
    let sigma = spectral_norm(x, rows, cols);
    if sigma == 0.0 || !sigma.is_finite() {
        return vec![0.0; x.len()];
    }
    let mut cur: Vec<f64> = x.iter().map(|v| v / sigma).collect();
    let mut gram = vec![0.0; rows * rows];
    let mut prod = vec![0.0; rows * cols];
    for _ in 0..iters {
        // gram = X·Xᵀ, prod = gram·X
        f64::gemm(rows, cols, rows, &cur, cols as isize, 1, &cur, 1, cols as isize, &mut gram, false);
        f64::gemm(rows, rows, cols, &gram, rows as isize, 1, &cur, cols as isize, 1, &mut prod, false);
        for (c, p) in cur.iter_mut().zip(&prod) {
            *c = 1.5 * *c - 0.5 * p;
        }
    }
    cur
}

fn spectral_norm(x: &[f64], rows: usize, cols: usize) -> f64 {
    let mut v: Vec<f64> = (0..cols).map(|i| 1.0 + (i % 7) as f64 * 0.1).collect();
    let mut u = vec![0.0; rows];
    let mut est = 0.0;
    for _ in 0..POWER_ITERS {
        let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if nv == 0.0 {
            return 0.0;
        }
        v.iter_mut().for_each(|a| *a /= nv);
        for (r, ur) in u.iter_mut().enumerate() {
            *ur = (0..cols).map(|c| x[r * cols + c] * v[c]).sum();
        }
        for (c, vc) in v.iter_mut().enumerate() {
            *vc = (0..rows).map(|r| x[r * cols + c] * u[r]).sum();
        }
        est = v.iter().map(|a| a * a).sum::<f64>().sqrt().sqrt();
    }
    // Power iteration approaches from below; a margin keeps every singular
    // value inside the Newton–Schulz basin of convergence (0, √3).
    est * 1.05
}

/// Momentum update followed by Newton–Schulz orthogonalization of the
/// momentum buffer, applied with step size `lr`.
pub fn muon_lite_step<F: Element>(
    param: &mut Tensor<F>,
    grad: &Tensor<F>,
    momentum: &mut Tensor<F>,
    lr: f64,
    beta: f64,
    decay: f64,
) -> Result<()> {
    if param.rank() != 2 {
        return Err(Error::Contract(format!(
            "muon updates matrices only, got shape {:?}",
            param.shape()
        )));
    }
    if grad.shape() != param.shape() || momentum.shape() != param.shape() {
        return Err(Error::Shape("muon: param/grad/momentum shapes differ".into()));
    }
    let (rows, cols) = (param.shape()[0], param.shape()[1]);
    for (m, g) in momentum.data_mut().iter_mut().zip(grad.data()) {
        *m = F::from_f64(beta * m.as_f64() + g.as_f64());
    }
    let buf: Vec<f64> = momentum.data().iter().map(|m| m.as_f64()).collect();
    let update = newton_schulz(&buf, rows, cols, NS_ITERS);
    for (p, u) in param.data_mut().iter_mut().zip(update) {
        let x = p.as_f64();
        *p = F::from_f64(x - lr * decay * x - lr * u);
    }
    Ok(())
}

/// Per-parameter optimizer state for a whole model.
#[derive(Clone, Debug)]
pub struct Optimizer<F> {
    config: OptimConfig,
    step: u64,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
    muon: Vec<Option<Tensor<F>>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub lr_multiplier: f64,
    pub grad_norm: f64,
    pub clip_scale: f64,
}

fn uses_muon(cfg: &OptimConfig, name: &str, shape: &[usize]) -> bool {
    cfg.muon_enabled && ParamKind::of(name, shape) == ParamKind::Matrix && name != "embed.weight" && name != "lm_head.weight"
}

impl<F: Element> Optimizer<F> {
    pub fn new(config: OptimConfig, model: &TransformerModel<F>) -> Result<Self> {
        config.validate()?;
        let params = model.params();
        let zeros = || params.iter().map(|p| Tensor::zeros(p.tensor.shape())).collect::<Vec<_>>();
        let muon = params
            .iter()
            .map(|p| uses_muon(&config, &p.name, p.tensor.shape()).then(|| Tensor::zeros(p.tensor.shape())))
            .collect();
        Ok(Self {
            m: zeros(),
            v: zeros(),
            muon,
            config,
            step: 0,
        })
    }

    pub fn config(&self) -> &OptimConfig {
        &self.config
    }

    /// Number of updates applied so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Clips `grads`, then updates every parameter. Parameters without a
    /// gradient are treated as having a zero gradient.
    pub fn step(&mut self, model: &mut TransformerModel<F>, grads: &mut Gradients<F>) -> Result<StepReport> {
        let clip = clip_grad_norm(grads, self.config.clip_norm)?;
        let mult = lr_at(self.step, &self.config);
        let t = self.step + 1;
        let cfg = &self.config;
        for (id, p) in model.params_mut().iter_mut().enumerate() {
            let zero;
            let g = match grads.get(id) {
                Some(g) => g,
                None => {
                    zero = Tensor::zeros(p.tensor.shape());
                    &zero
                }
            };
            let decay = match ParamKind::of(&p.name, p.tensor.shape()) {
                ParamKind::Matrix => cfg.weight_decay,
                ParamKind::Vector => 0.0,
            };
            match self.muon[id].as_mut() {
                Some(mom) => muon_lite_step(&mut p.tensor, g, mom, cfg.muon_lr * mult, cfg.muon_momentum, decay)?,
                None => adamw_step(
                    &mut p.tensor,
                    g,
                    &mut self.m[id],
                    &mut self.v[id],
                    t,
                    &AdamWParams {
                        lr: cfg.adamw_lr * mult,
                        betas: cfg.adamw_betas,
                        eps: cfg.adamw_eps,
                        decay,
                        cautious: cfg.cautious,
                    },
                )?,
            }
        }
        self.step = t;
        Ok(StepReport {
            lr_multiplier: mult,
            grad_norm: clip.norm,
            clip_scale: clip.scale,
        })
    }

    /// Stores the state under `optim.*` names plus the step count and config.
    pub fn save_into(&self, c: &mut CheckpointContainer, model: &TransformerModel<F>) -> Result<()> {
        for (id, p) in model.params().iter().enumerate() {
            c.insert(&format!("optim.adam.m.{}", p.name), &self.m[id]);
            c.insert(&format!("optim.adam.v.{}", p.name), &self.v[id]);
            if let Some(mom) = &self.muon[id] {
                c.insert(&format!("optim.muon.m.{}", p.name), mom);
            }
        }
        c.meta.insert("optim.step".into(), self.step.into());
        c.meta.insert("optim.config".into(), serde_json::to_value(&self.config)?);
        Ok(())
    }

    pub fn load_from(c: &CheckpointContainer, model: &TransformerModel<F>) -> Result<Self> {
        let config: OptimConfig = serde_json::from_value(
            c.meta
                .get("optim.config")
                .cloned()
                .ok_or_else(|| Error::Missing("checkpoint has no optimizer config".into()))?,
        )?;
        let mut opt = Self::new(config, model)?;
        opt.step = c
            .meta
            .get("optim.step")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Missing("checkpoint has no optimizer step".into()))?;
        let mut problems = Vec::new();
        let mut fetch = |name: String, shape: &[usize]| -> Option<Tensor<F>> {
            match c.get::<F>(&name) {
                Ok(t) if t.shape() == shape => Some(t),
                Ok(t) => {
                    problems.push(format!("`{name}`: expected {shape:?}, found {:?}", t.shape()));
                    None
                }
                Err(e) => {
                    problems.push(format!("`{name}`: {e}"));
                    None
                }
            }
        };
        for (id, p) in model.params().iter().enumerate() {
            let shape = p.tensor.shape();
            if let Some(t) = fetch(format!("optim.adam.m.{}", p.name), shape) {
                opt.m[id] = t;
            }
            if let Some(t) = fetch(format!("optim.adam.v.{}", p.name), shape) {
                opt.v[id] = t;
            }
            if opt.muon[id].is_some() {
                opt.muon[id] = fetch(format!("optim.muon.m.{}", p.name), shape);
            }
        }
        if !problems.is_empty() {
            return Err(Error::TensorMismatch(problems));
        }
        Ok(opt)
    }

    /// Bitwise equality of all state (for resume checks).
    pub fn state_eq(&self, other: &Self) -> bool {
        self.step == other.step
            && self.config == other.config
            && self.m.iter().zip(&other.m).all(|(a, b)| a.bitwise_eq(b))
            && self.v.iter().zip(&other.v).all(|(a, b)| a.bitwise_eq(b))
            && self.muon.len() == other.muon.len()
            && self.muon.iter().zip(&other.muon).all(|(a, b)| match (a, b) {
                (Some(a), Some(b)) => a.bitwise_eq(b),
                (None, None) => true,
                _ => false,
            })
    }
}
