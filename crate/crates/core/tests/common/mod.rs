#![allow(dead_code)]

pub mod dual;
pub mod oracles;
pub mod reference;

use dual::Fwd;
use xflab_core::model::{ForwardOptions, Granularity, ModelConfig, NormPolicy, TransformerModel, Variant};
use xflab_core::tensor::{Tape, Tensor};
use xflab_core::Result;

pub type Batch = Vec<(Vec<usize>, Vec<usize>)>;

/// Small config at `(L, d, h, V, T) = (2, 16, 2, 32, 8)`.
pub fn tiny(variant: Variant) -> ModelConfig {
    ModelConfig::preset(variant, 2, 16, 2, 32, 8)
}

/// Every variant plus a spread of granularity, norm and dynamic settings.
pub fn config_matrix() -> Vec<(String, ModelConfig)> {
    use Granularity::*;
    use NormPolicy as N;
    let mix = |v, g, n, dynamic: bool| {
        tiny(v).with_mix(|m| {
            m.granularity = g;
            m.norm_policy = n;
            m.dynamic = dynamic;
        })
    };
    let mut out: Vec<(String, ModelConfig)> = Variant::ALL.iter().map(|&v| (v.to_string(), tiny(v))).collect();
    for (v, g, n, d) in [
        (Variant::Nuresformer, Scalar, N::QkOnly, false),
        (Variant::Nuresformer, Headwise, N::None, true),
        (Variant::Nuresformer, Elementwise, N::Full, true),
        (Variant::Exoformer, Elementwise, N::Full, true),
        (Variant::Exoformer, Headwise, N::QkOnly, false),
        (Variant::Exoformer, Scalar, N::None, true),
        (Variant::Exoformer, Headwise, N::Full, true),
        (Variant::Exoformer, Scalar, N::Full, false),
        (Variant::Exoformer, Elementwise, N::QkOnly, true),
        (Variant::Exoformer, Elementwise, N::None, false),
    ] {
        out.push((format!("{v} {g:?} {n:?}{}", if d { " dynamic" } else { "" }), mix(v, g, n, d)));
    }
    out
}

pub fn toy_batch(vocab: usize, len: usize) -> Batch {
    let tokens = (0..len).map(|i| (i * 7 + 3) % vocab).collect();
    let targets = (0..len).map(|i| (i * 5 + 1) % vocab).collect();
    vec![(tokens, targets)]
}

#[derive(Debug)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub worst: Option<(String, usize, f64, f64)>,
    pub checked: usize,
}

/// Compares every reverse-mode gradient coordinate against the exact
/// directional derivative from a forward-mode (dual number) pass, using
/// `|a − f| / (|a| + 1e-8)`.
pub fn forward_mode_check(model: &TransformerModel<f64>, batch: &Batch) -> Result<GradReport> {
    let (_, grads) = model.loss_and_grads(batch)?;
    let mut dual: TransformerModel<Fwd> = model.cast();
    let mut report = GradReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for pid in 0..dual.params().len() {
        let n = dual.params()[pid].tensor.numel();
        for idx in 0..n {
            let seed = |m: &mut TransformerModel<Fwd>, eps: f64| {
                let x = &mut m.params_mut()[pid].tensor.data_mut()[idx];
                *x = Fwd::new(x.re(), eps);
            };
            seed(&mut dual, 1.0);
            let mut tape = Tape::new();
            let vars = dual.bind(&mut tape, false);
            let l = dual.loss_on(&mut tape, &vars, batch, &ForwardOptions::default())?;
            let forward = tape.value(l.total).data()[0].eps();
            seed(&mut dual, 0.0);
            let analytic = grads.get(pid).map_or(0.0, |g: &Tensor<f64>| g.data()[idx]);
            let rel = (analytic - forward).abs() / (analytic.abs() + 1e-8);
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((model.params()[pid].name.clone(), idx, analytic, forward));
            }
        }
    }
    Ok(report)
}
