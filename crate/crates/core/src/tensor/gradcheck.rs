//! Finite-difference verification of tape gradients (f64 only).
//!
//! Numeric derivatives use the fourth-order central stencil
//! `(8(f(x+h) − f(x−h)) − (f(x+2h) − f(x−2h))) / 12h`, which tolerates a
//! larger step than a plain central difference for the same truncation
//! error and so loses less to roundoff.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamId, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / (|analytic| + 1e-8)` over checked coordinates.
    pub max_rel_error: f64,
    /// Parameter, flat index, analytic and numeric value of the worst coordinate.
    pub worst: Option<(ParamId, usize, f64, f64)>,
    pub checked: usize,
}

fn eval<B>(build: &mut B, params: &[Tensor<f64>], with_grad: bool) -> Result<(f64, Option<super::Gradients<f64>>)>
where
    B: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if with_grad {
                tape.param(p.clone(), i)
            } else {
                tape.constant(p.clone())
            }
        })
        .collect();
    let loss = build(&mut tape, &vars)?;
    tape.check()?;
    let value = tape.value(loss).data()[0];
    let grads = if with_grad { Some(tape.backward(loss)?) } else { None };
    Ok((value, grads))
}

/// Compares analytic gradients of the scalar built by `build` against
/// numeric derivatives. `build` receives one tape variable per entry of
/// `params` (parameter id = position). `h` is the stencil step,
/// scaled per coordinate by `max(1, |p|)`. `samples_per_param = 0` checks
/// every coordinate; otherwise a seeded random subset of that size per
/// parameter.
pub fn gradient_check<B>(
    mut build: B,
    params: &[Tensor<f64>],
    h: f64,
    samples_per_param: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    B: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let (base, grads) = eval(&mut build, params, true)?;
    let (again, _) = eval(&mut build, params, false)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::Contract(format!(
            "gradient check oracle invalid: forward is non-deterministic ({base} vs {again})"
        )));
    }
    let grads = grads.expect("requested");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for (pid, p) in params.iter().enumerate() {
        let n = p.numel();
        let coords: Vec<usize> = if samples_per_param == 0 || samples_per_param >= n {
            (0..n).collect()
        } else {
            sample(&mut rng, n, samples_per_param).into_vec()
        };
        for idx in coords {
            let orig = p.data()[idx];
            let step = h * orig.abs().max(1.0);
            let mut at = |offset: f64| -> Result<f64> {
                work[pid].data_mut()[idx] = orig + offset;
                Ok(eval(&mut build, &work, false)?.0)
            };
            let (p1, m1, p2, m2) = (at(step)?, at(-step)?, at(2.0 * step)?, at(-2.0 * step)?);
            work[pid].data_mut()[idx] = orig;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * step);
            let analytic = grads.get(pid).map_or(0.0, |g| g.data()[idx]);
            let rel = (analytic - numeric).abs() / (analytic.abs() + 1e-8);
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((pid, idx, analytic, numeric));
            }
        }
    }
    Ok(report)
}
