use std::io::Write;

use super::csv_err;
use crate::error::{Error, Result};
use crate::model::{CheckpointContainer, Component};
use crate::tensor::{DType, Tensor};

/// Denominator guard in `|λ1| / (|λ2| + ε)`.
pub const LAMBDA_EPS: f64 = 1e-8;
/// `|λ1|` below this counts as a closed anchor channel.
pub const NEAR_ZERO_THRESHOLD: f64 = 0.001;

#[derive(Clone, Debug, PartialEq)]
pub struct LambdaRatio {
    pub layer: usize,
    pub component: Component,
    pub channel: usize,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LambdaRatioMap {
    pub entries: Vec<LambdaRatio>,
    /// Fraction of λ1 entries with magnitude below [`NEAR_ZERO_THRESHOLD`].
    pub near_zero_fraction: f64,
}

impl LambdaRatioMap {
    /// Long-form CSV `layer,component,channel,ratio`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["layer", "component", "channel", "ratio"]).map_err(csv_err)?;
        for e in &self.entries {
            out.write_record([
                e.layer.to_string(),
                e.component.to_string(),
                e.channel.to_string(),
                e.ratio.to_string(),
            ])
            .map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }
}

fn read_f64(c: &CheckpointContainer, name: &str) -> Result<Tensor<f64>> {
    match c.entry(name).map(|e| e.dtype) {
        Some(DType::F32) => Ok(c.get::<f32>(name)?.to_f64()),
        Some(DType::F64) => c.get::<f64>(name),
        None => Err(Error::Missing(format!("tensor `{name}`"))),
    }
}

/// Parses `layer{n}.mix.{c}.lambda1`.
fn parse_lambda1(name: &str) -> Option<(usize, Component)> {
    let rest = name.strip_prefix("layer")?;
    let (n, rest) = rest.split_once(".mix.")?;
    let c = rest.strip_suffix(".lambda1")?;
    Some((n.parse().ok()?, Component::parse(c)?))
}

/// Elementwise `|λ1| / (|λ2| + ε)` for every mixed component, located purely
/// by tensor names, at the stored granularity.
pub fn lambda_ratio_map(c: &CheckpointContainer) -> Result<LambdaRatioMap> {
    let mut found: Vec<(usize, Component, String)> = c
        .names()
        .filter_map(|n| parse_lambda1(n).map(|(l, comp)| (l, comp, n.to_string())))
        .collect();
    if found.is_empty() {
        return Err(Error::Missing("no `layer*.mix.*.lambda1` coefficients in checkpoint".into()));
    }
    found.sort();
    let mut entries = Vec::new();
    let (mut near_zero, mut total) = (0usize, 0usize);
    for (layer, component, name1) in found {
        let l1 = read_f64(c, &name1)?;
        let l2 = read_f64(c, &format!("layer{layer}.mix.{component}.lambda2"))?;
        if l1.shape() != l2.shape() {
            return Err(Error::Shape(format!(
                "layer {layer} `{component}`: λ1 {:?} vs λ2 {:?}",
                l1.shape(),
                l2.shape()
            )));
        }
        for (channel, (a, b)) in l1.data().iter().zip(l2.data()).enumerate() {
            entries.push(LambdaRatio {
                layer,
                component,
                channel,
                ratio: a.abs() / (b.abs() + LAMBDA_EPS),
            });
            total += 1;
            if a.abs() < NEAR_ZERO_THRESHOLD {
                near_zero += 1;
            }
        }
    }
    Ok(LambdaRatioMap {
        entries,
        near_zero_fraction: near_zero as f64 / total as f64,
    })
}
