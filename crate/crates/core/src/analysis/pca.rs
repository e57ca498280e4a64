use super::{ActivationTrace, MetricTable};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAX_SWEEPS: usize = 60;

/// Singular values of a row-major `[m, n]` matrix in descending order,
/// via one-sided (Hestenes) Jacobi rotations on the narrower side.
pub fn singular_values(m: usize, n: usize, data: &[f64]) -> Vec<f64> {
    assert_eq!(data.len(), m * n, "singular_values: {m}x{n} needs {} values", m * n);
    // Work on columns of the tall orientation: `cols` vectors of length `len`.
    let (cols, len) = if m >= n { (n, m) } else { (m, n) };
    let mut v: Vec<Vec<f64>> = (0..cols)
        .map(|c| {
            (0..len)
                .map(|r| if m >= n { data[r * n + c] } else { data[c * n + r] })
                .collect()
        })
        .collect();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for k in 0..len {
                    alpha += v[p][k] * v[p][k];
                    beta += v[q][k] * v[q][k];
                    gamma += v[p][k] * v[q][k];
                }
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (head, tail) = v.split_at_mut(q);
                let (vp, vq) = (&mut head[p], &mut tail[0]);
                for k in 0..len {
                    let (x, y) = (vp[k], vq[k]);
                    vp[k] = c * x - s * y;
                    vq[k] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = v.iter().map(|col| col.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Smallest `k` whose top-`k` squared singular values of the column-centered
/// `[T, d]` matrix reach `target` of the total variance. Returns 0 for
/// degenerate input (all rows identical).
pub fn core_feature_count(h: &Tensor<f64>, target: f64) -> Result<usize> {
    if h.rank() != 2 {
        return Err(Error::Shape(format!("hidden state must be [T, d], got {:?}", h.shape())));
    }
    if !(target > 0.0 && target <= 1.0) {
        return Err(Error::Input(format!("variance target {target} must lie in (0, 1]")));
    }
    let (t, d) = (h.shape()[0], h.shape()[1]);
    if t < 2 {
        return Err(Error::Input(format!("PCA needs at least 2 tokens, got {t}")));
    }
    let mut x = h.data().to_vec();
    let raw_energy: f64 = x.iter().map(|v| v * v).sum();
    for c in 0..d {
        let mean = (0..t).map(|r| x[r * d + c]).sum::<f64>() / t as f64;
        for r in 0..t {
            x[r * d + c] -= mean;
        }
    }
    let sv = singular_values(t, d, &x);
    let var: Vec<f64> = sv.iter().map(|s| s * s).collect();
    let total: f64 = var.iter().sum();
    if total <= 1e-24 * raw_energy.max(f64::MIN_POSITIVE) {
        log::warn!("pca_core_features: degenerate hidden state (all rows identical)");
        return Ok(0);
    }
    let mut acc = 0.0;
    for (k, v) in var.iter().enumerate() {
        acc += v;
        if acc >= target * total {
            return Ok(k + 1);
        }
    }
    Ok(var.len())
}

/// Core feature count per layer (embedding row included when traced).
pub fn pca_core_features(trace: &ActivationTrace, variance_target: f64) -> Result<MetricTable> {
    let mut table = MetricTable::new("pca", &["features"]);
    for (layer, h) in trace.hidden_rows()? {
        table.push(layer, vec![core_feature_count(h, variance_target)? as f64]);
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_and_rank_one() {
        let sv = singular_values(3, 2, &[3.0, 0.0, 0.0, -4.0, 0.0, 0.0]);
        assert!((sv[0] - 4.0).abs() < 1e-12 && (sv[1] - 3.0).abs() < 1e-12);

        let u = [1.0, 2.0, -1.0];
        let data: Vec<f64> = (0..4).flat_map(|r| u.iter().map(move |x| x * (r as f64 - 1.5))).collect();
        let h = Tensor::new(vec![4, 3], data).unwrap();
        assert_eq!(core_feature_count(&h, 0.99).unwrap(), 1);
    }

    #[test]
    fn identical_rows_are_degenerate() {
        let h = Tensor::from_fn(&[5, 4], |i| (i % 4) as f64 + 1.0);
        assert_eq!(core_feature_count(&h, 0.99).unwrap(), 0);
    }

    #[test]
    fn wide_matrix_matches_transpose() {
        let a: Vec<f64> = (0..12).map(|i| ((i * 7 % 5) as f64) - 2.0).collect();
        let at: Vec<f64> = (0..12).map(|i| a[(i % 3) * 4 + i / 3]).collect();
        let s1 = singular_values(3, 4, &a);
        let s2 = singular_values(4, 3, &at);
        for (x, y) in s1.iter().zip(&s2) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
