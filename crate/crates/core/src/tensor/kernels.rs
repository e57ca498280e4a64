//! Slice-level helpers shared by the tape kernels.

use super::Element;

/// NumPy-style broadcast of two shapes (right-aligned), `None` if incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides that map an index of `out_shape` onto a buffer of `in_shape`
/// (zero along broadcast axes).
fn broadcast_strides(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - in_shape.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..in_shape.len()).rev() {
        if in_shape[i] != 1 {
            strides[i + offset] = acc;
        }
        acc *= in_shape[i];
    }
    strides
}

/// For every linear index of `out_shape`, the matching linear indices into
/// the two broadcast operands.
pub(crate) fn broadcast_index_pairs(
    a: &[usize],
    b: &[usize],
    out_shape: &[usize],
) -> Vec<(usize, usize)> {
    let sa = broadcast_strides(a, out_shape);
    let sb = broadcast_strides(b, out_shape);
    let numel: usize = out_shape.iter().product();
    let rank = out_shape.len();
    let mut pairs = Vec::with_capacity(numel);
    let mut counter = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for _ in 0..numel {
        pairs.push((ia, ib));
        for d in (0..rank).rev() {
            counter[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if counter[d] < out_shape[d] {
                break;
            }
            ia -= sa[d] * out_shape[d];
            ib -= sb[d] * out_shape[d];
            counter[d] = 0;
        }
    }
    pairs
}

/// Reference triple-loop matrix product `[m,k]·[k,n]`, accumulated in f64.
pub fn gemm_naive<F: Element>(m: usize, k: usize, n: usize, a: &[F], b: &[F]) -> Vec<F> {
    let mut c = vec![F::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i * k + p].as_f64() * b[p * n + j].as_f64();
            }
            c[i * n + j] = F::from_f64(acc);
        }
    }
    c
}

pub(crate) fn sigmoid<F: Element>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu<F: Element>(x: F) -> F {
    let c = F::from_f64(GELU_C);
    let a = F::from_f64(GELU_A);
    let half = F::from_f64(0.5);
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<F: Element>(x: F) -> F {
    let c = F::from_f64(GELU_C);
    let a = F::from_f64(GELU_A);
    let half = F::from_f64(0.5);
    let three = F::from_f64(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + three * a * x * x)
}

/// RoPE cos/sin tables, `[positions.len(), dim/2]` each.
pub(crate) fn rope_tables<F: Element>(positions: &[usize], dim: usize, theta: f64) -> (Vec<F>, Vec<F>) {
    let half = dim / 2;
    let mut cos = Vec::with_capacity(positions.len() * half);
    let mut sin = Vec::with_capacity(positions.len() * half);
    for &pos in positions {
        for i in 0..half {
            let freq = theta.powf(-(2.0 * i as f64) / dim as f64);
            let angle = pos as f64 * freq;
            cos.push(F::from_f64(angle.cos()));
            sin.push(F::from_f64(angle.sin()));
        }
    }
    (cos, sin)
}
