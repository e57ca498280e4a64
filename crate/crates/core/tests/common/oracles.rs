//! Brute-force metric oracles and random trace generators.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xflab_core::analysis::ActivationTrace;
use xflab_core::tensor::Tensor;

/// Random causal attention `[h, T, T]`; some rows are one-hot so exact zeros
/// appear inside the causal support too.
pub fn random_attention(rng: &mut ChaCha8Rng, h: usize, t: usize) -> Tensor<f64> {
    let mut data = vec![0.0; h * t * t];
    for head in 0..h {
        for q in 0..t {
            let row = &mut data[(head * t + q) * t..(head * t + q + 1) * t];
            if rng.random_bool(0.15) {
                row[rng.random_range(0..=q)] = 1.0;
                continue;
            }
            let scale = rng.random_range(0.1..6.0);
            let logits: Vec<f64> = (0..=q).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for (j, l) in logits.iter().enumerate() {
                row[j] = l.exp() / z;
            }
        }
    }
    Tensor::new(vec![h, t, t], data).unwrap()
}

pub fn random_hidden(rng: &mut ChaCha8Rng, t: usize, d: usize, zero_rows: bool) -> Tensor<f64> {
    let offset: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut data: Vec<f64> = (0..t * d).map(|i| offset[i % d] + rng.random_range(-1.0..1.0)).collect();
    if zero_rows && t > 2 {
        let r = rng.random_range(0..t);
        data[r * d..(r + 1) * d].fill(0.0);
    }
    Tensor::new(vec![t, d], data).unwrap()
}

/// Trace with random sizes, embeddings, gates and occasional zero rows.
pub fn random_trace(seed: u64) -> ActivationTrace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = rng.random_range(1..5);
    let t = rng.random_range(2..12);
    let h = rng.random_range(1..4);
    let d = rng.random_range(2..10);
    let zero_rows = rng.random_bool(0.3);
    let mut tr = ActivationTrace::new(l);
    tr.embeddings = Some(random_hidden(&mut rng, t, d, zero_rows));
    for _ in 0..l {
        tr.hidden.push(random_hidden(&mut rng, t, d, zero_rows));
        tr.attention.push(random_attention(&mut rng, h, t));
        let g = Tensor::from_fn(&[t, d], |_| 1.0 / (1.0 + (-rng.random_range(-4.0..4.0f64)).exp()));
        tr.gates.push(g);
    }
    tr
}

pub fn cos(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (na > 0.0 && nb > 0.0).then(|| dot / (na * nb))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean row entropy per layer over every head and query.
pub fn entropy(tr: &ActivationTrace) -> Vec<f64> {
    tr.attention
        .iter()
        .map(|a| {
            let (h, t) = (a.shape()[0], a.shape()[1]);
            let mut rows = Vec::new();
            for head in 0..h {
                for q in 0..t {
                    let mut e = 0.0;
                    for j in 0..=q {
                        let p = a.data()[head * t * t + q * t + j];
                        if p > 0.0 {
                            e -= p * p.ln();
                        }
                    }
                    rows.push(e);
                }
            }
            mean(&rows)
        })
        .collect()
}

/// Mean attention on position 0 over heads and queries `t ≥ 1`.
pub fn sink(tr: &ActivationTrace) -> Vec<f64> {
    tr.attention
        .iter()
        .map(|a| {
            let (h, t) = (a.shape()[0], a.shape()[1]);
            let vals: Vec<f64> = (0..h)
                .flat_map(|head| (1..t).map(move |q| (head, q)))
                .map(|(head, q)| a.data()[head * t * t + q * t])
                .collect();
            mean(&vals)
        })
        .collect()
}

/// `(mean pairwise cosine, skipped unordered pairs)` per row, embeddings first.
pub fn token_similarity(tr: &ActivationTrace) -> Vec<(f64, f64)> {
    tr.embeddings
        .iter()
        .chain(&tr.hidden)
        .map(|h| {
            let t = h.shape()[0];
            let (mut sum, mut n, mut skipped) = (0.0, 0.0, 0.0);
            // Ordered pairs; each unordered pair counts twice.
            for i in 0..t {
                for j in 0..t {
                    if i == j {
                        continue;
                    }
                    match cos(h.row(i), h.row(j)) {
                        Some(c) => {
                            sum += c;
                            n += 1.0;
                        }
                        None => skipped += 0.5,
                    }
                }
            }
            (sum / n, skipped)
        })
        .collect()
}

pub fn layer_similarity(tr: &ActivationTrace) -> Vec<Vec<f64>> {
    let l = tr.hidden.len();
    let t = tr.hidden[0].shape()[0];
    (0..l)
        .map(|i| {
            (0..l)
                .map(|j| {
                    if i == j {
                        return 1.0;
                    }
                    let cs: Vec<f64> = (0..t).filter_map(|k| cos(tr.hidden[i].row(k), tr.hidden[j].row(k))).collect();
                    mean(&cs)
                })
                .collect()
        })
        .collect()
}

/// `(mean, fraction below 0.2)` per layer.
pub fn gate_profile(tr: &ActivationTrace) -> Vec<(f64, f64)> {
    tr.gates
        .iter()
        .map(|g| {
            let closed = g.data().iter().filter(|&&v| v < 0.2).count();
            (mean(g.data()), closed as f64 / g.numel() as f64)
        })
        .collect()
}

/// Core features from eigenvalues of the covariance matrix.
pub fn pca(h: &Tensor<f64>, target: f64) -> usize {
    let (t, d) = (h.shape()[0], h.shape()[1]);
    let x = DMatrix::from_row_slice(t, d, h.data());
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(t, d, |r, c| x[(r, c)] - mean[c]);
    let cov = centered.transpose() * &centered / (t as f64 - 1.0);
    let mut eig: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().map(|v| v.max(0.0)).collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = eig.iter().sum();
    let mut acc = 0.0;
    for (k, v) in eig.iter().enumerate() {
        acc += v;
        if acc >= target * total {
            return k + 1;
        }
    }
    eig.len()
}

pub fn pca_rows(tr: &ActivationTrace, target: f64) -> Vec<usize> {
    tr.embeddings.iter().chain(&tr.hidden).map(|h| pca(h, target)).collect()
}
