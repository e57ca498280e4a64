//! Plain nested-loop f64 decoder, written without the tape, covering the
//! non-mixing baselines and the first-layer value residual.

use xflab_core::model::TransformerModel;

pub struct ValueResidual {
    pub lambda1: f64,
    pub lambda2: f64,
}

fn mat(x: &[f64], rows: usize, inner: usize, w: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[r * cols + c] = (0..inner).map(|i| x[r * inner + i] * w[i * cols + c]).sum();
        }
    }
    out
}

fn rms_rows(x: &[f64], width: usize, gain: &[f64], eps: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(width) {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / width as f64;
        let inv = 1.0 / (ms + eps).sqrt();
        out.extend(row.iter().zip(gain).map(|(v, g)| g * v * inv));
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn rotate(v: &mut [f64], pos: usize, theta: f64) {
    let dk = v.len();
    for i in 0..dk / 2 {
        let angle = pos as f64 * theta.powf(-(2.0 * i as f64) / dk as f64);
        let (s, c) = angle.sin_cos();
        let (a, b) = (v[2 * i], v[2 * i + 1]);
        v[2 * i] = a * c - b * s;
        v[2 * i + 1] = a * s + b * c;
    }
}

/// Logits `[T, V]` row-major. `residual` mixes layer 1's values into every
/// later layer as `λ1·V_1 + λ2·V_n`.
pub fn reference_logits(model: &TransformerModel<f64>, tokens: &[usize], residual: Option<ValueResidual>) -> Vec<f64> {
    let cfg = model.config();
    let (d, h, vocab, t) = (cfg.d_model, cfg.n_heads, cfg.vocab_size, tokens.len());
    let dk = d / h;
    let dff = cfg.d_ff;
    let eps = cfg.rmsnorm_eps;
    let w = |name: &str| -> Vec<f64> {
        model
            .get(name)
            .unwrap_or_else(|| panic!("reference needs `{name}`"))
            .data()
            .to_vec()
    };
    let embed = w("embed.weight");
    let mut x: Vec<f64> = tokens.iter().flat_map(|&i| embed[i * d..(i + 1) * d].to_vec()).collect();
    let mut v_first: Option<Vec<f64>> = None;

    for n in 1..=cfg.n_layers {
        let p = |s: &str| w(&format!("layer{n}.{s}"));
        let xn = rms_rows(&x, d, &p("attn_norm.gain"), eps);
        let q = mat(&xn, t, d, &p("attn.wq"), d);
        let k = mat(&xn, t, d, &p("attn.wk"), d);
        let mut v = mat(&xn, t, d, &p("attn.wv"), d);
        if n == 1 {
            v_first = Some(v.clone());
        } else if let Some(r) = &residual {
            let v1 = v_first.as_ref().unwrap();
            for (cur, first) in v.iter_mut().zip(v1) {
                *cur = r.lambda1 * first + r.lambda2 * *cur;
            }
        }
        let (qg, kg) = (p("attn.q_norm.gain"), p("attn.k_norm.gain"));
        let mut u = vec![0.0; t * d];
        for head in 0..h {
            let span = head * dk..(head + 1) * dk;
            let prep = |m: &[f64], gain: &[f64], pos: usize| {
                let mut row = rms_rows(&m[pos * d + span.start..pos * d + span.end], dk, &gain[span.clone()], eps);
                rotate(&mut row, pos, cfg.rope_theta);
                row
            };
            let qs: Vec<Vec<f64>> = (0..t).map(|i| prep(&q, &qg, i)).collect();
            let ks: Vec<Vec<f64>> = (0..t).map(|i| prep(&k, &kg, i)).collect();
            for i in 0..t {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| qs[i].iter().zip(&ks[j]).map(|(a, b)| a * b).sum::<f64>() / (dk as f64).sqrt())
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
                for (j, s) in scores.iter().enumerate() {
                    let a = (s - max).exp() / z;
                    for c in span.clone() {
                        u[i * d + c] += a * v[j * d + c];
                    }
                }
            }
        }
        if cfg.gating {
            let g = mat(&xn, t, d, &p("attn.wg"), d);
            for (ui, gi) in u.iter_mut().zip(&g) {
                *ui *= sigmoid(*gi);
            }
        }
        let o = mat(&u, t, d, &p("attn.wo"), d);
        x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);

        let xn = rms_rows(&x, d, &p("ffn_norm.gain"), eps);
        let gate = mat(&xn, t, d, &p("ffn.w_gate"), dff);
        let up = mat(&xn, t, d, &p("ffn.w_up"), dff);
        let act: Vec<f64> = gate.iter().zip(&up).map(|(g, u)| g * sigmoid(*g) * u).collect();
        let f = mat(&act, t, dff, &p("ffn.w_down"), d);
        x.iter_mut().zip(&f).for_each(|(a, b)| *a += b);
    }
    let xf = rms_rows(&x, d, &w("final_norm.gain"), eps);
    mat(&xf, t, d, &w("lm_head.weight"), vocab)
}
