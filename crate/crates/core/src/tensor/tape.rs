use std::collections::BTreeMap;

use super::kernels::{broadcast_index_pairs, broadcast_shape, gelu, gelu_grad, rope_tables, sigmoid};
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Index of a trainable parameter in the owning model's parameter store.
pub type ParamId = usize;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F> {
    Leaf,
    MatMul { a: Var, b: Var },
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: F },
    Sigmoid { x: Var },
    Gelu { x: Var },
    SwiGlu { gate: Var, up: Var },
    Softmax { x: Var },
    MaskedFill { x: Var, mask: Vec<bool> },
    Reshape { x: Var },
    SplitHeads { x: Var, heads: usize },
    MergeHeads { x: Var },
    Transpose { x: Var },
    Sum { x: Var },
    Mean { x: Var },
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<F> },
    Rope { x: Var, cos: Vec<F>, sin: Vec<F> },
    Embedding { table: Var, ids: Vec<usize> },
    LogSumExp { x: Var },
    Gather { x: Var, ids: Vec<usize> },
    SliceLast { x: Var, start: usize },
}

impl<F> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::BatchMatMul { .. } => "bmm",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Gelu { .. } => "gelu",
            Op::SwiGlu { .. } => "swiglu",
            Op::Softmax { .. } => "softmax",
            Op::MaskedFill { .. } => "masked_fill",
            Op::Reshape { .. } => "reshape",
            Op::SplitHeads { .. } => "split_heads",
            Op::MergeHeads { .. } => "merge_heads",
            Op::Transpose { .. } => "transpose",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::RmsNorm { .. } => "rmsnorm",
            Op::Rope { .. } => "rope",
            Op::Embedding { .. } => "embedding",
            Op::LogSumExp { .. } => "logsumexp",
            Op::Gather { .. } => "gather",
            Op::SliceLast { .. } => "slice_last",
        }
    }
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Per-parameter gradients produced by [`Tape::backward`].
#[derive(Clone, Debug, Default)]
pub struct Gradients<F> {
    map: BTreeMap<ParamId, Tensor<F>>,
}

impl<F: Element> Gradients<F> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.map.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<F>)> {
        self.map.iter().map(|(k, v)| (*k, v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Tensor<F>)> {
        self.map.iter_mut().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor<F>) {
        self.map.insert(id, grad);
    }

    /// Adds `other` into `self` (used to accumulate micro-batches).
    pub fn accumulate(&mut self, other: Gradients<F>) {
        for (id, g) in other.map {
            match self.map.get_mut(&id) {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a = *a + *b;
                    }
                }
                None => {
                    self.map.insert(id, g);
                }
            }
        }
    }

    /// Global L2 norm over every gradient, accumulated in f64.
    pub fn global_norm(&self) -> f64 {
        self.map
            .values()
            .flat_map(|t| t.data().iter())
            .map(|v| {
                let v = v.as_f64();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: F) {
        for t in self.map.values_mut() {
            for v in t.data_mut() {
                *v = *v * factor;
            }
        }
    }
}

/// Recording of a differentiable computation.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and backward is a single reverse sweep.
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    fault: Option<(String, usize)>,
}

impl<F: Element> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Element> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf whose gradient is reported under `id`.
    pub fn param(&mut self, value: Tensor<F>, id: ParamId) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
            param: Some(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// First numeric fault recorded so far, as an error.
    pub fn check(&self) -> Result<()> {
        match &self.fault {
            Some((op, node)) => Err(Error::NumericFault {
                op: op.clone(),
                node: *node,
            }),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        let id = self.nodes.len();
        if self.fault.is_none() && !matches!(op, Op::MaskedFill { .. }) && !value.all_finite() {
            self.fault = Some((op.name().to_string(), id));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        Var(id)
    }

    fn data(&self, v: Var) -> &[F] {
        self.nodes[v.0].value.data()
    }

    // ----- kernels -------------------------------------------------------

    /// `a [.., k] · b [k, n] -> [.., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() >= 1 && sb.len() == 2, "matmul: rhs must be a matrix, got {sa:?}·{sb:?}");
        let k = *sa.last().unwrap();
        assert_eq!(k, sb[0], "matmul: inner dims differ {sa:?}·{sb:?}");
        let n = sb[1];
        let m = self.value(a).numel() / k.max(1);
        let mut out = vec![F::zero(); m * n];
        F::gemm(m, k, n, self.data(a), k as isize, 1, self.data(b), n as isize, 1, &mut out, false);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        self.push(Tensor { shape, data: out }, Op::MatMul { a, b }, &[a, b])
    }

    /// Batched product over the leading axis: `[B,m,k]·[B,k,n]`, or
    /// `[B,m,k]·[B,n,k]ᵀ` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0], "bmm: bad shapes {sa:?} {sb:?}");
        let (bat, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        assert_eq!(k, kb, "bmm: inner dims differ {sa:?} {sb:?} trans_b={trans_b}");
        let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        let mut out = vec![F::zero(); bat * m * n];
        {
            let (da, db) = (self.data(a), self.data(b));
            for i in 0..bat {
                F::gemm(
                    m,
                    k,
                    n,
                    &da[i * m * k..(i + 1) * m * k],
                    k as isize,
                    1,
                    &db[i * k * n..(i + 1) * k * n],
                    rsb,
                    csb,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        self.push(
            Tensor { shape: vec![bat, m, n], data: out },
            Op::BatchMatMul { a, b, trans_b },
            &[a, b],
        )
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(F, F) -> F) -> Tensor<F> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let shape = broadcast_shape(sa, sb)
            .unwrap_or_else(|| panic!("{name}: shapes {sa:?} and {sb:?} do not broadcast"));
        let (da, db) = (self.data(a), self.data(b));
        let data = if sa == sb {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            broadcast_index_pairs(sa, sb, &shape)
                .into_iter()
                .map(|(i, j)| f(da[i], db[j]))
                .collect()
        };
        Tensor { shape, data }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.binary(a, b, "add", |x, y| x + y);
        self.push(out, Op::Add { a, b }, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.binary(a, b, "sub", |x, y| x - y);
        self.push(out, Op::Sub { a, b }, &[a, b])
    }

    /// Elementwise product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.binary(a, b, "mul", |x, y| x * y);
        self.push(out, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let v = self.value(x);
        let out = Tensor {
            shape: v.shape().to_vec(),
            data: v.data().iter().map(|&e| e * c).collect(),
        };
        self.push(out, Op::Scale { x, c }, &[x])
    }

    fn unary(&self, x: Var, f: impl Fn(F) -> F) -> Tensor<F> {
        let v = self.value(x);
        Tensor {
            shape: v.shape().to_vec(),
            data: v.data().iter().map(|&e| f(e)).collect(),
        }
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.unary(x, sigmoid);
        self.push(out, Op::Sigmoid { x }, &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.unary(x, gelu);
        self.push(out, Op::Gelu { x }, &[x])
    }

    /// `silu(gate) ⊙ up`.
    pub fn swiglu(&mut self, gate: Var, up: Var) -> Var {
        assert_eq!(self.shape(gate), self.shape(up), "swiglu: shape mismatch");
        let data = self
            .data(gate)
            .iter()
            .zip(self.data(up))
            .map(|(&g, &u)| g * sigmoid(g) * u)
            .collect();
        let out = Tensor {
            shape: self.shape(gate).to_vec(),
            data,
        };
        self.push(out, Op::SwiGlu { gate, up }, &[gate, up])
    }

    /// Softmax over the last axis. Entries equal to `-inf` get probability 0.
    pub fn softmax(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = *v.shape().last().expect("softmax on scalar");
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for e in row.iter_mut() {
                *e = (*e - max).exp();
                sum = sum + *e;
            }
            for e in row.iter_mut() {
                *e = *e / sum;
            }
        }
        let out = Tensor {
            shape: v.shape().to_vec(),
            data,
        };
        self.push(out, Op::Softmax { x }, &[x])
    }

    /// Replaces entries where `mask` is true by `value`. The mask is tiled
    /// over the leading axes (its length must divide the element count).
    pub fn masked_fill(&mut self, x: Var, mask: Vec<bool>, value: F) -> Var {
        let v = self.value(x);
        assert!(
            !mask.is_empty() && v.numel() % mask.len() == 0,
            "masked_fill: mask of {} does not tile {:?}",
            mask.len(),
            v.shape()
        );
        let data = v
            .data()
            .iter()
            .enumerate()
            .map(|(i, &e)| if mask[i % mask.len()] { value } else { e })
            .collect();
        let out = Tensor {
            shape: v.shape().to_vec(),
            data,
        };
        self.push(out, Op::MaskedFill { x, mask }, &[x])
    }

    /// Masks strictly-upper-triangular entries of `[.., T, T]` with `-inf`.
    pub fn causal_mask(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let t = s[s.len() - 1];
        assert_eq!(s[s.len() - 2], t, "causal_mask: last two axes must be square");
        let mask = (0..t * t).map(|i| i % t > i / t).collect();
        self.masked_fill(x, mask, F::neg_infinity())
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.value(x);
        let numel: usize = shape.iter().product();
        assert_eq!(numel, v.numel(), "reshape: {:?} -> {shape:?}", v.shape());
        let out = Tensor {
            shape: shape.to_vec(),
            data: v.data().to_vec(),
        };
        self.push(out, Op::Reshape { x }, &[x])
    }

    /// `[T, h·dk]` (or `[T, h, dk]`) to `[h, T, dk]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Var {
        let v = self.value(x);
        let t = v.shape()[0];
        let d = v.numel() / t.max(1);
        assert!(heads > 0 && d % heads == 0, "split_heads: width {d} not divisible by {heads}");
        let dk = d / heads;
        let src = v.data();
        let mut data = vec![F::zero(); v.numel()];
        for p in 0..t {
            for h in 0..heads {
                let s = p * d + h * dk;
                let o = (h * t + p) * dk;
                data[o..o + dk].copy_from_slice(&src[s..s + dk]);
            }
        }
        let out = Tensor {
            shape: vec![heads, t, dk],
            data,
        };
        self.push(out, Op::SplitHeads { x, heads }, &[x])
    }

    /// `[h, T, dk]` to `[T, h·dk]`.
    pub fn merge_heads(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.shape();
        assert_eq!(s.len(), 3, "merge_heads: expected [h,T,dk], got {s:?}");
        let (heads, t, dk) = (s[0], s[1], s[2]);
        let src = v.data();
        let mut data = vec![F::zero(); v.numel()];
        for h in 0..heads {
            for p in 0..t {
                let s = (h * t + p) * dk;
                let o = p * heads * dk + h * dk;
                data[o..o + dk].copy_from_slice(&src[s..s + dk]);
            }
        }
        let out = Tensor {
            shape: vec![t, heads * dk],
            data,
        };
        self.push(out, Op::MergeHeads { x }, &[x])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.shape().to_vec();
        assert!(s.len() >= 2, "transpose: rank < 2");
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let data = transpose_blocks(v.data(), r, c);
        let mut shape = s;
        let n = shape.len();
        shape.swap(n - 2, n - 1);
        self.push(Tensor { shape, data }, Op::Transpose { x }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().fold(F::zero(), |a, &b| a + b);
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().fold(F::zero(), |a, &b| a + b) / F::from_f64(v.numel() as f64);
        self.push(Tensor::scalar(s), Op::Mean { x }, &[x])
    }

    /// `gain ⊙ x / sqrt(mean(x²) + eps)` over the last axis. `gain` must have
    /// the shape of a suffix of `x` (e.g. `[h, dk]` against `[T, h, dk]`),
    /// which gives independent gains per normalization group.
    pub fn rmsnorm(&mut self, x: Var, gain: Var, eps: f64) -> Var {
        let (vx, vg) = (self.value(x), self.value(gain));
        let (sx, sg) = (vx.shape(), vg.shape());
        assert!(
            sg.len() <= sx.len() && sx[sx.len() - sg.len()..] == *sg,
            "rmsnorm: gain {sg:?} is not a suffix of {sx:?}"
        );
        let n = *sx.last().unwrap();
        let g = vg.data();
        let groups = g.len() / n;
        let eps = F::from_f64(eps);
        let mut inv_rms = Vec::with_capacity(vx.numel() / n);
        let mut data = Vec::with_capacity(vx.numel());
        for (r, row) in vx.data().chunks(n).enumerate() {
            let ms = row.iter().fold(F::zero(), |a, &b| a + b * b) / F::from_f64(n as f64);
            let inv = F::one() / (ms + eps).sqrt();
            inv_rms.push(inv);
            let go = (r % groups) * n;
            data.extend(row.iter().zip(&g[go..go + n]).map(|(&e, &gg)| gg * e * inv));
        }
        let out = Tensor {
            shape: sx.to_vec(),
            data,
        };
        self.push(out, Op::RmsNorm { x, gain, inv_rms }, &[x, gain])
    }

    /// Rotary embedding over `[.., T, dk]`, rotating adjacent channel pairs
    /// `(2i, 2i+1)` by `pos · theta^(-2i/dk)`.
    pub fn rope(&mut self, x: Var, positions: &[usize], theta: f64) -> Var {
        let v = self.value(x);
        let s = v.shape();
        assert!(s.len() >= 2, "rope: rank < 2");
        let dk = s[s.len() - 1];
        let t = s[s.len() - 2];
        assert!(dk % 2 == 0, "rope: head dimension {dk} is odd");
        assert_eq!(positions.len(), t, "rope: {} positions for {t} rows", positions.len());
        let (cos, sin) = rope_tables::<F>(positions, dk, theta);
        let half = dk / 2;
        let mut data = v.data().to_vec();
        for (r, row) in data.chunks_mut(dk).enumerate() {
            let p = r % t;
            for i in 0..half {
                let (c, sn) = (cos[p * half + i], sin[p * half + i]);
                let (x0, x1) = (row[2 * i], row[2 * i + 1]);
                row[2 * i] = x0 * c - x1 * sn;
                row[2 * i + 1] = x0 * sn + x1 * c;
            }
        }
        let out = Tensor {
            shape: s.to_vec(),
            data,
        };
        self.push(out, Op::Rope { x, cos, sin }, &[x])
    }

    /// Row lookup `table[ids[i]]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let v = self.value(table);
        assert_eq!(v.rank(), 2, "embedding: table must be a matrix");
        let (rows, d) = (v.shape()[0], v.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            assert!(i < rows, "embedding: id {i} out of range {rows}");
            data.extend_from_slice(&v.data()[i * d..(i + 1) * d]);
        }
        let out = Tensor {
            shape: vec![ids.len(), d],
            data,
        };
        self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Log-sum-exp over the last axis.
    pub fn logsumexp(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = *v.shape().last().unwrap();
        let data = v
            .data()
            .chunks(n)
            .map(|row| {
                let m = row.iter().copied().fold(F::neg_infinity(), F::max);
                m + row.iter().fold(F::zero(), |a, &e| a + (e - m).exp()).ln()
            })
            .collect();
        let shape = v.shape()[..v.rank() - 1].to_vec();
        let shape = if shape.is_empty() { vec![1] } else { shape };
        self.push(Tensor { shape, data }, Op::LogSumExp { x }, &[x])
    }

    /// `out[r] = x[r, ids[r]]` over the last axis.
    pub fn gather(&mut self, x: Var, ids: &[usize]) -> Var {
        let v = self.value(x);
        let n = *v.shape().last().unwrap();
        let rows = v.numel() / n;
        assert_eq!(rows, ids.len(), "gather: {} ids for {rows} rows", ids.len());
        let data = ids
            .iter()
            .enumerate()
            .map(|(r, &i)| {
                assert!(i < n, "gather: index {i} out of range {n}");
                v.data()[r * n + i]
            })
            .collect();
        let out = Tensor {
            shape: vec![rows],
            data,
        };
        self.push(
            out,
            Op::Gather {
                x,
                ids: ids.to_vec(),
            },
            &[x],
        )
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x);
        let n = *v.shape().last().unwrap();
        assert!(start + len <= n, "slice_last: {start}+{len} > {n}");
        let data = v
            .data()
            .chunks(n)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = v.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        self.push(Tensor { shape, data }, Op::SliceLast { x, start }, &[x])
    }

    // ----- backward ------------------------------------------------------

    /// Reverse sweep from a scalar `loss`; returns gradients of every
    /// parameter leaf reachable from it.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        self.check()?;
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![F::one()]);
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Some(id) = node.param {
                let t = Tensor {
                    shape: node.value.shape().to_vec(),
                    data: g,
                };
                match out.map.get_mut(&id) {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                            *a = *a + *b;
                        }
                    }
                    None => {
                        out.map.insert(id, t);
                    }
                }
                continue;
            }
            self.backward_node(node, &g, &mut grads);
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Vec<F>>], v: Var, contribution: Vec<F>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(contribution) {
                    *a = *a + b;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let k = vb.shape()[0];
                let n = vb.shape()[1];
                let m = va.numel() / k.max(1);
                if self.wants(*a) {
                    let mut da = vec![F::zero(); m * k];
                    F::gemm(m, n, k, g, n as isize, 1, vb.data(), 1, n as isize, &mut da, false);
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![F::zero(); k * n];
                    F::gemm(k, m, n, va.data(), 1, k as isize, g, n as isize, 1, &mut db, false);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (bat, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
                let n = if *trans_b { vb.shape()[1] } else { vb.shape()[2] };
                let (sa, sb, sc) = (m * k, k * n, m * n);
                if self.wants(*a) {
                    let mut da = vec![F::zero(); bat * sa];
                    // bᵀ viewed as [n, k]
                    let (rs, cs) = if *trans_b { (k as isize, 1) } else { (1, n as isize) };
                    for i in 0..bat {
                        F::gemm(
                            m,
                            n,
                            k,
                            &g[i * sc..(i + 1) * sc],
                            n as isize,
                            1,
                            &vb.data()[i * sb..(i + 1) * sb],
                            rs,
                            cs,
                            &mut da[i * sa..(i + 1) * sa],
                            false,
                        );
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![F::zero(); bat * sb];
                    for i in 0..bat {
                        let ga = &g[i * sc..(i + 1) * sc];
                        let ai = &va.data()[i * sa..(i + 1) * sa];
                        let out = &mut db[i * sb..(i + 1) * sb];
                        if *trans_b {
                            // db [n,k] = gᵀ [n,m] · a [m,k]
                            F::gemm(n, m, k, ga, 1, n as isize, ai, k as isize, 1, out, false);
                        } else {
                            // db [k,n] = aᵀ [k,m] · g [m,n]
                            F::gemm(k, m, n, ai, 1, k as isize, ga, n as isize, 1, out, false);
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let negate = matches!(node.op, Op::Sub { .. });
                self.broadcast_backward(*a, *b, node.value.shape(), g, grads, |gi, _, _| gi, |gi, _, _| {
                    if negate {
                        -gi
                    } else {
                        gi
                    }
                });
            }
            Op::Mul { a, b } => {
                self.broadcast_backward(
                    *a,
                    *b,
                    node.value.shape(),
                    g,
                    grads,
                    |gi, _, vb| gi * vb,
                    |gi, va, _| gi * va,
                );
            }
            Op::Scale { x, c } => {
                self.accumulate(grads, *x, g.iter().map(|&e| e * *c).collect());
            }
            Op::Sigmoid { x } => {
                let dx = g.iter().zip(y).map(|(&gi, &s)| gi * s * (F::one() - s)).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Gelu { x } => {
                let dx = g
                    .iter()
                    .zip(self.data(*x))
                    .map(|(&gi, &xi)| gi * gelu_grad(xi))
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::SwiGlu { gate, up } => {
                let (dg, du) = (self.data(*gate), self.data(*up));
                if self.wants(*gate) {
                    let d = g
                        .iter()
                        .zip(dg.iter().zip(du))
                        .map(|(&gi, (&a, &u))| {
                            let s = sigmoid(a);
                            gi * u * (s + a * s * (F::one() - s))
                        })
                        .collect();
                    self.accumulate(grads, *gate, d);
                }
                if self.wants(*up) {
                    let d = g
                        .iter()
                        .zip(dg)
                        .map(|(&gi, &a)| gi * a * sigmoid(a))
                        .collect();
                    self.accumulate(grads, *up, d);
                }
            }
            Op::Softmax { x } => {
                let n = *node.value.shape().last().unwrap();
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(n).zip(g.chunks(n)) {
                    let dot = yr.iter().zip(gr).fold(F::zero(), |a, (&p, &q)| a + p * q);
                    dx.extend(yr.iter().zip(gr).map(|(&p, &q)| p * (q - dot)));
                }
                self.accumulate(grads, *x, dx);
            }
            Op::MaskedFill { x, mask } => {
                let dx = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| if mask[i % mask.len()] { F::zero() } else { gi })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Reshape { x } => self.accumulate(grads, *x, g.to_vec()),
            Op::SplitHeads { x, heads } => {
                let s = node.value.shape();
                let (t, dk) = (s[1], s[2]);
                let d = heads * dk;
                let mut dx = vec![F::zero(); g.len()];
                for h in 0..*heads {
                    for p in 0..t {
                        let o = (h * t + p) * dk;
                        let s = p * d + h * dk;
                        dx[s..s + dk].copy_from_slice(&g[o..o + dk]);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::MergeHeads { x } => {
                let s = self.shape(*x);
                let (heads, t, dk) = (s[0], s[1], s[2]);
                let mut dx = vec![F::zero(); g.len()];
                for h in 0..heads {
                    for p in 0..t {
                        let s = (h * t + p) * dk;
                        let o = p * heads * dk + h * dk;
                        dx[s..s + dk].copy_from_slice(&g[o..o + dk]);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Transpose { x } => {
                let s = node.value.shape();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                self.accumulate(grads, *x, transpose_blocks(g, r, c));
            }
            Op::Sum { x } => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Mean { x } => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![g[0] / F::from_f64(n as f64); n]);
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (vx, vg) = (self.value(*x), self.value(*gain));
                let n = *vx.shape().last().unwrap();
                let gd = vg.data();
                let groups = gd.len() / n;
                let mut dx = vec![F::zero(); vx.numel()];
                let mut dgain = vec![F::zero(); gd.len()];
                let nf = F::from_f64(n as f64);
                for (r, row) in vx.data().chunks(n).enumerate() {
                    let inv = inv_rms[r];
                    let go = (r % groups) * n;
                    let gr = &g[r * n..(r + 1) * n];
                    let mut dot = F::zero();
                    for j in 0..n {
                        let xhat = row[j] * inv;
                        dgain[go + j] = dgain[go + j] + gr[j] * xhat;
                        dot = dot + gr[j] * gd[go + j] * xhat;
                    }
                    let mean_dot = dot / nf;
                    for j in 0..n {
                        let xhat = row[j] * inv;
                        dx[r * n + j] = inv * (gr[j] * gd[go + j] - xhat * mean_dot);
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gain, dgain);
            }
            Op::Rope { x, cos, sin } => {
                let s = node.value.shape();
                let dk = s[s.len() - 1];
                let t = s[s.len() - 2];
                let half = dk / 2;
                let mut dx = g.to_vec();
                for (r, row) in dx.chunks_mut(dk).enumerate() {
                    let p = r % t;
                    for i in 0..half {
                        let (c, sn) = (cos[p * half + i], sin[p * half + i]);
                        let (g0, g1) = (row[2 * i], row[2 * i + 1]);
                        row[2 * i] = g0 * c + g1 * sn;
                        row[2 * i + 1] = g1 * c - g0 * sn;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Embedding { table, ids } => {
                let vt = self.value(*table);
                let d = vt.shape()[1];
                let mut dt = vec![F::zero(); vt.numel()];
                for (r, &i) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[i * d + j] = dt[i * d + j] + g[r * d + j];
                    }
                }
                self.accumulate(grads, *table, dt);
            }
            Op::LogSumExp { x } => {
                let vx = self.value(*x);
                let n = *vx.shape().last().unwrap();
                let mut dx = Vec::with_capacity(vx.numel());
                for (r, row) in vx.data().chunks(n).enumerate() {
                    dx.extend(row.iter().map(|&e| g[r] * (e - y[r]).exp()));
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Gather { x, ids } => {
                let vx = self.value(*x);
                let n = *vx.shape().last().unwrap();
                let mut dx = vec![F::zero(); vx.numel()];
                for (r, &i) in ids.iter().enumerate() {
                    dx[r * n + i] = g[r];
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SliceLast { x, start } => {
                let vx = self.value(*x);
                let n = *vx.shape().last().unwrap();
                let len = *node.value.shape().last().unwrap();
                let mut dx = vec![F::zero(); vx.numel()];
                for (r, gr) in g.chunks(len).enumerate() {
                    dx[r * n + start..r * n + start + len].copy_from_slice(gr);
                }
                self.accumulate(grads, *x, dx);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn broadcast_backward(
        &self,
        a: Var,
        b: Var,
        out_shape: &[usize],
        g: &[F],
        grads: &mut [Option<Vec<F>>],
        da_fn: impl Fn(F, F, F) -> F,
        db_fn: impl Fn(F, F, F) -> F,
    ) {
        let (va, vb) = (self.value(a), self.value(b));
        let (wa, wb) = (self.wants(a), self.wants(b));
        let mut da = if wa { vec![F::zero(); va.numel()] } else { Vec::new() };
        let mut db = if wb { vec![F::zero(); vb.numel()] } else { Vec::new() };
        let (xa, xb) = (va.data(), vb.data());
        if va.shape() == vb.shape() {
            for i in 0..g.len() {
                if wa {
                    da[i] = da_fn(g[i], xa[i], xb[i]);
                }
                if wb {
                    db[i] = db_fn(g[i], xa[i], xb[i]);
                }
            }
        } else {
            for (i, (ia, ib)) in broadcast_index_pairs(va.shape(), vb.shape(), out_shape)
                .into_iter()
                .enumerate()
            {
                if wa {
                    da[ia] = da[ia] + da_fn(g[i], xa[ia], xb[ib]);
                }
                if wb {
                    db[ib] = db[ib] + db_fn(g[i], xa[ia], xb[ib]);
                }
            }
        }
        if wa {
            self.accumulate(grads, a, da);
        }
        if wb {
            self.accumulate(grads, b, db);
        }
    }
}

fn transpose_blocks<F: Element>(src: &[F], r: usize, c: usize) -> Vec<F> {
    let block = r * c;
    let mut out = vec![F::zero(); src.len()];
    if block == 0 {
        return out;
    }
    for (bi, chunk) in src.chunks(block).enumerate() {
        let dst = &mut out[bi * block..(bi + 1) * block];
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = chunk[i * c + j];
            }
        }
    }
    out
}
