//! Reverse-mode differentiation over a linear record of operations.
//!
//! Every operation appends one node holding its forward value. Node indices
//! are assigned in execution order, so inputs always precede their consumers
//! and the backward sweep is a single reverse walk over the record.

use rand::Rng;

use super::kernels::{self, axpy, dot};
use super::tensor::{split_at_axis, Result, Tensor, TensorError};

/// Additive logit for a blocked attention pair. Finite so that masked rows
/// never produce `inf - inf`.
pub const MASK_BLOCKED: f32 = -1e9;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow {
        x: Var,
        bias: Var,
    },
    Scale(Var, f32),
    AddScalar(Var),
    Gelu(Var),
    Dropout {
        x: Var,
        mask: Vec<f32>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
        probs: Vec<f32>,
    },
    Mean {
        x: Var,
        axis: usize,
    },
    Sum(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Transpose(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    RepeatRows {
        x: Var,
        times: usize,
    },
    TileRows(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by leaf handle.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Raw gradient for `v`, or `None` when nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `v`; leaves not reachable from the loss get zeros.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match self.get(v) {
            Some(g) => Tensor::new(shape.clone(), g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

/// Record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(TensorError::Rank {
            op,
            expected: 2,
            shape: s.to_vec(),
        }),
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn check_axis(op: &'static str, t: &Tensor, axis: usize) -> Result<()> {
    if axis >= t.rank() {
        return Err(TensorError::InvalidAxis {
            op,
            axis,
            rank: t.rank(),
        });
    }
    Ok(())
}

fn tensor(shape: Vec<usize>, data: Vec<f32>) -> Tensor {
    Tensor::new(shape, data).expect("internal shape bookkeeping")
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input tensor. It participates in differentiation iff
    /// `t.grad_enabled()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.grad_enabled();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Softmax weights saved by an attention node, laid out as
    /// `[batch, heads, queries, keys]`.
    pub fn attention_weights(&self, v: Var) -> Option<(&[f32], [usize; 4])> {
        match &self.nodes[v.0].op {
            Op::Attention {
                q,
                k,
                batch,
                heads,
                probs,
                ..
            } => {
                let tq = self.shape(*q)[0] / batch;
                let tk = self.shape(*k)[0] / batch;
                Some((probs.as_slice(), [*batch, *heads, tq, tk]))
            }
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        let (m, k) = rank2("matmul", at)?;
        let (k2, n) = rank2("matmul", bt)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: at.shape().to_vec(),
                rhs: bt.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nn(at.data(), bt.data(), &mut out, m, k, n);
        Ok(self.push(tensor(vec![m, n], out), Op::MatMul(a, b), &[a, b]))
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        let (at, bt) = (self.value(a), self.value(b));
        same_shape(op, at, bt)?;
        let data = at.data().iter().zip(bt.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(tensor(at.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    /// Adds `bias` (length = last dimension of `x`) to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xt, bt) = (self.value(x), self.value(bias));
        let cols = xt.shape().last().copied().unwrap_or(1);
        if bt.numel() != cols || bt.rank() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: xt.shape().to_vec(),
                rhs: bt.shape().to_vec(),
            });
        }
        let mut data = xt.data().to_vec();
        for row in data.chunks_mut(cols) {
            for (v, &b) in row.iter_mut().zip(bt.data()) {
                *v += b;
            }
        }
        let t = tensor(xt.shape().to_vec(), data);
        Ok(self.push(t, Op::AddRow { x, bias }, &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        let xt = self.value(x);
        let t = tensor(xt.shape().to_vec(), xt.data().iter().map(|v| v * s).collect());
        self.push(t, Op::Scale(x, s), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f32) -> Var {
        let xt = self.value(x);
        let t = tensor(xt.shape().to_vec(), xt.data().iter().map(|v| v + c).collect());
        self.push(t, Op::AddScalar(x), &[x])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let t = tensor(
            xt.shape().to_vec(),
            xt.data().iter().map(|&v| kernels::gelu(v)).collect(),
        );
        self.push(t, Op::Gelu(x), &[x])
    }

    /// Inverted dropout. `rng == None` is evaluation mode; both evaluation
    /// mode and `rate == 0` return `x` unchanged.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f32, rng: Option<&mut R>) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Invalid {
                op: "dropout",
                msg: format!("rate {rate} outside [0, 1)"),
            });
        }
        let Some(rng) = rng else { return Ok(x) };
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let xt = self.value(x);
        let mask: Vec<f32> = (0..xt.numel())
            .map(|_| if rng.gen::<f32>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let data = xt.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = tensor(xt.shape().to_vec(), data);
        Ok(self.push(t, Op::Dropout { x, mask }, &[x]))
    }

    /// Normalizes over the last dimension, then applies `gain` and `bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f32) -> Result<Var> {
        let (xt, gt, bt) = (self.value(x), self.value(gain), self.value(bias));
        let cols = xt.shape().last().copied().unwrap_or(1);
        for p in [gt, bt] {
            if p.numel() != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "layernorm",
                    lhs: xt.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let rows = xt.numel() / cols;
        let mut out = vec![0.0; xt.numel()];
        let mut xhat = vec![0.0; xt.numel()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &xt.data()[r * cols..(r + 1) * cols];
            let mean = row.iter().map(|&v| f64::from(v)).sum::<f64>() / cols as f64;
            let var = row.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + f64::from(eps)).sqrt();
            inv_std[r] = inv as f32;
            for c in 0..cols {
                let h = ((f64::from(row[c]) - mean) * inv) as f32;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * gt.data()[c] + bt.data()[c];
            }
        }
        let t = tensor(xt.shape().to_vec(), out);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xt = self.value(x);
        check_axis("softmax", xt, axis)?;
        let (outer, dim, inner) = split_at_axis(xt.shape(), axis);
        let src = xt.data();
        let mut out = vec![0.0; xt.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |d: usize| o * dim * inner + d * inner + i;
                let max = (0..dim).map(|d| src[at(d)]).fold(f32::NEG_INFINITY, f32::max);
                let mut sum = 0.0f64;
                for d in 0..dim {
                    let e = (src[at(d)] - max).exp();
                    out[at(d)] = e;
                    sum += f64::from(e);
                }
                let inv = (1.0 / sum) as f32;
                for d in 0..dim {
                    out[at(d)] *= inv;
                }
            }
        }
        let t = tensor(xt.shape().to_vec(), out);
        Ok(self.push(t, Op::Softmax { x, axis }, &[x]))
    }

    /// Single-head `softmax(q·kᵀ/√d + mask)·v` over `[T×d]` inputs.
    pub fn scaled_dot_attention(&mut self, q: Var, k: Var, v: Var, mask: Option<&Tensor>) -> Result<Var> {
        self.attention(q, k, v, 1, 1, mask)
    }

    /// Batched multi-head attention.
    ///
    /// `q` is `[batch·Tq × d]`, `k` and `v` are `[batch·Tk × d]`, each sample's
    /// rows contiguous. Head `h` uses channels `h·d/heads .. (h+1)·d/heads`.
    /// `mask` is an additive `[Tq × Tk]` table of `0` / [`MASK_BLOCKED`]
    /// shared by all samples and heads.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
        mask: Option<&Tensor>,
    ) -> Result<Var> {
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        let (qrows, d) = rank2("attention", qt)?;
        let (krows, dk) = rank2("attention", kt)?;
        same_shape("attention", kt, vt)?;
        if d != dk {
            return Err(TensorError::ShapeMismatch {
                op: "attention",
                lhs: qt.shape().to_vec(),
                rhs: kt.shape().to_vec(),
            });
        }
        if batch == 0 || heads == 0 || qrows % batch != 0 || krows % batch != 0 || d % heads != 0 {
            return Err(TensorError::Invalid {
                op: "attention",
                msg: format!(
                    "cannot split q {:?} / k {:?} into {batch} samples of {heads} heads",
                    qt.shape(),
                    kt.shape()
                ),
            });
        }
        let (tq, tk, dh) = (qrows / batch, krows / batch, d / heads);
        if let Some(m) = mask {
            if m.shape() != [tq, tk] {
                return Err(TensorError::ShapeMismatch {
                    op: "attention mask",
                    lhs: vec![tq, tk],
                    rhs: m.shape().to_vec(),
                });
            }
            for r in 0..tq {
                if m.row(r).iter().all(|&w| w <= MASK_BLOCKED * 0.5) {
                    return Err(TensorError::FullyMaskedRow { row: r });
                }
            }
        }
        let scale = 1.0 / (dh as f32).sqrt();
        let (qd, kd, vd) = (qt.data(), kt.data(), vt.data());
        let mut out = vec![0.0; qrows * d];
        let mut probs = vec![0.0; batch * heads * tq * tk];
        let mut scores = vec![0.0f32; tk];
        for b in 0..batch {
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..tq {
                    let qi = (b * tq + i) * d + c0;
                    let qrow = &qd[qi..qi + dh];
                    let mut max = f32::NEG_INFINITY;
                    for (j, s) in scores.iter_mut().enumerate() {
                        let kj = (b * tk + j) * d + c0;
                        let mut val = dot(qrow, &kd[kj..kj + dh]) * scale;
                        if let Some(m) = mask {
                            val += m.data()[i * tk + j];
                        }
                        *s = val;
                        max = max.max(val);
                    }
                    let mut sum = 0.0f32;
                    for s in scores.iter_mut() {
                        *s = (*s - max).exp();
                        sum += *s;
                    }
                    let p0 = ((b * heads + h) * tq + i) * tk;
                    let orow = &mut out[qi..qi + dh];
                    for (j, s) in scores.iter().enumerate() {
                        let p = s / sum;
                        probs[p0 + j] = p;
                        if p != 0.0 {
                            let vj = (b * tk + j) * d + c0;
                            axpy(p, &vd[vj..vj + dh], orow);
                        }
                    }
                }
            }
        }
        let t = tensor(vec![qrows, d], out);
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                batch,
                heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Arithmetic mean over `axis`; the axis is removed from the shape.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xt = self.value(x);
        check_axis("mean", xt, axis)?;
        let (outer, dim, inner) = split_at_axis(xt.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let s: f64 = (0..dim)
                    .map(|d| f64::from(xt.data()[o * dim * inner + d * inner + i]))
                    .sum();
                out[o * inner + i] = (s / dim as f64) as f32;
            }
        }
        let mut shape = xt.shape().to_vec();
        shape.remove(axis);
        Ok(self.push(tensor(shape, out), Op::Mean { x, axis }, &[x]))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|&v| f64::from(v)).sum();
        self.push(Tensor::scalar(s as f32), Op::Sum(x), &[x])
    }

    /// Mean of all elements as a rank-0 tensor.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f32)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or(TensorError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let base = self.value(*first).shape().to_vec();
        check_axis("concat", self.value(*first), axis)?;
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_at_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let span = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * span..(o + 1) * span]);
            }
        }
        let t = tensor(shape, out);
        Ok(self.push(
            t,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// Slice `len` entries of `axis` starting at `start`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xt = self.value(x);
        check_axis("narrow", xt, axis)?;
        if len == 0 || start + len > xt.shape()[axis] {
            return Err(TensorError::Invalid {
                op: "narrow",
                msg: format!(
                    "range {start}..{} outside axis of size {}",
                    start + len,
                    xt.shape()[axis]
                ),
            });
        }
        let (outer, dim, inner) = split_at_axis(xt.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            out.extend_from_slice(&xt.data()[base..base + len * inner]);
        }
        let mut shape = xt.shape().to_vec();
        shape[axis] = len;
        Ok(self.push(tensor(shape, out), Op::Narrow { x, axis, start }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().with_grad(false).reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let (r, c) = rank2("transpose", xt)?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xt.data()[i * c + j];
            }
        }
        Ok(self.push(tensor(vec![c, r], out), Op::Transpose(x), &[x]))
    }

    /// Gathers rows of a `[V × d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (rows, d) = rank2("embedding", tt)?;
        if ids.is_empty() {
            return Err(TensorError::Invalid {
                op: "embedding",
                msg: "empty id list".into(),
            });
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::IndexOutOfRange { index: id, rows });
            }
            out.extend_from_slice(tt.row(id));
        }
        let t = tensor(vec![ids.len(), d], out);
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// `[R × C]` → `[R·times × C]`, each row repeated `times` times in place.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let xt = self.value(x);
        let (r, c) = rank2("repeat_rows", xt)?;
        let mut out = Vec::with_capacity(r * times * c);
        for i in 0..r {
            for _ in 0..times {
                out.extend_from_slice(xt.row(i));
            }
        }
        Ok(self.push(tensor(vec![r * times, c], out), Op::RepeatRows { x, times }, &[x]))
    }

    /// `[T × C]` → `[times·T × C]`, the whole block stacked `times` times.
    pub fn tile_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let xt = self.value(x);
        let (r, c) = rank2("tile_rows", xt)?;
        let mut out = Vec::with_capacity(r * times * c);
        for _ in 0..times {
            out.extend_from_slice(xt.data());
        }
        Ok(self.push(tensor(vec![r * times, c], out), Op::TileRows(x), &[x]))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lt.shape().to_vec()));
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop(node, &g, &mut grads);
        }
        Ok(Gradients { grads, shapes })
    }

    fn backprop(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f32])| {
            let n = &self.nodes[v.0];
            if !n.requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n.value.numel()]);
            f(buf);
        };
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                acc(*a, &mut |da| kernels::matmul_nt(g, val(*b), da, m, k, n));
                acc(*b, &mut |db| kernels::matmul_tn(val(*a), g, db, m, k, n));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |da| axpy(1.0, g, da));
                acc(*b, &mut |db| axpy(1.0, g, db));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |da| axpy(1.0, g, da));
                acc(*b, &mut |db| axpy(-1.0, g, db));
            }
            Op::Mul(a, b) => {
                acc(*a, &mut |da| {
                    for ((d, &gi), &bi) in da.iter_mut().zip(g).zip(val(*b)) {
                        *d += gi * bi;
                    }
                });
                acc(*b, &mut |db| {
                    for ((d, &gi), &ai) in db.iter_mut().zip(g).zip(val(*a)) {
                        *d += gi * ai;
                    }
                });
            }
            Op::AddRow { x, bias } => {
                acc(*x, &mut |dx| axpy(1.0, g, dx));
                acc(*bias, &mut |db| {
                    let c = db.len();
                    for row in g.chunks(c) {
                        axpy(1.0, row, db);
                    }
                });
            }
            Op::Scale(x, s) => acc(*x, &mut |dx| axpy(*s, g, dx)),
            Op::AddScalar(x) | Op::Reshape(x) => acc(*x, &mut |dx| axpy(1.0, g, dx)),
            Op::Gelu(x) => acc(*x, &mut |dx| {
                for ((d, &gi), &xi) in dx.iter_mut().zip(g).zip(val(*x)) {
                    *d += gi * kernels::gelu_grad(xi);
                }
            }),
            Op::Dropout { x, mask } => acc(*x, &mut |dx| {
                for ((d, &gi), &m) in dx.iter_mut().zip(g).zip(mask) {
                    *d += gi * m;
                }
            }),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let cols = self.value(*gain).numel();
                let gd = val(*gain);
                acc(*gain, &mut |dg| {
                    for (grow, hrow) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for c in 0..cols {
                            dg[c] += grow[c] * hrow[c];
                        }
                    }
                });
                acc(*bias, &mut |db| {
                    for grow in g.chunks(cols) {
                        axpy(1.0, grow, db);
                    }
                });
                acc(*x, &mut |dx| {
                    let mut dh = vec![0.0f32; cols];
                    for (r, (grow, hrow)) in g.chunks(cols).zip(xhat.chunks(cols)).enumerate() {
                        let mut mean_dh = 0.0f64;
                        let mut mean_dh_h = 0.0f64;
                        for c in 0..cols {
                            dh[c] = grow[c] * gd[c];
                            mean_dh += f64::from(dh[c]);
                            mean_dh_h += f64::from(dh[c] * hrow[c]);
                        }
                        let (m1, m2) = ((mean_dh / cols as f64) as f32, (mean_dh_h / cols as f64) as f32);
                        let out = &mut dx[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            out[c] += inv_std[r] * (dh[c] - m1 - hrow[c] * m2);
                        }
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, dim, inner) = split_at_axis(node.value.shape(), *axis);
                acc(*x, &mut |dx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |d: usize| o * dim * inner + d * inner + i;
                            let s: f32 = (0..dim).map(|d| g[at(d)] * y[at(d)]).sum();
                            for d in 0..dim {
                                dx[at(d)] += y[at(d)] * (g[at(d)] - s);
                            }
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                heads,
                probs,
            } => self.attention_backward(g, *q, *k, *v, *batch, *heads, probs, grads),
            Op::Mean { x, axis } => {
                let xs = self.shape(*x);
                let (outer, dim, inner) = split_at_axis(xs, *axis);
                let w = 1.0 / dim as f32;
                acc(*x, &mut |dx| {
                    for o in 0..outer {
                        for d in 0..dim {
                            let base = o * dim * inner + d * inner;
                            axpy(w, &g[o * inner..(o + 1) * inner], &mut dx[base..base + inner]);
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |dx| dx.iter_mut().for_each(|d| *d += g[0])),
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_at_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for v in inputs {
                    let len = self.shape(*v)[*axis];
                    acc(*v, &mut |dv| {
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            axpy(
                                1.0,
                                &g[src..src + len * inner],
                                &mut dv[o * len * inner..(o + 1) * len * inner],
                            );
                        }
                    });
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let (outer, dim, inner) = split_at_axis(self.shape(*x), *axis);
                let len = node.value.shape()[*axis];
                acc(*x, &mut |dx| {
                    for o in 0..outer {
                        let dst = o * dim * inner + start * inner;
                        axpy(
                            1.0,
                            &g[o * len * inner..(o + 1) * len * inner],
                            &mut dx[dst..dst + len * inner],
                        );
                    }
                });
            }
            Op::Transpose(x) => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                acc(*x, &mut |dx| {
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                acc(*table, &mut |dt| {
                    for (n, &id) in ids.iter().enumerate() {
                        axpy(1.0, &g[n * d..(n + 1) * d], &mut dt[id * d..(id + 1) * d]);
                    }
                });
            }
            Op::RepeatRows { x, times } => {
                let c = self.shape(*x)[1];
                acc(*x, &mut |dx| {
                    for (n, grow) in g.chunks(c).enumerate() {
                        let r = n / times;
                        axpy(1.0, grow, &mut dx[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::TileRows(x) => {
                let block = self.value(*x).numel();
                acc(*x, &mut |dx| {
                    for chunk in g.chunks(block) {
                        axpy(1.0, chunk, dx);
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[f32],
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
        probs: &[f32],
        grads: &mut [Option<Vec<f32>>],
    ) {
        let d = self.shape(q)[1];
        let (tq, tk, dh) = (self.shape(q)[0] / batch, self.shape(k)[0] / batch, d / heads);
        let scale = 1.0 / (dh as f32).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let want = |x: Var| self.requires_grad(x);
        let mut take = |x: Var| {
            if want(x) {
                Some(grads[x.0].take().unwrap_or_else(|| vec![0.0; self.value(x).numel()]))
            } else {
                None
            }
        };
        // q, k and v may alias the same node; accumulate into separate
        // buffers and merge afterwards.
        let mut dq = take(q);
        let mut dk = if k == q {
            want(k).then(|| vec![0.0; kd.len()])
        } else {
            take(k)
        };
        let mut dv = if v == q || v == k {
            want(v).then(|| vec![0.0; vd.len()])
        } else {
            take(v)
        };
        let mut dp = vec![0.0f32; tk];
        let mut ds = vec![0.0f32; tk];
        for b in 0..batch {
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..tq {
                    let qi = (b * tq + i) * d + c0;
                    let go = &g[qi..qi + dh];
                    let p = &probs[((b * heads + h) * tq + i) * tk..][..tk];
                    let mut s = 0.0f32;
                    for j in 0..tk {
                        let vj = (b * tk + j) * d + c0;
                        dp[j] = dot(go, &vd[vj..vj + dh]);
                        s += p[j] * dp[j];
                    }
                    for j in 0..tk {
                        ds[j] = p[j] * (dp[j] - s) * scale;
                    }
                    if let Some(dv) = dv.as_mut() {
                        for j in 0..tk {
                            if p[j] != 0.0 {
                                let vj = (b * tk + j) * d + c0;
                                axpy(p[j], go, &mut dv[vj..vj + dh]);
                            }
                        }
                    }
                    if let Some(dq) = dq.as_mut() {
                        for j in 0..tk {
                            if ds[j] != 0.0 {
                                let kj = (b * tk + j) * d + c0;
                                axpy(ds[j], &kd[kj..kj + dh], &mut dq[qi..qi + dh]);
                            }
                        }
                    }
                    if let Some(dk) = dk.as_mut() {
                        for j in 0..tk {
                            if ds[j] != 0.0 {
                                let kj = (b * tk + j) * d + c0;
                                axpy(ds[j], &qd[qi..qi + dh], &mut dk[kj..kj + dh]);
                            }
                        }
                    }
                }
            }
        }
        let mut merge = |x: Var, buf: Option<Vec<f32>>| {
            if let Some(buf) = buf {
                match grads[x.0].as_mut() {
                    Some(existing) => axpy(1.0, &buf, existing),
                    None => grads[x.0] = Some(buf),
                }
            }
        };
        merge(q, dq);
        merge(k, dk);
        merge(v, dv);
    }
}
