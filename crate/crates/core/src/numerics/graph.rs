//! Reverse-mode differentiation over a closed set of tensor ops.
//!
//! A [`Graph`] records every op of one forward pass as a node holding its
//! value plus whatever the backward rule needs. [`Graph::backward`] walks the
//! nodes in reverse creation order, so gradient accumulation order is fixed
//! and results are reproducible bit for bit.

use std::collections::HashMap;

use super::tensor::{attention_forward, attention_shape, gelu_grad, AttentionShape};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    BroadcastRows(Var),
    Scale(Var, f64),
    AddConst(Var),
    MulScalar(Var, Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<Vec<f64>>,
    },
    Rope { x: Var, cos: Vec<f64>, sin: Vec<f64>, head_dim: usize },
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Cosine { x: Var, target: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

/// Per-node gradients from one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of a node, zero if the loss does not depend on it.
    pub fn wrt(&self, graph: &Graph, v: Var) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(graph.value(v).shape()))
    }

    /// One gradient per registered parameter, in store order. Parameters the
    /// forward pass never touched get exact zeros.
    pub fn for_params(&self, store: &ParamStore) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = store
            .ids()
            .map(|id| Tensor::zeros(store.get(id).shape()))
            .collect();
        for &(id, var) in &self.params {
            if let Some(g) = &self.grads[var.0] {
                out[id.index()] = g.clone();
            }
        }
        out
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        let value = value.ensure_finite(name)?;
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A constant or an input we want gradients for; either way a leaf.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, "leaf")
    }

    /// Loads a parameter; repeated loads of the same id share one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(&id) {
            return Ok(v);
        }
        let v = self.push(store.get(id).clone(), Op::Param, "param")?;
        self.param_vars.insert(id, v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        self.push(out, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        self.push(out, Op::Mul(a, b), "mul")
    }

    /// `[n, d] + [1, d]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.value(a).add_row(self.value(row))?;
        self.push(out, Op::AddRow(a, row), "add_row")
    }

    pub fn broadcast_rows(&mut self, row: Var, n: usize) -> Result<Var> {
        let out = self.value(row).broadcast_rows(n)?;
        self.push(out, Op::BroadcastRows(row), "broadcast_rows")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).scale(c);
        self.push(out, Op::Scale(a, c), "scale")
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v + c);
        self.push(out, Op::AddConst(a), "add_const")
    }

    /// Multiplies every entry of `a` by the single entry of `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.len() != 1 {
            return Err(Error::dim("mul_scalar", format!("scalar has {} entries", sv.len())));
        }
        let c = sv.data()[0];
        let out = self.value(a).scale(c);
        self.push(out, Op::MulScalar(a, s), "mul_scalar")
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).gelu();
        self.push(out, Op::Gelu(a), "gelu")
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).softmax_rows()?;
        self.push(out, Op::Softmax(a), "softmax")
    }

    /// Row standardisation without affine parameters.
    pub fn layernorm(&mut self, a: Var) -> Result<Var> {
        let (out, inv_std) = self.value(a).layernorm_rows()?;
        self.push(out, Op::LayerNorm { x: a, inv_std }, "layernorm")
    }

    /// Layer normalisation followed by a per-feature affine `[1, d]` map.
    pub fn layernorm_affine(&mut self, a: Var, scale: Var, shift: Var) -> Result<Var> {
        let n = self.value(a).rows();
        let normed = self.layernorm(a)?;
        let s = self.broadcast_rows(scale, n)?;
        let scaled = self.mul(normed, s)?;
        self.add_row(scaled, shift)
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (out, probs) = attention_forward(self.value(q), self.value(k), self.value(v), heads, None)?;
        self.push(out, Op::Attention { q, k, v, heads, probs }, "attention")
    }

    /// Masked attention; `mask[i * nk + j]` is whether query `i` may read key `j`.
    /// Masked entries receive exactly zero probability, so the backward rule
    /// is the unmasked one evaluated at those probabilities.
    pub fn attention_masked(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: &[bool]) -> Result<Var> {
        let (out, probs) =
            attention_forward(self.value(q), self.value(k), self.value(v), heads, Some(mask))?;
        self.push(out, Op::Attention { q, k, v, heads, probs }, "attention")
    }

    /// Rotates consecutive feature pairs of every head. `cos`/`sin` hold one
    /// angle per (row, pair within a head), i.e. `rows * head_dim / 2` entries.
    pub fn rope(&mut self, x: Var, cos: Vec<f64>, sin: Vec<f64>, head_dim: usize) -> Result<Var> {
        let xv = self.value(x);
        let (n, w) = xv.dims2()?;
        if head_dim == 0 || !head_dim.is_multiple_of(2) || w % head_dim != 0 {
            return Err(Error::dim("rope", format!("width {w} with head dim {head_dim}")));
        }
        let half = head_dim / 2;
        if cos.len() != n * half || sin.len() != n * half {
            return Err(Error::dim("rope", format!("angle tables need {} entries", n * half)));
        }
        let out = rotate_pairs(xv, &cos, &sin, head_dim, 1.0)?;
        self.push(out, Op::Rope { x, cos, sin, head_dim }, "rope")
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).slice_rows(start, len)?;
        self.push(out, Op::SliceRows { x, start }, "slice_rows")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).slice_cols(start, len)?;
        self.push(out, Op::SliceCols { x, start }, "slice_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&values)?;
        self.push(out, Op::ConcatRows(parts.to_vec()), "concat_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_cols(&values)?;
        self.push(out, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        self.push(out, Op::Reshape(x), "reshape")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).mean());
        self.push(out, Op::Mean(x), "mean")
    }

    /// Cosine similarity between the flattened `x` and a constant target.
    pub fn cosine(&mut self, x: Var, target: &Tensor) -> Result<Var> {
        let xv = self.value(x);
        let xn = xv.norm();
        let tn = target.norm();
        if xn < 1e-12 {
            return Err(Error::DegenerateEmbedding { norm: xn });
        }
        if tn < 1e-12 {
            return Err(Error::DegenerateEmbedding { norm: tn });
        }
        let c = xv.dot(target)? / (xn * tn);
        self.push(
            Tensor::scalar(c),
            Op::Cosine {
                x,
                target: target.clone(),
            },
            "cosine",
        )
    }

    /// Mean squared error between two same-shape nodes.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean(sq)
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.value(v).data()[0]
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim("backward", "loss must be a scalar"));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let params = self.param_vars.iter().map(|(&id, &v)| (id, v)).collect();
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut acc = |v: Var, t: Tensor| -> Result<()> {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => {
                    *slot = Some(t);
                    Ok(())
                }
            }
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                acc(*a, g.matmul_nt(self.value(*b))?)?;
                acc(*b, self.value(*a).matmul_tn(g)?)?;
            }
            Op::Add(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                acc(*a, g.mul(self.value(*b))?)?;
                acc(*b, g.mul(self.value(*a))?)?;
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone())?;
                acc(*row, g.sum_rows()?)?;
            }
            Op::BroadcastRows(row) => acc(*row, g.sum_rows()?)?,
            Op::Scale(a, c) => acc(*a, g.scale(*c))?,
            Op::AddConst(a) => acc(*a, g.clone())?,
            Op::MulScalar(a, s) => {
                let c = self.value(*s).data()[0];
                acc(*a, g.scale(c))?;
                let ds = g.dot(self.value(*a))?;
                acc(*s, Tensor::new(self.value(*s).shape().to_vec(), vec![ds])?)?;
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let data = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xv, &gv)| gv * gelu_grad(xv))
                    .collect();
                acc(*a, Tensor::new(x.shape().to_vec(), data)?)?;
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let d = y.cols();
                let mut out = vec![0.0; y.len()];
                for ((o, yr), gr) in out.chunks_mut(d).zip(y.data().chunks(d)).zip(g.data().chunks(d)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yv), &gv) in o.iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                acc(*a, Tensor::new(y.shape().to_vec(), out)?)?;
            }
            Op::LayerNorm { x, inv_std } => {
                let y = &node.value;
                let d = y.cols();
                let mut out = vec![0.0; y.len()];
                for (((o, yr), gr), &inv) in out
                    .chunks_mut(d)
                    .zip(y.data().chunks(d))
                    .zip(g.data().chunks(d))
                    .zip(inv_std)
                {
                    let mean_g = gr.iter().sum::<f64>() / d as f64;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for ((o, &yv), &gv) in o.iter_mut().zip(yr).zip(gr) {
                        *o = inv * (gv - mean_g - yv * mean_gy);
                    }
                }
                acc(*x, Tensor::new(y.shape().to_vec(), out)?)?;
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (dq, dk, dv) =
                    attention_backward(self.value(*q), self.value(*k), self.value(*v), *heads, probs, g)?;
                acc(*q, dq)?;
                acc(*k, dk)?;
                acc(*v, dv)?;
            }
            Op::Rope { x, cos, sin, head_dim } => {
                acc(*x, rotate_pairs(g, cos, sin, *head_dim, -1.0)?)?;
            }
            Op::SliceRows { x, start } => {
                let src = self.value(*x);
                let d = src.cols();
                let mut out = Tensor::zeros(src.shape());
                out.data_mut()[start * d..start * d + g.len()].copy_from_slice(g.data());
                acc(*x, out)?;
            }
            Op::SliceCols { x, start } => {
                let src = self.value(*x);
                let (n, d) = src.dims2()?;
                let w = g.cols();
                let mut out = Tensor::zeros(src.shape());
                for i in 0..n {
                    out.data_mut()[i * d + start..i * d + start + w]
                        .copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                }
                acc(*x, out)?;
            }
            Op::ConcatRows(parts) => {
                let mut row = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    acc(p, g.slice_rows(row, r)?)?;
                    row += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut col = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    acc(p, g.slice_cols(col, c)?)?;
                    col += c;
                }
            }
            Op::Reshape(x) => acc(*x, g.reshape(self.value(*x).shape())?)?,
            Op::Sum(x) => {
                let gv = g.data()[0];
                acc(*x, Tensor::full(self.value(*x).shape(), gv))?;
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let gv = g.data()[0] / xv.len() as f64;
                acc(*x, Tensor::full(xv.shape(), gv))?;
            }
            Op::Cosine { x, target } => {
                let xv = self.value(*x);
                let c = node.value.data()[0];
                let xn = xv.norm();
                let tn = target.norm();
                let gv = g.data()[0];
                let data = xv
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&a, &t)| gv * (t / (xn * tn) - c * a / (xn * xn)))
                    .collect();
                acc(*x, Tensor::new(xv.shape().to_vec(), data)?)?;
            }
        }
        Ok(())
    }
}

/// Applies the pairwise rotation with angle sign `dir` (+1 forward, -1 inverse).
fn rotate_pairs(x: &Tensor, cos: &[f64], sin: &[f64], head_dim: usize, dir: f64) -> Result<Tensor> {
    let (n, w) = x.dims2()?;
    let half = head_dim / 2;
    let heads = w / head_dim;
    let mut out = x.data().to_vec();
    for i in 0..n {
        for h in 0..heads {
            for m in 0..half {
                let (c, s) = (cos[i * half + m], dir * sin[i * half + m]);
                let base = i * w + h * head_dim + 2 * m;
                let (a, b) = (x.data()[base], x.data()[base + 1]);
                out[base] = a * c - b * s;
                out[base + 1] = a * s + b * c;
            }
        }
    }
    Tensor::new(vec![n, w], out)
}

fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    probs: &[Vec<f64>],
    g: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let AttentionShape { nq, nk, dh, dv } = attention_shape(q, k, v, heads)?;
    let qw = heads * dh;
    let vw = heads * dv;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; nq * qw];
    let mut dk = vec![0.0; nk * qw];
    let mut dvv = vec![0.0; nk * vw];
    let mut ds = vec![0.0; nk];
    for (h, p) in probs.iter().enumerate() {
        for i in 0..nq {
            let gi = &g.data()[i * vw + h * dv..i * vw + (h + 1) * dv];
            let pi = &p[i * nk..(i + 1) * nk];
            // dP_ij = g_i . v_j, then softmax backward
            let mut dot = 0.0;
            for j in 0..nk {
                let vj = &v.data()[j * vw + h * dv..j * vw + (h + 1) * dv];
                let dp: f64 = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                ds[j] = dp;
                dot += dp * pi[j];
            }
            for j in 0..nk {
                ds[j] = pi[j] * (ds[j] - dot) * scale;
            }
            let qi = &q.data()[i * qw + h * dh..i * qw + (h + 1) * dh];
            for j in 0..nk {
                let pij = pi[j];
                let dvj = &mut dvv[j * vw + h * dv..j * vw + (h + 1) * dv];
                for (d, &gv) in dvj.iter_mut().zip(gi) {
                    *d += pij * gv;
                }
                let sij = ds[j];
                if sij == 0.0 {
                    continue;
                }
                let kj = &k.data()[j * qw + h * dh..j * qw + (h + 1) * dh];
                let dqi = &mut dq[i * qw + h * dh..i * qw + (h + 1) * dh];
                for (d, &kv) in dqi.iter_mut().zip(kj) {
                    *d += sij * kv;
                }
                let dkj = &mut dk[j * qw + h * dh..j * qw + (h + 1) * dh];
                for (d, &qv) in dkj.iter_mut().zip(qi) {
                    *d += sij * qv;
                }
            }
        }
    }
    Ok((
        Tensor::new(q.shape().to_vec(), dq)?,
        Tensor::new(k.shape().to_vec(), dk)?,
        Tensor::new(v.shape().to_vec(), dvv)?,
    ))
}
