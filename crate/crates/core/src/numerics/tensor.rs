//! Dense row-major real arrays and the forward kernels used by the graph.
//!
//! Everything is `f64`. Rank-1 tensors are treated as a single row wherever a
//! kernel works on rows, so `softmax` over a `[n]` tensor and `softmax_rows`
//! over a `[1, n]` tensor agree.

use crate::error::{Error, Result};

pub const LAYERNORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim("tensor", format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    /// A `[1, n]` row.
    pub fn row(values: Vec<f64>) -> Self {
        Self {
            shape: vec![1, values.len()],
            data: values,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("from_rows", "ragged rows"));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(rows, cols)` view: rank 1 is one row, rank 2 is itself.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [n] => Ok((1, *n)),
            [r, c] => Ok((*r, *c)),
            s => Err(Error::dim("dims2", format!("expected rank 1 or 2, got {s:?}"))),
        }
    }

    pub fn rows(&self) -> usize {
        self.dims2().map(|d| d.0).unwrap_or(0)
    }

    pub fn cols(&self) -> usize {
        self.dims2().map(|d| d.1).unwrap_or(0)
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(
                "add_assign",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.data.len() != other.data.len() {
            return Err(Error::dim("dot", format!("{} vs {}", self.len(), other.len())));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    /// `[m, k] x [k, n] -> [m, n]`, accumulated in ascending `k`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("[{m}x{k}] x [{k2}x{n}]"),
            ));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Tensor::new(vec![m, n], out)
    }

    /// `self^T x other` without materialising the transpose.
    pub fn matmul_tn(&self, other: &Tensor) -> Result<Tensor> {
        let (k, m) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::dim("matmul_tn", format!("[{k}x{m}]^T x [{k2}x{n}]")));
        }
        let mut out = vec![0.0; m * n];
        for p in 0..k {
            let a_row = &self.data[p * m..(p + 1) * m];
            let b_row = &other.data[p * n..(p + 1) * n];
            for (i, &a) in a_row.iter().enumerate() {
                let o_row = &mut out[i * n..(i + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Tensor::new(vec![m, n], out)
    }

    /// `self x other^T` without materialising the transpose.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (n, k2) = other.dims2()?;
        if k != k2 {
            return Err(Error::dim("matmul_nt", format!("[{m}x{k}] x [{n}x{k2}]^T")));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let b_row = &other.data[j * k..(j + 1) * k];
                out[i * n + j] = a_row.iter().zip(b_row).map(|(a, b)| a * b).sum();
            }
        }
        Tensor::new(vec![m, n], out)
    }

    /// Adds a `[1, d]` row to every row of a `[n, d]` tensor.
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor> {
        let (n, d) = self.dims2()?;
        let (r, d2) = row.dims2()?;
        if r != 1 || d != d2 {
            return Err(Error::dim("add_row", format!("[{n}x{d}] + [{r}x{d2}]")));
        }
        let mut out = self.data.clone();
        for chunk in out.chunks_mut(d) {
            for (o, b) in chunk.iter_mut().zip(&row.data) {
                *o += b;
            }
        }
        Tensor::new(vec![n, d], out)
    }

    pub fn broadcast_rows(&self, n: usize) -> Result<Tensor> {
        let (r, d) = self.dims2()?;
        if r != 1 {
            return Err(Error::dim("broadcast_rows", format!("expected one row, got {r}")));
        }
        let mut out = Vec::with_capacity(n * d);
        for _ in 0..n {
            out.extend_from_slice(&self.data);
        }
        Tensor::new(vec![n, d], out)
    }

    /// Column sums of a `[n, d]` tensor as a `[1, d]` row.
    pub fn sum_rows(&self) -> Result<Tensor> {
        let (_, d) = self.dims2()?;
        let mut out = vec![0.0; d];
        for chunk in self.data.chunks(d) {
            for (o, v) in out.iter_mut().zip(chunk) {
                *o += v;
            }
        }
        Tensor::new(vec![1, d], out)
    }

    /// Numerically stable softmax of a rank-1 tensor.
    pub fn softmax(&self) -> Result<Tensor> {
        if self.shape.len() != 1 {
            return Err(Error::dim("softmax", format!("expected rank 1, got {:?}", self.shape)));
        }
        let rows = Tensor::new(vec![1, self.len()], self.data.clone())?.softmax_rows()?;
        Tensor::new(self.shape.clone(), rows.data)
    }

    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (_, d) = self.dims2()?;
        let mut out = self.data.clone();
        for row in out.chunks_mut(d) {
            softmax_in_place(row);
        }
        Tensor::new(self.shape.clone(), out)?.ensure_finite("softmax")
    }

    /// Per-row standardisation (zero mean, unit variance, epsilon [`LAYERNORM_EPS`]).
    /// Returns the normalised tensor and each row's inverse standard deviation.
    pub fn layernorm_rows(&self) -> Result<(Tensor, Vec<f64>)> {
        let (_, d) = self.dims2()?;
        if d < 2 {
            return Err(Error::domain("layernorm", "normalised axis must have extent >= 2"));
        }
        let mut out = self.data.clone();
        let mut inv_std = Vec::with_capacity(self.rows());
        for row in out.chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYERNORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        Ok((Tensor::new(self.shape.clone(), out)?, inv_std))
    }

    /// Layer normalisation with a per-feature affine `[1, d]` scale and shift.
    pub fn layernorm(&self, scale: &Tensor, shift: &Tensor) -> Result<Tensor> {
        let (normed, _) = self.layernorm_rows()?;
        let n = normed.rows();
        normed
            .mul(&scale.broadcast_rows(n)?)?
            .add_row(shift)
    }

    pub fn gelu(&self) -> Tensor {
        self.map(gelu)
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        let (n, d) = self.dims2()?;
        if len == 0 || start + len > n {
            return Err(Error::dim("slice_rows", format!("{start}+{len} of {n} rows")));
        }
        Tensor::new(vec![len, d], self.data[start * d..(start + len) * d].to_vec())
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let (n, d) = self.dims2()?;
        if len == 0 || start + len > d {
            return Err(Error::dim("slice_cols", format!("{start}+{len} of {d} cols")));
        }
        let mut out = Vec::with_capacity(n * len);
        for row in self.data.chunks(d) {
            out.extend_from_slice(&row[start..start + len]);
        }
        Tensor::new(vec![n, len], out)
    }

    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let d = parts
            .first()
            .ok_or_else(|| Error::dim("concat_rows", "no inputs"))?
            .cols();
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            let (r, c) = p.dims2()?;
            if c != d {
                return Err(Error::dim("concat_rows", format!("width {c} vs {d}")));
            }
            n += r;
            data.extend_from_slice(&p.data);
        }
        Tensor::new(vec![n, d], data)
    }

    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
        let n = parts
            .first()
            .ok_or_else(|| Error::dim("concat_cols", "no inputs"))?
            .rows();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = p.dims2()?;
            if r != n {
                return Err(Error::dim("concat_cols", format!("height {r} vs {n}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data[i * w..(i + 1) * w]);
            }
        }
        Tensor::new(vec![n, total], data)
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q: [nq, heads*dh]`, `k: [nk, heads*dh]`, `v: [nk, heads*dv]`. `mask`, when
    /// present, is `nq*nk` row-major with `true` meaning "may attend".
    pub fn attention(
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        heads: usize,
        mask: Option<&[bool]>,
    ) -> Result<Tensor> {
        Ok(attention_forward(q, k, v, heads, mask)?.0)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let d_inner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}

pub(crate) struct AttentionShape {
    pub nq: usize,
    pub nk: usize,
    pub dh: usize,
    pub dv: usize,
}

pub(crate) fn attention_shape(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<AttentionShape> {
    let (nq, qw) = q.dims2()?;
    let (nk, kw) = k.dims2()?;
    let (nv, vw) = v.dims2()?;
    if heads == 0 || qw % heads != 0 || vw % heads != 0 {
        return Err(Error::dim("attention", format!("widths {qw}/{vw} not divisible by {heads} heads")));
    }
    if qw != kw {
        return Err(Error::dim("attention", format!("query width {qw} vs key width {kw}")));
    }
    if nk != nv {
        return Err(Error::dim("attention", format!("{nk} keys vs {nv} values")));
    }
    Ok(AttentionShape {
        nq,
        nk,
        dh: qw / heads,
        dv: vw / heads,
    })
}

/// Returns the output and the per-head probability matrices (each `nq*nk`).
pub(crate) fn attention_forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    mask: Option<&[bool]>,
) -> Result<(Tensor, Vec<Vec<f64>>)> {
    let AttentionShape { nq, nk, dh, dv } = attention_shape(q, k, v, heads)?;
    if let Some(m) = mask {
        if m.len() != nq * nk {
            return Err(Error::dim("attention", format!("mask has {} entries, need {}", m.len(), nq * nk)));
        }
    }
    let qw = heads * dh;
    let vw = heads * dv;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; nq * vw];
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let mut p = vec![0.0; nq * nk];
        for i in 0..nq {
            let qi = &q.data[i * qw + h * dh..i * qw + (h + 1) * dh];
            let row = &mut p[i * nk..(i + 1) * nk];
            for (j, s) in row.iter_mut().enumerate() {
                let allowed = mask.is_none_or(|m| m[i * nk + j]);
                *s = if allowed {
                    let kj = &k.data[j * qw + h * dh..j * qw + (h + 1) * dh];
                    qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale
                } else {
                    f64::NEG_INFINITY
                };
            }
            if row.iter().all(|s| *s == f64::NEG_INFINITY) {
                return Err(Error::domain("attention", format!("query {i} has every key masked")));
            }
            softmax_in_place(row);
            let o = &mut out[i * vw + h * dv..i * vw + (h + 1) * dv];
            for (j, &pij) in row.iter().enumerate() {
                let vj = &v.data[j * vw + h * dv..j * vw + (h + 1) * dv];
                for (oo, &vv) in o.iter_mut().zip(vj) {
                    *oo += pij * vv;
                }
            }
        }
        probs.push(p);
    }
    Ok((Tensor::new(vec![nq, vw], out)?.ensure_finite("attention")?, probs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_and_selector() {
        let i2 = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        let b = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(i2.matmul(&b).unwrap(), b);

        let a = Tensor::from_rows(&[&[1.0, 0.0]]).unwrap();
        let b = Tensor::from_rows(&[&[5.0], &[7.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[5.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let a = Tensor::matrix(3, 2, vec![1.0, -2.0, 0.5, 3.0, 4.0, -1.0]).unwrap();
        let b = Tensor::matrix(3, 4, (0..12).map(|i| i as f64 * 0.3 - 1.0).collect()).unwrap();
        let tn = a.matmul_tn(&b).unwrap();
        assert_eq!(tn, a.transpose().unwrap().matmul(&b).unwrap());
        let c = Tensor::matrix(4, 2, (0..8).map(|i| i as f64).collect()).unwrap();
        let nt = a.matmul_nt(&c).unwrap();
        let explicit = a.matmul(&c.transpose().unwrap()).unwrap();
        assert!(nt.max_abs_diff(&explicit) < 1e-12);
    }

    #[test]
    fn softmax_examples() {
        let s = Tensor::new(vec![3], vec![0.0; 3]).unwrap().softmax().unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = Tensor::new(vec![2], vec![2f64.ln(), 1f64.ln()]).unwrap().softmax().unwrap();
        assert!((s.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.data()[1] - 1.0 / 3.0).abs() < 1e-15);
        let s = Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap().softmax().unwrap();
        assert_eq!(s.data()[0], 1.0);
        assert!(s.data()[1] >= 0.0 && s.data()[1] < 1e-300);
    }

    #[test]
    fn softmax_rejects_empty() {
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn layernorm_examples() {
        let c = Tensor::row(vec![3.0; 4]);
        let out = c.layernorm(&Tensor::row(vec![1.0; 4]), &Tensor::row(vec![0.0; 4])).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));

        let x = Tensor::row(vec![1.0, -1.0]);
        let out = x.layernorm(&Tensor::row(vec![1.0; 2]), &Tensor::row(vec![0.0; 2])).unwrap();
        let expected = 1.0 / (1.0 + LAYERNORM_EPS).sqrt();
        assert!((out.data()[0] - expected).abs() < 1e-15);
        assert!((out.data()[1] + expected).abs() < 1e-15);
        assert!((out.data()[0] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn layernorm_needs_two_features() {
        assert!(Tensor::row(vec![1.0]).layernorm_rows().is_err());
    }

    #[test]
    fn attention_single_key_returns_value() {
        let q = Tensor::row(vec![0.3, -2.0, 1.0, 4.0]);
        let k = Tensor::row(vec![1.0, 1.0, 1.0, 1.0]);
        let v = Tensor::row(vec![7.0, -3.0]);
        let out = Tensor::attention(&q, &k, &v, 2, None).unwrap();
        assert_eq!(out.data(), &[7.0, -3.0]);
    }

    #[test]
    fn attention_peaked_query_selects_row() {
        // one-hot keys; a large multiple of e_1 as the query picks value row 1
        let k = Tensor::from_rows(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]).unwrap();
        let v = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]).unwrap();
        let q = Tensor::row(vec![0.0, 200.0, 0.0]);
        let out = Tensor::attention(&q, &k, &v, 1, None).unwrap();
        assert!((out.data()[0] - 3.0).abs() < 1e-9);
        assert!((out.data()[1] - 4.0).abs() < 1e-9);
    }

    #[test]
    fn attention_head_dim_mismatch() {
        let q = Tensor::zeros(&[2, 4]);
        let k = Tensor::zeros(&[3, 6]);
        let v = Tensor::zeros(&[3, 4]);
        assert!(Tensor::attention(&q, &k, &v, 2, None).is_err());
    }

    #[test]
    fn attention_mask_blocks_keys() {
        let q = Tensor::row(vec![1.0]);
        let k = Tensor::from_rows(&[&[5.0], &[0.0]]).unwrap();
        let v = Tensor::from_rows(&[&[10.0], &[-1.0]]).unwrap();
        let out = Tensor::attention(&q, &k, &v, 1, Some(&[false, true])).unwrap();
        assert_eq!(out.data(), &[-1.0]);
        assert!(Tensor::attention(&q, &k, &v, 1, Some(&[false, false])).is_err());
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
