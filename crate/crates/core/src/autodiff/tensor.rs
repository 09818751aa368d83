use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

/// Dense row-major array of `f64`.
///
/// A rank-0 tensor (`shape == []`) holds exactly one element.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return contract(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                n,
                data.len()
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return contract(format!("item() on tensor of shape {:?}", self.shape));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `self + scale * other`, shapes must match.
    pub fn axpy(&self, scale: f64, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(shape_err("axpy", &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + scale * b)
                .collect(),
        })
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(shape_err("reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }
}

pub(crate) fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// Ways two operand shapes may combine in an elementwise op.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Broadcast {
    Same,
    /// The right operand's shape is a trailing suffix of the left's.
    RightSuffix,
}

pub(crate) fn broadcast_kind(
    op: &'static str,
    big: &[usize],
    small: &[usize],
) -> Result<Broadcast> {
    if big == small {
        Ok(Broadcast::Same)
    } else if small.len() < big.len() && big.ends_with(small) {
        Ok(Broadcast::RightSuffix)
    } else {
        Err(shape_err(op, big, small))
    }
}

pub(crate) fn zip_broadcast(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let m = b.data.len();
    let data = a
        .data
        .iter()
        .enumerate()
        .map(|(i, &x)| f(x, b.data[i % m]))
        .collect();
    Tensor {
        shape: a.shape.clone(),
        data,
    }
}

/// Sums the leading axes of `x` away, leaving a tensor of shape `suffix`.
pub(crate) fn sum_leading(x: &Tensor, suffix: &[usize]) -> Tensor {
    let m: usize = suffix.iter().product();
    let mut out = vec![0.0; m];
    for chunk in x.data.chunks(m.max(1)) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    Tensor {
        shape: suffix.to_vec(),
        data: out,
    }
}

/// Tiles `x` (a trailing suffix of `shape`) over the leading axes of `shape`.
pub(crate) fn expand_leading(x: &Tensor, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let m = x.data.len();
    let data = (0..n).map(|i| x.data[i % m]).collect();
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}

fn last_dim(x: &Tensor) -> usize {
    *x.shape.last().unwrap_or(&1)
}

/// Sum over the last axis, keeping it with size 1.
pub(crate) fn sum_last(x: &Tensor) -> Tensor {
    let n = last_dim(x);
    let data = x.data.chunks(n).map(|row| row.iter().sum()).collect();
    let mut shape = x.shape.clone();
    if let Some(l) = shape.last_mut() {
        *l = 1;
    }
    Tensor { shape, data }
}

/// Repeats a size-1 last axis `n` times.
pub(crate) fn expand_last(x: &Tensor, n: usize) -> Tensor {
    let mut data = Vec::with_capacity(x.data.len() * n);
    for &v in &x.data {
        data.extend(std::iter::repeat_n(v, n));
    }
    let mut shape = x.shape.clone();
    if let Some(l) = shape.last_mut() {
        *l = n;
    }
    Tensor { shape, data }
}

pub(crate) fn softmax_last(x: &Tensor) -> Tensor {
    let n = last_dim(x);
    let mut data = Vec::with_capacity(x.data.len());
    for row in x.data.chunks(n) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let start = data.len();
        let mut z = 0.0;
        for &v in row {
            let e = (v - max).exp();
            z += e;
            data.push(e);
        }
        for v in &mut data[start..] {
            *v /= z;
        }
    }
    Tensor {
        shape: x.shape.clone(),
        data,
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Batched matrix product. `a` is `[.., m, k]`; `b` is either `[k, n]`
/// (shared across the batch) or `[.., k, n]` with identical leading axes.
pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() < 2 || b.rank() < 2 {
        return Err(shape_err("matmul", &a.shape, &b.shape));
    }
    let (m, k) = (a.shape[a.rank() - 2], a.shape[a.rank() - 1]);
    let (kb, n) = (b.shape[b.rank() - 2], b.shape[b.rank() - 1]);
    if k != kb {
        return Err(shape_err("matmul", &a.shape, &b.shape));
    }
    let a_lead = &a.shape[..a.rank() - 2];
    let b_lead = &b.shape[..b.rank() - 2];
    let shared_b = b.rank() == 2;
    if !shared_b && a_lead != b_lead {
        return Err(shape_err("matmul", &a.shape, &b.shape));
    }
    let batches: usize = a_lead.iter().product();
    let mut out = vec![0.0; batches * m * n];
    for bi in 0..batches {
        let ab = &a.data[bi * m * k..(bi + 1) * m * k];
        let bb = if shared_b {
            &b.data[..]
        } else {
            &b.data[bi * k * n..(bi + 1) * k * n]
        };
        let ob = &mut out[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            let orow = &mut ob[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ab[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &bb[p * n..(p + 1) * n];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    let mut shape = a_lead.to_vec();
    shape.push(m);
    shape.push(n);
    Ok(Tensor { shape, data: out })
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub(crate) fn permute(x: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let r = x.rank();
    let mut seen = vec![false; r];
    if axes.len() != r
        || axes
            .iter()
            .any(|&a| a >= r || std::mem::replace(&mut seen[a], true))
    {
        return Err(shape_err("permute", &x.shape, axes));
    }
    let in_strides = strides(&x.shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| x.shape[a]).collect();
    let n = x.data.len();
    let mut data = Vec::with_capacity(n);
    let mut idx = vec![0usize; r];
    for _ in 0..n {
        let src: usize = (0..r).map(|d| idx[d] * in_strides[axes[d]]).sum();
        data.push(x.data[src]);
        for d in (0..r).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok(Tensor {
        shape: out_shape,
        data,
    })
}

pub(crate) fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// (outer, axis_len, inner) decomposition around `axis`.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn slice_axis(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    if axis >= x.rank() || start + len > x.shape[axis] {
        return Err(shape_err("slice", &x.shape, &[axis, start, len]));
    }
    let (outer, full, inner) = split_at_axis(&x.shape, axis);
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * full * inner + start * inner;
        data.extend_from_slice(&x.data[base..base + len * inner]);
    }
    let mut shape = x.shape.clone();
    shape[axis] = len;
    Ok(Tensor { shape, data })
}

/// Zero-pads `x` along `axis` so it sits at `start` within a length-`full` axis.
pub(crate) fn pad_axis(x: &Tensor, axis: usize, start: usize, full: usize) -> Tensor {
    let (outer, len, inner) = split_at_axis(&x.shape, axis);
    let mut data = vec![0.0; outer * full * inner];
    for o in 0..outer {
        let dst = o * full * inner + start * inner;
        data[dst..dst + len * inner]
            .copy_from_slice(&x.data[o * len * inner..(o + 1) * len * inner]);
    }
    let mut shape = x.shape.clone();
    shape[axis] = full;
    Tensor { shape, data }
}

pub(crate) fn concat_axis(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
    if axis >= first.rank() {
        return Err(shape_err("concat", &first.shape, &[axis]));
    }
    for p in parts {
        let ok = p.rank() == first.rank()
            && p.shape
                .iter()
                .zip(&first.shape)
                .enumerate()
                .all(|(d, (a, b))| d == axis || a == b);
        if !ok {
            return Err(shape_err("concat", &first.shape, &p.shape));
        }
    }
    let (outer, _, inner) = split_at_axis(&first.shape, axis);
    let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let len = p.shape[axis] * inner;
            data.extend_from_slice(&p.data[o * len..(o + 1) * len]);
        }
    }
    let mut shape = first.shape.clone();
    shape[axis] = total;
    Ok(Tensor { shape, data })
}

/// Row gather: `table[ids[i]]` for each id, output shape `ids_shape ++ [d]`.
pub(crate) fn gather_rows(table: &Tensor, ids: &[usize], ids_shape: &[usize]) -> Result<Tensor> {
    if table.rank() != 2 {
        return Err(shape_err("embedding_lookup", &table.shape, ids_shape));
    }
    let (v, d) = (table.shape[0], table.shape[1]);
    let mut data = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        if id >= v {
            return contract(format!("embedding index {id} out of range for {v} rows"));
        }
        data.extend_from_slice(&table.data[id * d..(id + 1) * d]);
    }
    let mut shape = ids_shape.to_vec();
    shape.push(d);
    Ok(Tensor { shape, data })
}

/// Adjoint of [`gather_rows`]: accumulates rows of `x` into a `[rows, d]` table.
pub(crate) fn scatter_rows(x: &Tensor, ids: &[usize], rows: usize) -> Tensor {
    let d = last_dim(x);
    let mut data = vec![0.0; rows * d];
    for (i, &id) in ids.iter().enumerate() {
        let src = &x.data[i * d..(i + 1) * d];
        for (o, v) in data[id * d..(id + 1) * d].iter_mut().zip(src) {
            *o += v;
        }
    }
    Tensor {
        shape: vec![rows, d],
        data,
    }
}
