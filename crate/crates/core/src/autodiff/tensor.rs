//! Dense row-major `f64` tensors with numpy-style broadcasting.

use serde::{Deserialize, Serialize};

use crate::error::{CfmError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(CfmError::ShapeMismatch(format!(
                "shape {:?} holds {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: Vec::new(), data: vec![value] }
    }

    /// Rank-1 tensor.
    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
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

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Elementwise combination of two tensors of identical shape.
    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(CfmError::ShapeMismatch(format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Row `i` of the leading axis, as a slice.
    pub fn row(&self, i: usize) -> &[f64] {
        let stride = self.data.len() / self.shape[0];
        &self.data[i * stride..(i + 1) * stride]
    }

    /// Gathers leading-axis rows into a new tensor.
    pub fn select_rows(&self, rows: &[usize]) -> Tensor {
        let stride = if self.shape[0] == 0 { 0 } else { self.data.len() / self.shape[0] };
        let mut data = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            data.extend_from_slice(&self.data[r * stride..(r + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Tensor { shape, data }
    }

    /// Stacks tensors of identical shape along the leading axis.
    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| CfmError::ShapeMismatch("empty concat".into()))?;
        let tail = &first.shape[1..];
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(CfmError::ShapeMismatch(format!("{:?} vs {:?}", p.shape, first.shape)));
            }
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = rows;
        Ok(Tensor { shape, data })
    }
}

/// Output shape of broadcasting `a` against `b` (right-aligned, numpy rules).
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(CfmError::ShapeMismatch(format!("cannot broadcast {a:?} with {b:?}"))),
        };
    }
    Ok(out)
}

/// Strides of `shape` when viewed inside `out` (zero on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let n = out.len();
    let mut strides = vec![0; n];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + n - shape.len();
        strides[oi] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// For each flat index of `out`, the flat index into a tensor of `shape`.
pub(crate) fn broadcast_index(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let total: usize = out.iter().product();
    if shape == out {
        return (0..total).collect();
    }
    let strides = broadcast_strides(shape, out);
    let mut idx = vec![0usize; out.len()];
    let mut res = Vec::with_capacity(total);
    let mut offset = 0usize;
    for _ in 0..total {
        res.push(offset);
        for ax in (0..out.len()).rev() {
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < out[ax] {
                break;
            }
            offset -= strides[ax] * out[ax];
            idx[ax] = 0;
        }
    }
    res
}

/// Binary op with broadcasting.
pub(crate) fn broadcast_binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape == b.shape {
        return a.zip_map(b, f);
    }
    let out = broadcast_shape(&a.shape, &b.shape)?;
    let total: usize = out.iter().product();
    let mut data = Vec::with_capacity(total);
    // Fast path: b is a trailing per-row scalar or a row vector.
    if a.shape == out && b.len() == 1 {
        let bv = b.data[0];
        data.extend(a.data.iter().map(|&x| f(x, bv)));
    } else {
        let ia = broadcast_index(&a.shape, &out);
        let ib = broadcast_index(&b.shape, &out);
        data.extend(ia.iter().zip(&ib).map(|(&i, &j)| f(a.data[i], b.data[j])));
    }
    Ok(Tensor { shape: out, data })
}

/// Sums `grad` (shaped like the broadcast output) back down to `shape`.
pub(crate) fn reduce_to_shape(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape == shape {
        return grad.clone();
    }
    let mut out = Tensor::zeros(shape);
    let idx = broadcast_index(shape, &grad.shape);
    for (g, &i) in grad.data.iter().zip(&idx) {
        out.data[i] += g;
    }
    out
}

/// Sum along `axis`, keeping it as extent 1.
pub(crate) fn sum_axis_keepdim(x: &Tensor, axis: usize) -> Tensor {
    let shape = &x.shape;
    let outer: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out_shape = shape.clone();
    out_shape[axis] = 1;
    let mut data = vec![0.0; outer * inner];
    for o in 0..outer {
        for k in 0..n {
            let base = (o * n + k) * inner;
            let dst = &mut data[o * inner..(o + 1) * inner];
            for (d, &v) in dst.iter_mut().zip(&x.data[base..base + inner]) {
                *d += v;
            }
        }
    }
    Tensor { shape: out_shape, data }
}

/// Row-major `[m, n] x [n, p]` product, optionally transposing either operand.
pub(crate) fn matmul(a: &Tensor, b: &Tensor, trans_a: bool, trans_b: bool) -> Result<Tensor> {
    if a.ndim() != 2 || b.ndim() != 2 {
        return Err(CfmError::ShapeMismatch(format!("matmul needs 2-D operands: {:?} {:?}", a.shape, b.shape)));
    }
    let (m, ka) = if trans_a { (a.shape[1], a.shape[0]) } else { (a.shape[0], a.shape[1]) };
    let (kb, p) = if trans_b { (b.shape[1], b.shape[0]) } else { (b.shape[0], b.shape[1]) };
    if ka != kb {
        return Err(CfmError::ShapeMismatch(format!(
            "matmul inner extents differ: {:?}{} x {:?}{}",
            a.shape,
            if trans_a { "^T" } else { "" },
            b.shape,
            if trans_b { "^T" } else { "" }
        )));
    }
    let mut out = vec![0.0; m * p];
    if m > 0 && p > 0 && ka > 0 {
        let (rsa, csa) = if trans_a { (1, a.shape[1] as isize) } else { (a.shape[1] as isize, 1) };
        let (rsb, csb) = if trans_b { (1, b.shape[1] as isize) } else { (b.shape[1] as isize, 1) };
        // SAFETY: extents and strides describe the owned row-major buffers above.
        unsafe {
            matrixmultiply::dgemm(
                m,
                ka,
                p,
                1.0,
                a.data.as_ptr(),
                rsa,
                csa,
                b.data.as_ptr(),
                rsb,
                csb,
                0.0,
                out.as_mut_ptr(),
                p as isize,
                1,
            );
        }
    }
    Ok(Tensor { shape: vec![m, p], data: out })
}

/// Softmax over the last axis.
pub(crate) fn softmax_last(x: &Tensor) -> Tensor {
    let k = *x.shape.last().unwrap_or(&1);
    let mut data = x.data.clone();
    if k == 0 {
        return x.clone();
    }
    for row in data.chunks_mut(k) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    Tensor { shape: x.shape.clone(), data }
}
