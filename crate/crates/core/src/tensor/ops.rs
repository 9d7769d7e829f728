//! Differentiable operations.
//!
//! Binary elementwise ops broadcast by trailing-dimension alignment: the
//! shorter shape is left-padded with 1s, then every dimension pair must be
//! equal or contain a 1.

use std::f64::consts::PI;

use super::{numel, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::Dimension {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// Source index of every output element, or `None` when `src == out`.
fn broadcast_map(out: &[usize], src: &[usize]) -> Option<Vec<usize>> {
    if out == src {
        return None;
    }
    let total = numel(out);
    let src_len = numel(src);
    if out.ends_with(src) {
        return Some((0..total).map(|i| i % src_len).collect());
    }
    let rank = out.len();
    let offset = rank - src.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        if src[i] != 1 {
            strides[i + offset] = acc;
        }
        acc *= src[i];
    }
    let mut map = Vec::with_capacity(total);
    let mut counter = vec![0usize; rank];
    let mut idx = 0usize;
    for _ in 0..total {
        map.push(idx);
        for d in (0..rank).rev() {
            counter[d] += 1;
            idx += strides[d];
            if counter[d] < out[d] {
                break;
            }
            idx -= strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    Some(map)
}

fn reduce_to<T: Scalar>(g: &[T], map: &Option<Vec<usize>>, src_len: usize) -> Vec<T> {
    match map {
        None => g.to_vec(),
        Some(map) => {
            let mut out = vec![T::zero(); src_len];
            for (gi, &si) in g.iter().zip(map) {
                out[si] += *gi;
            }
            out
        }
    }
}

#[inline]
fn at(map: &Option<Vec<usize>>, i: usize) -> usize {
    match map {
        None => i,
        Some(m) => m[i],
    }
}

/// `(outer, len, inner)` view of `shape` around `axis`.
fn split_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Dimension {
            op,
            lhs: shape.to_vec(),
            rhs: vec![axis],
        });
    }
    Ok((
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    ))
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

/// Inverse of a permutation given as an index list.
pub fn inverse_permutation(p: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; p.len()];
    for (i, &j) in p.iter().enumerate() {
        inv[j] = i;
    }
    inv
}

#[inline]
fn gelu_fwd<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    half * x * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
fn gelu_grad<T: Scalar>(x: T) -> T {
    let cdf = T::of(0.5) * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * T::of(0.5)).exp() * T::of(1.0 / (2.0 * PI).sqrt());
    cdf + x * pdf
}

#[inline]
fn sigmoid_fwd<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `c[m,n] += a[m,k] * b[k,n]`, i-k-j order.
fn gemm_nn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m,k] += a[m,n] * b[k,n]^T`.
fn gemm_nt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            c[i * k + p] += acc;
        }
    }
}

/// `c[k,n] += a[m,k]^T * b[m,n]`.
fn gemm_tn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

impl<T: Scalar> Tensor<T> {
    fn binary(&self, other: &Tensor<T>, kind: Binary) -> Result<Tensor<T>> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        };
        let out_shape = broadcast_shape(name, self.shape(), other.shape())?;
        let map_a = broadcast_map(&out_shape, self.shape());
        let map_b = broadcast_map(&out_shape, other.shape());
        let (a, b) = (self.data(), other.data());
        let total = numel(&out_shape);
        let data: Vec<T> = match (&map_a, &map_b, kind) {
            (None, None, Binary::Add) => a.iter().zip(b).map(|(&x, &y)| x + y).collect(),
            (None, None, Binary::Sub) => a.iter().zip(b).map(|(&x, &y)| x - y).collect(),
            (None, None, Binary::Mul) => a.iter().zip(b).map(|(&x, &y)| x * y).collect(),
            _ => (0..total)
                .map(|i| {
                    let (x, y) = (a[at(&map_a, i)], b[at(&map_b, i)]);
                    match kind {
                        Binary::Add => x + y,
                        Binary::Sub => x - y,
                        Binary::Mul => x * y,
                    }
                })
                .collect(),
        };

        let (lhs, rhs) = (self.clone(), other.clone());
        let (need_a, need_b) = (self.requires_grad(), other.requires_grad());
        Ok(Tensor::from_op(
            name,
            out_shape,
            data,
            vec![self.clone(), other.clone()],
            move |g| {
                let (la, lb) = (lhs.len(), rhs.len());
                let ga = need_a.then(|| match kind {
                    Binary::Add | Binary::Sub => reduce_to(g, &map_a, la),
                    Binary::Mul => {
                        let b = rhs.data();
                        let scaled: Vec<T> =
                            g.iter().enumerate().map(|(i, &gi)| gi * b[at(&map_b, i)]).collect();
                        reduce_to(&scaled, &map_a, la)
                    }
                });
                let gb = need_b.then(|| match kind {
                    Binary::Add => reduce_to(g, &map_b, lb),
                    Binary::Sub => {
                        let neg: Vec<T> = g.iter().map(|&x| -x).collect();
                        reduce_to(&neg, &map_b, lb)
                    }
                    Binary::Mul => {
                        let a = lhs.data();
                        let scaled: Vec<T> =
                            g.iter().enumerate().map(|(i, &gi)| gi * a[at(&map_a, i)]).collect();
                        reduce_to(&scaled, &map_b, lb)
                    }
                });
                vec![ga, gb]
            },
        ))
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, Binary::Add)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, Binary::Sub)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, Binary::Mul)
    }

    fn unary(
        &self,
        name: &'static str,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Tensor<T> {
        let data: Vec<T> = self.data().iter().map(|&x| f(x)).collect();
        let input = self.clone();
        let out = data.clone();
        Tensor::from_op(
            name,
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            move |g| {
                let x = input.data();
                vec![Some(
                    g.iter()
                        .zip(x)
                        .zip(&out)
                        .map(|((&gi, &xi), &yi)| gi * df(xi, yi))
                        .collect(),
                )]
            },
        )
    }

    pub fn scale(&self, c: T) -> Tensor<T> {
        self.unary("scale", move |x| x * c, move |_, _| c)
    }

    /// Exact (erf-based) GeLU.
    pub fn gelu(&self) -> Tensor<T> {
        self.unary("gelu", gelu_fwd, |x, _| gelu_grad(x))
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.unary("sigmoid", sigmoid_fwd, |_, y| y * (T::one() - y))
    }

    pub fn sum(&self) -> Tensor<T> {
        let total: T = self.data().iter().copied().sum();
        let n = self.len();
        Tensor::from_op("sum", vec![1], vec![total], vec![self.clone()], move |g| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean(&self) -> Tensor<T> {
        let n = self.len();
        let total: T = self.data().iter().copied().sum();
        let inv = T::one() / T::of(n as f64);
        Tensor::from_op("mean", vec![1], vec![total * inv], vec![self.clone()], move |g| {
            vec![Some(vec![g[0] * inv; n])]
        })
    }

    /// Mean over `axis`; the axis is removed from the shape (a rank-1 input
    /// yields shape `[1]`).
    pub fn mean_axis(&self, axis: usize) -> Result<Tensor<T>> {
        let (outer, len, inner) = split_axis("mean_axis", self.shape(), axis)?;
        let x = self.data();
        let inv = T::one() / T::of(len as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += x[base + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let shape = reduced_shape(self.shape(), axis);
        Ok(Tensor::from_op("mean_axis", shape, out, vec![self.clone()], move |g| {
            let mut gx = vec![T::zero(); outer * len * inner];
            for o in 0..outer {
                for l in 0..len {
                    let base = (o * len + l) * inner;
                    for i in 0..inner {
                        gx[base + i] = g[o * inner + i] * inv;
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Population variance over `axis`; the axis is removed.
    pub fn variance_axis(&self, axis: usize) -> Result<Tensor<T>> {
        let (outer, len, inner) = split_axis("variance_axis", self.shape(), axis)?;
        let x = self.data();
        let inv = T::one() / T::of(len as f64);
        let mut mean = vec![T::zero(); outer * inner];
        let mut var = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut m = T::zero();
                for l in 0..len {
                    m += x[(o * len + l) * inner + i];
                }
                m *= inv;
                let mut v = T::zero();
                for l in 0..len {
                    let d = x[(o * len + l) * inner + i] - m;
                    v += d * d;
                }
                mean[o * inner + i] = m;
                var[o * inner + i] = v * inv;
            }
        }
        let input = self.clone();
        let shape = reduced_shape(self.shape(), axis);
        Ok(Tensor::from_op("variance_axis", shape, var, vec![self.clone()], move |g| {
            let x = input.data();
            let two = T::of(2.0);
            let mut gx = vec![T::zero(); outer * len * inner];
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        let k = (o * len + l) * inner + i;
                        gx[k] = g[o * inner + i] * two * (x[k] - mean[o * inner + i]) * inv;
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        let (outer, len, inner) = split_axis("softmax", self.shape(), axis)?;
        let x = self.data();
        let mut y = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let mut max = T::neg_infinity();
                for l in 0..len {
                    max = max.max(x[idx(l)]);
                }
                let mut total = T::zero();
                for l in 0..len {
                    let e = (x[idx(l)] - max).exp();
                    y[idx(l)] = e;
                    total += e;
                }
                for l in 0..len {
                    y[idx(l)] /= total;
                }
            }
        }
        let out = y.clone();
        Ok(Tensor::from_op(
            "softmax",
            self.shape().to_vec(),
            y,
            vec![self.clone()],
            move |g| {
                let mut gx = vec![T::zero(); out.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + i;
                        let mut dot = T::zero();
                        for l in 0..len {
                            dot += g[idx(l)] * out[idx(l)];
                        }
                        for l in 0..len {
                            gx[idx(l)] = out[idx(l)] * (g[idx(l)] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            },
        ))
    }

    /// Normalizes to zero mean and unit variance along `axis` (no affine).
    pub fn layer_norm(&self, axis: usize, eps: T) -> Result<Tensor<T>> {
        let (outer, len, inner) = split_axis("layer_norm", self.shape(), axis)?;
        let x = self.data();
        let inv = T::one() / T::of(len as f64);
        let mut y = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let mut m = T::zero();
                for l in 0..len {
                    m += x[idx(l)];
                }
                m *= inv;
                let mut v = T::zero();
                for l in 0..len {
                    let d = x[idx(l)] - m;
                    v += d * d;
                }
                let r = T::one() / (v * inv + eps).sqrt();
                inv_std[o * inner + i] = r;
                for l in 0..len {
                    y[idx(l)] = (x[idx(l)] - m) * r;
                }
            }
        }
        let xhat = y.clone();
        Ok(Tensor::from_op(
            "layer_norm",
            self.shape().to_vec(),
            y,
            vec![self.clone()],
            move |g| {
                let mut gx = vec![T::zero(); xhat.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + i;
                        let mut mg = T::zero();
                        let mut mgx = T::zero();
                        for l in 0..len {
                            mg += g[idx(l)];
                            mgx += g[idx(l)] * xhat[idx(l)];
                        }
                        mg *= inv;
                        mgx *= inv;
                        let r = inv_std[o * inner + i];
                        for l in 0..len {
                            gx[idx(l)] = r * (g[idx(l)] - mg - xhat[idx(l)] * mgx);
                        }
                    }
                }
                vec![Some(gx)]
            },
        ))
    }

    /// Mean squared error between equally shaped tensors.
    pub fn mse(&self, target: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape() != target.shape() {
            return Err(Error::Dimension {
                op: "mse",
                lhs: self.shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let d = self.sub(target)?;
        Ok(d.mul(&d)?.mean())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != self.len() || shape.contains(&0) {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            |g| vec![Some(g.to_vec())],
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Tensor<T>> {
        let shape = self.shape();
        if shape.len() < 2 {
            return Err(Error::Dimension {
                op: "transpose",
                lhs: shape.to_vec(),
                rhs: vec![],
            });
        }
        let r = shape.len();
        let (rows, cols) = (shape[r - 2], shape[r - 1]);
        let batch = numel(&shape[..r - 2]);
        let swap = move |src: &[T]| {
            let mut out = vec![T::zero(); src.len()];
            for b in 0..batch {
                let base = b * rows * cols;
                for i in 0..rows {
                    for j in 0..cols {
                        out[base + j * rows + i] = src[base + i * cols + j];
                    }
                }
            }
            out
        };
        let mut out_shape = shape.to_vec();
        out_shape.swap(r - 2, r - 1);
        let data = swap(self.data());
        Ok(Tensor::from_op("transpose", out_shape, data, vec![self.clone()], move |g| {
            let mut out = vec![T::zero(); g.len()];
            for b in 0..batch {
                let base = b * rows * cols;
                for j in 0..cols {
                    for i in 0..rows {
                        out[base + i * cols + j] = g[base + j * rows + i];
                    }
                }
            }
            vec![Some(out)]
        }))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        let (outer, full, inner) = split_axis("narrow", self.shape(), axis)?;
        if len == 0 || start + len > full {
            return Err(Error::Index {
                op: "narrow",
                index: start + len,
                len: full,
            });
        }
        let x = self.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Ok(Tensor::from_op("narrow", shape, out, vec![self.clone()], move |g| {
            let mut gx = vec![T::zero(); outer * full * inner];
            for o in 0..outer {
                let base = (o * full + start) * inner;
                gx[base..base + len * inner]
                    .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        }))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let (outer, _, inner) = split_axis("concat", first.shape(), axis)?;
        let mut lens = Vec::with_capacity(parts.len());
        for p in parts {
            let ok = p.rank() == first.rank()
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(Error::Dimension {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            lens.push(p.shape()[axis]);
        }
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                out.extend_from_slice(&p.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let needs: Vec<bool> = parts.iter().map(|p| p.requires_grad()).collect();
        Ok(Tensor::from_op("concat", shape, out, parts.to_vec(), move |g| {
            let mut grads: Vec<Option<Vec<T>>> = needs
                .iter()
                .zip(&lens)
                .map(|(&n, &l)| n.then(|| Vec::with_capacity(outer * l * inner)))
                .collect();
            let mut off = 0;
            for _ in 0..outer {
                for (slot, &l) in grads.iter_mut().zip(&lens) {
                    if let Some(v) = slot {
                        v.extend_from_slice(&g[off..off + l * inner]);
                    }
                    off += l * inner;
                }
            }
            grads
        }))
    }

    /// 2-D matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (a, b) = (self.shape(), other.shape());
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
        let (m, k, n) = (a[0], a[1], b[1]);
        let mut c = vec![T::zero(); m * n];
        gemm_nn(self.data(), other.data(), &mut c, m, k, n);
        let (lhs, rhs) = (self.clone(), other.clone());
        let (need_a, need_b) = (self.requires_grad(), other.requires_grad());
        Ok(Tensor::from_op(
            "matmul",
            vec![m, n],
            c,
            vec![self.clone(), other.clone()],
            move |g| {
                let ga = need_a.then(|| {
                    let mut ga = vec![T::zero(); m * k];
                    gemm_nt(g, rhs.data(), &mut ga, m, n, k);
                    ga
                });
                let gb = need_b.then(|| {
                    let mut gb = vec![T::zero(); k * n];
                    gemm_tn(lhs.data(), g, &mut gb, m, k, n);
                    gb
                });
                vec![ga, gb]
            },
        ))
    }

    /// Row `i` of the result is row `idx[i]` of `self` (shape `[n, ...]`).
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor<T>> {
        let shape = self.shape();
        let n = shape[0];
        let row = numel(&shape[1..]);
        if idx.is_empty() {
            return Err(Error::Contract("gather_rows with empty index list".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Index {
                op: "gather_rows",
                index: bad,
                len: n,
            });
        }
        let x = self.data();
        let mut out = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            out.extend_from_slice(&x[i * row..(i + 1) * row]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[0] = idx.len();
        let idx = idx.to_vec();
        Ok(Tensor::from_op("gather_rows", out_shape, out, vec![self.clone()], move |g| {
            let mut gx = vec![T::zero(); n * row];
            for (k, &i) in idx.iter().enumerate() {
                for (dst, &src) in gx[i * row..(i + 1) * row].iter_mut().zip(&g[k * row..(k + 1) * row]) {
                    *dst += src;
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Adjoint of [`gather_rows`](Self::gather_rows): row `i` of `self` is
    /// added into row `idx[i]` of an `n`-row zero tensor.
    pub fn scatter_rows(&self, idx: &[usize], n: usize) -> Result<Tensor<T>> {
        let shape = self.shape();
        if idx.len() != shape[0] {
            return Err(Error::Dimension {
                op: "scatter_rows",
                lhs: shape.to_vec(),
                rhs: vec![idx.len()],
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Index {
                op: "scatter_rows",
                index: bad,
                len: n,
            });
        }
        let row = numel(&shape[1..]);
        let x = self.data();
        let mut out = vec![T::zero(); n * row];
        for (k, &i) in idx.iter().enumerate() {
            for (dst, &src) in out[i * row..(i + 1) * row].iter_mut().zip(&x[k * row..(k + 1) * row]) {
                *dst += src;
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape[0] = n;
        let idx = idx.to_vec();
        Ok(Tensor::from_op("scatter_rows", out_shape, out, vec![self.clone()], move |g| {
            let mut gx = Vec::with_capacity(idx.len() * row);
            for &i in &idx {
                gx.extend_from_slice(&g[i * row..(i + 1) * row]);
            }
            vec![Some(gx)]
        }))
    }

    /// Transposed 2-D convolution with a 2x2 kernel and stride 2.
    ///
    /// `self` is `[c_in, h, w]` or `[b, c_in, h, w]`, `weights` is
    /// `[c_in, c_out, 2, 2]`; the output doubles both spatial dims. Kernel
    /// windows do not overlap, so each output pixel reads exactly one input
    /// pixel.
    pub fn conv_transpose2d(&self, weights: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
        let ws = weights.shape();
        if ws.len() != 4 || ws[2] != 2 || ws[3] != 2 || stride != 2 {
            return Err(Error::Unsupported(format!(
                "conv_transpose2d supports only a 2x2 kernel with stride 2, got kernel {:?} stride {stride}",
                ws.get(2..).unwrap_or(&[])
            )));
        }
        let xs = self.shape();
        let (batch, c_in, h, w) = match *xs {
            [c, h, w] => (1, c, h, w),
            [b, c, h, w] => (b, c, h, w),
            _ => {
                return Err(Error::Dimension {
                    op: "conv_transpose2d",
                    lhs: xs.to_vec(),
                    rhs: ws.to_vec(),
                })
            }
        };
        if ws[0] != c_in {
            return Err(Error::Dimension {
                op: "conv_transpose2d",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        let c_out = ws[1];
        let hw = h * w;
        let (oh, ow) = (2 * h, 2 * w);
        let x = self.data();
        let wt = weights.data();
        let mut out = vec![T::zero(); batch * c_out * oh * ow];
        let mut plane = vec![T::zero(); hw];
        for b in 0..batch {
            let xb = &x[b * c_in * hw..(b + 1) * c_in * hw];
            for o in 0..c_out {
                for ki in 0..2 {
                    for kj in 0..2 {
                        plane.iter_mut().for_each(|v| *v = T::zero());
                        for c in 0..c_in {
                            let wv = wt[((c * c_out + o) * 2 + ki) * 2 + kj];
                            for (pv, &xv) in plane.iter_mut().zip(&xb[c * hw..(c + 1) * hw]) {
                                *pv += wv * xv;
                            }
                        }
                        let ob = (b * c_out + o) * oh * ow;
                        for i in 0..h {
                            for j in 0..w {
                                out[ob + (2 * i + ki) * ow + 2 * j + kj] = plane[i * w + j];
                            }
                        }
                    }
                }
            }
        }
        let mut out_shape = xs.to_vec();
        let r = out_shape.len();
        out_shape[r - 3] = c_out;
        out_shape[r - 2] = oh;
        out_shape[r - 1] = ow;

        let (input, kernel) = (self.clone(), weights.clone());
        let (need_x, need_w) = (self.requires_grad(), weights.requires_grad());
        Ok(Tensor::from_op(
            "conv_transpose2d",
            out_shape,
            out,
            vec![self.clone(), weights.clone()],
            move |g| {
                let x = input.data();
                let wt = kernel.data();
                let mut gx = need_x.then(|| vec![T::zero(); batch * c_in * hw]);
                let mut gw = need_w.then(|| vec![T::zero(); c_in * c_out * 4]);
                // per kernel offset k = 2*ki + kj, the output gradient laid
                // out as [o][p] for the input gradient and [p][o] for the
                // weight gradient, so both inner loops are contiguous axpys
                let mut gk = vec![T::zero(); 4 * c_out * hw];
                let mut gt = vec![T::zero(); 4 * hw * c_out];
                let mut gwk = vec![T::zero(); 4 * c_in * c_out];
                for b in 0..batch {
                    for o in 0..c_out {
                        let ob = (b * c_out + o) * oh * ow;
                        for i in 0..h {
                            for j in 0..w {
                                let p = i * w + j;
                                for k in 0..4 {
                                    let v = g[ob + (2 * i + k / 2) * ow + 2 * j + k % 2];
                                    gk[(k * c_out + o) * hw + p] = v;
                                    gt[(k * hw + p) * c_out + o] = v;
                                }
                            }
                        }
                    }
                    if let Some(gx) = gx.as_mut() {
                        for c in 0..c_in {
                            let row = &mut gx[(b * c_in + c) * hw..(b * c_in + c + 1) * hw];
                            for o in 0..c_out {
                                for k in 0..4 {
                                    let wv = wt[(c * c_out + o) * 4 + k];
                                    let src = &gk[(k * c_out + o) * hw..(k * c_out + o + 1) * hw];
                                    for (d, &gv) in row.iter_mut().zip(src) {
                                        *d += wv * gv;
                                    }
                                }
                            }
                        }
                    }
                    if need_w {
                        for k in 0..4 {
                            for c in 0..c_in {
                                let xrow = &x[(b * c_in + c) * hw..(b * c_in + c + 1) * hw];
                                let dst = &mut gwk[(k * c_in + c) * c_out..(k * c_in + c + 1) * c_out];
                                for (p, &xv) in xrow.iter().enumerate() {
                                    let src = &gt[(k * hw + p) * c_out..(k * hw + p + 1) * c_out];
                                    for (d, &gv) in dst.iter_mut().zip(src) {
                                        *d += xv * gv;
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(gw) = gw.as_mut() {
                    for c in 0..c_in {
                        for o in 0..c_out {
                            for k in 0..4 {
                                gw[(c * c_out + o) * 4 + k] = gwk[(k * c_in + c) * c_out + o];
                            }
                        }
                    }
                }
                vec![gx, gw]
            },
        ))
    }

    /// Pointwise (1x1) convolution: `[b, c_in, h, w]` with `[c_in, c_out]`.
    pub fn conv1x1(&self, weights: &Tensor<T>) -> Result<Tensor<T>> {
        let (xs, ws) = (self.shape(), weights.shape());
        if xs.len() != 4 || ws.len() != 2 || ws[0] != xs[1] {
            return Err(Error::Dimension {
                op: "conv1x1",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        let (batch, c_in, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let c_out = ws[1];
        let (x, wt) = (self.data(), weights.data());
        let mut out = vec![T::zero(); batch * c_out * hw];
        for b in 0..batch {
            for o in 0..c_out {
                let dst = &mut out[(b * c_out + o) * hw..(b * c_out + o + 1) * hw];
                for c in 0..c_in {
                    let wv = wt[c * c_out + o];
                    let src = &x[(b * c_in + c) * hw..(b * c_in + c + 1) * hw];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += wv * s;
                    }
                }
            }
        }
        let out_shape = vec![batch, c_out, xs[2], xs[3]];
        let (input, kernel) = (self.clone(), weights.clone());
        let (need_x, need_w) = (self.requires_grad(), weights.requires_grad());
        Ok(Tensor::from_op(
            "conv1x1",
            out_shape,
            out,
            vec![self.clone(), weights.clone()],
            move |g| {
                let (x, wt) = (input.data(), kernel.data());
                let mut gx = need_x.then(|| vec![T::zero(); batch * c_in * hw]);
                let mut gw = need_w.then(|| vec![T::zero(); c_in * c_out]);
                for b in 0..batch {
                    for o in 0..c_out {
                        let gs = &g[(b * c_out + o) * hw..(b * c_out + o + 1) * hw];
                        for c in 0..c_in {
                            let off = (b * c_in + c) * hw;
                            if let Some(gx) = gx.as_mut() {
                                let wv = wt[c * c_out + o];
                                for (d, &gv) in gx[off..off + hw].iter_mut().zip(gs) {
                                    *d += wv * gv;
                                }
                            }
                            if let Some(gw) = gw.as_mut() {
                                let mut acc = T::zero();
                                for (&xv, &gv) in x[off..off + hw].iter().zip(gs) {
                                    acc += xv * gv;
                                }
                                gw[c * c_out + o] += acc;
                            }
                        }
                    }
                }
                vec![gx, gw]
            },
        ))
    }

    /// Mean cross-entropy of row-wise softmax(`self`) against class indices.
    /// `self` is `[b, k]` logits.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: s.to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let (b, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Index {
                op: "cross_entropy",
                index: bad,
                len: k,
            });
        }
        let x = self.data();
        let mut probs = vec![T::zero(); b * k];
        let mut loss = T::zero();
        for r in 0..b {
            let row = &x[r * k..(r + 1) * k];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for (p, &v) in probs[r * k..(r + 1) * k].iter_mut().zip(row) {
                *p = (v - max).exp();
                total += *p;
            }
            probs[r * k..(r + 1) * k].iter_mut().for_each(|p| *p /= total);
            loss += total.ln() + max - row[labels[r]];
        }
        let inv = T::one() / T::of(b as f64);
        let labels = labels.to_vec();
        Ok(Tensor::from_op("cross_entropy", vec![1], vec![loss * inv], vec![self.clone()], move |g| {
            let mut gx = probs.clone();
            for (r, &l) in labels.iter().enumerate() {
                gx[r * k + l] -= T::one();
            }
            gx.iter_mut().for_each(|v| *v *= g[0] * inv);
            vec![Some(gx)]
        }))
    }

    /// Mean binary cross-entropy of sigmoid(`self`) against targets in [0,1].
    pub fn bce_with_logits(&self, targets: &[T]) -> Result<Tensor<T>> {
        if targets.len() != self.len() {
            return Err(Error::Dimension {
                op: "bce_with_logits",
                lhs: self.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let z = self.data();
        let mut loss = T::zero();
        for (&zi, &yi) in z.iter().zip(targets) {
            loss += zi.max(T::zero()) - zi * yi + (-zi.abs()).exp().ln_1p();
        }
        let inv = T::one() / T::of(z.len() as f64);
        let input = self.clone();
        let targets = targets.to_vec();
        Ok(Tensor::from_op("bce_with_logits", vec![1], vec![loss * inv], vec![self.clone()], move |g| {
            let gx = input
                .data()
                .iter()
                .zip(&targets)
                .map(|(&zi, &yi)| (sigmoid_fwd(zi) - yi) * g[0] * inv)
                .collect();
            vec![Some(gx)]
        }))
    }
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|&(d, _)| d != axis)
        .map(|(_, &v)| v)
        .collect();
    if s.is_empty() {
        s.push(1);
    }
    s
}
