use rayon::prelude::*;

use super::{numel_of, BackwardCtx, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// Splits `shape` around `axis` into (outer, extent, inner) for strided loops.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::Input(format!("{op}: axis {axis} out of range for {shape:?}")));
    }
    Ok(())
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(dim_err(op, a, b)),
        };
    }
    Ok(out)
}

/// Strides of `shape` laid against `out`, zero along broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let nd = out.len();
    let off = nd - shape.len();
    let mut strides = vec![0; nd];
    let mut s = 1;
    for i in (0..shape.len()).rev() {
        if shape[i] != 1 || out[i + off] == 1 {
            strides[i + off] = s;
        }
        s *= shape[i];
    }
    strides
}

/// Visits every output element with the matching input offsets.
fn bcast_walk(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let nd = out.len();
    let mut idx = vec![0usize; nd];
    let (mut ia, mut ib) = (0usize, 0usize);
    for i in 0..numel_of(out) {
        f(i, ia, ib);
        for d in (0..nd).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

type BinFn = fn(f64, f64) -> f64;
/// (a, b, grad_out) -> contribution to the gradient of one operand.
type BinGrad = fn(f64, f64, f64) -> f64;

fn binary(op: &'static str, a: &Tensor, b: &Tensor, f: BinFn, da: BinGrad, db: BinGrad) -> Result<Tensor> {
    let out_shape = broadcast_shape(op, a.shape(), b.shape())?;
    let (x, y) = (a.data(), b.data());
    let data: Vec<f64> = if a.shape() == b.shape() {
        x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect()
    } else {
        let sa = broadcast_strides(a.shape(), &out_shape);
        let sb = broadcast_strides(b.shape(), &out_shape);
        let mut data = vec![0.0; numel_of(&out_shape)];
        bcast_walk(&out_shape, &sa, &sb, |i, ia, ib| data[i] = f(x[ia], y[ib]));
        data
    };
    let shape = out_shape.clone();
    Ok(Tensor::from_op(
        op,
        out_shape,
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |ctx: &BackwardCtx<'_>| {
            let (a, b) = (&ctx.parents[0], &ctx.parents[1]);
            let (x, y, g) = (a.data(), b.data(), ctx.grad_out);
            let mut ga = ctx.needs[0].then(|| vec![0.0; a.numel()]);
            let mut gb = ctx.needs[1].then(|| vec![0.0; b.numel()]);
            if a.shape() == b.shape() {
                for i in 0..g.len() {
                    if let Some(ga) = ga.as_mut() {
                        ga[i] = da(x[i], y[i], g[i]);
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[i] = db(x[i], y[i], g[i]);
                    }
                }
            } else {
                let sa = broadcast_strides(a.shape(), &shape);
                let sb = broadcast_strides(b.shape(), &shape);
                bcast_walk(&shape, &sa, &sb, |i, ia, ib| {
                    if let Some(ga) = ga.as_mut() {
                        ga[ia] += da(x[ia], y[ib], g[i]);
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[ib] += db(x[ia], y[ib], g[i]);
                    }
                });
            }
            vec![ga, gb]
        }),
    ))
}

/// (input, output, grad_out) -> grad_in
type UnaryGrad = fn(f64, f64, f64) -> f64;

fn unary(op: &'static str, a: &Tensor, f: impl Fn(f64) -> f64, df: UnaryGrad) -> Tensor {
    let data = a.data().iter().map(|&v| f(v)).collect();
    Tensor::from_op(
        op,
        a.shape().to_vec(),
        data,
        vec![a.clone()],
        Box::new(move |ctx: &BackwardCtx<'_>| {
            let x = ctx.parents[0].data();
            let g = x
                .iter()
                .zip(ctx.out)
                .zip(ctx.grad_out)
                .map(|((&x, &y), &g)| df(x, y, g))
                .collect();
            vec![Some(g)]
        }),
    )
}

/// `out[m,n] = a[m,k] · b[k,n]`, rows computed independently (and in parallel
/// for large products) so the result does not depend on the thread count.
pub(crate) fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    let row = |(i, out_row): (usize, &mut [f64])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    };
    if m * k * n >= 1 << 16 && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

pub(crate) fn transpose2(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let nd = shape.len();
    let mut in_strides = vec![1; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let zero = vec![0; nd];
    let mut out = vec![0.0; data.len()];
    bcast_walk(&out_shape, &strides, &zero, |i, src, _| out[i] = data[src]);
    out
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        binary("add", self, other, |a, b| a + b, |_, _, g| g, |_, _, g| g)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        binary("sub", self, other, |a, b| a - b, |_, _, g| g, |_, _, g| -g)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        binary("mul", self, other, |a, b| a * b, |_, b, g| g * b, |a, _, g| g * a)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        binary(
            "div",
            self,
            other,
            |a, b| a / b,
            |_, b, g| g / b,
            |a, b, g| -g * a / (b * b),
        )
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|&v| v * c).collect();
        Tensor::from_op(
            "scale",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx<'_>| vec![Some(ctx.grad_out.iter().map(|g| g * c).collect())]),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|&v| v + c).collect();
        Tensor::from_op(
            "add_scalar",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|ctx: &BackwardCtx<'_>| vec![Some(ctx.grad_out.to_vec())]),
        )
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn relu(&self) -> Tensor {
        unary("relu", self, |v| if v > 0.0 || v.is_nan() { v } else { 0.0 }, |x, _, g| if x > 0.0 { g } else { 0.0 })
    }

    pub fn exp(&self) -> Tensor {
        unary("exp", self, f64::exp, |_, y, g| g * y)
    }

    pub fn log(&self) -> Tensor {
        unary("log", self, f64::ln, |x, _, g| g / x)
    }

    pub fn sqrt(&self) -> Tensor {
        unary("sqrt", self, f64::sqrt, |_, y, g| g / (2.0 * y))
    }

    pub fn sqr(&self) -> Tensor {
        unary("sqr", self, |v| v * v, |x, _, g| 2.0 * x * g)
    }

    pub fn sum(&self) -> Tensor {
        let n = self.numel();
        Tensor::from_op(
            "sum",
            vec![1],
            vec![self.data().iter().sum()],
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx<'_>| vec![Some(vec![ctx.grad_out[0]; n])]),
        )
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        check_axis("sum_axis", self.shape(), axis)?;
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let src = &x[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let mut shape = self.shape().to_vec();
        if keepdim || shape.len() == 1 {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        Ok(Tensor::from_op(
            "sum_axis",
            shape,
            out,
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let mut g = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    let src = &ctx.grad_out[o * inner..(o + 1) * inner];
                    for j in 0..len {
                        g[(o * len + j) * inner..(o * len + j + 1) * inner].copy_from_slice(src);
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        check_axis("mean_axis", self.shape(), axis)?;
        let n = self.shape()[axis] as f64;
        Ok(self.sum_axis(axis, keepdim)?.scale(1.0 / n))
    }

    /// Matrix product over the last two axes. Both operands are 2-D, or both
    /// 3-D with equal leading (batch) extent.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        let ok = match (sa.len(), sb.len()) {
            (2, 2) => sa[1] == sb[0],
            (3, 3) => sa[0] == sb[0] && sa[2] == sb[1],
            _ => false,
        };
        if !ok {
            return Err(dim_err("matmul", sa, sb));
        }
        let batch = if sa.len() == 3 { sa[0] } else { 1 };
        let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let mut out = Vec::with_capacity(batch * m * n);
        for bi in 0..batch {
            let a = &self.data()[bi * m * k..(bi + 1) * m * k];
            let b = &other.data()[bi * k * n..(bi + 1) * k * n];
            out.extend(gemm(a, b, m, k, n));
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        Ok(Tensor::from_op(
            "matmul",
            shape,
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let (a, b) = (ctx.parents[0].data(), ctx.parents[1].data());
                let mut ga = ctx.needs[0].then(|| Vec::with_capacity(a.len()));
                let mut gb = ctx.needs[1].then(|| Vec::with_capacity(b.len()));
                for bi in 0..batch {
                    let g = &ctx.grad_out[bi * m * n..(bi + 1) * m * n];
                    let ab = &a[bi * m * k..(bi + 1) * m * k];
                    let bb = &b[bi * k * n..(bi + 1) * k * n];
                    if let Some(ga) = ga.as_mut() {
                        ga.extend(gemm(g, &transpose2(bb, k, n), m, n, k));
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb.extend(gemm(&transpose2(ab, m, k), g, k, m, n));
                    }
                }
                vec![ga, gb]
            }),
        ))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let nd = self.ndim();
        let mut seen = vec![false; nd];
        if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
            return Err(dim_err("permute", self.shape(), perm));
        }
        let shape: Vec<usize> = perm.iter().map(|&p| self.shape()[p]).collect();
        let data = permute_data(self.data(), self.shape(), perm);
        let mut inverse = vec![0; nd];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let out_shape = shape.clone();
        Ok(Tensor::from_op(
            "permute",
            shape,
            data,
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx<'_>| vec![Some(permute_data(ctx.grad_out, &out_shape, &inverse))]),
        ))
    }

    /// Swaps two axes.
    pub fn transpose(&self, a: usize, b: usize) -> Result<Tensor> {
        let mut perm: Vec<usize> = (0..self.ndim()).collect();
        if a >= perm.len() || b >= perm.len() {
            return Err(dim_err("transpose", self.shape(), &[a, b]));
        }
        perm.swap(a, b);
        self.permute(&perm)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != self.numel() || shape.contains(&0) {
            return Err(dim_err("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(|ctx: &BackwardCtx<'_>| vec![Some(ctx.grad_out.to_vec())]),
        ))
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::Input("concat of nothing".into()))?;
        check_axis("concat", first.shape(), axis)?;
        for p in &parts[1..] {
            let same = p.ndim() == first.ndim()
                && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !same {
                return Err(dim_err("concat", first.shape(), p.shape()));
            }
        }
        let (outer, _, inner) = split_axis(first.shape(), axis);
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &len) in parts.iter().zip(&lens) {
                data.extend_from_slice(&p.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        Ok(Tensor::from_op(
            "concat",
            shape,
            data,
            parts.iter().map(|&p| p.clone()).collect(),
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let mut grads: Vec<Vec<f64>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (g, &len) in grads.iter_mut().zip(&lens) {
                        g.extend_from_slice(&ctx.grad_out[pos..pos + len * inner]);
                        pos += len * inner;
                    }
                }
                grads.into_iter().map(Some).collect()
            }),
        ))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        check_axis("slice", self.shape(), axis)?;
        if start >= end || end > self.shape()[axis] {
            return Err(Error::Input(format!(
                "slice {start}..{end} out of range for axis {axis} of {:?}",
                self.shape()
            )));
        }
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let width = end - start;
        let mut data = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            data.extend_from_slice(&self.data()[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = width;
        Ok(Tensor::from_op(
            "slice",
            shape,
            data,
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let mut g = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    g[(o * len + start) * inner..(o * len + end) * inner]
                        .copy_from_slice(&ctx.grad_out[o * width * inner..(o + 1) * width * inner]);
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        check_axis("softmax", self.shape(), axis)?;
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let mut out = self.to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| out[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (out[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] /= total;
                }
            }
        }
        Ok(Tensor::from_op(
            "softmax",
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let (y, gy) = (ctx.out, ctx.grad_out);
                let mut g = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| gy[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            g[at(j)] = y[at(j)] * (gy[at(j)] - dot);
                        }
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Tensor> {
        check_axis("log_softmax", self.shape(), axis)?;
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let mut out = self.to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| out[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..len).map(|j| (out[at(j)] - max).exp()).sum::<f64>().ln();
                for j in 0..len {
                    out[at(j)] -= lse;
                }
            }
        }
        Ok(Tensor::from_op(
            "log_softmax",
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let (y, gy) = (ctx.out, ctx.grad_out);
                let mut g = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let total: f64 = (0..len).map(|j| gy[at(j)]).sum();
                        for j in 0..len {
                            g[at(j)] = gy[at(j)] - y[at(j)].exp() * total;
                        }
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Rows of a 2-D table selected by `ids` (embedding lookup).
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Tensor> {
        if self.ndim() != 2 {
            return Err(dim_err("gather_rows", self.shape(), &[ids.len()]));
        }
        let (rows, width) = (self.shape()[0], self.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Input(format!("gather_rows: id {bad} out of range 0..{rows}")));
        }
        if ids.is_empty() {
            return Err(Error::Input("gather_rows: no ids".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * width);
        for &i in ids {
            data.extend_from_slice(&self.data()[i * width..(i + 1) * width]);
        }
        let ids = ids.to_vec();
        Ok(Tensor::from_op(
            "gather_rows",
            vec![ids.len(), width],
            data,
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let mut g = vec![0.0; rows * width];
                for (k, &i) in ids.iter().enumerate() {
                    for (a, b) in g[i * width..(i + 1) * width].iter_mut().zip(&ctx.grad_out[k * width..(k + 1) * width]) {
                        *a += b;
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Inverted dropout: zeroes each element with probability `p` and scales
    /// the survivors by `1/(1-p)`.
    pub fn dropout(&self, p: f64, rng: &mut Rng) -> Result<Tensor> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout rate {p} outside [0,1)")));
        }
        if p == 0.0 {
            return Ok(self.clone());
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.numel()).map(|_| if rng.uniform() < p { 0.0 } else { keep }).collect();
        self.mul(&Tensor::new(mask, self.shape())?)
    }
}
