//! Differentiable operations on [`Var`]. Each method computes the forward
//! value eagerly and records its adjoint on the owning graph.

use std::rc::Rc;

use rayon::prelude::*;

use super::kernels::{self, ConvGeom, PoolKind};
use super::{numel, strides, BackwardArgs, Element, Tensor, Var};
use crate::error::{Error, Result};

fn t<T: Element>(shape: &[usize], data: Vec<T>) -> Tensor<T> {
    Tensor::new(shape, data).expect("kernel produced a consistent buffer")
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

/// Permuted copy of `data` laid out as `shape`; `axes[i]` names the source
/// axis that becomes output axis `i`.
fn permute_data<T: Element>(data: &[T], shape: &[usize], axes: &[usize]) -> (Vec<T>, Vec<usize>) {
    let src_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let step: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
    let rank = out_shape.len();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..data.len() {
        out.push(data[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += step[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= step[d] * idx[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

/// Training or inference behavior of batch normalization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Running mean and (unbiased) variance tracked by batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T: Element = f32> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Element> RunningStats<T> {
    pub fn identity(d: usize) -> Self {
        RunningStats {
            mean: Tensor::zeros(&[d]),
            var: Tensor::ones(&[d]),
        }
    }
}

impl<'g, T: Element> Var<'g, T> {
    fn binary(self, other: Var<'g, T>, op: Binary) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        let out_shape = kernels::broadcast_shape(a.shape(), b.shape()).ok_or_else(|| {
            Error::dim(format!(
                "cannot broadcast {:?} with {:?}",
                a.shape(),
                b.shape()
            ))
        })?;
        let f = |x: T, y: T| match op {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let data: Vec<T> = if a.shape() == b.shape() {
            a.data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| f(x, y))
                .collect()
        } else {
            let ma = kernels::broadcast_index(a.shape(), &out_shape);
            let mb = kernels::broadcast_index(b.shape(), &out_shape);
            ma.iter()
                .zip(&mb)
                .map(|(&i, &j)| f(a.data()[i], b.data()[j]))
                .collect()
        };
        let value = t(&out_shape, data);
        Ok(self.graph().record(
            value,
            &[self, other],
            Box::new(move |args: &BackwardArgs<T>| {
                let (a, b) = (&args.inputs[0], &args.inputs[1]);
                let g = args.grad;
                let out = g.shape();
                let ma = kernels::broadcast_index(a.shape(), out);
                let mb = kernels::broadcast_index(b.shape(), out);
                let mut ga = args.needs[0].then(|| vec![T::zero(); a.numel()]);
                let mut gb = args.needs[1].then(|| vec![T::zero(); b.numel()]);
                for (o, &gv) in g.data().iter().enumerate() {
                    let (x, y) = (a.data()[ma[o]], b.data()[mb[o]]);
                    let (dx, dy) = match op {
                        Binary::Add => (gv, gv),
                        Binary::Sub => (gv, -gv),
                        Binary::Mul => (gv * y, gv * x),
                        Binary::Div => (gv / y, -gv * x / (y * y)),
                    };
                    if let Some(ga) = ga.as_mut() {
                        ga[ma[o]] += dx;
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[mb[o]] += dy;
                    }
                }
                vec![ga.map(|d| t(a.shape(), d)), gb.map(|d| t(b.shape(), d))]
            }),
        ))
    }

    /// Broadcasting elementwise sum.
    pub fn add(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, Binary::Add)
    }

    pub fn sub(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, Binary::Sub)
    }

    pub fn mul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, Binary::Mul)
    }

    pub fn div(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, Binary::Div)
    }

    /// Elementwise map with a closed-form derivative `df(x, y)` of input `x`
    /// and output `y`.
    fn unary(self, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Var<'g, T> {
        let x = self.value();
        let value = x.map(f);
        self.graph().record(
            value,
            &[self],
            Box::new(move |args: &BackwardArgs<T>| {
                let x = &args.inputs[0];
                let data = x
                    .data()
                    .iter()
                    .zip(args.output.data())
                    .zip(args.grad.data())
                    .map(|((&xv, &yv), &g)| g * df(xv, yv))
                    .collect();
                vec![Some(t(x.shape(), data))]
            }),
        )
    }

    pub fn scale(self, c: f64) -> Var<'g, T> {
        let c = T::of(c);
        self.unary(move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'g, T> {
        let c = T::of(c);
        self.unary(move |x| x + c, |_, _| T::one())
    }

    pub fn sqrt(self) -> Var<'g, T> {
        self.unary(|x| x.sqrt(), |_, y| T::of(0.5) / y)
    }

    pub fn square(self) -> Var<'g, T> {
        self.unary(|x| x * x, |x, _| T::of(2.0) * x)
    }

    pub fn relu(self) -> Var<'g, T> {
        self.unary(
            |x| x.max(T::zero()),
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    /// Tanh approximation of GELU.
    pub fn gelu(self) -> Var<'g, T> {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const A: f64 = 0.044_715;
        let (c, a) = (T::of(C), T::of(A));
        let half = T::of(0.5);
        self.unary(
            move |x| half * x * (T::one() + (c * (x + a * x * x * x)).tanh()),
            move |x, _| {
                let th = (c * (x + a * x * x * x)).tanh();
                half * (T::one() + th)
                    + half * x * (T::one() - th * th) * c * (T::one() + T::of(3.0) * a * x * x)
            },
        )
    }

    pub fn sum_all(self) -> Var<'g, T> {
        let x = self.value();
        let total = x.data().iter().copied().sum();
        self.graph().record(
            Tensor::scalar(total),
            &[self],
            Box::new(|args: &BackwardArgs<T>| {
                vec![Some(Tensor::full(args.inputs[0].shape(), args.grad.item()))]
            }),
        )
    }

    pub fn mean_all(self) -> Var<'g, T> {
        let n = self.value().numel() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        if axis >= x.rank() {
            return Err(Error::dim(format!(
                "axis {axis} out of range for {:?}",
                x.shape()
            )));
        }
        let (outer, len, inner) = axis_split(x.shape(), axis);
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &x.data()[(o * len + l) * inner..][..inner];
                for (d, &s) in data[o * inner..][..inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(self.graph().record(
            t(&shape, data),
            &[self],
            Box::new(move |args: &BackwardArgs<T>| {
                let x = &args.inputs[0];
                let g = args.grad.data();
                let mut gx = Vec::with_capacity(x.numel());
                for o in 0..outer {
                    for _ in 0..len {
                        gx.extend_from_slice(&g[o * inner..][..inner]);
                    }
                }
                vec![Some(t(x.shape(), gx))]
            }),
        ))
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'g, T>> {
        let len = self.shape().get(axis).copied().unwrap_or(1) as f64;
        Ok(self.sum_axis(axis)?.scale(1.0 / len))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g, T>> {
        let x = self.value();
        let value = x.reshape(shape)?;
        Ok(self.graph().record(
            value,
            &[self],
            Box::new(|args: &BackwardArgs<T>| {
                vec![Some(
                    args.grad
                        .reshape(args.inputs[0].shape())
                        .expect("same numel"),
                )]
            }),
        ))
    }

    /// Reorder axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(self, axes: &[usize]) -> Result<Var<'g, T>> {
        let x = self.value();
        let mut seen = vec![false; x.rank()];
        if axes.len() != x.rank()
            || axes
                .iter()
                .any(|&a| a >= x.rank() || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::dim(format!(
                "invalid permutation {axes:?} for {:?}",
                x.shape()
            )));
        }
        let (data, shape) = permute_data(x.data(), x.shape(), axes);
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Ok(self.graph().record(
            t(&shape, data),
            &[self],
            Box::new(move |args: &BackwardArgs<T>| {
                let (gx, gshape) = permute_data(args.grad.data(), args.grad.shape(), &inverse);
                vec![Some(t(&gshape, gx))]
            }),
        ))
    }

    /// Swap the two trailing axes.
    pub fn transpose(self) -> Result<Var<'g, T>> {
        let r = self.shape().len();
        if r < 2 {
            return Err(Error::dim("transpose needs rank >= 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes)
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        if axis >= x.rank() || start >= end || end > x.shape()[axis] {
            return Err(Error::dim(format!(
                "slice {start}..{end} on axis {axis} out of range for {:?}",
                x.shape()
            )));
        }
        let (outer, len, inner) = axis_split(x.shape(), axis);
        let width = end - start;
        let mut data = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            data.extend_from_slice(&x.data()[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = width;
        Ok(self.graph().record(
            t(&shape, data),
            &[self],
            Box::new(move |args: &BackwardArgs<T>| {
                let x = &args.inputs[0];
                let mut gx = vec![T::zero(); x.numel()];
                let g = args.grad.data();
                for o in 0..outer {
                    gx[(o * len + start) * inner..(o * len + end) * inner]
                        .copy_from_slice(&g[o * width * inner..(o + 1) * width * inner]);
                }
                vec![Some(t(x.shape(), gx))]
            }),
        ))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'g, T>], axis: usize) -> Result<Var<'g, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let values: Vec<Rc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(Error::dim(format!(
                "concat axis {axis} out of range for {base:?}"
            )));
        }
        for v in &values[1..] {
            let s = v.shape();
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::dim(format!(
                    "concat mismatch {base:?} vs {s:?} on axis {axis}"
                )));
            }
        }
        let lens: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let (outer, _, inner) = axis_split(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &l) in values.iter().zip(&lens) {
                data.extend_from_slice(&v.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = total;
        Ok(first.graph().record(
            t(&shape, data),
            parts,
            Box::new(move |args: &BackwardArgs<T>| {
                let g = args.grad.data();
                let mut grads: Vec<Vec<T>> = lens
                    .iter()
                    .map(|&l| Vec::with_capacity(outer * l * inner))
                    .collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (gv, &l) in grads.iter_mut().zip(&lens) {
                        gv.extend_from_slice(&g[off..off + l * inner]);
                        off += l * inner;
                    }
                }
                grads
                    .into_iter()
                    .zip(args.inputs)
                    .map(|(gv, x)| Some(t(x.shape(), gv)))
                    .collect()
            }),
        ))
    }

    /// Gather elements of the flattened tensor at `indices` into a 1-D result.
    pub fn take(self, indices: &[usize]) -> Result<Var<'g, T>> {
        let x = self.value();
        if let Some(&bad) = indices.iter().find(|&&i| i >= x.numel()) {
            return Err(Error::dim(format!(
                "take index {bad} out of range for {} elements",
                x.numel()
            )));
        }
        if indices.is_empty() {
            return Err(Error::dim("take with no indices"));
        }
        let data = indices.iter().map(|&i| x.data()[i]).collect();
        let indices = indices.to_vec();
        Ok(self.graph().record(
            t(&[indices.len()], data),
            &[self],
            Box::new(move |args: &BackwardArgs<T>| {
                let x = &args.inputs[0];
                let mut gx = vec![T::zero(); x.numel()];
                for (&i, &g) in indices.iter().zip(args.grad.data()) {
                    gx[i] += g;
                }
                vec![Some(t(x.shape(), gx))]
            }),
        ))
    }

    /// Batched matrix product `[.., m, k] × [.., k, n]` with broadcast batch axes.
    pub fn matmul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(Error::dim(format!("matmul {sa:?} × {sb:?}")));
        }
        let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch = kernels::broadcast_shape(ba, bb)
            .ok_or_else(|| Error::dim(format!("matmul batch axes {sa:?} × {sb:?}")))?;
        let mut shape = batch.clone();
        shape.extend([m, n]);

        // Weight-style right operand: fold every batch axis of `a` into rows.
        if bb.is_empty() {
            let rows = numel(ba) * m;
            let mut c = vec![T::zero(); rows * n];
            kernels::gemm_nn(a.data(), b.data(), &mut c, rows, k, n);
            return Ok(self.graph().record(
                t(&shape, c),
                &[self, other],
                Box::new(move |args: &BackwardArgs<T>| {
                    let (a, b, g) = (&args.inputs[0], &args.inputs[1], args.grad.data());
                    let ga = args.needs[0].then(|| {
                        let mut ga = vec![T::zero(); a.numel()];
                        kernels::gemm_nt(g, b.data(), &mut ga, rows, n, k);
                        t(a.shape(), ga)
                    });
                    let gb = args.needs[1].then(|| {
                        let mut gb = vec![T::zero(); b.numel()];
                        kernels::gemm_tn(a.data(), g, &mut gb, rows, k, n);
                        t(b.shape(), gb)
                    });
                    vec![ga, gb]
                }),
            ));
        }

        let map_a = kernels::broadcast_index(ba, &batch);
        let map_b = kernels::broadcast_index(bb, &batch);
        let mut c = vec![T::zero(); numel(&batch) * m * n];
        let (ad, bd) = (a.data(), b.data());
        c.par_chunks_mut(m * n).enumerate().for_each(|(i, ci)| {
            kernels::gemm_nn(
                &ad[map_a[i] * m * k..][..m * k],
                &bd[map_b[i] * k * n..][..k * n],
                ci,
                m,
                k,
                n,
            );
        });
        Ok(self.graph().record(
            t(&shape, c),
            &[self, other],
            Box::new(move |args: &BackwardArgs<T>| {
                let (a, b, g) = (&args.inputs[0], &args.inputs[1], args.grad.data());
                let ga = args.needs[0].then(|| {
                    let mut ga = vec![T::zero(); a.numel()];
                    for (i, &ia) in map_a.iter().enumerate() {
                        kernels::gemm_nt(
                            &g[i * m * n..][..m * n],
                            &b.data()[map_b[i] * k * n..][..k * n],
                            &mut ga[ia * m * k..][..m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    t(a.shape(), ga)
                });
                let gb = args.needs[1].then(|| {
                    let mut gb = vec![T::zero(); b.numel()];
                    for (i, &ib) in map_b.iter().enumerate() {
                        kernels::gemm_tn(
                            &a.data()[map_a[i] * m * k..][..m * k],
                            &g[i * m * n..][..m * n],
                            &mut gb[ib * k * n..][..k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    t(b.shape(), gb)
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Var<'g, T> {
        let x = self.value();
        let n = *x.shape().last().expect("tensors have rank >= 1");
        let y = kernels::softmax_rows(x.data(), n);
        self.graph().record(
            t(x.shape(), y),
            &[self],
            Box::new(move |args: &BackwardArgs<T>| {
                let y = args.output.data();
                let g = args.grad.data();
                let mut gx = vec![T::zero(); y.len()];
                for ((yr, gr), dr) in y.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                vec![Some(t(args.output.shape(), gx))]
            }),
        )
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta` of width d.
    pub fn layer_norm(self, gamma: Var<'g, T>, beta: Var<'g, T>, eps: f64) -> Result<Var<'g, T>> {
        let x = self.value();
        let d = *x.shape().last().expect("rank >= 1");
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::dim(format!(
                "layer_norm width {d} vs gamma {:?} beta {:?}",
                gamma.shape(),
                beta.shape()
            )));
        }
        let (gv, bv) = (gamma.value(), beta.value());
        let eps = T::of(eps);
        let inv_d = T::of(1.0 / d as f64);
        let stats = move |row: &[T]| {
            let mean: T = row.iter().copied().sum::<T>() * inv_d;
            let var: T = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            (mean, T::one() / (var + eps).sqrt())
        };
        let mut y = vec![T::zero(); x.numel()];
        for (row, out) in x.data().chunks(d).zip(y.chunks_mut(d)) {
            let (mean, rstd) = stats(row);
            for j in 0..d {
                out[j] = (row[j] - mean) * rstd * gv.data()[j] + bv.data()[j];
            }
        }
        Ok(self.graph().record(
            t(x.shape(), y),
            &[self, gamma, beta],
            Box::new(move |args: &BackwardArgs<T>| {
                let (x, gamma) = (&args.inputs[0], &args.inputs[1]);
                let g = args.grad.data();
                let mut gx = vec![T::zero(); x.numel()];
                let mut gg = vec![T::zero(); d];
                let mut gb = vec![T::zero(); d];
                for ((row, gr), dr) in x.data().chunks(d).zip(g.chunks(d)).zip(gx.chunks_mut(d)) {
                    let (mean, rstd) = stats(row);
                    let mut sum_gy = T::zero();
                    let mut sum_gy_xhat = T::zero();
                    for j in 0..d {
                        let xhat = (row[j] - mean) * rstd;
                        let gy = gr[j] * gamma.data()[j];
                        sum_gy += gy;
                        sum_gy_xhat += gy * xhat;
                        gg[j] += gr[j] * xhat;
                        gb[j] += gr[j];
                    }
                    for j in 0..d {
                        let xhat = (row[j] - mean) * rstd;
                        let gy = gr[j] * gamma.data()[j];
                        dr[j] = rstd * (gy - inv_d * sum_gy - xhat * inv_d * sum_gy_xhat);
                    }
                }
                vec![Some(t(x.shape(), gx)), Some(t(&[d], gg)), Some(t(&[d], gb))]
            }),
        ))
    }

    /// Batch normalization of `[B, d]` features. In train mode the batch
    /// statistics normalize the output and the updated running statistics are
    /// returned; eval mode uses `stats` as-is.
    pub fn batch_norm_1d(
        self,
        gamma: Var<'g, T>,
        beta: Var<'g, T>,
        stats: &RunningStats<T>,
        mode: BnMode,
        momentum: f64,
        eps: f64,
    ) -> Result<(Var<'g, T>, Option<RunningStats<T>>)> {
        let x = self.value();
        let [b, d] = x.shape() else {
            return Err(Error::dim(format!(
                "batch_norm_1d expects [B, d], got {:?}",
                x.shape()
            )));
        };
        let (b, d) = (*b, *d);
        if gamma.shape() != [d]
            || beta.shape() != [d]
            || stats.mean.shape() != [d]
            || stats.var.shape() != [d]
        {
            return Err(Error::dim(format!("batch_norm_1d width {d} mismatch")));
        }
        if mode == BnMode::Train && b < 2 {
            return Err(Error::config(format!(
                "batch_norm_1d in train mode needs B >= 2, got {b}"
            )));
        }
        let (gv, bv) = (gamma.value(), beta.value());
        let (mean, var): (Vec<T>, Vec<T>) = match mode {
            BnMode::Eval => (stats.mean.data().to_vec(), stats.var.data().to_vec()),
            BnMode::Train => {
                let inv_b = T::of(1.0 / b as f64);
                let mean: Vec<T> = (0..d)
                    .map(|j| (0..b).map(|i| x.data()[i * d + j]).sum::<T>() * inv_b)
                    .collect();
                let var = (0..d)
                    .map(|j| {
                        (0..b)
                            .map(|i| (x.data()[i * d + j] - mean[j]).powi(2))
                            .sum::<T>()
                            * inv_b
                    })
                    .collect();
                (mean, var)
            }
        };
        let eps_t = T::of(eps);
        let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
        let mut y = vec![T::zero(); b * d];
        for i in 0..b {
            for j in 0..d {
                y[i * d + j] =
                    (x.data()[i * d + j] - mean[j]) * rstd[j] * gv.data()[j] + bv.data()[j];
            }
        }
        let updated = (mode == BnMode::Train).then(|| {
            let mom = T::of(momentum);
            let unbias = T::of(b as f64 / (b as f64 - 1.0));
            let keep = T::one() - mom;
            RunningStats {
                mean: t(
                    &[d],
                    (0..d)
                        .map(|j| keep * stats.mean.data()[j] + mom * mean[j])
                        .collect(),
                ),
                var: t(
                    &[d],
                    (0..d)
                        .map(|j| keep * stats.var.data()[j] + mom * var[j] * unbias)
                        .collect(),
                ),
            }
        });
        let out = self.graph().record(
            t(&[b, d], y),
            &[self, gamma, beta],
            Box::new(move |args: &BackwardArgs<T>| {
                let (x, gamma) = (&args.inputs[0], &args.inputs[1]);
                let g = args.grad.data();
                let mut gx = vec![T::zero(); b * d];
                let mut gg = vec![T::zero(); d];
                let mut gb = vec![T::zero(); d];
                let inv_b = T::of(1.0 / b as f64);
                for j in 0..d {
                    let mut sum_g = T::zero();
                    let mut sum_g_xhat = T::zero();
                    for i in 0..b {
                        let xhat = (x.data()[i * d + j] - mean[j]) * rstd[j];
                        sum_g += g[i * d + j];
                        sum_g_xhat += g[i * d + j] * xhat;
                    }
                    gg[j] = sum_g_xhat;
                    gb[j] = sum_g;
                    let scale = gamma.data()[j] * rstd[j];
                    for i in 0..b {
                        let gi = g[i * d + j];
                        gx[i * d + j] = match mode {
                            BnMode::Eval => scale * gi,
                            BnMode::Train => {
                                let xhat = (x.data()[i * d + j] - mean[j]) * rstd[j];
                                scale * (gi - inv_b * sum_g - xhat * inv_b * sum_g_xhat)
                            }
                        };
                    }
                }
                vec![Some(t(&[b, d], gx)), Some(t(&[d], gg)), Some(t(&[d], gb))]
            }),
        );
        Ok((out, updated))
    }

    /// 2-D cross-correlation of `[B, C, H, W]` input with `[O, C/groups, kh, kw]`
    /// weights and an optional `[O]` bias.
    pub fn conv2d(
        self,
        weight: Var<'g, T>,
        bias: Option<Var<'g, T>>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Var<'g, T>> {
        let (x, w) = (self.value(), weight.value());
        let (&[batch, in_ch, in_h, in_w], &[out_ch, wc, kh, kw]) = (x.shape(), w.shape()) else {
            return Err(Error::dim(format!(
                "conv2d expects 4-D input and weight, got {:?} and {:?}",
                x.shape(),
                w.shape()
            )));
        };
        if groups == 0 || in_ch % groups != 0 || out_ch % groups != 0 || wc * groups != in_ch {
            return Err(Error::dim(format!(
                "conv2d channels: input {in_ch}, weight {:?}, groups {groups}",
                w.shape()
            )));
        }
        let geom = ConvGeom {
            batch,
            in_ch,
            in_h,
            in_w,
            out_ch,
            kh,
            kw,
            stride,
            pad,
            groups,
        };
        let (Some(oh), Some(ow)) = (
            ConvGeom::out_extent(in_h, kh, stride, pad),
            ConvGeom::out_extent(in_w, kw, stride, pad),
        ) else {
            return Err(Error::config(format!(
                "conv2d output extent nonpositive: input {in_h}x{in_w}, kernel {kh}x{kw}, stride {stride}, pad {pad}"
            )));
        };
        let mut y = kernels::conv2d_forward(x.data(), w.data(), &geom);
        let mut inputs = vec![self, weight];
        if let Some(bias) = bias {
            let bv = bias.value();
            if bv.shape() != [out_ch] {
                return Err(Error::dim(format!(
                    "conv2d bias {:?} for {out_ch} channels",
                    bv.shape()
                )));
            }
            for (i, plane) in y.chunks_mut(oh * ow).enumerate() {
                let bo = bv.data()[i % out_ch];
                plane.iter_mut().for_each(|v| *v += bo);
            }
            inputs.push(bias);
        }
        Ok(self.graph().record(
            t(&[batch, out_ch, oh, ow], y),
            &inputs,
            Box::new(move |args: &BackwardArgs<T>| {
                let (x, w, g) = (&args.inputs[0], &args.inputs[1], args.grad.data());
                let mut out = vec![
                    args.needs[0].then(|| {
                        t(
                            x.shape(),
                            kernels::conv2d_backward_input(g, w.data(), &geom),
                        )
                    }),
                    args.needs[1].then(|| {
                        t(
                            w.shape(),
                            kernels::conv2d_backward_weight(g, x.data(), &geom),
                        )
                    }),
                ];
                if args.inputs.len() == 3 {
                    let mut gb = vec![T::zero(); out_ch];
                    for (i, plane) in g.chunks(oh * ow).enumerate() {
                        gb[i % out_ch] += plane.iter().copied().sum::<T>();
                    }
                    out.push(Some(t(&[out_ch], gb)));
                }
                out
            }),
        ))
    }

    /// Bilinear interpolation of `[B, C, H, W]` at real `(y, x)` positions
    /// `[B, P, 2]`, giving `[B, C, P]`. Grid points outside the input count as zero.
    pub fn bilinear_sample(self, coords: Var<'g, T>) -> Result<Var<'g, T>> {
        let (x, c) = (self.value(), coords.value());
        let (&[batch, ch, h, w], &[cb, p, two]) = (x.shape(), c.shape()) else {
            return Err(Error::dim(format!(
                "bilinear_sample expects [B,C,H,W] and [B,P,2], got {:?} and {:?}",
                x.shape(),
                c.shape()
            )));
        };
        if cb != batch || two != 2 {
            return Err(Error::dim(format!(
                "bilinear_sample coords {:?} for input {:?}",
                c.shape(),
                x.shape()
            )));
        }
        let taps_of = move |c: &Tensor<T>, bi: usize, pi: usize| {
            let base = (bi * p + pi) * 2;
            kernels::bilinear_taps(c.data()[base].f64(), c.data()[base + 1].f64(), h, w)
        };
        let mut y = vec![T::zero(); batch * ch * p];
        for bi in 0..batch {
            for pi in 0..p {
                let taps = taps_of(&c, bi, pi);
                for chi in 0..ch {
                    let plane = &x.data()[(bi * ch + chi) * h * w..][..h * w];
                    let mut acc = T::zero();
                    for (at, wt) in taps {
                        if let Some(at) = at {
                            acc += T::of(wt) * plane[at];
                        }
                    }
                    y[(bi * ch + chi) * p + pi] = acc;
                }
            }
        }
        Ok(self.graph().record(
            t(&[batch, ch, p], y),
            &[self, coords],
            Box::new(move |args: &BackwardArgs<T>| {
                let (x, c, g) = (&args.inputs[0], &args.inputs[1], args.grad.data());
                let mut gx = args.needs[0].then(|| vec![T::zero(); x.numel()]);
                let mut gc = args.needs[1].then(|| vec![T::zero(); c.numel()]);
                for bi in 0..batch {
                    for pi in 0..p {
                        let base = (bi * p + pi) * 2;
                        let (yy, xx) = (c.data()[base].f64(), c.data()[base + 1].f64());
                        let taps = kernels::bilinear_taps(yy, xx, h, w);
                        let (fy, fx) = (yy - yy.floor(), xx - xx.floor());
                        // d(weight)/dy and d(weight)/dx for the four corners.
                        let dwy = [-(1.0 - fx), -fx, 1.0 - fx, fx];
                        let dwx = [-(1.0 - fy), 1.0 - fy, -fy, fy];
                        let (mut sy, mut sx) = (T::zero(), T::zero());
                        for chi in 0..ch {
                            let gv = g[(bi * ch + chi) * p + pi];
                            let off = (bi * ch + chi) * h * w;
                            for (k, (at, wt)) in taps.iter().enumerate() {
                                let Some(at) = *at else { continue };
                                if let Some(gx) = gx.as_mut() {
                                    gx[off + at] += T::of(*wt) * gv;
                                }
                                let v = x.data()[off + at] * gv;
                                sy += T::of(dwy[k]) * v;
                                sx += T::of(dwx[k]) * v;
                            }
                        }
                        if let Some(gc) = gc.as_mut() {
                            gc[base] += sy;
                            gc[base + 1] += sx;
                        }
                    }
                }
                vec![gx.map(|d| t(x.shape(), d)), gc.map(|d| t(c.shape(), d))]
            }),
        ))
    }

    /// Nearest-neighbor upsampling of `[B, C, h, w]` to `[B, C, H, W]`; output
    /// row `i` copies source row `floor(i·h/H)`, likewise for columns.
    pub fn upsample_nearest(self, target_h: usize, target_w: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let &[batch, ch, h, w] = x.shape() else {
            return Err(Error::dim(format!(
                "upsample expects [B,C,h,w], got {:?}",
                x.shape()
            )));
        };
        if target_h < h || target_w < w {
            return Err(Error::config(format!(
                "upsample target {target_h}x{target_w} smaller than source {h}x{w}"
            )));
        }
        let rows = kernels::nearest_index_map(h, target_h);
        let cols = kernels::nearest_index_map(w, target_w);
        let planes = batch * ch;
        let mut y = Vec::with_capacity(planes * target_h * target_w);
        for pl in 0..planes {
            let src = &x.data()[pl * h * w..][..h * w];
            for &r in &rows {
                y.extend(cols.iter().map(|&c| src[r * w + c]));
            }
        }
        Ok(self.graph().record(
            t(&[batch, ch, target_h, target_w], y),
            &[self],
            Box::new(move |args: &BackwardArgs<T>| {
                let g = args.grad.data();
                let mut gx = vec![T::zero(); planes * h * w];
                for pl in 0..planes {
                    for (i, &r) in rows.iter().enumerate() {
                        for (j, &c) in cols.iter().enumerate() {
                            gx[pl * h * w + r * w + c] += g[(pl * target_h + i) * target_w + j];
                        }
                    }
                }
                vec![Some(t(args.inputs[0].shape(), gx))]
            }),
        ))
    }

    /// `k×k` average or max pooling over `[B, C, H, W]`.
    pub fn pool2d(self, k: usize, stride: usize, pad: usize, kind: PoolKind) -> Result<Var<'g, T>> {
        let x = self.value();
        let &[batch, ch, h, w] = x.shape() else {
            return Err(Error::dim(format!(
                "pool2d expects [B,C,H,W], got {:?}",
                x.shape()
            )));
        };
        let (Some(oh), Some(ow)) = (
            ConvGeom::out_extent(h, k, stride, pad),
            ConvGeom::out_extent(w, k, stride, pad),
        ) else {
            return Err(Error::config(format!(
                "pool2d output extent nonpositive for {h}x{w}"
            )));
        };
        if pad >= k {
            return Err(Error::config(
                "pool2d padding must be smaller than the window",
            ));
        }
        let planes = batch * ch;
        let (y, arg) = kernels::pool2d_forward(x.data(), planes, h, w, k, stride, pad, kind);
        Ok(self.graph().record(
            t(&[batch, ch, oh, ow], y),
            &[self],
            Box::new(move |args: &BackwardArgs<T>| {
                let g = args.grad.data();
                let mut gx = vec![T::zero(); planes * h * w];
                for pl in 0..planes {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = g[(pl * oh + oy) * ow + ox];
                            match kind {
                                PoolKind::Max => {
                                    gx[pl * h * w + arg[(pl * oh + oy) * ow + ox]] += gv
                                }
                                PoolKind::Avg => {
                                    let ys = (oy * stride).saturating_sub(pad)
                                        ..(oy * stride + k).saturating_sub(pad).min(h);
                                    let xs = (ox * stride).saturating_sub(pad)
                                        ..(ox * stride + k).saturating_sub(pad).min(w);
                                    let count = T::of((ys.len() * xs.len()) as f64);
                                    for iy in ys {
                                        for ix in xs.clone() {
                                            gx[pl * h * w + iy * w + ix] += gv / count;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                vec![Some(t(args.inputs[0].shape(), gx))]
            }),
        ))
    }

    /// Mean over groups along `axis`: element `l` of the axis contributes to
    /// output slot `map[l]` of `segments`. Every slot must be hit.
    pub fn segment_mean(self, axis: usize, map: &[usize], segments: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        if axis >= x.rank() || map.len() != x.shape()[axis] {
            return Err(Error::dim(format!(
                "segment map of length {} for axis {axis} of {:?}",
                map.len(),
                x.shape()
            )));
        }
        let counts = kernels::segment_counts(
            map.iter()
                .all(|&s| s < segments)
                .then_some(map)
                .ok_or_else(|| Error::dim("segment index out of range"))?,
            segments,
        );
        if counts.iter().any(|&c| c == 0) {
            return Err(Error::dim(format!("empty segment in map {map:?}")));
        }
        let (outer, len, inner) = axis_split(x.shape(), axis);
        let mut y = vec![T::zero(); outer * segments * inner];
        for o in 0..outer {
            for (l, &s) in map.iter().enumerate() {
                let scale = T::of(1.0 / counts[s] as f64);
                let src = &x.data()[(o * len + l) * inner..][..inner];
                for (d, &v) in y[(o * segments + s) * inner..][..inner].iter_mut().zip(src) {
                    *d += v * scale;
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = segments;
        let map = map.to_vec();
        Ok(self.graph().record(
            t(&shape, y),
            &[self],
            Box::new(move |args: &BackwardArgs<T>| {
                let g = args.grad.data();
                let mut gx = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    for &s in &map {
                        let scale = T::of(1.0 / counts[s] as f64);
                        gx.extend(
                            g[(o * segments + s) * inner..][..inner]
                                .iter()
                                .map(|&v| v * scale),
                        );
                    }
                }
                vec![Some(t(args.inputs[0].shape(), gx))]
            }),
        ))
    }

    /// Mean softmax cross-entropy of `[N, C]` logits against integer labels.
    pub fn cross_entropy(self, labels: &[usize]) -> Result<Var<'g, T>> {
        let x = self.value();
        let &[n, c] = x.shape() else {
            return Err(Error::dim(format!(
                "cross_entropy expects [N, C], got {:?}",
                x.shape()
            )));
        };
        if labels.len() != n {
            return Err(Error::dim(format!("{} labels for {n} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::contract(format!(
                "label {bad} outside classifier range 0..{c}"
            )));
        }
        let probs = kernels::softmax_rows(x.data(), c);
        let mut loss = T::zero();
        for (i, &l) in labels.iter().enumerate() {
            let row = &x.data()[i * c..][..c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            loss += lse - row[l];
        }
        loss = loss / T::of(n as f64);
        let labels = labels.to_vec();
        Ok(self.graph().record(
            Tensor::scalar(loss),
            &[self],
            Box::new(move |args: &BackwardArgs<T>| {
                let scale = args.grad.item() / T::of(n as f64);
                let mut gx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    gx[i * c + l] -= scale;
                }
                vec![Some(t(&[n, c], gx))]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;

    fn tensor(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_identity_and_product() {
        let g = Graph::<f64>::new();
        let eye = g.constant(Tensor::eye(2));
        let m = g.constant(tensor(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(eye.matmul(m).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);
        let b = g.constant(tensor(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        assert_eq!(
            m.matmul(b).unwrap().value().data(),
            &[19.0, 22.0, 43.0, 50.0]
        );
        let z = g.constant(Tensor::zeros(&[2, 2]));
        assert!(z
            .matmul(b)
            .unwrap()
            .value()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_shapes() {
        let g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = a.matmul(b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let g = Graph::<f64>::new();
        let s = g.constant(tensor(&[2], &[0.0, 0.0])).softmax();
        assert_eq!(s.value().data(), &[0.5, 0.5]);
        let s = g.constant(tensor(&[3], &[1000.0; 3])).softmax();
        for &v in s.value().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let s = g.constant(tensor(&[2], &[1f64.ln(), 3f64.ln()])).softmax();
        assert!((s.value().data()[0] - 0.25).abs() < 1e-12);
        assert!((s.value().data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_examples() {
        let g = Graph::<f64>::new();
        let ones = g.constant(Tensor::ones(&[2]));
        let zeros = g.constant(Tensor::zeros(&[2]));
        let c = g
            .constant(tensor(&[2], &[5.0, 5.0]))
            .layer_norm(ones, zeros, 1e-5)
            .unwrap();
        assert_eq!(c.value().data(), &[0.0, 0.0]);
        let y = g
            .constant(tensor(&[2], &[1.0, 3.0]))
            .layer_norm(ones, zeros, 1e-12)
            .unwrap();
        assert!(
            (y.value().data()[0] + 1.0).abs() < 1e-9 && (y.value().data()[1] - 1.0).abs() < 1e-9
        );
        let beta = g.constant(tensor(&[2], &[0.7, 0.7]));
        let y = g
            .constant(tensor(&[2], &[1.0, 3.0]))
            .layer_norm(zeros, beta, 1e-5)
            .unwrap();
        assert_eq!(y.value().data(), &[0.7, 0.7]);
    }

    #[test]
    fn conv2d_examples() {
        let g = Graph::<f64>::new();
        let x = g.constant(tensor(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let one = g.constant(Tensor::ones(&[1, 1, 1, 1]));
        assert_eq!(
            x.conv2d(one, None, 1, 0, 1).unwrap().value().data(),
            &[1.0, 2.0, 3.0, 4.0]
        );
        let k = g.constant(Tensor::ones(&[1, 1, 2, 2]));
        let y = x.conv2d(k, None, 2, 0, 1).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 1, 1]);
        assert_eq!(y.value().data(), &[10.0]);
        // Depthwise 3×3 averaging kernel on a constant image keeps the constant.
        let c = g.constant(Tensor::full(&[1, 2, 5, 5], 2.5));
        let avg = g.constant(Tensor::full(&[2, 1, 3, 3], 1.0 / 9.0));
        let y = c.conv2d(avg, None, 1, 0, 2).unwrap();
        assert!(y.value().data().iter().all(|v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn conv2d_rejects_nonpositive_extent() {
        let g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let k = g.constant(Tensor::zeros(&[1, 1, 5, 5]));
        assert!(matches!(x.conv2d(k, None, 1, 0, 1), Err(Error::Config(_))));
        let k = g.constant(Tensor::zeros(&[1, 1, 1, 1]));
        let x3 = g.constant(Tensor::zeros(&[1, 3, 2, 2]));
        assert!(matches!(
            x3.conv2d(k, None, 1, 0, 2),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn bilinear_examples() {
        let g = Graph::<f64>::new();
        let x = g.constant(tensor(&[1, 1, 2, 2], &[2.0, 4.0, 6.0, 8.0]));
        let c = g.constant(tensor(&[1, 3, 2], &[1.0, 0.0, 0.0, 0.5, 40.0, -30.0]));
        let y = x.bilinear_sample(c).unwrap();
        assert_eq!(y.value().data(), &[6.0, 3.0, 0.0]);
    }

    #[test]
    fn upsample_examples() {
        let g = Graph::<f64>::new();
        let x = g.constant(tensor(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = x.upsample_nearest(4, 4).unwrap();
        assert_eq!(
            y.value().data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
        assert_eq!(
            x.upsample_nearest(2, 2).unwrap().value().data(),
            x.value().data()
        );
        let y = x.upsample_nearest(3, 3).unwrap();
        assert_eq!(
            y.value().data(),
            &[1.0, 1.0, 2.0, 1.0, 1.0, 2.0, 3.0, 3.0, 4.0]
        );
        assert!(matches!(x.upsample_nearest(1, 2), Err(Error::Config(_))));
    }

    #[test]
    fn batch_norm_examples() {
        let g = Graph::<f64>::new();
        let ones = g.constant(Tensor::ones(&[1]));
        let zeros = g.constant(Tensor::zeros(&[1]));
        let id = RunningStats::identity(1);
        let x = g.constant(tensor(&[2, 1], &[1.0, 3.0]));
        let (y, upd) = x
            .batch_norm_1d(ones, zeros, &id, BnMode::Train, 0.1, 1e-12)
            .unwrap();
        assert!(
            (y.value().data()[0] + 1.0).abs() < 1e-9 && (y.value().data()[1] - 1.0).abs() < 1e-9
        );
        let upd = upd.unwrap();
        assert!((upd.mean.data()[0] - 0.2).abs() < 1e-12);
        // unbiased batch variance 2.0: 0.9 * 1 + 0.1 * 2
        assert!((upd.var.data()[0] - 1.1).abs() < 1e-12);
        let (y, upd) = x
            .batch_norm_1d(ones, zeros, &id, BnMode::Eval, 0.1, 0.0)
            .unwrap();
        assert_eq!(y.value().data(), &[1.0, 3.0]);
        assert!(upd.is_none());
        let flat = g.constant(tensor(&[2, 1], &[4.0, 4.0]));
        let (y, _) = flat
            .batch_norm_1d(ones, zeros, &id, BnMode::Train, 0.1, 1e-5)
            .unwrap();
        assert!(y.value().all_finite());
        let single = g.constant(tensor(&[1, 1], &[4.0]));
        assert!(matches!(
            single.batch_norm_1d(ones, zeros, &id, BnMode::Train, 0.1, 1e-5),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn backward_on_simple_sums() {
        let g = Graph::<f64>::new();
        let x = g.param(tensor(&[3], &[1.0, -2.0, 0.5]));
        g.backward(x.sum_all()).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1.0, 1.0, 1.0]);
        g.zero_grad();
        g.backward(x.mul(x).unwrap().sum_all()).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_accumulates_and_rejects_non_scalar() {
        let g = Graph::<f64>::new();
        let x = g.param(tensor(&[2], &[1.0, 2.0]));
        let loss = x.sum_all();
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[2.0, 2.0]);
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[3, 5]));
        let ce = x.cross_entropy(&[0, 4, 2]).unwrap();
        assert!((ce.value().item() - 5f64.ln()).abs() < 1e-12);
        assert!(matches!(
            x.cross_entropy(&[0, 5, 1]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn pooling_on_constants() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[1, 2, 5, 4], 1.5));
        for kind in [PoolKind::Avg, PoolKind::Max] {
            let y = x.pool2d(3, 2, 1, kind).unwrap();
            assert_eq!(y.shape(), vec![1, 2, 3, 2]);
            assert!(y.value().data().iter().all(|&v| (v - 1.5).abs() < 1e-12));
        }
    }
}
