//! Differentiable operations on [`Var`].

use std::f64::consts::{PI, TAU};

use super::{numel, Tensor, Var};
use crate::error::{Error, Result};

/// Records which side of each non-smooth point (`abs`, `prelu`, anti-wrap)
/// a forward pass took. Two passes with equal fingerprints evaluated the same
/// smooth branch everywhere, which is what a finite-difference check needs.
pub mod kink_trace {
    use std::cell::Cell;

    thread_local! {
        static STATE: Cell<Option<u64>> = const { Cell::new(None) };
    }

    pub fn start() {
        STATE.with(|s| s.set(Some(0xcbf2_9ce4_8422_2325)));
    }

    /// Stops tracing and returns the fingerprint (0 if tracing was off).
    pub fn finish() -> u64 {
        STATE.with(|s| s.take().unwrap_or(0))
    }

    pub(crate) fn active() -> bool {
        STATE.with(|s| s.get().is_some())
    }

    pub(crate) fn record(bits: impl Iterator<Item = bool>) {
        STATE.with(|s| {
            if let Some(mut h) = s.get() {
                for b in bits {
                    h ^= b as u64 + 1;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
                s.set(Some(h));
            }
        });
    }
}

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::from_parts(shape.to_vec(), data)
}

/// How the second operand of a binary op lines up with the first.
#[derive(Clone, Copy)]
enum Broadcast {
    Same,
    /// Second operand has a trailing singleton axis against extent `inner`.
    Trailing { inner: usize },
}

fn broadcast_kind(a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if a == b {
        return Ok(Broadcast::Same);
    }
    let rank = a.len();
    if rank >= 2 && b.len() == rank && b[rank - 1] == 1 && a[..rank - 1] == b[..rank - 1] {
        return Ok(Broadcast::Trailing { inner: a[rank - 1] });
    }
    for (axis, (&x, &y)) in a.iter().zip(b).enumerate() {
        if x != y && !(axis == rank - 1 && y == 1) {
            return Err(Error::mismatch(format!("axis {axis}"), x, y));
        }
    }
    Err(Error::InvalidShape(format!(
        "operands {a:?} and {b:?} are neither equal nor [.., 1] broadcastable"
    )))
}

fn binary(
    a: &Var,
    b: &Var,
    op: &'static str,
    f: fn(f64, f64) -> f64,
    da: fn(f64, f64) -> f64,
    db: fn(f64, f64) -> f64,
) -> Result<Var> {
    let kind = broadcast_kind(a.shape(), b.shape())?;
    let (av, bv) = (a.value().data(), b.value().data());
    let data: Vec<f64> = match kind {
        Broadcast::Same => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
        Broadcast::Trailing { inner } => av.iter().enumerate().map(|(i, &x)| f(x, bv[i / inner])).collect(),
    };
    let out = tensor(a.shape(), data);
    Ok(Var::from_op(
        op,
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |g, ins, _| {
            let (x, y) = (ins[0].data(), ins[1].data());
            let g = g.data();
            match kind {
                Broadcast::Same => {
                    let ga = g.iter().zip(x.iter().zip(y)).map(|(&g, (&x, &y))| g * da(x, y)).collect();
                    let gb = g.iter().zip(x.iter().zip(y)).map(|(&g, (&x, &y))| g * db(x, y)).collect();
                    vec![Some(tensor(ins[0].shape(), ga)), Some(tensor(ins[1].shape(), gb))]
                }
                Broadcast::Trailing { inner } => {
                    let ga = (0..x.len()).map(|i| g[i] * da(x[i], y[i / inner])).collect();
                    let mut gb = vec![0.0; y.len()];
                    for (i, &gi) in g.iter().enumerate() {
                        gb[i / inner] += gi * db(x[i], y[i / inner]);
                    }
                    vec![Some(tensor(ins[0].shape(), ga)), Some(tensor(ins[1].shape(), gb))]
                }
            }
        }),
    ))
}

fn unary(x: &Var, op: &'static str, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var {
    let out = tensor(x.shape(), x.value().data().iter().map(|&v| f(v)).collect());
    Var::from_op(
        op,
        out,
        vec![x.clone()],
        Box::new(move |g, ins, out| {
            let data = g
                .data()
                .iter()
                .zip(ins[0].data().iter().zip(out.data()))
                .map(|(&g, (&x, &y))| g * df(x, y))
                .collect();
            vec![Some(tensor(g.shape(), data))]
        }),
    )
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn wrap_residual(x: f64) -> f64 {
    x - TAU * (x / TAU).round()
}

/// Splits `shape` around the axis range `[start, end)` into (outer, mid, inner).
fn split3(shape: &[usize], start: usize, end: usize) -> (usize, usize, usize) {
    (numel(&shape[..start]), numel(&shape[start..end]), numel(&shape[end..]))
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let rank = shape.len();
    let in_strides = row_major_strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let inner_n = out_shape[rank - 1];
    let inner_s = src[rank - 1];
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..data.len() / inner_n {
        out.extend((0..inner_n).map(|j| data[off + j * inner_s]));
        let mut ax = rank - 1;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            off += src[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= src[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

fn channel_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::InvalidShape(format!("expected [B, C, ...], got {shape:?}")));
    }
    Ok((shape[0], shape[1], numel(&shape[2..])))
}

impl Var {
    pub fn add(&self, other: &Var) -> Result<Var> {
        binary(self, other, "add", |a, b| a + b, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        binary(self, other, "sub", |a, b| a - b, |_, _| 1.0, |_, _| -1.0)
    }

    /// Hadamard product; `other` may be `[.., 1]` against `[.., T]`.
    pub fn mul(&self, other: &Var) -> Result<Var> {
        binary(self, other, "mul", |a, b| a * b, |_, b| b, |a, _| a)
    }

    /// Four-quadrant arctangent of `y / x`, valued in (-pi, pi].
    pub fn atan2(y: &Var, x: &Var) -> Result<Var> {
        if y.shape() != x.shape() {
            return Err(Error::InvalidShape(format!("atan2 operands {:?} vs {:?}", y.shape(), x.shape())));
        }
        binary(
            y,
            x,
            "atan2",
            |y, x| {
                let p = y.atan2(x);
                if p <= -PI {
                    PI
                } else {
                    p
                }
            },
            |y, x| {
                let r2 = x * x + y * y;
                if r2 > 0.0 {
                    x / r2
                } else {
                    0.0
                }
            },
            |y, x| {
                let r2 = x * x + y * y;
                if r2 > 0.0 {
                    -y / r2
                } else {
                    0.0
                }
            },
        )
    }

    pub fn scale(&self, s: f64) -> Var {
        unary(self, "scale", |x| x * s, move |_, _| s)
    }

    pub fn add_scalar(&self, s: f64) -> Var {
        unary(self, "add_scalar", |x| x + s, |_, _| 1.0)
    }

    pub fn neg(&self) -> Var {
        self.scale(-1.0)
    }

    pub fn square(&self) -> Var {
        unary(self, "square", |x| x * x, |x, _| 2.0 * x)
    }

    pub fn abs(&self) -> Var {
        if kink_trace::active() {
            kink_trace::record(self.value().data().iter().map(|&v| v >= 0.0));
        }
        unary(self, "abs", f64::abs, |x, _| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 })
    }

    /// `x^p`; intended for nonnegative inputs.
    pub fn powf(&self, p: f64) -> Var {
        unary(self, "powf", move |x| x.powf(p), move |x, _| if x == 0.0 && p < 1.0 { 0.0 } else { p * x.powf(p - 1.0) })
    }

    pub fn exp(&self) -> Var {
        unary(self, "exp", f64::exp, |_, y| y)
    }

    pub fn sigmoid(&self) -> Var {
        unary(self, "sigmoid", sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(&self) -> Var {
        unary(self, "tanh", f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn gelu(&self) -> Var {
        unary(self, "gelu", gelu, |x, _| gelu_grad(x))
    }

    pub fn cos(&self) -> Var {
        unary(self, "cos", f64::cos, |x, _| -x.sin())
    }

    pub fn sin(&self) -> Var {
        unary(self, "sin", f64::sin, |x, _| x.cos())
    }

    /// `|x - 2 pi round(x / 2 pi)|`: distance to the nearest multiple of 2 pi.
    pub fn anti_wrap(&self) -> Var {
        if kink_trace::active() {
            kink_trace::record(self.value().data().iter().flat_map(|&v| {
                let q = (v / TAU).round();
                [wrap_residual(v) >= 0.0, q as i64 % 2 == 0]
            }));
        }
        unary(self, "anti_wrap", |x| wrap_residual(x).abs(), |x, _| {
            let r = wrap_residual(x);
            if r > 0.0 {
                1.0
            } else if r < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    /// Parametric ReLU with one slope per channel (axis 1) or a single
    /// shared slope of shape `[1]`.
    pub fn prelu(&self, alpha: &Var) -> Result<Var> {
        let (b, c, inner) = channel_dims(self.shape())?;
        let shared = match alpha.shape() {
            [1] => true,
            [n] if *n == c => false,
            other => return Err(Error::InvalidShape(format!("prelu slope {other:?} for {c} channels"))),
        };
        let x = self.value().data();
        let a = alpha.value().data();
        if kink_trace::active() {
            kink_trace::record(x.iter().map(|&v| v > 0.0));
        }
        let chan = move |i: usize| if shared { 0 } else { (i / inner) % c };
        let out = tensor(self.shape(), x.iter().enumerate().map(|(i, &v)| if v > 0.0 { v } else { a[chan(i)] * v }).collect());
        let _ = b;
        Ok(Var::from_op(
            "prelu",
            out,
            vec![self.clone(), alpha.clone()],
            Box::new(move |g, ins, _| {
                let (x, a) = (ins[0].data(), ins[1].data());
                let mut ga = vec![0.0; a.len()];
                let gx = g
                    .data()
                    .iter()
                    .zip(x)
                    .enumerate()
                    .map(|(i, (&g, &x))| {
                        if x > 0.0 {
                            g
                        } else {
                            ga[chan(i)] += g * x;
                            g * a[chan(i)]
                        }
                    })
                    .collect();
                vec![Some(tensor(ins[0].shape(), gx)), Some(tensor(ins[1].shape(), ga))]
            }),
        ))
    }

    pub fn sum(&self) -> Var {
        let out = Tensor::scalar(self.value().sum());
        Var::from_op(
            "sum",
            out,
            vec![self.clone()],
            Box::new(|g, ins, _| vec![Some(Tensor::full(ins[0].shape(), g.item()))]),
        )
    }

    pub fn mean(&self) -> Var {
        let n = self.value().numel() as f64;
        let out = Tensor::scalar(self.value().sum() / n);
        Var::from_op(
            "mean",
            out,
            vec![self.clone()],
            Box::new(move |g, ins, _| vec![Some(Tensor::full(ins[0].shape(), g.item() / n))]),
        )
    }

    /// Forward difference `x[i+1] - x[i]` along `axis`.
    pub fn diff(&self, axis: usize) -> Result<Var> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() || shape[axis] < 2 {
            return Err(Error::InvalidShape(format!("diff along axis {axis} of {shape:?}")));
        }
        let (outer, n, inner) = split3(&shape, axis, axis + 1);
        let x = self.value().data();
        let mut out = Vec::with_capacity(outer * (n - 1) * inner);
        for o in 0..outer {
            for i in 0..n - 1 {
                let lo = (o * n + i) * inner;
                let hi = lo + inner;
                out.extend((0..inner).map(|j| x[hi + j] - x[lo + j]));
            }
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = n - 1;
        Ok(Var::from_op(
            "diff",
            tensor(&out_shape, out),
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let g = g.data();
                let mut gx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for i in 0..n - 1 {
                        let src = (o * (n - 1) + i) * inner;
                        let lo = (o * n + i) * inner;
                        let hi = lo + inner;
                        for j in 0..inner {
                            gx[hi + j] += g[src + j];
                            gx[lo + j] -= g[src + j];
                        }
                    }
                }
                vec![Some(tensor(&shape, gx))]
            }),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value().numel() {
            return Err(Error::mismatch("reshape element count", self.value().numel(), numel(shape)));
        }
        let out = tensor(shape, self.value().data().to_vec());
        Ok(Var::from_op(
            "reshape",
            out,
            vec![self.clone()],
            Box::new(|g, ins, _| vec![Some(tensor(ins[0].shape(), g.data().to_vec()))]),
        ))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var> {
        let rank = self.shape().len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::InvalidShape(format!("{perm:?} is not a permutation of rank {rank}")));
        }
        let (out_shape, data) = permute_data(self.value().data(), self.shape(), perm);
        let mut inverse = vec![0; rank];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        Ok(Var::from_op(
            "permute",
            tensor(&out_shape, data),
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let (shape, data) = permute_data(g.data(), g.shape(), &inverse);
                vec![Some(tensor(&shape, data))]
            }),
        ))
    }

    /// Slice `[start, start + len)` of `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::InvalidShape(format!("narrow({axis}, {start}, {len}) of {shape:?}")));
        }
        let (outer, n, inner) = split3(&shape, axis, axis + 1);
        let x = self.value().data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        Ok(Var::from_op(
            "narrow",
            tensor(&out_shape, out),
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![0.0; outer * n * inner];
                for (o, chunk) in g.data().chunks_exact(len * inner).enumerate() {
                    let base = (o * n + start) * inner;
                    gx[base..base + len * inner].copy_from_slice(chunk);
                }
                vec![Some(tensor(&shape, gx))]
            }),
        ))
    }

    /// Splits the channel axis into `parts` equal contiguous groups.
    pub fn chunk(&self, parts: usize) -> Result<Vec<Var>> {
        let (_, c, _) = channel_dims(self.shape())?;
        if parts == 0 || c % parts != 0 {
            return Err(Error::InvalidShape(format!(
                "cannot chunk C={c} channels into {parts} equal groups"
            )));
        }
        let width = c / parts;
        (0..parts).map(|i| self.narrow(1, i * width, width)).collect()
    }

    /// The four-way channel split of a gated unit.
    pub fn chunk4(&self) -> Result<[Var; 4]> {
        let parts = self.chunk(4)?;
        Ok(parts.try_into().expect("four parts"))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::InvalidShape("concat of nothing".into()))?;
        let shape0 = first.shape();
        if axis >= shape0.len() {
            return Err(Error::InvalidShape(format!("concat axis {axis} for rank {}", shape0.len())));
        }
        for p in parts {
            let s = p.shape();
            if s.len() != shape0.len() {
                return Err(Error::mismatch("rank", shape0.len(), s.len()));
            }
            for (ax, (&a, &b)) in shape0.iter().zip(s).enumerate() {
                if ax != axis && a != b {
                    return Err(Error::mismatch(format!("axis {ax}"), a, b));
                }
            }
        }
        let widths: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = widths.iter().sum();
        let (outer, _, inner) = split3(shape0, axis, axis + 1);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &w) in parts.iter().zip(&widths) {
                let x = p.value().data();
                out.extend_from_slice(&x[o * w * inner..(o + 1) * w * inner]);
            }
        }
        let mut out_shape = shape0.to_vec();
        out_shape[axis] = total;
        Ok(Var::from_op(
            "concat",
            tensor(&out_shape, out),
            parts.to_vec(),
            Box::new(move |g, ins, _| {
                let g = g.data();
                let mut grads: Vec<Vec<f64>> = widths.iter().map(|w| Vec::with_capacity(outer * w * inner)).collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (gi, &w) in grads.iter_mut().zip(&widths) {
                        gi.extend_from_slice(&g[off..off + w * inner]);
                        off += w * inner;
                    }
                }
                grads.into_iter().zip(ins).map(|(d, x)| Some(tensor(x.shape(), d))).collect()
            }),
        ))
    }

    /// Mean over the last axis, keeping it as a singleton.
    pub fn mean_last_axis(&self) -> Result<Var> {
        let shape = self.shape().to_vec();
        let t = *shape.last().ok_or_else(|| Error::InvalidShape("rank-0 pooling".into()))?;
        let out: Vec<f64> = self.value().data().chunks_exact(t).map(|r| r.iter().sum::<f64>() / t as f64).collect();
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = 1;
        Ok(Var::from_op(
            "mean_last_axis",
            tensor(&out_shape, out),
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let data = g.data().iter().flat_map(|&v| std::iter::repeat_n(v / t as f64, t)).collect();
                vec![Some(tensor(&shape, data))]
            }),
        ))
    }

    /// Standardizes over the contiguous axis range `[start, end)`:
    /// zero mean, unit (biased) variance per remaining index.
    pub fn normalize(&self, start: usize, end: usize, eps: f64) -> Result<Var> {
        let shape = self.shape().to_vec();
        if start >= end || end > shape.len() {
            return Err(Error::InvalidShape(format!("normalize axes {start}..{end} of {shape:?}")));
        }
        if eps <= 0.0 {
            return Err(Error::Config(format!("normalization eps must be positive, got {eps}")));
        }
        let (outer, mid, inner) = split3(&shape, start, end);
        let x = self.value().data();
        let mut y = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; outer * inner];
        let m = mid as f64;
        for o in 0..outer {
            let block = &x[o * mid * inner..(o + 1) * mid * inner];
            let mut mean = vec![0.0; inner];
            for row in block.chunks_exact(inner) {
                mean.iter_mut().zip(row).for_each(|(s, &v)| *s += v);
            }
            mean.iter_mut().for_each(|s| *s /= m);
            let mut var = vec![0.0; inner];
            for row in block.chunks_exact(inner) {
                for ((s, &v), &mu) in var.iter_mut().zip(row).zip(&mean) {
                    *s += (v - mu) * (v - mu);
                }
            }
            let r = &mut inv_std[o * inner..(o + 1) * inner];
            for (ri, s) in r.iter_mut().zip(&var) {
                *ri = 1.0 / (s / m + eps).sqrt();
            }
            let out = &mut y[o * mid * inner..(o + 1) * mid * inner];
            for (orow, row) in out.chunks_exact_mut(inner).zip(block.chunks_exact(inner)) {
                for j in 0..inner {
                    orow[j] = (row[j] - mean[j]) * r[j];
                }
            }
        }
        Ok(Var::from_op(
            "normalize",
            tensor(&shape, y),
            vec![self.clone()],
            Box::new(move |g, _, out| {
                let (g, y) = (g.data(), out.data());
                let mut gx = vec![0.0; g.len()];
                for o in 0..outer {
                    let range = o * mid * inner..(o + 1) * mid * inner;
                    let (gb, yb) = (&g[range.clone()], &y[range.clone()]);
                    let mut mg = vec![0.0; inner];
                    let mut mgy = vec![0.0; inner];
                    for (grow, yrow) in gb.chunks_exact(inner).zip(yb.chunks_exact(inner)) {
                        for j in 0..inner {
                            mg[j] += grow[j];
                            mgy[j] += grow[j] * yrow[j];
                        }
                    }
                    let r = &inv_std[o * inner..(o + 1) * inner];
                    let out = &mut gx[range];
                    for ((orow, grow), yrow) in out.chunks_exact_mut(inner).zip(gb.chunks_exact(inner)).zip(yb.chunks_exact(inner)) {
                        for j in 0..inner {
                            orow[j] = r[j] * (grow[j] - mg[j] / m - yrow[j] * mgy[j] / m);
                        }
                    }
                }
                vec![Some(tensor(&shape, gx))]
            }),
        ))
    }

    /// Per-channel `x * scale[c] + shift[c]` on `[B, C, ...]`.
    pub fn channel_affine(&self, scale: Option<&Var>, shift: Option<&Var>) -> Result<Var> {
        let (_, c, inner) = channel_dims(self.shape())?;
        for p in [scale, shift].into_iter().flatten() {
            if p.shape() != [c] {
                return Err(Error::InvalidShape(format!("per-channel parameter {:?} for {c} channels", p.shape())));
            }
        }
        let x = self.value().data();
        let s = scale.map(|v| v.value().data());
        let t = shift.map(|v| v.value().data());
        let out: Vec<f64> = x
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / inner) % c;
                v * s.map_or(1.0, |s| s[ch]) + t.map_or(0.0, |t| t[ch])
            })
            .collect();
        let has_scale = scale.is_some();
        let mut inputs = vec![self.clone()];
        inputs.extend(scale.cloned());
        inputs.extend(shift.cloned());
        Ok(Var::from_op(
            "channel_affine",
            tensor(self.shape(), out),
            inputs,
            Box::new(move |g, ins, _| {
                let g = g.data();
                let x = ins[0].data();
                let mut grads = Vec::with_capacity(ins.len());
                let gx = match has_scale {
                    true => {
                        let s = ins[1].data();
                        g.iter().enumerate().map(|(i, &gi)| gi * s[(i / inner) % c]).collect()
                    }
                    false => g.to_vec(),
                };
                grads.push(Some(tensor(ins[0].shape(), gx)));
                if has_scale {
                    let mut gs = vec![0.0; c];
                    for (i, (&gi, &xi)) in g.iter().zip(x).enumerate() {
                        gs[(i / inner) % c] += gi * xi;
                    }
                    grads.push(Some(tensor(&[c], gs)));
                }
                if ins.len() > 1 + has_scale as usize {
                    let mut gt = vec![0.0; c];
                    for (i, &gi) in g.iter().enumerate() {
                        gt[(i / inner) % c] += gi;
                    }
                    grads.push(Some(tensor(&[c], gt)));
                }
                grads
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Var {
        Var::leaf(Tensor::new(shape, data.to_vec()).unwrap())
    }

    #[test]
    fn identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Var::leaf(Tensor::randn(&[2, 3, 5], 1.0, &mut rng));
        let one = Var::constant(Tensor::full(&[2, 3, 5], 1.0));
        let zero = Var::constant(Tensor::zeros(&[2, 3, 5]));
        assert_eq!(x.mul(&one).unwrap().value(), x.value());
        assert_eq!(x.add(&zero).unwrap().value(), x.value());
    }

    #[test]
    fn trailing_broadcast_matches_tiling() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::randn(&[2, 3, 7], 1.0, &mut rng);
        let b = Tensor::randn(&[2, 3, 1], 1.0, &mut rng);
        let tiled = Tensor::from_fn(&[2, 3, 7], |i| b.data()[i / 7]);
        let got = Var::constant(a.clone()).mul(&Var::constant(b)).unwrap();
        let want: Vec<f64> = a.data().iter().zip(tiled.data()).map(|(x, y)| x * y).collect();
        assert_eq!(got.value().data(), &want[..]);
    }

    #[test]
    fn general_broadcast_is_rejected() {
        let a = Var::constant(Tensor::zeros(&[2, 3, 4]));
        assert!(a.mul(&Var::constant(Tensor::zeros(&[1, 3, 4]))).is_err());
        assert!(a.mul(&Var::constant(Tensor::zeros(&[2, 3]))).is_err());
        let err = a.add(&Var::constant(Tensor::zeros(&[2, 5, 4]))).unwrap_err();
        assert!(err.to_string().contains("axis 1"), "{err}");
    }

    #[test]
    fn activation_fixed_points() {
        let z = t(&[1, 1, 1], &[0.0]);
        let alpha = t(&[1], &[0.25]);
        assert_eq!(z.prelu(&alpha).unwrap().value().item(), 0.0);
        assert_eq!(z.sigmoid().value().item(), 0.5);
        assert_eq!(z.tanh().value().item(), 0.0);
        assert_eq!(z.gelu().value().item(), 0.0);
    }

    #[test]
    fn gelu_matches_erf_reference_grid() {
        // Reference: 0.5 x (1 + erf(x / sqrt 2)) via Abramowitz-Stegun 7.1.26 is too coarse,
        // so compare against a high-order series of the normal CDF instead.
        fn cdf_series(x: f64) -> f64 {
            // Phi(x) = 1/2 + phi(x) * sum x^(2n+1) / (1*3*...*(2n+1))
            let mut term = x;
            let mut sum = x;
            for n in 1..200 {
                term *= x * x / (2 * n + 1) as f64;
                sum += term;
            }
            0.5 + (-0.5 * x * x).exp() / (2.0 * PI).sqrt() * sum
        }
        for i in -40..=40 {
            let x = i as f64 * 0.1;
            let want = x * cdf_series(x);
            assert!((gelu(x) - want).abs() < 1e-13, "x={x}: {} vs {want}", gelu(x));
        }
    }

    #[test]
    fn chunk_groups_channels_in_order() {
        let x = Var::constant(Tensor::from_fn(&[1, 8, 2], |i| (i / 2) as f64));
        let parts = x.chunk4().unwrap();
        for (g, p) in parts.iter().enumerate() {
            assert_eq!(p.shape(), &[1, 2, 2]);
            assert_eq!(p.value().data(), &[(2 * g) as f64, (2 * g) as f64, (2 * g + 1) as f64, (2 * g + 1) as f64]);
        }
        let err = Var::constant(Tensor::zeros(&[1, 6, 2])).chunk4().unwrap_err();
        assert!(err.to_string().contains("C=6"), "{err}");
    }

    #[test]
    fn concat_stacks_and_checks_axes() {
        let a = t(&[1, 1, 3], &[1.0, 2.0, 3.0]);
        let b = t(&[1, 1, 3], &[4.0, 5.0, 6.0]);
        let c = Var::concat(&[a.clone(), b], 1).unwrap();
        assert_eq!(c.shape(), &[1, 2, 3]);
        assert_eq!(c.value().data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let bad = t(&[1, 1, 2], &[0.0, 0.0]);
        assert!(Var::concat(&[a, bad], 1).is_err());
    }

    #[test]
    fn concat_matches_index_map_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let b = rng.random_range(1..4);
            let tt = rng.random_range(1..6);
            let widths: Vec<usize> = (0..rng.random_range(1..4)).map(|_| rng.random_range(1..4)).collect();
            let parts: Vec<Tensor> = widths.iter().map(|&w| Tensor::randn(&[b, w, tt], 1.0, &mut rng)).collect();
            let vars: Vec<Var> = parts.iter().cloned().map(Var::constant).collect();
            let got = Var::concat(&vars, 1).unwrap();
            let total: usize = widths.iter().sum();
            for bi in 0..b {
                let mut c_out = 0;
                for (p, &w) in parts.iter().zip(&widths) {
                    for c in 0..w {
                        for ti in 0..tt {
                            let want = p.data()[(bi * w + c) * tt + ti];
                            let have = got.value().data()[(bi * total + c_out) * tt + ti];
                            assert_eq!(want, have);
                        }
                        c_out += 1;
                    }
                }
            }
        }
    }

    #[test]
    fn pooling_means() {
        let x = t(&[1, 2, 3], &[5.0, 5.0, 5.0, 1.0, 2.0, 3.0]);
        assert_eq!(x.mean_last_axis().unwrap().value().data(), &[5.0, 2.0]);
    }

    #[test]
    fn pooling_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(&[3, 5, 17], 1.0, &mut rng);
        let got = Var::constant(x.clone()).mean_last_axis().unwrap();
        for r in 0..15 {
            let mut s = 0.0;
            for k in 0..17 {
                s += x.data()[r * 17 + k];
            }
            assert!((got.value().data()[r] - s / 17.0).abs() < 1e-15);
        }
    }

    #[test]
    fn normalize_standardizes_and_handles_constants() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[2, 6, 9], 2.0, &mut rng);
        let y = Var::constant(x.clone()).normalize(1, 2, 1e-12).unwrap();
        // Two-pass oracle per (b, t).
        for b in 0..2 {
            for ti in 0..9 {
                let col: Vec<f64> = (0..6).map(|c| x.data()[(b * 6 + c) * 9 + ti]).collect();
                let mean = col.iter().sum::<f64>() / 6.0;
                let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
                for c in 0..6 {
                    let want = (col[c] - mean) / (var + 1e-12).sqrt();
                    assert!((y.value().data()[(b * 6 + c) * 9 + ti] - want).abs() < 1e-10);
                }
            }
        }
        let constant = Var::constant(Tensor::full(&[1, 4, 3], 7.0)).normalize(1, 3, 1e-5).unwrap();
        assert!(constant.value().data().iter().all(|v| v.abs() < 1e-12));

        let standardized = Var::constant(y.value().clone()).normalize(1, 2, 1e-12).unwrap();
        assert!(standardized.value().max_abs_diff(y.value()) < 1e-6);
    }

    #[test]
    fn permute_roundtrip_and_values() {
        let x = Var::constant(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
        let p = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        // p[k, i, j] = x[i, j, k]
        assert_eq!(p.value().data()[(1 * 2 + 1) * 3 + 2], x.value().data()[(1 * 3 + 2) * 4 + 1]);
        let back = p.permute(&[1, 2, 0]).unwrap();
        assert_eq!(back.value(), x.value());
        assert!(x.permute(&[0, 0, 1]).is_err());
    }

    #[test]
    fn diff_and_anti_wrap_values() {
        let x = t(&[1, 3], &[0.0, 1.0, 3.0]);
        assert_eq!(x.diff(1).unwrap().value().data(), &[1.0, 2.0]);
        let w = t(&[3], &[TAU + 0.5, -TAU - 0.25, 3.0 * TAU]).anti_wrap();
        let d = w.value().data();
        assert!((d[0] - 0.5).abs() < 1e-12 && (d[1] - 0.25).abs() < 1e-12 && d[2].abs() < 1e-12);
    }

    #[test]
    fn atan2_stays_in_half_open_range() {
        let y = t(&[3], &[-0.0, 0.0, 1.0]);
        let x = t(&[3], &[-1.0, -1.0, 0.0]);
        let p = Var::atan2(&y, &x).unwrap();
        assert_eq!(p.value().data()[0], PI);
        assert_eq!(p.value().data()[1], PI);
        assert!((p.value().data()[2] - PI / 2.0).abs() < 1e-15);
        let zero = Var::atan2(&t(&[1], &[0.0]), &t(&[1], &[0.0])).unwrap();
        assert_eq!(zero.value().item(), 0.0);
    }

    #[test]
    fn kink_trace_sees_branch_changes() {
        kink_trace::start();
        t(&[2], &[0.5, -0.5]).abs();
        let a = kink_trace::finish();
        kink_trace::start();
        t(&[2], &[0.5, 0.5]).abs();
        let b = kink_trace::finish();
        kink_trace::start();
        t(&[2], &[0.25, -0.75]).abs();
        let c = kink_trace::finish();
        assert_ne!(a, b);
        assert_eq!(a, c);
    }
}
