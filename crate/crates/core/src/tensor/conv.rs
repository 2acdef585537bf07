//! Grouped, dilated, strided convolutions over `[B, C, H, W]` (and `[B, C, T]`
//! through a unit height), plus the transposed form used for upsampling.
//!
//! Every forward call adds `C_out * C_in/g * Kh * Kw * H_out * W_out * B` to a
//! thread-local multiply-accumulate counter, independent of how many taps land
//! in the zero padding.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use super::{Tensor, Var};
use crate::error::{Error, Result};

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
    static WEIGHT_GRAD_FAULT: Cell<bool> = const { Cell::new(false) };
}

/// Multiply-accumulates issued by convolution forwards on this thread.
pub fn mac_count() -> u64 {
    MACS.with(Cell::get)
}

pub fn reset_mac_count() {
    MACS.with(|m| m.set(0));
}

/// Debug hook: corrupts every convolution weight gradient on this thread so
/// that gradient checks can be shown to catch a wrong backward pass.
pub fn set_weight_grad_fault(enabled: bool) {
    WEIGHT_GRAD_FAULT.with(|f| f.set(enabled));
}

fn weight_grad_fault() -> bool {
    WEIGHT_GRAD_FAULT.with(Cell::get)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Padding {
    /// `d * (K - 1) / 2` zeros on each side; odd kernels only.
    Same,
    /// Explicit zeros per side for (height, width).
    Explicit([usize; 2]),
}

/// Hyperparameters of one convolution. One-dimensional convolutions use a unit
/// height: `kernel = [1, K]`, `dilation = [1, d]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 2],
    pub stride: [usize; 2],
    pub dilation: [usize; 2],
    pub groups: usize,
    pub padding: Padding,
}

impl ConvSpec {
    pub fn conv1d(in_channels: usize, out_channels: usize, kernel: usize, dilation: usize, groups: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: [1, kernel],
            stride: [1, 1],
            dilation: [1, dilation],
            groups,
            padding: Padding::Same,
        }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self::conv1d(in_channels, out_channels, 1, 1, 1)
    }

    pub fn depthwise1d(channels: usize, kernel: usize, dilation: usize) -> Self {
        Self::conv1d(channels, channels, kernel, dilation, channels)
    }

    pub fn conv2d(in_channels: usize, out_channels: usize, kernel: [usize; 2], dilation: [usize; 2], groups: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride: [1, 1],
            dilation,
            groups,
            padding: Padding::Same,
        }
    }

    pub fn with_stride(mut self, stride: [usize; 2]) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_padding(mut self, padding: Padding) -> Self {
        self.padding = padding;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.groups;
        if g == 0 || self.in_channels % g != 0 || self.out_channels % g != 0 {
            return Err(Error::Config(format!(
                "groups={g} must divide in_channels={} and out_channels={}",
                self.in_channels, self.out_channels
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.kernel.contains(&0) || self.dilation.contains(&0) || self.stride.contains(&0) {
            return Err(Error::Config(format!(
                "kernel {:?}, dilation {:?} and stride {:?} must be >= 1",
                self.kernel, self.dilation, self.stride
            )));
        }
        if self.padding == Padding::Same && self.kernel.iter().any(|k| k % 2 == 0) {
            return Err(Error::Config(format!("same padding needs odd kernels, got {:?}", self.kernel)));
        }
        Ok(())
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups == self.in_channels && self.groups == self.out_channels
    }

    pub fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1] && self.groups == 1
    }

    pub fn pad(&self) -> [usize; 2] {
        match self.padding {
            Padding::Same => [0, 1].map(|a| self.dilation[a] * (self.kernel[a] - 1) / 2),
            Padding::Explicit(p) => p,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<[usize; 2]> {
        let pad = self.pad();
        let mut out = [0; 2];
        for (a, n) in [h, w].into_iter().enumerate() {
            let span = self.dilation[a] * (self.kernel[a] - 1) + 1;
            let padded = n + 2 * pad[a];
            if padded < span {
                return Err(Error::InvalidShape(format!(
                    "axis {} of length {n} (padded {padded}) is shorter than the kernel span {span}",
                    a + 2
                )));
            }
            out[a] = (padded - span) / self.stride[a] + 1;
        }
        Ok(out)
    }

    /// Grouped weight layout `[C_out, C_in / g, Kh, Kw]`.
    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels / self.groups, self.kernel[0], self.kernel[1]]
    }

    /// One-dimensional weight layout `[C_out, C_in / g, K]`.
    pub fn weight_shape_1d(&self) -> [usize; 3] {
        [self.out_channels, self.in_channels / self.groups, self.kernel[1]]
    }

    pub fn weight_count(&self) -> usize {
        self.weight_shape().iter().product()
    }

    /// Multiply-accumulates for one sample producing `out_positions` outputs.
    pub fn macs_per_sample(&self, out_positions: usize) -> u64 {
        (self.weight_count() * out_positions) as u64
    }
}

/// Resolved loop bounds of one convolution.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Geometry {
    pub b: usize,
    pub ci: usize,
    pub co: usize,
    pub h: usize,
    pub w: usize,
    pub ho: usize,
    pub wo: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub dh: usize,
    pub dw: usize,
    pub ph: usize,
    pub pw: usize,
    pub groups: usize,
}

impl Geometry {
    fn ci_per_g(&self) -> usize {
        self.ci / self.groups
    }

    fn co_per_g(&self) -> usize {
        self.co / self.groups
    }

    fn macs(&self) -> u64 {
        (self.b * self.co * self.ci_per_g() * self.kh * self.kw * self.ho * self.wo) as u64
    }

    fn pointwise_fast(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.groups == 1 && self.sh == 1 && self.sw == 1 && self.ph == 0 && self.pw == 0
    }

    fn w_index(&self, co: usize, cil: usize, ky: usize, kx: usize) -> usize {
        ((co * self.ci_per_g() + cil) * self.kh + ky) * self.kw + kx
    }

    /// Input row for output row `oy` and tap `ky`, if inside the image.
    fn in_row(&self, oy: usize, ky: usize) -> Option<usize> {
        (oy * self.sh + ky * self.dh).checked_sub(self.ph).filter(|&iy| iy < self.h)
    }

    /// Output columns `[lo, hi)` whose tap `kx` lands inside the input row,
    /// and the input column of `lo`.
    fn col_range(&self, kx: usize) -> Option<(usize, usize, usize)> {
        let off = kx * self.dw;
        let lo = if self.pw > off { (self.pw - off).div_ceil(self.sw) } else { 0 };
        if self.w + self.pw < off + 1 {
            return None;
        }
        let hi = ((self.w - 1 + self.pw - off) / self.sw + 1).min(self.wo);
        (lo < hi).then(|| (lo, hi, lo * self.sw + off - self.pw))
    }
}

fn add_bias(y: &mut [f64], bias: &[f64], b: usize, plane: usize) {
    let c = bias.len();
    for bi in 0..b {
        for (co, &bv) in bias.iter().enumerate() {
            y[(bi * c + co) * plane..][..plane].iter_mut().for_each(|v| *v += bv);
        }
    }
}

/// `out[b] = A (m x k) * B_b (k x n)` for every batch, row-major blocks.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], rsa: isize, csa: isize, b: &[f64], rsb: isize, csb: isize, beta: f64, c: &mut [f64]) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: slices cover the strided extents: a is m*k, b is k*n, c is m*n
    // with the strides passed by the callers below.
    unsafe {
        matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

pub(crate) fn forward_kernel(x: &[f64], w: &[f64], g: &Geometry) -> Vec<f64> {
    MACS.with(|m| m.set(m.get() + g.macs()));
    let (in_plane, out_plane) = (g.h * g.w, g.ho * g.wo);
    let mut y = vec![0.0; g.b * g.co * out_plane];
    if g.pointwise_fast() {
        for bi in 0..g.b {
            let xb = &x[bi * g.ci * in_plane..][..g.ci * in_plane];
            let yb = &mut y[bi * g.co * out_plane..][..g.co * out_plane];
            gemm(g.co, g.ci, in_plane, w, g.ci as isize, 1, xb, in_plane as isize, 1, 0.0, yb);
        }
        return y;
    }
    let (cig, cog) = (g.ci_per_g(), g.co_per_g());
    for bi in 0..g.b {
        for co in 0..g.co {
            let grp = co / cog;
            let out = &mut y[(bi * g.co + co) * out_plane..][..out_plane];
            for cil in 0..cig {
                let xp = &x[(bi * g.ci + grp * cig + cil) * in_plane..][..in_plane];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = w[g.w_index(co, cil, ky, kx)];
                        let Some((lo, hi, ix0)) = g.col_range(kx) else { continue };
                        for oy in 0..g.ho {
                            let Some(iy) = g.in_row(oy, ky) else { continue };
                            let xrow = &x_row(xp, iy, g.w);
                            let orow = &mut out[oy * g.wo..(oy + 1) * g.wo];
                            if g.sw == 1 {
                                for (o, &xv) in orow[lo..hi].iter_mut().zip(&xrow[ix0..ix0 + (hi - lo)]) {
                                    *o += wv * xv;
                                }
                            } else {
                                for (j, o) in orow[lo..hi].iter_mut().enumerate() {
                                    *o += wv * xrow[ix0 + j * g.sw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

fn x_row(plane: &[f64], row: usize, width: usize) -> &[f64] {
    &plane[row * width..(row + 1) * width]
}

/// Adjoint of [`forward_kernel`] with respect to the input.
pub(crate) fn input_grad_kernel(gy: &[f64], w: &[f64], g: &Geometry) -> Vec<f64> {
    let (in_plane, out_plane) = (g.h * g.w, g.ho * g.wo);
    let mut gx = vec![0.0; g.b * g.ci * in_plane];
    if g.pointwise_fast() {
        for bi in 0..g.b {
            let gyb = &gy[bi * g.co * out_plane..][..g.co * out_plane];
            let gxb = &mut gx[bi * g.ci * in_plane..][..g.ci * in_plane];
            gemm(g.ci, g.co, in_plane, w, 1, g.ci as isize, gyb, out_plane as isize, 1, 0.0, gxb);
        }
        return gx;
    }
    let (cig, cog) = (g.ci_per_g(), g.co_per_g());
    for bi in 0..g.b {
        for co in 0..g.co {
            let grp = co / cog;
            let gout = &gy[(bi * g.co + co) * out_plane..][..out_plane];
            for cil in 0..cig {
                let gxp = &mut gx[(bi * g.ci + grp * cig + cil) * in_plane..][..in_plane];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = w[g.w_index(co, cil, ky, kx)];
                        let Some((lo, hi, ix0)) = g.col_range(kx) else { continue };
                        for oy in 0..g.ho {
                            let Some(iy) = g.in_row(oy, ky) else { continue };
                            let grow = &gout[oy * g.wo..(oy + 1) * g.wo];
                            let xrow = &mut gxp[iy * g.w..(iy + 1) * g.w];
                            if g.sw == 1 {
                                for (xv, &gv) in xrow[ix0..ix0 + (hi - lo)].iter_mut().zip(&grow[lo..hi]) {
                                    *xv += wv * gv;
                                }
                            } else {
                                for (j, &gv) in grow[lo..hi].iter().enumerate() {
                                    xrow[ix0 + j * g.sw] += wv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Gradient with respect to the weight, given the forward input `x`.
pub(crate) fn weight_grad_kernel(gy: &[f64], x: &[f64], g: &Geometry) -> Vec<f64> {
    let (in_plane, out_plane) = (g.h * g.w, g.ho * g.wo);
    let (cig, cog) = (g.ci_per_g(), g.co_per_g());
    let mut gw = vec![0.0; g.co * cig * g.kh * g.kw];
    if g.pointwise_fast() {
        for bi in 0..g.b {
            let gyb = &gy[bi * g.co * out_plane..][..g.co * out_plane];
            let xb = &x[bi * g.ci * in_plane..][..g.ci * in_plane];
            gemm(g.co, out_plane, g.ci, gyb, out_plane as isize, 1, xb, 1, in_plane as isize, 1.0, &mut gw);
        }
    } else {
        for co in 0..g.co {
            let grp = co / cog;
            for cil in 0..cig {
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let Some((lo, hi, ix0)) = g.col_range(kx) else { continue };
                        let mut acc = 0.0;
                        for bi in 0..g.b {
                            let gout = &gy[(bi * g.co + co) * out_plane..][..out_plane];
                            let xp = &x[(bi * g.ci + grp * cig + cil) * in_plane..][..in_plane];
                            for oy in 0..g.ho {
                                let Some(iy) = g.in_row(oy, ky) else { continue };
                                let grow = &gout[oy * g.wo..(oy + 1) * g.wo];
                                let xrow = x_row(xp, iy, g.w);
                                if g.sw == 1 {
                                    acc += grow[lo..hi].iter().zip(&xrow[ix0..ix0 + (hi - lo)]).map(|(a, b)| a * b).sum::<f64>();
                                } else {
                                    acc += grow[lo..hi].iter().enumerate().map(|(j, a)| a * xrow[ix0 + j * g.sw]).sum::<f64>();
                                }
                            }
                        }
                        gw[g.w_index(co, cil, ky, kx)] = acc;
                    }
                }
            }
        }
    }
    if weight_grad_fault() {
        gw.iter_mut().for_each(|v| *v *= 1.5);
    }
    gw
}

fn bias_grad(gy: &[f64], b: usize, c: usize, plane: usize) -> Vec<f64> {
    let mut gb = vec![0.0; c];
    for bi in 0..b {
        for (co, acc) in gb.iter_mut().enumerate() {
            *acc += gy[(bi * c + co) * plane..][..plane].iter().sum::<f64>();
        }
    }
    gb
}

fn check_dim(axis: &str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::mismatch(axis, expected, got));
    }
    Ok(())
}

fn check_bias(bias: Option<&Var>, channels: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [channels] {
            return Err(Error::InvalidShape(format!("bias {:?} for {channels} output channels", b.shape())));
        }
    }
    Ok(())
}

fn with_bias(mut inputs: Vec<Var>, bias: Option<&Var>) -> Vec<Var> {
    inputs.extend(bias.cloned());
    inputs
}

/// Two-dimensional convolution of `x: [B, C_in, H, W]` with a grouped weight
/// `[C_out, C_in/g, Kh, Kw]`.
pub fn conv2d(x: &Var, weight: &Var, bias: Option<&Var>, spec: &ConvSpec) -> Result<Var> {
    spec.validate()?;
    let &[b, ci, h, w] = x.shape() else {
        return Err(Error::InvalidShape(format!("conv2d input must be [B, C, H, W], got {:?}", x.shape())));
    };
    check_dim("input channels", spec.in_channels, ci)?;
    let ws = spec.weight_shape();
    if weight.shape() != ws {
        return Err(Error::InvalidShape(format!("conv weight {:?}, expected {ws:?}", weight.shape())));
    }
    check_bias(bias, spec.out_channels)?;
    let [ho, wo] = spec.output_size(h, w)?;
    let [ph, pw] = spec.pad();
    let geom = Geometry {
        b,
        ci,
        co: spec.out_channels,
        h,
        w,
        ho,
        wo,
        kh: spec.kernel[0],
        kw: spec.kernel[1],
        sh: spec.stride[0],
        sw: spec.stride[1],
        dh: spec.dilation[0],
        dw: spec.dilation[1],
        ph,
        pw,
        groups: spec.groups,
    };
    let mut y = forward_kernel(x.value().data(), weight.value().data(), &geom);
    if let Some(bv) = bias {
        add_bias(&mut y, bv.value().data(), b, ho * wo);
    }
    let out = Tensor::from_parts(vec![b, geom.co, ho, wo], y);
    Ok(Var::from_op(
        "conv2d",
        out,
        with_bias(vec![x.clone(), weight.clone()], bias),
        Box::new(move |gy, ins, _| {
            let gyd = gy.data();
            let gx = input_grad_kernel(gyd, ins[1].data(), &geom);
            let gw = weight_grad_kernel(gyd, ins[0].data(), &geom);
            let mut grads = vec![
                Some(Tensor::from_parts(ins[0].shape().to_vec(), gx)),
                Some(Tensor::from_parts(ins[1].shape().to_vec(), gw)),
            ];
            if ins.len() == 3 {
                grads.push(Some(Tensor::from_parts(vec![geom.co], bias_grad(gyd, geom.b, geom.co, ho * wo))));
            }
            grads
        }),
    ))
}

/// One-dimensional convolution of `x: [B, C_in, T]` with weight `[C_out, C_in/g, K]`.
pub fn conv1d(x: &Var, weight: &Var, bias: Option<&Var>, spec: &ConvSpec) -> Result<Var> {
    let &[b, c, t] = x.shape() else {
        return Err(Error::InvalidShape(format!("conv1d input must be [B, C, T], got {:?}", x.shape())));
    };
    if spec.kernel[0] != 1 || spec.dilation[0] != 1 || spec.stride[0] != 1 {
        return Err(Error::Config("conv1d spec must have unit height".into()));
    }
    let ws = spec.weight_shape_1d();
    if weight.shape() != ws {
        return Err(Error::InvalidShape(format!("conv1d weight {:?}, expected {ws:?}", weight.shape())));
    }
    let x4 = x.reshape(&[b, c, 1, t])?;
    let w4 = weight.reshape(&spec.weight_shape())?;
    let y = conv2d(&x4, &w4, bias, spec)?;
    let &[_, co, _, to] = y.shape() else { unreachable!() };
    y.reshape(&[b, co, to])
}

/// Transposed convolution of `x: [B, C_in, H, W]` with weight
/// `[C_in, C_out, Kh, Kw]` (groups = 1, dilation = 1) producing spatial size
/// `out_hw`, which must be one the matching forward convolution maps back to
/// `[H, W]`.
pub fn conv_transpose2d(x: &Var, weight: &Var, bias: Option<&Var>, spec: &ConvSpec, out_hw: [usize; 2]) -> Result<Var> {
    spec.validate()?;
    if spec.groups != 1 || spec.dilation != [1, 1] {
        return Err(Error::Config("transposed convolution supports groups=1, dilation=1 only".into()));
    }
    let &[b, ci, h, w] = x.shape() else {
        return Err(Error::InvalidShape(format!("conv_transpose2d input must be [B, C, H, W], got {:?}", x.shape())));
    };
    check_dim("input channels", spec.in_channels, ci)?;
    let ws = [spec.in_channels, spec.out_channels, spec.kernel[0], spec.kernel[1]];
    if weight.shape() != ws {
        return Err(Error::InvalidShape(format!("transposed conv weight {:?}, expected {ws:?}", weight.shape())));
    }
    check_bias(bias, spec.out_channels)?;
    // The adjoint forward convolution maps out_hw back onto [h, w].
    let adjoint = ConvSpec {
        in_channels: spec.out_channels,
        out_channels: spec.in_channels,
        ..*spec
    };
    let back = adjoint.output_size(out_hw[0], out_hw[1])?;
    if back != [h, w] {
        return Err(Error::InvalidShape(format!(
            "output size {out_hw:?} does not invert to input size {:?} (got {back:?})",
            [h, w]
        )));
    }
    let [ph, pw] = adjoint.pad();
    let geom = Geometry {
        b,
        ci: spec.out_channels,
        co: spec.in_channels,
        h: out_hw[0],
        w: out_hw[1],
        ho: h,
        wo: w,
        kh: spec.kernel[0],
        kw: spec.kernel[1],
        sh: spec.stride[0],
        sw: spec.stride[1],
        dh: 1,
        dw: 1,
        ph,
        pw,
        groups: 1,
    };
    MACS.with(|m| m.set(m.get() + geom.macs()));
    let mut y = input_grad_kernel(x.value().data(), weight.value().data(), &geom);
    let plane = out_hw[0] * out_hw[1];
    if let Some(bv) = bias {
        add_bias(&mut y, bv.value().data(), b, plane);
    }
    let out = Tensor::from_parts(vec![b, spec.out_channels, out_hw[0], out_hw[1]], y);
    Ok(Var::from_op(
        "conv_transpose2d",
        out,
        with_bias(vec![x.clone(), weight.clone()], bias),
        Box::new(move |gy, ins, _| {
            let gyd = gy.data();
            let saved = MACS.with(Cell::get);
            let gx = forward_kernel(gyd, ins[1].data(), &geom);
            MACS.with(|m| m.set(saved));
            let gw = weight_grad_kernel(ins[0].data(), gyd, &geom);
            let mut grads = vec![
                Some(Tensor::from_parts(ins[0].shape().to_vec(), gx)),
                Some(Tensor::from_parts(ins[1].shape().to_vec(), gw)),
            ];
            if ins.len() == 3 {
                grads.push(Some(Tensor::from_parts(vec![geom.ci], bias_grad(gyd, geom.b, geom.ci, plane))));
            }
            grads
        }),
    ))
}
