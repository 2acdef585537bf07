//! Convolutions written directly from their defining sums, and the sweep
//! comparing them with the library kernels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::blocks::{Conv, ConvTranspose, DenseBlock, Gpfca, Model, ModelConfig};
use crate::error::Result;
use crate::tensor::conv::{conv1d, conv2d, conv_transpose2d, ConvSpec, Padding};
use crate::tensor::{Tensor, Var};

pub const TOLERANCE: f64 = 1e-12;
pub const PRIME_KERNELS: [usize; 4] = [3, 11, 23, 31];
pub const DILATIONS: [usize; 4] = [1, 2, 4, 8];

/// `y[b, o, i, j] = bias[o] + Σ_{c, p, q} w[o, c, p, q] · x[b, g·Cg + c, i·s - pad + p·d, j·s - pad + q·d]`
/// over in-range input positions, with `g` the group of output channel `o`.
pub fn naive_conv2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, spec: &ConvSpec) -> Tensor {
    let (b, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let co = spec.out_channels;
    let (cig, cog) = (ci / spec.groups, co / spec.groups);
    let [kh, kw] = spec.kernel;
    let pad = match spec.padding {
        Padding::Same => [spec.dilation[0] * (kh - 1) / 2, spec.dilation[1] * (kw - 1) / 2],
        Padding::Explicit(p) => p,
    };
    let out_len = |n: usize, a: usize| (n + 2 * pad[a] - spec.dilation[a] * (spec.kernel[a] - 1) - 1) / spec.stride[a] + 1;
    let (ho, wo) = (out_len(h, 0), out_len(wd, 1));
    let xv = |n: usize, c: usize, i: isize, j: isize| -> f64 {
        if i < 0 || j < 0 || i >= h as isize || j >= wd as isize {
            0.0
        } else {
            x.data()[((n * ci + c) * h + i as usize) * wd + j as usize]
        }
    };
    let mut y = vec![0.0; b * co * ho * wo];
    for n in 0..b {
        for o in 0..co {
            let g = o / cog;
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = bias.map_or(0.0, |bv| bv.data()[o]);
                    for c in 0..cig {
                        for p in 0..kh {
                            for q in 0..kw {
                                let ii = (i * spec.stride[0]) as isize - pad[0] as isize + (p * spec.dilation[0]) as isize;
                                let jj = (j * spec.stride[1]) as isize - pad[1] as isize + (q * spec.dilation[1]) as isize;
                                acc += w.data()[((o * cig + c) * kh + p) * kw + q] * xv(n, g * cig + c, ii, jj);
                            }
                        }
                    }
                    y[((n * co + o) * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    Tensor::new(&[b, co, ho, wo], y).expect("shape matches data")
}

/// One-dimensional case of [`naive_conv2d`] on `[B, C, T]` with weight `[C_out, C_in/g, K]`.
pub fn naive_conv1d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, spec: &ConvSpec) -> Tensor {
    let (b, c, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, cig, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let pad = match spec.padding {
        Padding::Same => spec.dilation[1] * (k - 1) / 2,
        Padding::Explicit(p) => p[1],
    };
    let d = spec.dilation[1];
    let to = (t + 2 * pad - d * (k - 1) - 1) / spec.stride[1] + 1;
    let cog = co / spec.groups;
    let mut y = vec![0.0; b * co * to];
    for n in 0..b {
        for o in 0..co {
            for i in 0..to {
                let mut acc = bias.map_or(0.0, |bv| bv.data()[o]);
                for ch in 0..cig {
                    let cin = (o / cog) * cig + ch;
                    for q in 0..k {
                        let src = (i * spec.stride[1] + q * d) as isize - pad as isize;
                        if src >= 0 && (src as usize) < t {
                            acc += w.data()[(o * cig + ch) * k + q] * x.data()[(n * c + cin) * t + src as usize];
                        }
                    }
                }
                y[(n * co + o) * to + i] = acc;
            }
        }
    }
    Tensor::new(&[b, co, to], y).expect("shape matches data")
}

/// Scatter form of the transposed convolution: every input element adds
/// `x · w[c_in, c_out, p, q]` at output position `(i·s - pad + p, j·s - pad + q)`.
pub fn naive_conv_transpose2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, spec: &ConvSpec, out_hw: [usize; 2]) -> Tensor {
    let (b, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, kh, kw) = (w.shape()[1], w.shape()[2], w.shape()[3]);
    let pad = match spec.padding {
        Padding::Same => [(kh - 1) / 2, (kw - 1) / 2],
        Padding::Explicit(p) => p,
    };
    let [ho, wo] = out_hw;
    let mut y = vec![0.0; b * co * ho * wo];
    for n in 0..b {
        for o in 0..co {
            let base = bias.map_or(0.0, |bv| bv.data()[o]);
            y[(n * co + o) * ho * wo..(n * co + o + 1) * ho * wo].fill(base);
        }
        for c in 0..ci {
            for i in 0..h {
                for j in 0..wd {
                    let xv = x.data()[((n * ci + c) * h + i) * wd + j];
                    for o in 0..co {
                        for p in 0..kh {
                            for q in 0..kw {
                                let oi = (i * spec.stride[0] + p) as isize - pad[0] as isize;
                                let oj = (j * spec.stride[1] + q) as isize - pad[1] as isize;
                                if oi >= 0 && oj >= 0 && (oi as usize) < ho && (oj as usize) < wo {
                                    y[((n * co + o) * ho + oi as usize) * wo + oj as usize] +=
                                        xv * w.data()[((c * co + o) * kh + p) * kw + q];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[b, co, ho, wo], y).expect("shape matches data")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvKind {
    OneD,
    TwoD,
    Transposed,
}

/// One convolution configuration and the layer names that use it.
#[derive(Debug, Clone)]
pub struct ConvUse {
    pub spec: ConvSpec,
    pub kind: ConvKind,
    pub users: Vec<String>,
}

fn push(uses: &mut Vec<ConvUse>, spec: ConvSpec, kind: ConvKind, name: &str) {
    match uses.iter_mut().find(|u| u.spec == spec && u.kind == kind) {
        Some(u) => u.users.push(name.to_string()),
        None => uses.push(ConvUse { spec, kind, users: vec![name.to_string()] }),
    }
}

fn conv(uses: &mut Vec<ConvUse>, c: &Conv) {
    let kind = if c.weight.value.rank() == 3 { ConvKind::OneD } else { ConvKind::TwoD };
    push(uses, c.spec, kind, &c.weight.name);
}

fn transposed(uses: &mut Vec<ConvUse>, c: &ConvTranspose) {
    push(uses, c.spec, ConvKind::Transposed, &c.weight.name);
}

fn dense(uses: &mut Vec<ConvUse>, d: &DenseBlock) {
    for layer in &d.layers {
        if let Some(dw) = &layer.depthwise {
            conv(uses, dw);
        }
        conv(uses, &layer.conv);
    }
}

fn gpfca(uses: &mut Vec<ConvUse>, g: &Gpfca) {
    conv(uses, &g.pw1);
    conv(uses, &g.dw);
    conv(uses, &g.sca.pwc);
    conv(uses, &g.pw2);
    conv(uses, &g.gpfn.expand);
    for dfg in &g.gpfn.gpgu.groups {
        conv(uses, &dfg.gate_dwc);
        conv(uses, &dfg.pwc);
        if let Some(v) = &dfg.value_dwc {
            conv(uses, v);
        }
    }
    conv(uses, &g.gpfn.compress);
}

/// Every distinct convolution configuration inside `model`.
pub fn model_convolutions(model: &Model) -> Vec<ConvUse> {
    let mut uses = Vec::new();
    let e = &model.encoder;
    conv(&mut uses, &e.in_conv);
    dense(&mut uses, &e.dense);
    conv(&mut uses, &e.down);
    for ts in &model.ts_blocks {
        gpfca(&mut uses, &ts.time);
        gpfca(&mut uses, &ts.freq);
    }
    let m = &model.mask_decoder;
    dense(&mut uses, &m.dense);
    transposed(&mut uses, &m.up);
    conv(&mut uses, &m.proj);
    conv(&mut uses, &m.out);
    let p = &model.phase_decoder;
    dense(&mut uses, &p.dense);
    transposed(&mut uses, &p.up);
    conv(&mut uses, &p.real);
    conv(&mut uses, &p.imag);
    uses
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct OracleCase {
    pub label: String,
    pub max_abs_diff: f64,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct OracleReport {
    pub tolerance: f64,
    pub cases: Vec<OracleCase>,
}

impl OracleReport {
    pub fn max_abs_diff(&self) -> f64 {
        self.cases.iter().map(|c| c.max_abs_diff).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        !self.cases.is_empty() && self.max_abs_diff() < self.tolerance
    }

    pub fn failures(&self) -> Vec<&OracleCase> {
        self.cases.iter().filter(|c| !(c.max_abs_diff < self.tolerance)).collect()
    }
}

/// Library output minus oracle output for one random instance.
pub fn compare(spec: &ConvSpec, kind: ConvKind, b: usize, h: usize, w: usize, rng: &mut impl Rng) -> Result<f64> {
    let bias = Tensor::randn(&[spec.out_channels], 1.0, rng);
    let (got, want) = match kind {
        ConvKind::OneD => {
            let x = Tensor::randn(&[b, spec.in_channels, w], 1.0, rng);
            let wt = Tensor::randn(&spec.weight_shape_1d(), 1.0, rng);
            let got = conv1d(&Var::constant(x.clone()), &Var::constant(wt.clone()), Some(&Var::constant(bias.clone())), spec)?;
            (got.value().clone(), naive_conv1d(&x, &wt, Some(&bias), spec))
        }
        ConvKind::TwoD => {
            let x = Tensor::randn(&[b, spec.in_channels, h, w], 1.0, rng);
            let wt = Tensor::randn(&spec.weight_shape(), 1.0, rng);
            let got = conv2d(&Var::constant(x.clone()), &Var::constant(wt.clone()), Some(&Var::constant(bias.clone())), spec)?;
            (got.value().clone(), naive_conv2d(&x, &wt, Some(&bias), spec))
        }
        ConvKind::Transposed => {
            let adjoint = ConvSpec { in_channels: spec.out_channels, out_channels: spec.in_channels, ..*spec };
            let [hi, wi] = adjoint.output_size(h, w)?;
            let x = Tensor::randn(&[b, spec.in_channels, hi, wi], 1.0, rng);
            let wt = Tensor::randn(&[spec.in_channels, spec.out_channels, spec.kernel[0], spec.kernel[1]], 1.0, rng);
            let got = conv_transpose2d(
                &Var::constant(x.clone()),
                &Var::constant(wt.clone()),
                Some(&Var::constant(bias.clone())),
                spec,
                [h, w],
            )?;
            (got.value().clone(), naive_conv_transpose2d(&x, &wt, Some(&bias), spec, [h, w]))
        }
    };
    if got.shape() != want.shape() {
        return Ok(f64::INFINITY);
    }
    Ok(got.max_abs_diff(&want))
}

fn label(spec: &ConvSpec, kind: ConvKind) -> String {
    format!(
        "{kind:?} {}->{} k={:?} d={:?} s={:?} g={} pad={:?}",
        spec.in_channels, spec.out_channels, spec.kernel, spec.dilation, spec.stride, spec.groups, spec.padding
    )
}

/// Randomized shapes over every kernel in `{1} ∪ PRIME_KERNELS` and every
/// dilation in `DILATIONS`, for dense, grouped and depthwise channel layouts.
pub fn sweep_cases(rng: &mut impl Rng) -> Vec<(ConvSpec, ConvKind, [usize; 3])> {
    let mut cases = Vec::new();
    for &k in [1].iter().chain(PRIME_KERNELS.iter()) {
        for &d in &DILATIONS {
            let c = rng.random_range(1..=4);
            let b = rng.random_range(1..=4);
            let (t, f) = (rng.random_range(1..=16), rng.random_range(1..=16));
            let depthwise = rng.random_range(1..=4);
            cases.push((ConvSpec::conv1d(c, rng.random_range(1..=4), k, d, 1), ConvKind::OneD, [b, 1, t]));
            cases.push((ConvSpec::depthwise1d(depthwise, k, d), ConvKind::OneD, [b, 1, t]));
            cases.push((ConvSpec::conv1d(4, 2, k, d, 2), ConvKind::OneD, [b, 1, t]));
            let kh = if k > 11 { 3 } else { k };
            cases.push((ConvSpec::conv2d(c, rng.random_range(1..=4), [kh, k], [d, 1], 1), ConvKind::TwoD, [b, t, f]));
            cases.push((ConvSpec::conv2d(depthwise, depthwise, [kh, k], [1, d], depthwise), ConvKind::TwoD, [b, t, f]));
            cases.push((ConvSpec::conv2d(c, 2, [k, kh], [d, d], 1), ConvKind::TwoD, [b, t, f]));
        }
    }
    let strided = ConvSpec::conv2d(3, 2, [1, 3], [1, 1], 1)
        .with_stride([1, 2])
        .with_padding(Padding::Explicit([0, 1]));
    for f in [3, 4, 9, 16] {
        cases.push((strided, ConvKind::TwoD, [2, 5, f]));
        cases.push((ConvSpec { in_channels: 2, out_channels: 3, ..strided }, ConvKind::Transposed, [2, 5, f]));
    }
    cases
}

/// Runs the randomized sweep plus every convolution of the given models.
pub fn run(models: &[ModelConfig], seed: u64) -> Result<OracleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();
    for (spec, kind, [b, h, w]) in sweep_cases(&mut rng) {
        let diff = compare(&spec, kind, b, h, w, &mut rng)?;
        cases.push(OracleCase { label: label(&spec, kind), max_abs_diff: diff });
    }
    for cfg in models {
        let model = Model::new(cfg, seed)?;
        for u in model_convolutions(&model) {
            let (h, w) = (rng.random_range(4..=12), rng.random_range(5..=16));
            let diff = compare(&u.spec, u.kind, 2, h, w, &mut rng)?;
            cases.push(OracleCase {
                label: format!("{} [{}]", label(&u.spec, u.kind), u.users[0]),
                max_abs_diff: diff,
            });
        }
    }
    Ok(OracleReport { tolerance: TOLERANCE, cases })
}
