//! Block-level examples checked against hand compositions of the nested-loop
//! convolution oracles.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use primek::blocks::{
    sca_forward, DenseBlock, DenseBlockSpec, DenseVariant, Dfg, Gpfca, GpfcaConfig, Gpfn, Gpgu, KernelGroup, Model, ModelConfig,
    Module, NORM_EPS, PRELU_INIT,
};
use primek::complexity::{params_ddb, params_dsddb};
use primek::spectral::{snr_db, SpectroConfig, Stft};
use primek::tensor::conv::ConvSpec;
use primek::tensor::{Tape, Tensor, Var};
use primek::verify::conv_oracle::{naive_conv1d, naive_conv2d};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn run(f: impl Fn(&Tape, &Var) -> primek::Result<Var>, x: &Tensor) -> Tensor {
    let tape = Tape::inference();
    f(&tape, &tape.input(x.clone())).unwrap().value().clone()
}

fn mul(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::new(a.shape(), a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect()).unwrap()
}

/// Channel-axis concatenation of `[B, C_i, T]` tensors.
fn concat_channels(parts: &[Tensor]) -> Tensor {
    let (b, t) = (parts[0].shape()[0], parts[0].shape()[2]);
    let c: usize = parts.iter().map(|p| p.shape()[1]).sum();
    let mut out = Vec::with_capacity(b * c * t);
    for n in 0..b {
        for p in parts {
            let plane = p.shape()[1] * t;
            out.extend_from_slice(&p.data()[n * plane..(n + 1) * plane]);
        }
    }
    Tensor::new(&[b, c, t], out).unwrap()
}

/// Channel range `[from, to)` of a `[B, C, T]` tensor.
fn channels(x: &Tensor, from: usize, to: usize) -> Tensor {
    let (b, c, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Vec::new();
    for n in 0..b {
        out.extend_from_slice(&x.data()[(n * c + from) * t..(n * c + to) * t]);
    }
    Tensor::new(&[b, to - from, t], out).unwrap()
}

fn conv1d_of(conv: &primek::blocks::Conv, x: &Tensor) -> Tensor {
    naive_conv1d(x, &conv.weight.value, conv.bias.as_ref().map(|b| &b.value), &conv.spec)
}

fn dfg_oracle(dfg: &Dfg, x: &Tensor) -> Tensor {
    let g = conv1d_of(&dfg.gate_dwc, x);
    let gate = conv1d_of(&dfg.pwc, &g);
    let value = match &dfg.value_dwc {
        Some(v) => conv1d_of(v, x),
        None => g,
    };
    mul(&gate, &value)
}

fn delta(kernel: usize) -> Vec<f64> {
    (0..kernel).map(|i| if i == kernel / 2 { 1.0 } else { 0.0 }).collect()
}

/// Delta depthwise kernels, identity pointwise mixing, zero biases.
fn make_square(dfg: &mut Dfg) {
    let c = dfg.pwc.spec.in_channels;
    let k = dfg.kernel;
    let deltas: Vec<f64> = (0..c).flat_map(|_| delta(k)).collect();
    dfg.gate_dwc.weight.value = Tensor::new(&[c, 1, k], deltas.clone()).unwrap();
    if let Some(v) = &mut dfg.value_dwc {
        v.weight.value = Tensor::new(&[c, 1, k], deltas).unwrap();
    }
    let eye: Vec<f64> = (0..c * c).map(|i| if i / c == i % c { 1.0 } else { 0.0 }).collect();
    dfg.pwc.weight.value = Tensor::new(&[c, c, 1], eye).unwrap();
    zero_biases(dfg);
}

fn zero_biases(m: &mut impl Module) {
    for p in m.params_mut() {
        if p.name.ends_with(".bias") {
            p.value = Tensor::zeros(p.value.shape());
        }
    }
}

fn square(x: &Tensor) -> Tensor {
    x.map(|v| v * v)
}

#[test]
fn sca_identity_mixing_squares_constant_channels() {
    let (b, c, t) = (2, 3, 5);
    let vals = [0.5, -2.0, 3.0];
    let x = Tensor::new(&[b, c, t], (0..b * c * t).map(|i| vals[(i / t) % c]).collect()).unwrap();
    let eye: Vec<f64> = (0..c * c).map(|i| if i / c == i % c { 1.0 } else { 0.0 }).collect();
    let w = Var::constant(Tensor::new(&[c, c, 1], eye).unwrap());
    let bias = Var::constant(Tensor::zeros(&[c]));
    let y = sca_forward(&Var::constant(x.clone()), &w, Some(&bias)).unwrap();
    assert!(y.value().max_abs_diff(&square(&x)) < 1e-15);

    let zero = Var::constant(Tensor::zeros(&[c, c, 1]));
    let y = sca_forward(&Var::constant(x), &zero, Some(&bias)).unwrap();
    assert!(y.value().data().iter().all(|&v| v == 0.0));
}

#[test]
fn sca_matches_pool_mix_multiply() {
    let mut r = rng(1);
    let (b, c, t) = (2, 4, 8);
    let x = Tensor::randn(&[b, c, t], 1.0, &mut r);
    let w = Tensor::randn(&[c, c, 1], 1.0, &mut r);
    let bias = Tensor::randn(&[c], 1.0, &mut r);
    let got = sca_forward(&Var::constant(x.clone()), &Var::constant(w.clone()), Some(&Var::constant(bias.clone()))).unwrap();
    let mut want = vec![0.0; b * c * t];
    for n in 0..b {
        let pooled: Vec<f64> = (0..c)
            .map(|ch| x.data()[(n * c + ch) * t..(n * c + ch + 1) * t].iter().sum::<f64>() / t as f64)
            .collect();
        for o in 0..c {
            let s = bias.data()[o] + (0..c).map(|i| w.data()[o * c + i] * pooled[i]).sum::<f64>();
            for j in 0..t {
                want[(n * c + o) * t + j] = x.data()[(n * c + o) * t + j] * s;
            }
        }
    }
    assert!(got.value().max_abs_diff(&Tensor::new(&[b, c, t], want).unwrap()) < 1e-12);
    assert!(sca_forward(&Var::constant(x), &Var::constant(Tensor::zeros(&[3, 3, 1])), None).is_err());
}

#[test]
fn dfg_examples() {
    let mut r = rng(2);
    let mut dfg = Dfg::new("dfg", 2, 3, false, &mut r).unwrap();
    let x = Tensor::randn(&[1, 2, 12], 1.0, &mut r);
    let got = run(|tape, v| dfg.forward(tape, v), &x);
    assert!(got.max_abs_diff(&dfg_oracle(&dfg, &x)) < 1e-12);

    make_square(&mut dfg);
    assert!(run(|tape, v| dfg.forward(tape, v), &x).max_abs_diff(&square(&x)) < 1e-15);
    let zero = Tensor::zeros(&[1, 2, 12]);
    assert!(run(|tape, v| dfg.forward(tape, v), &zero).data().iter().all(|&v| v == 0.0));

    assert!(Dfg::new("even", 2, 4, false, &mut r).is_err());
}

#[test]
fn dfg_shared_depthwise_uses_one_layer() {
    let mut r = rng(3);
    let dfg = Dfg::new("dfg", 3, 5, true, &mut r).unwrap();
    assert!(dfg.value_dwc.is_none());
    let x = Tensor::randn(&[2, 3, 9], 1.0, &mut r);
    assert!(run(|tape, v| dfg.forward(tape, v), &x).max_abs_diff(&dfg_oracle(&dfg, &x)) < 1e-12);
}

#[test]
fn dfg_sign_symmetry() {
    let mut r = rng(4);
    let mut dfg = Dfg::new("dfg", 3, 11, false, &mut r).unwrap();
    dfg.gate_dwc.bias.as_mut().unwrap().value = Tensor::zeros(&[3]);
    dfg.value_dwc.as_mut().unwrap().bias.as_mut().unwrap().value = Tensor::zeros(&[3]);
    let x = Tensor::randn(&[2, 3, 20], 1.0, &mut r);
    let before = run(|tape, v| dfg.forward(tape, v), &x);
    for conv in [&mut dfg.gate_dwc, dfg.value_dwc.as_mut().unwrap()] {
        conv.weight.value = conv.weight.value.map(|v| -v);
    }
    let after = run(|tape, v| dfg.forward(tape, v), &x.map(|v| -v));
    assert!(before.max_abs_diff(&after) < 1e-12);
}

#[test]
fn gpgu_examples() {
    let mut r = rng(5);
    let mut gpgu = Gpgu::new("gpgu", 8, KernelGroup::default(), false, &mut r).unwrap();
    let x = Tensor::randn(&[2, 8, 40], 1.0, &mut r);
    let parts: Vec<Tensor> = gpgu.groups.iter().enumerate().map(|(i, g)| dfg_oracle(g, &channels(&x, 2 * i, 2 * i + 2))).collect();
    let got = run(|tape, v| gpgu.forward(tape, v), &x);
    assert!(got.max_abs_diff(&concat_channels(&parts)) < 1e-12);
    assert_eq!(gpgu.groups.iter().map(|g| g.kernel).collect::<Vec<_>>(), vec![3, 11, 23, 31]);

    gpgu.groups.iter_mut().for_each(make_square);
    assert!(run(|tape, v| gpgu.forward(tape, v), &x).max_abs_diff(&square(&x)) < 1e-15);
    let zero = Tensor::zeros(&[2, 8, 40]);
    assert!(run(|tape, v| gpgu.forward(tape, v), &zero).data().iter().all(|&v| v == 0.0));

    assert!(Gpgu::new("odd", 6, KernelGroup::default(), false, &mut r).is_err());
    assert!(Gpgu::new("even", 8, KernelGroup([3, 5, 8, 9]), false, &mut r).is_err());
}

#[test]
fn gpgu_kernel_order_matters() {
    let x = Tensor::randn(&[1, 8, 64], 1.0, &mut rng(6));
    let out = |k: [usize; 4]| {
        let gpgu = Gpgu::new("gpgu", 8, KernelGroup(k), false, &mut rng(7)).unwrap();
        run(|tape, v| gpgu.forward(tape, v), &x)
    };
    assert!(out([3, 11, 23, 31]).max_abs_diff(&out([31, 23, 11, 3])) > 1e-3);
}

#[test]
fn gpfn_examples() {
    let mut r = rng(8);
    let cfg = GpfcaConfig { channels: 4, ffn_expansion: 2, ..Default::default() };
    let mut gpfn = Gpfn::new("gpfn", &cfg, &mut r).unwrap();
    let x = Tensor::randn(&[2, 4, 33], 1.0, &mut r);
    let h = conv1d_of(&gpfn.expand, &x);
    let parts: Vec<Tensor> = gpfn.gpgu.groups.iter().enumerate().map(|(i, g)| dfg_oracle(g, &channels(&h, 2 * i, 2 * i + 2))).collect();
    let want = conv1d_of(&gpfn.compress, &concat_channels(&parts));
    assert!(run(|tape, v| gpfn.forward(tape, v), &x).max_abs_diff(&want) < 1e-12);

    zero_biases(&mut gpfn);
    let zero = Tensor::zeros(&[2, 4, 33]);
    assert!(run(|tape, v| gpfn.forward(tape, v), &zero).data().iter().all(|&v| v == 0.0));

    let cfg = GpfcaConfig { channels: 4, ffn_expansion: 1, ..Default::default() };
    let mut gpfn = Gpfn::new("gpfn", &cfg, &mut r).unwrap();
    let eye: Vec<f64> = (0..16).map(|i| if i / 4 == i % 4 { 1.0 } else { 0.0 }).collect();
    gpfn.expand.weight.value = Tensor::new(&[4, 4, 1], eye.clone()).unwrap();
    gpfn.compress.weight.value = Tensor::new(&[4, 4, 1], eye).unwrap();
    zero_biases(&mut gpfn);
    gpfn.gpgu.groups.iter_mut().for_each(make_square);
    assert!(run(|tape, v| gpfn.forward(tape, v), &x).max_abs_diff(&square(&x)) < 1e-15);

    let bad = GpfcaConfig { channels: 6, ffn_expansion: 1, ..Default::default() };
    assert!(Gpfn::new("bad", &bad, &mut r).is_err());
}

#[test]
fn gpfca_with_zero_scales_is_identity() {
    let mut r = rng(9);
    let cfg = GpfcaConfig { channels: 8, ..Default::default() };
    let mut block = Gpfca::new("gpfca", &cfg, &mut r).unwrap();
    let x = Tensor::randn(&[2, 8, 50], 1.0, &mut r);
    assert_eq!(run(|tape, v| block.forward(tape, v), &x), x);

    for p in block.params_mut() {
        p.value = Tensor::zeros(p.value.shape());
    }
    assert_eq!(run(|tape, v| block.forward(tape, v), &x), x);

    block.randomize(0.5, &mut r);
    assert!(run(|tape, v| block.forward(tape, v), &x).max_abs_diff(&x) > 1e-3);
}

/// Instance norm over each `(b, c)` map with unit gain and zero shift, then
/// the initial activation slope.
fn norm_act(x: &Tensor) -> Tensor {
    let plane: usize = x.shape()[2..].iter().product();
    let mut out = Vec::with_capacity(x.numel());
    for map in x.data().chunks(plane) {
        let mean = map.iter().sum::<f64>() / plane as f64;
        let var = map.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / plane as f64;
        out.extend(map.iter().map(|v| {
            let y = (v - mean) / (var + NORM_EPS).sqrt();
            if y >= 0.0 {
                y
            } else {
                PRELU_INIT * y
            }
        }));
    }
    Tensor::new(x.shape(), out).unwrap()
}

#[test]
fn single_layer_ddb_is_one_dilated_conv() {
    let mut r = rng(10);
    let mut spec = DenseBlockSpec::new(1, 3, 3, DenseVariant::Ddb);
    spec.dilations = vec![2];
    let block = DenseBlock::new("ddb", &spec, &mut r).unwrap();
    let x = Tensor::randn(&[2, 3, 9, 7], 1.0, &mut r);
    let conv = &block.layers[0].conv;
    assert_eq!(conv.spec, ConvSpec::conv2d(3, 3, [3, 3], [2, 1], 1));
    let want = norm_act(&naive_conv2d(&x, &conv.weight.value, Some(&conv.bias.as_ref().unwrap().value), &conv.spec));
    assert!(run(|tape, v| block.forward(tape, v), &x).max_abs_diff(&want) < 1e-12);
}

#[test]
fn dense_blocks_match_composed_oracles() {
    let mut r = rng(11);
    for variant in [DenseVariant::Ddb, DenseVariant::Dsddb] {
        let block = DenseBlock::new("dense", &DenseBlockSpec::new(3, 2, 3, variant), &mut r).unwrap();
        let x = Tensor::randn(&[1, 2, 10, 6], 1.0, &mut r);
        let mut features = vec![x.clone()];
        for layer in &block.layers {
            let (b, t, f) = (1, 10, 6);
            let c: usize = features.iter().map(|p| p.shape()[1]).sum();
            let mut cat = Vec::with_capacity(b * c * t * f);
            for p in &features {
                cat.extend_from_slice(p.data());
            }
            let mut h = Tensor::new(&[b, c, t, f], cat).unwrap();
            let conv2 = |conv: &primek::blocks::Conv, h: &Tensor| {
                naive_conv2d(h, &conv.weight.value, conv.bias.as_ref().map(|p| &p.value), &conv.spec)
            };
            if let Some(dw) = &layer.depthwise {
                h = conv2(dw, &h);
            }
            features.push(norm_act(&conv2(&layer.conv, &h)));
        }
        let got = run(|tape, v| block.forward(tape, v), &x);
        assert!(got.max_abs_diff(features.last().unwrap()) < 1e-12, "{variant:?}");
    }
}

#[test]
fn single_layer_dsddb_with_delta_and_identity_passes_input() {
    let mut r = rng(12);
    let mut block = DenseBlock::new("dsddb", &DenseBlockSpec::new(1, 4, 3, DenseVariant::Dsddb), &mut r).unwrap();
    let layer = &mut block.layers[0];
    let dw = layer.depthwise.as_mut().unwrap();
    let k: Vec<f64> = (0..9).map(|i| if i == 4 { 1.0 } else { 0.0 }).collect();
    dw.weight.value = Tensor::new(&[4, 1, 3, 3], k.repeat(4)).unwrap();
    dw.bias.as_mut().unwrap().value = Tensor::zeros(&[4]);
    let eye: Vec<f64> = (0..16).map(|i| if i / 4 == i % 4 { 1.0 } else { 0.0 }).collect();
    layer.conv.weight.value = Tensor::new(&[4, 4, 1, 1], eye).unwrap();
    layer.conv.bias.as_mut().unwrap().value = Tensor::zeros(&[4]);
    let x = Tensor::randn(&[1, 4, 6, 5], 1.0, &mut r);
    let tape = Tape::inference();
    let xv = tape.input(x.clone());
    let pre = layer.conv.forward(&tape, &dw_forward(layer, &tape, &xv)).unwrap();
    assert!(pre.value().max_abs_diff(&x) < 1e-15);
    assert!(run(|tape, v| block.forward(tape, v), &x).max_abs_diff(&norm_act(&x)) < 1e-12);
}

fn dw_forward(layer: &primek::blocks::DenseLayer, tape: &Tape, x: &Var) -> Var {
    layer.depthwise.as_ref().unwrap().forward(tape, x).unwrap()
}

#[test]
fn zero_dense_block_outputs_zero() {
    let mut r = rng(13);
    for variant in [DenseVariant::Ddb, DenseVariant::Dsddb] {
        let mut block = DenseBlock::new("dense", &DenseBlockSpec::new(4, 4, 3, variant), &mut r).unwrap();
        for p in block.params_mut().into_iter().filter(|p| p.kind == primek::blocks::ParamKind::ConvWeight || p.name.ends_with(".bias")) {
            p.value = Tensor::zeros(p.value.shape());
        }
        let x = Tensor::randn(&[1, 4, 8, 5], 1.0, &mut r);
        assert!(run(|tape, v| block.forward(tape, v), &x).data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn dense_weight_counts_equal_closed_forms() {
    let mut r = rng(14);
    for n in 1..=4 {
        for c in [8, 16, 64] {
            for k in [3, 5] {
                for variant in [DenseVariant::Ddb, DenseVariant::Dsddb] {
                    let block = DenseBlock::new("d", &DenseBlockSpec::new(n, c, k, variant), &mut r).unwrap();
                    let built: u64 = block
                        .params()
                        .iter()
                        .filter(|p| p.kind == primek::blocks::ParamKind::ConvWeight)
                        .map(|p| p.numel() as u64)
                        .sum();
                    // Hand sums over layers: iC·C·K² and iC·K² + iC·C.
                    let (nn, cc, kk) = (n as u64, c as u64, k as u64);
                    let by_hand: u64 = (1..=nn)
                        .map(|i| match variant {
                            DenseVariant::Ddb => i * cc * cc * kk * kk,
                            DenseVariant::Dsddb => i * cc * kk * kk + i * cc * cc,
                        })
                        .sum();
                    let formula = match variant {
                        DenseVariant::Ddb => params_ddb(nn, cc, kk).unwrap(),
                        DenseVariant::Dsddb => params_dsddb(nn, cc, kk).unwrap(),
                    };
                    assert_eq!((built, formula), (by_hand, by_hand), "{variant:?} n={n} C={c} K={k}");
                }
            }
        }
    }
}

fn assert_bounded(mask: &Tensor, phase: &Tensor, mask_max: f64) {
    assert!(mask.data().iter().all(|&m| m.is_finite() && m >= 0.0 && m <= mask_max));
    assert!(phase.data().iter().all(|&p| p.is_finite() && p > -PI && p <= PI));
}

#[test]
fn full_model_shapes_and_bounds() {
    let cfg = ModelConfig::full();
    let model = Model::new(&cfg, 0).unwrap();
    let mut r = rng(15);
    let magnitude = Tensor::randn(&[1, 201, 321], 1.0, &mut r).map(f64::abs);
    let phase = Tensor::randn(&[1, 201, 321], 2.0, &mut r).map(primek::spectral::wrap_phase);
    let tape = Tape::inference();
    let out = model.forward(&tape, &magnitude, &phase).unwrap();
    assert_eq!(out.mask.shape(), &[1, 201, 321]);
    assert_eq!(out.phase.shape(), &[1, 201, 321]);
    assert_bounded(out.mask.value(), out.phase.value(), cfg.mask_max);
}

#[test]
fn zero_spectrogram_gives_bounded_outputs() {
    let cfg = ModelConfig::tiny();
    let mut model = Model::new(&cfg, 1).unwrap();
    model.randomize(1.0, &mut rng(16));
    let zero = Tensor::zeros(&[2, 9, 12]);
    let out = model.forward(&Tape::inference(), &zero, &zero).unwrap();
    assert_bounded(out.mask.value(), out.phase.value(), cfg.mask_max);
}

#[test]
fn enhance_identity_and_zero_mask() {
    let spectro = SpectroConfig::default();
    let stft = Stft::new(&spectro).unwrap();
    let wave = Tensor::randn(&[2, 8000], 0.3, &mut rng(17));
    let energy = |t: &Tensor| t.data().iter().map(|v| v * v).sum::<f64>();

    let mut model = Model::new(&ModelConfig::tiny(), 2).unwrap();
    model.set_identity_heads().unwrap();
    let out = model.enhance(&stft, &wave).unwrap();
    assert_eq!(out.shape(), wave.shape());
    assert!(snr_db(wave.data(), out.data()) > 60.0);

    model.mask_decoder.out.bias.as_mut().unwrap().value = Tensor::full(&[1], -1e3);
    let out = model.enhance(&stft, &wave).unwrap();
    assert!(energy(&out) < 1e-8 * energy(&wave));
}

#[test]
fn construction_is_seeded() {
    let cfg = ModelConfig::tiny();
    let (a, b, c) = (Model::new(&cfg, 4).unwrap(), Model::new(&cfg, 4).unwrap(), Model::new(&cfg, 5).unwrap());
    assert!(a.params().iter().zip(b.params()).all(|(p, q)| p.value == q.value));
    assert!(a.params().iter().zip(c.params()).any(|(p, q)| p.value != q.value));
}
