//! Central finite-difference checks of reverse-mode gradients.
//!
//! Each draw re-initializes a block with random parameters and inputs, reduces
//! its output to a scalar by a fixed random projection, and compares the
//! analytic gradient against `(L(θ + h) - L(θ - h)) / 2h` at sampled
//! coordinates of every parameter tensor and every input. Coordinates whose
//! perturbation moves any `abs`, `prelu` or anti-wrap evaluation across its
//! kink are resampled, since the difference quotient is not a derivative there.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::blocks::{
    AttentionReference, DenseBlock, DenseBlockSpec, DenseVariant, Dfg, Gpfca, GpfcaConfig, Gpfn, Gpgu, KernelGroup, MaskDecoder,
    Model, ModelConfig, Module, PhaseDecoder, Sca,
};
use crate::error::{Error, Result};
use crate::losses::{objective, LossMode, LossWeights, Targets};
use crate::spectral::{SpectroConfig, Stft};
use crate::tensor::conv::set_weight_grad_fault;
use crate::tensor::kink_trace;
use crate::tensor::{Tape, Tensor, Var};

pub const THRESHOLD: f64 = 1e-4;
pub const DEFAULT_DRAWS: usize = 20;
/// Gradients smaller than `GRAD_FLOOR * max(1, S)`, with `S` the sum of the
/// absolute projected output terms, are compared in absolute terms: difference
/// quotients of exactly-zero gradients carry rounding noise proportional to `S`.
pub const GRAD_FLOOR: f64 = 1e-5;
const PARAM_STD: f64 = 0.5;
const MAX_RESAMPLES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    /// Individual blocks and decoders.
    Block,
    /// The tiny end-to-end model, bare and under the training objective.
    Model,
    All,
}

impl Scope {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "block" => Some(Scope::Block),
            "model" => Some(Scope::Model),
            "all" => Some(Scope::All),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct BlockResult {
    pub name: String,
    pub draws: usize,
    pub coordinates: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct GradReport {
    pub threshold: f64,
    pub seed: u64,
    pub fault_injected: bool,
    pub blocks: Vec<BlockResult>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.passed)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:<16} {:>6} {:>8} {:>8} {:>14}  {}\n",
            "block", "draws", "coords", "skipped", "max_rel_err", "result"
        );
        for b in &self.blocks {
            out.push_str(&format!(
                "{:<16} {:>6} {:>8} {:>8} {:>14.3e}  {}\n",
                b.name,
                b.draws,
                b.coordinates,
                b.skipped,
                b.max_rel_error,
                if b.passed { "PASS" } else { "FAIL" }
            ));
        }
        out.push_str(&format!("threshold {:e}; overall {}\n", self.threshold, if self.passed() { "PASS" } else { "FAIL" }));
        out
    }
}

/// Relative error with a floor on the denominator.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Fixed random projection of outputs onto a scalar.
struct Projector {
    seed: u64,
}

impl Projector {
    /// Sum of `|r_i * y_i|`, the magnitude rounding errors in the scalar scale with.
    fn magnitude(&self, outputs: &[Var]) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        outputs
            .iter()
            .map(|y| {
                let r = Tensor::randn(y.shape(), 1.0, &mut rng);
                r.data().iter().zip(y.value().data()).map(|(a, b)| (a * b).abs()).sum::<f64>()
            })
            .sum()
    }

    fn apply(&self, outputs: &[Var]) -> Result<Var> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut total: Option<Var> = None;
        for y in outputs {
            let r = Tensor::randn(y.shape(), 1.0, &mut rng);
            let term = y.mul(&Var::constant(r))?.sum();
            total = Some(match total {
                Some(t) => t.add(&term)?,
                None => term,
            });
        }
        total.ok_or_else(|| Error::InvalidShape("no outputs to project".into()))
    }
}

/// Block outputs from differentiable inputs and fixed context tensors.
type Forward<'a, M> = dyn Fn(&M, &Tape, &[Var], &[Tensor]) -> Result<Vec<Var>> + 'a;

/// A fresh module, its differentiable inputs and its fixed context.
type Instance<M> = (M, Vec<Tensor>, Vec<Tensor>);

#[derive(Default)]
struct DrawStats {
    coordinates: usize,
    skipped: usize,
    max_rel_error: f64,
}

/// Evaluates the projected scalar and the kink fingerprint of the pass.
fn evaluate<M: Module>(module: &M, inputs: &[Tensor], fixed: &[Tensor], forward: &Forward<'_, M>, proj: &Projector) -> Result<(f64, u64)> {
    let tape = Tape::inference();
    let vars: Vec<Var> = inputs.iter().map(|t| Var::constant(t.clone())).collect();
    kink_trace::start();
    let value = forward(module, &tape, &vars, fixed).and_then(|ys| proj.apply(&ys));
    let fingerprint = kink_trace::finish();
    Ok((value?.value().item(), fingerprint))
}

fn check_draw<M: Module>(
    module: &mut M,
    inputs: &mut [Tensor],
    fixed: &[Tensor],
    forward: &Forward<'_, M>,
    rng: &mut ChaCha8Rng,
    fault: bool,
) -> Result<DrawStats> {
    let proj = Projector { seed: rng.random() };

    let tape = Tape::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| Var::leaf(t.clone())).collect();
    set_weight_grad_fault(fault);
    let mut magnitude = 0.0;
    let analytic = forward(module, &tape, &leaves, fixed)
        .and_then(|ys| {
            magnitude = proj.magnitude(&ys);
            proj.apply(&ys)
        })
        .and_then(|l| l.backward());
    set_weight_grad_fault(false);
    analytic?;
    let param_grads: HashMap<String, Tensor> = tape.param_grads().into_iter().collect();
    let input_grads: Vec<Tensor> = leaves
        .iter()
        .map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(v.shape())))
        .collect();
    drop((tape, leaves));

    let (_, base_fp) = evaluate(module, inputs, fixed, forward, &proj)?;
    let floor = GRAD_FLOOR * magnitude.max(1.0);
    let mut stats = DrawStats::default();
    let record = |a: f64, n: f64, stats: &mut DrawStats| {
        stats.coordinates += 1;
        stats.max_rel_error = stats.max_rel_error.max(rel_error(a, n, floor));
    };

    let names: Vec<String> = module.params().iter().map(|p| p.name.clone()).collect();
    for (pi, name) in names.iter().enumerate() {
        let grad = param_grads.get(name).cloned();
        let numel = module.params()[pi].numel();
        for _ in 0..MAX_RESAMPLES {
            let ci = rng.random_range(0..numel);
            let theta = module.params()[pi].value.data()[ci];
            let h = 1e-5 * theta.abs().max(1.0);
            let at = |v: f64, module: &mut M| -> Result<(f64, u64)> {
                module.params_mut()[pi].value.data_mut()[ci] = v;
                evaluate(module, inputs, fixed, forward, &proj)
            };
            let (lp, fp) = at(theta + h, module)?;
            let (lm, fm) = at(theta - h, module)?;
            module.params_mut()[pi].value.data_mut()[ci] = theta;
            if fp != base_fp || fm != base_fp {
                stats.skipped += 1;
                continue;
            }
            let a = grad.as_ref().map_or(0.0, |g| g.data()[ci]);
            record(a, (lp - lm) / (2.0 * h), &mut stats);
            break;
        }
    }

    for (ii, grad) in input_grads.iter().enumerate() {
        let mut done = 0;
        for _ in 0..4 * MAX_RESAMPLES {
            if done == 4 {
                break;
            }
            let ci = rng.random_range(0..inputs[ii].numel());
            let x = inputs[ii].data()[ci];
            let h = 1e-5 * x.abs().max(1.0);
            inputs[ii].data_mut()[ci] = x + h;
            let (lp, fp) = evaluate(module, inputs, fixed, forward, &proj)?;
            inputs[ii].data_mut()[ci] = x - h;
            let (lm, fm) = evaluate(module, inputs, fixed, forward, &proj)?;
            inputs[ii].data_mut()[ci] = x;
            if fp != base_fp || fm != base_fp {
                stats.skipped += 1;
                continue;
            }
            record(grad.data()[ci], (lp - lm) / (2.0 * h), &mut stats);
            done += 1;
        }
    }
    Ok(stats)
}

/// Runs `draws` independent draws of one block. `build` creates a fresh
/// module and its inputs from the draw's generator.
fn run_block<M: Module>(
    name: &str,
    draws: usize,
    seed: u64,
    fault: bool,
    build: impl Fn(&mut ChaCha8Rng) -> Result<Instance<M>>,
    forward: &Forward<'_, M>,
) -> Result<BlockResult> {
    let mut total = DrawStats::default();
    for d in 0..draws {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(fxhash(name) ^ d as u64);
        let (mut module, mut inputs, fixed) = build(&mut rng)?;
        module.randomize(PARAM_STD, &mut rng);
        let s = check_draw(&mut module, &mut inputs, &fixed, forward, &mut rng, fault)?;
        total.coordinates += s.coordinates;
        total.skipped += s.skipped;
        total.max_rel_error = total.max_rel_error.max(s.max_rel_error);
    }
    Ok(BlockResult {
        name: name.to_string(),
        draws,
        coordinates: total.coordinates,
        skipped: total.skipped,
        max_rel_error: total.max_rel_error,
        passed: total.max_rel_error < THRESHOLD && total.coordinates > 0,
    })
}

fn fxhash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

fn small_gpfca() -> GpfcaConfig {
    GpfcaConfig {
        channels: 8,
        ffn_expansion: 2,
        ..GpfcaConfig::default()
    }
}

/// Spectral geometry of the end-to-end checks: 9 bins, 12 frames.
fn tiny_stft() -> Result<Stft> {
    Stft::new(&SpectroConfig {
        fft_size: 16,
        win_length: 16,
        hop: 4,
        ..SpectroConfig::default()
    })
}

fn one<M>(f: impl Fn(&M, &Tape, &Var) -> Result<Var>) -> impl Fn(&M, &Tape, &[Var], &[Tensor]) -> Result<Vec<Var>> {
    move |m, t, x, _| Ok(vec![f(m, t, &x[0])?])
}

pub fn block_names(scope: Scope) -> Vec<&'static str> {
    let blocks = ["sca", "dfg", "gpgu", "gpfn", "gpfca", "ddb", "dsddb", "mask_decoder", "phase_decoder", "attention"];
    let model = ["tiny_model", "objective"];
    match scope {
        Scope::Block => blocks.to_vec(),
        Scope::Model => model.to_vec(),
        Scope::All => blocks.iter().chain(model.iter()).copied().collect(),
    }
}

/// Checks one named block.
pub fn check_block(name: &str, draws: usize, seed: u64, fault: bool) -> Result<BlockResult> {
    let g = small_gpfca();
    let tiny = ModelConfig::tiny();
    let dense = |variant| DenseBlockSpec::new(2, 4, 3, variant);
    match name {
        "sca" => run_block(
            name,
            draws,
            seed,
            fault,
            |r| Ok((Sca::new("sca", 8, r)?, vec![randn(r, &[2, 8, 16])], vec![])),
            &one(Sca::forward),
        ),
        "dfg" => run_block(
            name,
            draws,
            seed,
            fault,
            |r| Ok((Dfg::new("dfg", 4, 11, false, r)?, vec![randn(r, &[2, 4, 16])], vec![])),
            &one(Dfg::forward),
        ),
        "gpgu" => run_block(
            name,
            draws,
            seed,
            fault,
            |r| Ok((Gpgu::new("gpgu", 16, KernelGroup::default(), false, r)?, vec![randn(r, &[2, 16, 16])], vec![])),
            &one(Gpgu::forward),
        ),
        "gpfn" => run_block(
            name,
            draws,
            seed,
            fault,
            |r| Ok((Gpfn::new("gpfn", &g, r)?, vec![randn(r, &[2, 8, 16])], vec![])),
            &one(Gpfn::forward),
        ),
        "gpfca" => run_block(
            name,
            draws,
            seed,
            fault,
            |r| Ok((Gpfca::new("gpfca", &g, r)?, vec![randn(r, &[2, 8, 16])], vec![])),
            &one(Gpfca::forward),
        ),
        "ddb" | "dsddb" => {
            let variant = if name == "ddb" { DenseVariant::Ddb } else { DenseVariant::Dsddb };
            run_block(
                name,
                draws,
                seed,
                fault,
                |r| Ok((DenseBlock::new(name, &dense(variant), r)?, vec![randn(r, &[2, 4, 8, 6])], vec![])),
                &one(DenseBlock::forward),
            )
        }
        "mask_decoder" => run_block(
            name,
            draws,
            seed,
            fault,
            |r| Ok((MaskDecoder::new("mask_decoder", &tiny, r)?, vec![randn(r, &[1, 8, 6, 5])], vec![])),
            &one(|m: &MaskDecoder, t, x| m.forward(t, x, 9)),
        ),
        "phase_decoder" => run_block(
            name,
            draws,
            seed,
            fault,
            |r| Ok((PhaseDecoder::new("phase_decoder", &tiny, r)?, vec![randn(r, &[1, 8, 6, 5])], vec![])),
            &|m: &PhaseDecoder, t, x, _| {
                let (re, im) = m.forward(t, &x[0], 9)?;
                Ok(vec![re, im])
            },
        ),
        "attention" => run_block(
            name,
            draws,
            seed,
            fault,
            |r| Ok((AttentionReference::new("attention", 8, 2, r)?, vec![randn(r, &[2, 8, 10])], vec![])),
            &one(AttentionReference::forward),
        ),
        "tiny_model" => {
            let stft = tiny_stft()?;
            run_block(
                name,
                draws,
                seed,
                fault,
                |r| {
                    let spec = stft.stft(&randn(r, &[1, 44]))?.compress()?;
                    Ok((Model::new(&tiny, r.random())?, vec![], vec![spec.magnitude, spec.phase]))
                },
                &|m: &Model, t, _, fixed| {
                    let out = m.forward(t, &fixed[0], &fixed[1])?;
                    Ok(vec![out.mask, out.phase])
                },
            )
        }
        "objective" => {
            let stft = tiny_stft()?;
            run_block(
                name,
                draws,
                seed,
                fault,
                |r| {
                    let clean = randn(r, &[1, 44]).map(|v| 0.3 * v);
                    let noisy = Tensor::from_fn(&[1, 44], |i| clean.data()[i] + 0.1 * r.random::<f64>());
                    Ok((Model::new(&tiny, r.random())?, vec![], vec![clean, noisy]))
                },
                &|m: &Model, t, _, fixed| {
                    let (clean, noisy) = (&fixed[0], &fixed[1]);
                    let noisy_spec = stft.stft(noisy)?.compress()?;
                    let clean_spec = stft.stft(clean)?.compress()?;
                    let out = m.forward(t, &noisy_spec.magnitude, &noisy_spec.phase)?;
                    let targets = Targets {
                        noisy_magnitude: &noisy_spec.magnitude,
                        clean: &clean_spec,
                        clean_wave: clean,
                    };
                    let weights = LossWeights::default();
                    let (old, _) = objective(&stft, &out.mask, &out.phase, &targets, &weights, LossMode::Old)?;
                    let (new, _) = objective(&stft, &out.mask, &out.phase, &targets, &weights, LossMode::New)?;
                    Ok(vec![old, new])
                },
            )
        }
        other => Err(Error::Config(format!("unknown gradient-check block `{other}`"))),
    }
}

pub fn run(scope: Scope, draws: usize, seed: u64, inject_fault: bool) -> Result<GradReport> {
    let blocks = block_names(scope)
        .into_iter()
        .map(|name| check_block(name, draws, seed, inject_fault))
        .collect::<Result<Vec<_>>>()?;
    Ok(GradReport {
        threshold: THRESHOLD,
        seed,
        fault_injected: inject_fault,
        blocks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_error_floors_tiny_gradients() {
        assert_eq!(rel_error(1.0, 1.0, GRAD_FLOOR), 0.0);
        assert!((rel_error(2.0, 1.0, GRAD_FLOOR) - 0.5).abs() < 1e-15);
        assert!((rel_error(0.0, 1e-9, 1e-6) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn small_blocks_pass_and_faults_are_caught() {
        for name in ["sca", "dfg", "dsddb"] {
            let ok = check_block(name, 3, 7, false).unwrap();
            assert!(ok.passed, "{ok:?}");
            let bad = check_block(name, 3, 7, true).unwrap();
            assert!(!bad.passed && bad.max_rel_error > 0.1, "{bad:?}");
        }
    }

    #[test]
    fn reports_are_deterministic() {
        let a = run(Scope::Block, 1, 3, false).unwrap();
        let b = run(Scope::Block, 1, 3, false).unwrap();
        assert_eq!(a, b);
        assert!(a.to_text().contains("gpfca"));
        assert!(check_block("nonsense", 1, 0, false).is_err());
    }
}
