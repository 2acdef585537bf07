//! The full verification suite behind `primek selftest`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{conv_oracle, gradcheck, memory};
use crate::blocks::{DenseBlock, DenseBlockSpec, DenseVariant, Gpgu, KernelGroup, Model, ModelConfig, Module, ParamKind};
use crate::complexity::{params_ddb, params_dsddb, DenseComparison};
use crate::config::RunConfig;
use crate::error::Result;
use crate::spectral::{snr_db, SpectroConfig, Stft};
use crate::tensor::{Tape, Tensor};

pub const ROUNDTRIP_SNR_DB: f64 = 60.0;
pub const COLA_LIMIT: f64 = 1e-10;
pub const KERNEL_SETS: [[usize; 4]; 3] = [[17, 17, 17, 17], [5, 15, 21, 27], [3, 11, 23, 31]];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Check { name: name.to_string(), passed, detail }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelftestReport {
    pub checks: Vec<Check>,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn to_text(&self) -> String {
        self.checks
            .iter()
            .map(|c| format!("{:<22} {}  {}\n", c.name, if c.passed { "PASS" } else { "FAIL" }, c.detail))
            .collect()
    }
}

/// Weight counts of instantiated dense blocks against the closed forms over
/// depth 1..=4, C in {8, 16, 64}, K in {3, 5}. Returns the mismatches.
pub fn dense_count_mismatches() -> Result<Vec<String>> {
    let mut bad = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for n in 1..=4 {
        for c in [8, 16, 64] {
            for k in [3, 5] {
                for variant in [DenseVariant::Ddb, DenseVariant::Dsddb] {
                    let block = DenseBlock::new("dense", &DenseBlockSpec::new(n, c, k, variant), &mut rng)?;
                    let built: u64 = block
                        .params()
                        .iter()
                        .filter(|p| p.kind == ParamKind::ConvWeight)
                        .map(|p| p.numel() as u64)
                        .sum();
                    let (n, c, k) = (n as u64, c as u64, k as u64);
                    let formula = match variant {
                        DenseVariant::Ddb => params_ddb(n, c, k)?,
                        DenseVariant::Dsddb => params_dsddb(n, c, k)?,
                    };
                    if built != formula {
                        bad.push(format!("{variant:?} n={n} C={c} K={k}: built {built}, formula {formula}"));
                    }
                }
            }
        }
    }
    Ok(bad)
}

/// Worst roundtrip SNR over `count` Gaussian signals of `seconds` length.
pub fn spectral_roundtrip(cfg: &SpectroConfig, count: usize, seconds: f64, seed: u64) -> Result<f64> {
    let stft = Stft::new(cfg)?;
    let n = (seconds * cfg.sample_rate as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wave = Tensor::randn(&[count, n], 0.3, &mut rng);
    let back = stft.istft(&stft.stft(&wave)?, n)?;
    Ok((0..count)
        .map(|i| snr_db(&wave.data()[i * n..(i + 1) * n], &back.data()[i * n..(i + 1) * n]))
        .fold(f64::INFINITY, f64::min))
}

/// Parameter counts of gated units under each kernel set, and the smallest
/// max-abs output difference between any two sets on one shared input.
pub fn kernel_set_outputs(channels: usize, frames: usize, seed: u64) -> Result<(Vec<usize>, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::randn(&[2, channels, frames], 1.0, &mut rng);
    let mut counts = Vec::new();
    let mut outputs = Vec::new();
    for set in KERNEL_SETS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unit = Gpgu::new("gpgu", channels, KernelGroup(set), false, &mut rng)?;
        counts.push(unit.params().iter().map(|p| p.numel()).sum());
        let tape = Tape::inference();
        outputs.push(unit.forward(&tape, &tape.input(x.clone()))?.value().clone());
    }
    let mut min_diff = f64::INFINITY;
    for i in 0..outputs.len() {
        for j in i + 1..outputs.len() {
            min_diff = min_diff.min(outputs[i].max_abs_diff(&outputs[j]));
        }
    }
    Ok((counts, min_diff))
}

/// Runs every check; none is skipped when an earlier one fails.
pub fn run(cfg: &RunConfig) -> Result<SelftestReport> {
    let mut checks = Vec::new();

    let cmp = DenseComparison::new(4, 64, 3)?;
    checks.push(Check::new(
        "dense_ratio",
        cmp.dsddb_params == 46_720 && cmp.ddb_params == 368_640 && (cmp.ratio * 1000.0).round() == 127.0,
        format!("{}/{} = {:.2}%", cmp.dsddb_params, cmp.ddb_params, 100.0 * cmp.ratio),
    ));

    let bad = dense_count_mismatches()?;
    checks.push(Check::new("dense_counts", bad.is_empty(), if bad.is_empty() { "48 blocks".into() } else { bad.join("; ") }));

    let spectro = SpectroConfig::default();
    let snr = spectral_roundtrip(&spectro, 10, 2.0, cfg.seed)?;
    let cola = spectro.cola_deviation();
    checks.push(Check::new(
        "spectral_roundtrip",
        snr > ROUNDTRIP_SNR_DB && cola < COLA_LIMIT,
        format!("min snr {snr:.1} dB, cola deviation {cola:.2e}"),
    ));

    let oracle = conv_oracle::run(&[ModelConfig::tiny(), cfg.model.clone()], cfg.seed)?;
    checks.push(Check::new(
        "conv_oracle",
        oracle.passed(),
        format!("{} cases, max abs diff {:.2e}", oracle.cases.len(), oracle.max_abs_diff()),
    ));

    let grads = gradcheck::run(gradcheck::Scope::All, gradcheck::DEFAULT_DRAWS, cfg.seed, false)?;
    let worst = grads.blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max);
    checks.push(Check::new(
        "gradcheck",
        grads.passed(),
        format!("{} blocks, max rel error {worst:.2e}", grads.blocks.len()),
    ));

    let mem = memory::run(&cfg.model.gpfca, &memory::DEFAULT_LENGTHS, cfg.seed)?;
    checks.push(Check::new(
        "memory_scaling",
        mem.passed(),
        format!(
            "gpfca slope {:.3}, attention slope {:.3}",
            mem.gpfca_slope.unwrap_or(f64::NAN),
            mem.attention_slope.unwrap_or(f64::NAN)
        ),
    ));

    let (counts, min_diff) = kernel_set_outputs(16, 64, cfg.seed)?;
    checks.push(Check::new(
        "kernel_sets",
        counts.iter().all(|&c| c == counts[0]) && min_diff > 1e-6,
        format!("params {counts:?}, min pairwise diff {min_diff:.3e}"),
    ));

    let mut model = Model::new(&cfg.model, cfg.seed)?;
    model.set_identity_heads()?;
    let stft = Stft::new(&cfg.stft)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let wave = Tensor::randn(&[1, cfg.stft.sample_rate as usize / 2], 0.3, &mut rng);
    let out = model.enhance(&stft, &wave)?;
    let snr = snr_db(wave.data(), out.data());
    checks.push(Check::new("identity_enhance", snr > ROUNDTRIP_SNR_DB, format!("snr {snr:.1} dB")));

    Ok(SelftestReport { checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_grid_matches_formulas() {
        assert!(dense_count_mismatches().unwrap().is_empty());
    }

    #[test]
    fn kernel_sets_share_counts_but_not_outputs() {
        let (counts, diff) = kernel_set_outputs(8, 40, 3).unwrap();
        assert!(counts.windows(2).all(|w| w[0] == w[1]));
        assert!(diff > 1e-6);
    }
}
