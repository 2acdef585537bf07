//! Closed-form multiply-accumulate and parameter counts, and reports that set
//! them against counts measured from an instantiated model.
//!
//! One MAC is one multiply-accumulate inside a convolution; FLOPs are reported
//! as twice the MACs. Parameter formulas count convolution weights only, with
//! biases, norm affines, activation slopes and residual scales reported
//! separately as overhead.

use serde::Serialize;

use crate::blocks::{reduced_bins, DenseBlockSpec, DenseVariant, GpfcaConfig, Model, ModelConfig, Module, ParamKind, StageMeter};
use crate::error::{Error, Result};
use crate::spectral::SpectroConfig;
use crate::tensor::{Tape, Tensor};

/// Size of the full model in the published figure.
pub const PUBLISHED_PARAMS: u64 = 1_410_000;
/// MACs of the full model in the published figure, per 2 s clip.
pub const PUBLISHED_MACS: u64 = 44_640_000_000;

fn product(label: &'static str, factors: &[u64]) -> Result<u64> {
    if factors.contains(&0) {
        return Err(Error::Config(format!("{label}: all arguments must be positive")));
    }
    factors
        .iter()
        .try_fold(1u64, |acc, &f| acc.checked_mul(f))
        .ok_or(Error::Overflow(label))
}

fn add(label: &'static str, a: u64, b: u64) -> Result<u64> {
    a.checked_add(b).ok_or(Error::Overflow(label))
}

fn sum_layers(label: &'static str, n: u64, layer: impl Fn(u64) -> Result<u64>) -> Result<u64> {
    if n == 0 {
        return Err(Error::Config(format!("{label}: depth must be positive")));
    }
    (1..=n).try_fold(0u64, |acc, i| add(label, acc, layer(i)?))
}

/// Dilated convolution of dense layer `i`: `iC * C * K^2 * t * f`.
pub fn macs_dc(i: u64, c: u64, k: u64, t: u64, f: u64) -> Result<u64> {
    product("macs_dc", &[i, c, c, k, k, t, f])
}

/// Depthwise-separable dilated convolution of dense layer `i`:
/// `iC * K^2 * t * f + iC * C * t * f`.
pub fn macs_dsdc(i: u64, c: u64, k: u64, t: u64, f: u64) -> Result<u64> {
    add(
        "macs_dsdc",
        product("macs_dsdc", &[i, c, k, k, t, f])?,
        product("macs_dsdc", &[i, c, c, t, f])?,
    )
}

pub fn macs_ddb(n: u64, c: u64, k: u64, t: u64, f: u64) -> Result<u64> {
    sum_layers("macs_ddb", n, |i| macs_dc(i, c, k, t, f))
}

pub fn macs_dsddb(n: u64, c: u64, k: u64, t: u64, f: u64) -> Result<u64> {
    sum_layers("macs_dsddb", n, |i| macs_dsdc(i, c, k, t, f))
}

pub fn params_ddb(n: u64, c: u64, k: u64) -> Result<u64> {
    sum_layers("params_ddb", n, |i| product("params_ddb", &[i, c, c, k, k]))
}

pub fn params_dsddb(n: u64, c: u64, k: u64) -> Result<u64> {
    sum_layers("params_dsddb", n, |i| {
        add(
            "params_dsddb",
            product("params_dsddb", &[i, c, k, k])?,
            product("params_dsddb", &[i, c, c])?,
        )
    })
}

fn dense_args(spec: &DenseBlockSpec) -> (u64, u64, u64) {
    (spec.depth as u64, spec.channels as u64, spec.kernel as u64)
}

pub fn dense_macs(spec: &DenseBlockSpec, t: u64, f: u64) -> Result<u64> {
    let (n, c, k) = dense_args(spec);
    match spec.variant {
        DenseVariant::Ddb => macs_ddb(n, c, k, t, f),
        DenseVariant::Dsddb => macs_dsddb(n, c, k, t, f),
    }
}

pub fn dense_params(spec: &DenseBlockSpec) -> Result<u64> {
    let (n, c, k) = dense_args(spec);
    match spec.variant {
        DenseVariant::Ddb => params_ddb(n, c, k),
        DenseVariant::Dsddb => params_dsddb(n, c, k),
    }
}

/// Convolution weights of one GPFCA, split into the per-position part and the
/// channel-attention matrix, which runs once per sequence on pooled features.
pub fn gpfca_weights(cfg: &GpfcaConfig) -> (u64, u64) {
    let c = cfg.channels as u64;
    let h = cfg.hidden() as u64;
    let g = h / 4;
    let branches = if cfg.shared_dwc { 1 } else { 2 };
    let gates: u64 = cfg
        .kernel_group
        .0
        .iter()
        .map(|&k| branches * g * k as u64 + g * g)
        .sum();
    let per_position = 2 * c * c + 2 * c * 3 + c * c + c * h + gates + h * c;
    (per_position, c * c)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Geometry {
    pub batch: usize,
    pub frames: usize,
    pub bins: usize,
}

impl Geometry {
    /// One clip of `stft.segment_seconds`.
    pub fn clip(stft: &SpectroConfig) -> Result<Self> {
        Ok(Geometry {
            batch: 1,
            frames: stft.frames(stft.segment_samples())?,
            bins: stft.bins(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BlockCount {
    pub name: String,
    pub analytic_macs: u64,
    pub analytic_params: u64,
    pub measured_macs: Option<u64>,
    pub measured_params: Option<u64>,
    pub overhead_params: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DenseComparison {
    pub depth: usize,
    pub channels: usize,
    pub kernel: usize,
    pub ddb_params: u64,
    pub dsddb_params: u64,
    pub ratio: f64,
}

impl DenseComparison {
    pub fn new(depth: usize, channels: usize, kernel: usize) -> Result<Self> {
        let (n, c, k) = (depth as u64, channels as u64, kernel as u64);
        let ddb = params_ddb(n, c, k)?;
        let dsddb = params_dsddb(n, c, k)?;
        Ok(DenseComparison {
            depth,
            channels,
            kernel,
            ddb_params: ddb,
            dsddb_params: dsddb,
            ratio: dsddb as f64 / ddb as f64,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComplexityReport {
    pub geometry: Geometry,
    pub blocks: Vec<BlockCount>,
    pub total_analytic_macs: u64,
    pub total_analytic_flops: u64,
    pub total_analytic_params: u64,
    pub total_measured_macs: Option<u64>,
    pub total_measured_params: Option<u64>,
    pub total_overhead_params: Option<u64>,
    pub dense_comparison: DenseComparison,
}

/// Analytic per-stage counts for a model configuration at a given geometry.
pub fn analyze(cfg: &ModelConfig, geometry: Geometry) -> Result<ComplexityReport> {
    cfg.validate()?;
    let Geometry { batch, frames, bins } = geometry;
    if batch == 0 || frames == 0 || bins < 3 {
        return Err(Error::Config(format!("geometry {geometry:?} needs B, T >= 1 and F >= 3")));
    }
    let (b, t, f) = (batch as u64, frames as u64, bins as u64);
    let fr = reduced_bins(bins) as u64;
    let c = cfg.channels() as u64;
    let label = "model MACs";
    let full = product(label, &[b, t, f])?;
    let reduced = product(label, &[b, t, fr])?;
    let dense_p = dense_params(&cfg.dense)?;
    let dense_full = product(label, &[b, dense_macs(&cfg.dense, t, f)?])?;
    let dense_reduced = product(label, &[b, dense_macs(&cfg.dense, t, fr)?])?;
    let resample = 3 * c * c;
    let (gp, gs) = gpfca_weights(&cfg.gpfca);

    let mut blocks = vec![
        (String::from("encoder.in_conv"), product(label, &[2 * c, full])?, 2 * c),
        ("encoder.dense".into(), dense_full, dense_p),
        ("encoder.down".into(), product(label, &[resample, reduced])?, resample),
    ];
    for i in 1..=cfg.ts_block_count {
        let time = add(label, product(label, &[gp, reduced])?, product(label, &[gs, b, fr])?)?;
        let freq = add(label, product(label, &[gp, reduced])?, product(label, &[gs, b, t])?)?;
        blocks.push((format!("ts{i}.time"), time, gp + gs));
        blocks.push((format!("ts{i}.freq"), freq, gp + gs));
    }
    let up = product(label, &[resample, reduced])?;
    let mask = [dense_reduced, up, product(label, &[c + 1, full])?]
        .into_iter()
        .try_fold(0, |a, v| add(label, a, v))?;
    blocks.push(("mask_decoder".into(), mask, dense_p + resample + c + 1));
    let phase = [dense_reduced, up, product(label, &[2 * c, full])?]
        .into_iter()
        .try_fold(0, |a, v| add(label, a, v))?;
    blocks.push(("phase_decoder".into(), phase, dense_p + resample + 2 * c));

    let blocks: Vec<BlockCount> = blocks
        .into_iter()
        .map(|(name, macs, params)| BlockCount {
            name,
            analytic_macs: macs,
            analytic_params: params,
            measured_macs: None,
            measured_params: None,
            overhead_params: None,
        })
        .collect();
    let total_macs = blocks.iter().try_fold(0, |a, bl| add(label, a, bl.analytic_macs))?;
    Ok(ComplexityReport {
        geometry,
        total_analytic_macs: total_macs,
        total_analytic_flops: total_macs.checked_mul(2).ok_or(Error::Overflow(label))?,
        total_analytic_params: blocks.iter().map(|bl| bl.analytic_params).sum(),
        blocks,
        total_measured_macs: None,
        total_measured_params: None,
        total_overhead_params: None,
        dense_comparison: DenseComparison::new(cfg.dense.depth, cfg.dense.channels, cfg.dense.kernel)?,
    })
}

/// Stage a parameter belongs to, matching the names used by [`StageMeter`].
fn stage_of(name: &str) -> String {
    let mut parts = name.split('.');
    let first = parts.next().unwrap_or_default();
    let second = parts.next().unwrap_or_default();
    match first {
        "encoder" if second.starts_with("in_") => "encoder.in_conv".into(),
        "encoder" if second.starts_with("down") => "encoder.down".into(),
        "encoder" => format!("encoder.{second}"),
        ts if ts.starts_with("ts") => format!("{ts}.{second}"),
        other => other.into(),
    }
}

/// Analytic counts plus counts measured by running `model` once on a zero
/// input of the given geometry and by summing its parameter tensors.
pub fn measure(model: &Model, geometry: Geometry) -> Result<ComplexityReport> {
    let mut report = analyze(&model.config, geometry)?;
    let shape = [geometry.batch, geometry.bins, geometry.frames];
    let tape = Tape::inference();
    let mut meter = StageMeter::start();
    model.forward_metered(&tape, &Tensor::zeros(&shape), &Tensor::zeros(&shape), Some(&mut meter))?;
    for block in &mut report.blocks {
        block.measured_macs = meter.stages.iter().find(|(n, _)| *n == block.name).map(|(_, m)| *m);
        let mut weights = 0u64;
        let mut overhead = 0u64;
        for p in model.params().into_iter().filter(|p| stage_of(&p.name) == block.name) {
            match p.kind {
                ParamKind::ConvWeight => weights += p.numel() as u64,
                _ => overhead += p.numel() as u64,
            }
        }
        block.measured_params = Some(weights);
        block.overhead_params = Some(overhead);
    }
    let sum = |f: fn(&BlockCount) -> Option<u64>| report.blocks.iter().map(f).sum::<Option<u64>>();
    report.total_measured_macs = sum(|b| b.measured_macs);
    report.total_measured_params = sum(|b| b.measured_params);
    report.total_overhead_params = sum(|b| b.overhead_params);
    Ok(report)
}

/// `12345678` -> `"12.35M"`.
pub fn human(n: u64) -> String {
    let v = n as f64;
    match n {
        0..=9_999 => n.to_string(),
        10_000..=999_999 => format!("{:.2}K", v / 1e3),
        1_000_000..=999_999_999 => format!("{:.2}M", v / 1e6),
        _ => format!("{:.2}G", v / 1e9),
    }
}

impl ComplexityReport {
    /// Total parameters including overhead, when measured.
    pub fn total_params(&self) -> Option<u64> {
        Some(self.total_measured_params? + self.total_overhead_params?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is plain data")
    }

    pub fn to_text(&self) -> String {
        let opt = |v: Option<u64>| v.map_or_else(|| "-".to_string(), |v| v.to_string());
        let g = &self.geometry;
        let mut out = format!("geometry: batch {} x {} frames x {} bins\n", g.batch, g.frames, g.bins);
        out += &format!(
            "{:<16} {:>16} {:>16} {:>12} {:>12} {:>10}\n",
            "block", "macs", "measured_macs", "weights", "measured_w", "overhead"
        );
        for b in &self.blocks {
            out += &format!(
                "{:<16} {:>16} {:>16} {:>12} {:>12} {:>10}\n",
                b.name,
                b.analytic_macs,
                opt(b.measured_macs),
                b.analytic_params,
                opt(b.measured_params),
                opt(b.overhead_params)
            );
        }
        out += &format!(
            "{:<16} {:>16} {:>16} {:>12} {:>12} {:>10}\n",
            "total",
            self.total_analytic_macs,
            opt(self.total_measured_macs),
            self.total_analytic_params,
            opt(self.total_measured_params),
            opt(self.total_overhead_params)
        );
        out += &format!(
            "macs {} ({}) | flops (2 x macs) {} ({})\n",
            self.total_analytic_macs,
            human(self.total_analytic_macs),
            self.total_analytic_flops,
            human(self.total_analytic_flops)
        );
        if let Some(total) = self.total_params() {
            out += &format!("parameters incl. overhead {} ({})\n", total, human(total));
        }
        let d = &self.dense_comparison;
        out += &format!(
            "dense block n={} C={} K={}: ddb weights {}, dsddb weights {}, dsddb/ddb = {:.2}%\n",
            d.depth,
            d.channels,
            d.kernel,
            d.ddb_params,
            d.dsddb_params,
            100.0 * d.ratio
        );
        let rel = |v: u64, r: u64| 100.0 * (v as f64 - r as f64) / r as f64;
        out += &format!(
            "published: {} MACs, {} parameters | here: macs {:+.1}%",
            human(PUBLISHED_MACS),
            human(PUBLISHED_PARAMS),
            rel(self.total_analytic_macs, PUBLISHED_MACS)
        );
        if let Some(total) = self.total_params() {
            out += &format!(", parameters {:+.1}%", rel(total, PUBLISHED_PARAMS));
        }
        out.push('\n');
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::DenseBlock;
    use proptest::prelude::*;
    use rand::SeedableRng;

    #[test]
    fn single_layer_values() {
        assert_eq!(macs_dc(1, 64, 3, 1, 1).unwrap(), 36864);
        assert_eq!(macs_dsdc(1, 64, 3, 1, 1).unwrap(), 4672);
        assert_eq!(macs_ddb(1, 64, 3, 5, 7).unwrap(), macs_dc(1, 64, 3, 5, 7).unwrap());
        assert_eq!(macs_dsddb(1, 64, 3, 5, 7).unwrap(), macs_dsdc(1, 64, 3, 5, 7).unwrap());
    }

    #[test]
    fn four_layer_block_values() {
        assert_eq!(macs_ddb(4, 64, 3, 1, 1).unwrap(), 368640);
        assert_eq!(macs_dsddb(4, 64, 3, 1, 1).unwrap(), 46720);
        assert_eq!(params_ddb(4, 64, 3).unwrap(), 368640);
        assert_eq!(params_dsddb(4, 64, 3).unwrap(), 46720);
        assert_eq!(params_ddb(1, 8, 3).unwrap(), 576);
        assert_eq!(params_dsddb(1, 8, 3).unwrap(), 136);
        let cmp = DenseComparison::new(4, 64, 3).unwrap();
        assert!((cmp.ratio - 46720.0 / 368640.0).abs() < 1e-15);
        assert_eq!(format!("{:.1}", cmp.ratio * 100.0), "12.7");
    }

    #[test]
    fn overflow_and_zero_arguments_are_errors() {
        assert!(matches!(macs_dc(u64::MAX, 2, 3, 1, 1), Err(Error::Overflow(_))));
        assert!(macs_dc(0, 64, 3, 1, 1).is_err());
        assert!(params_ddb(0, 64, 3).is_err());
    }

    #[test]
    fn counts_exceed_32_bits() {
        let v = macs_ddb(4, 64, 3, 321, 201).unwrap();
        assert!(v > u32::MAX as u64);
        assert_eq!(v, 368640 * 321 * 201);
    }

    proptest! {
        #[test]
        fn macs_scale_with_positions(i in 1u64..9, c in 1u64..129, k in 1u64..8, t in 1u64..400, f in 1u64..300) {
            prop_assert_eq!(macs_dc(i, c, k, t, f).unwrap(), t * f * macs_dc(i, c, k, 1, 1).unwrap());
            prop_assert_eq!(macs_dsdc(i, c, k, t, f).unwrap(), t * f * macs_dsdc(i, c, k, 1, 1).unwrap());
        }

        #[test]
        fn block_sums_are_layer_sums(n in 1u64..9, c in 1u64..65, k in 1u64..8, t in 1u64..50, f in 1u64..50) {
            let dc: u64 = (1..=n).map(|i| macs_dc(i, c, k, t, f).unwrap()).sum();
            let ds: u64 = (1..=n).map(|i| macs_dsdc(i, c, k, t, f).unwrap()).sum();
            prop_assert_eq!(macs_ddb(n, c, k, t, f).unwrap(), dc);
            prop_assert_eq!(macs_dsddb(n, c, k, t, f).unwrap(), ds);
        }

        #[test]
        fn ratio_is_independent_of_depth(n in 1u64..9, c in 1u64..129, k in 1u64..8) {
            let lhs = params_dsddb(n, c, k).unwrap() as u128 * (c * k * k) as u128;
            let rhs = params_ddb(n, c, k).unwrap() as u128 * (k * k + c) as u128;
            prop_assert_eq!(lhs, rhs);
        }

        #[test]
        fn counts_increase_in_every_argument(n in 1u64..6, c in 1u64..65, k in 1u64..8, t in 1u64..30, f in 1u64..30) {
            for (a, b) in [
                (macs_ddb(n, c, k, t, f), macs_ddb(n + 1, c, k, t, f)),
                (macs_ddb(n, c, k, t, f), macs_ddb(n, c + 1, k, t, f)),
                (macs_ddb(n, c, k, t, f), macs_ddb(n, c, k + 1, t, f)),
                (macs_ddb(n, c, k, t, f), macs_ddb(n, c, k, t + 1, f)),
                (macs_ddb(n, c, k, t, f), macs_ddb(n, c, k, t, f + 1)),
                (macs_dsddb(n, c, k, t, f), macs_dsddb(n + 1, c, k, t, f)),
                (macs_dsddb(n, c, k, t, f), macs_dsddb(n, c + 1, k, t, f)),
                (macs_dsddb(n, c, k, t, f), macs_dsddb(n, c, k + 1, t, f)),
                (macs_dsddb(n, c, k, t, f), macs_dsddb(n, c, k, t + 1, f)),
                (macs_dsddb(n, c, k, t, f), macs_dsddb(n, c, k, t, f + 1)),
                (params_ddb(n, c, k), params_ddb(n + 1, c, k)),
                (params_ddb(n, c, k), params_ddb(n, c + 1, k)),
                (params_ddb(n, c, k), params_ddb(n, c, k + 1)),
                (params_dsddb(n, c, k), params_dsddb(n + 1, c, k)),
                (params_dsddb(n, c, k), params_dsddb(n, c + 1, k)),
                (params_dsddb(n, c, k), params_dsddb(n, c, k + 1)),
            ] {
                prop_assert!(a.unwrap() < b.unwrap());
            }
        }
    }

    #[test]
    fn measured_dense_block_matches_formulas() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        for variant in [DenseVariant::Ddb, DenseVariant::Dsddb] {
            let spec = DenseBlockSpec::new(3, 8, 3, variant);
            let block = DenseBlock::new("d", &spec, &mut rng).unwrap();
            assert_eq!(block.conv_weight_count() as u64, dense_params(&spec).unwrap());
            crate::tensor::conv::reset_mac_count();
            let x = crate::tensor::Var::constant(Tensor::zeros(&[1, 8, 6, 5]));
            block.forward(&Tape::inference(), &x).unwrap();
            assert_eq!(crate::tensor::conv::mac_count(), dense_macs(&spec, 6, 5).unwrap());
        }
    }

    #[test]
    fn measured_model_matches_analytic_per_stage() {
        let cfg = ModelConfig {
            dense: DenseBlockSpec::new(2, 8, 3, DenseVariant::Dsddb),
            gpfca: GpfcaConfig {
                channels: 8,
                ffn_expansion: 2,
                ..GpfcaConfig::default()
            },
            ts_block_count: 2,
            ..ModelConfig::default()
        };
        let model = Model::new(&cfg, 3).unwrap();
        for geometry in [
            Geometry { batch: 1, frames: 7, bins: 9 },
            Geometry { batch: 2, frames: 5, bins: 10 },
        ] {
            let report = measure(&model, geometry).unwrap();
            for b in &report.blocks {
                assert_eq!(b.measured_macs, Some(b.analytic_macs), "{}", b.name);
                assert_eq!(b.measured_params, Some(b.analytic_params), "{}", b.name);
            }
            assert_eq!(report.total_params(), Some(model.param_count() as u64));
            assert!(report.to_text().contains("dsddb/ddb"));
            let json: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
            assert_eq!(json["total_analytic_macs"].as_u64(), Some(report.total_analytic_macs));
        }
    }
}
