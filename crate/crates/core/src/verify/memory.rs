//! Activation-memory scaling of the GPFCA block against the self-attention
//! reference, measured with the tensor allocation counter.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::blocks::{AttentionReference, Gpfca, GpfcaConfig, Module};
use crate::error::{Error, Result};
use crate::tensor::memory::{live_bytes, peak_bytes, reset_peak};
use crate::tensor::{Tape, Tensor, Var};

pub const DEFAULT_LENGTHS: [usize; 5] = [250, 500, 1000, 2000, 4000];
/// Channel width of both benchmarked blocks.
pub const BENCH_CHANNELS: usize = 16;
pub const ATTENTION_HEADS: usize = 2;
pub const LINEAR_SLOPE: (f64, f64) = (1.0, 0.1);
pub const QUADRATIC_SLOPE: (f64, f64) = (2.0, 0.2);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MemoryRow {
    pub length: usize,
    pub gpfca_bytes: usize,
    pub attention_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemoryReport {
    pub channels: usize,
    pub heads: usize,
    pub rows: Vec<MemoryRow>,
    /// Least-squares slopes of log bytes on log length; absent for one length.
    pub gpfca_slope: Option<f64>,
    pub attention_slope: Option<f64>,
}

impl MemoryReport {
    /// Both slopes are present and inside their bands.
    pub fn passed(&self) -> bool {
        let within = |s: Option<f64>, (centre, tol): (f64, f64)| s.is_some_and(|s| (s - centre).abs() <= tol);
        within(self.gpfca_slope, LINEAR_SLOPE) && within(self.attention_slope, QUADRATIC_SLOPE)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("channels={} heads={}\n", self.channels, self.heads);
        out.push_str(&format!("{:>8} {:>16} {:>16}\n", "T", "gpfca_bytes", "attention_bytes"));
        for r in &self.rows {
            out.push_str(&format!("{:>8} {:>16} {:>16}\n", r.length, r.gpfca_bytes, r.attention_bytes));
        }
        if let (Some(g), Some(a)) = (self.gpfca_slope, self.attention_slope) {
            out.push_str(&format!("gpfca slope {g:.4} (expected {} ± {})\n", LINEAR_SLOPE.0, LINEAR_SLOPE.1));
            out.push_str(&format!("attention slope {a:.4} (expected {} ± {})\n", QUADRATIC_SLOPE.0, QUADRATIC_SLOPE.1));
        }
        out
    }
}

/// Slope of the least-squares line through `(ln x, ln y)`.
pub fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 || points.iter().any(|&(x, y)| !(x > 0.0 && y > 0.0)) {
        return None;
    }
    let n = points.len() as f64;
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Peak tensor bytes allocated by one recorded forward pass on `[1, C, T]`,
/// parameters excluded. Activations stay alive until the output is dropped,
/// as they would for a backward pass.
fn peak_forward(module: &dyn Module, forward: &dyn Fn(&Tape, &Var) -> Result<Var>, channels: usize, t: usize) -> Result<usize> {
    let tape = Tape::new();
    for p in module.params() {
        p.var(&tape);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(t as u64);
    let base = live_bytes();
    reset_peak();
    let x = tape.input(Tensor::randn(&[1, channels, t], 1.0, &mut rng));
    let y = forward(&tape, &x)?;
    let peak = peak_bytes() - base;
    drop((y, x));
    Ok(peak)
}

/// Measures both blocks at every length. `gpfca` supplies the kernel group,
/// expansion and norm; the width is fixed to [`BENCH_CHANNELS`].
pub fn run(gpfca: &GpfcaConfig, lengths: &[usize], seed: u64) -> Result<MemoryReport> {
    if lengths.is_empty() || lengths.contains(&0) {
        return Err(Error::Config("benchmark lengths must be positive and non-empty".into()));
    }
    let cfg = GpfcaConfig { channels: BENCH_CHANNELS, ..*gpfca };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut block = Gpfca::new("gpfca", &cfg, &mut rng)?;
    block.randomize(0.1, &mut rng);
    let attention = AttentionReference::new("attention", BENCH_CHANNELS, ATTENTION_HEADS, &mut rng)?;

    let mut rows = Vec::with_capacity(lengths.len());
    for &t in lengths {
        let gpfca_bytes = peak_forward(&block, &|tape, x| block.forward(tape, x), BENCH_CHANNELS, t)?;
        let attention_bytes = peak_forward(&attention, &|tape, x| attention.forward(tape, x), BENCH_CHANNELS, t)?;
        log::info!("T={t}: gpfca {gpfca_bytes} B, attention {attention_bytes} B");
        rows.push(MemoryRow { length: t, gpfca_bytes, attention_bytes });
    }
    let slope = |f: fn(&MemoryRow) -> usize| loglog_slope(&rows.iter().map(|r| (r.length as f64, f(r) as f64)).collect::<Vec<_>>());
    Ok(MemoryReport {
        channels: BENCH_CHANNELS,
        heads: ATTENTION_HEADS,
        gpfca_slope: slope(|r| r.gpfca_bytes),
        attention_slope: slope(|r| r.attention_bytes),
        rows,
    })
}
