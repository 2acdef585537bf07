//! Training objectives on compressed spectra and waveforms.
//!
//! Spectral tensors are `[B, F, T]`; rectangular spectra are `[B, 2, F, T]`
//! with the real part first. Every loss is a mean, so values do not depend on
//! batch size or segment length.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{join_rect, Spectrogram, Stft};
use crate::tensor::{Tensor, Var};

/// Keeps the recompression exponent finite at zero magnitude.
pub const COMPRESSION_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    /// Waveform L1 term, no consistency term.
    Old,
    /// Consistency term, no waveform term.
    New,
}

impl LossMode {
    pub fn name(self) -> &'static str {
        match self {
            LossMode::Old => "old",
            LossMode::New => "new",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "old" => Some(LossMode::Old),
            "new" => Some(LossMode::New),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Slot for a discriminator-based metric term; no such term is computed,
    /// so it must stay zero.
    pub metric: f64,
    pub magnitude: f64,
    pub phase: f64,
    pub complex: f64,
    pub time: f64,
    pub consistency: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            metric: 0.0,
            magnitude: 0.9,
            phase: 0.3,
            complex: 0.1,
            time: 0.2,
            consistency: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.metric, self.magnitude, self.phase, self.complex, self.time, self.consistency];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and nonnegative: {self:?}")));
        }
        if self.metric != 0.0 {
            return Err(Error::Config("the metric loss weight must be 0".into()));
        }
        if all.iter().all(|&w| w == 0.0) {
            return Err(Error::Config("at least one loss weight must be nonzero".into()));
        }
        Ok(())
    }

    /// Weights actually applied under `mode`.
    pub fn effective(&self, mode: LossMode) -> LossWeights {
        match mode {
            LossMode::Old => LossWeights { consistency: 0.0, ..*self },
            LossMode::New => LossWeights { time: 0.0, ..*self },
        }
    }
}

pub fn magnitude_loss(estimate: &Var, target: &Tensor) -> Result<Var> {
    Ok(estimate.sub(&Var::constant(target.clone()))?.square().mean())
}

/// Anti-wrapped distance of the phases themselves, of their differences along
/// frequency and of their differences along time, summed.
pub fn phase_loss(estimate: &Var, target: &Tensor) -> Result<Var> {
    let target = Var::constant(target.clone());
    let instantaneous = estimate.sub(&target)?.anti_wrap().mean();
    let group_delay = estimate.diff(1)?.sub(&target.diff(1)?)?.anti_wrap().mean();
    let angular_freq = estimate.diff(2)?.sub(&target.diff(2)?)?.anti_wrap().mean();
    Ok(instantaneous.add(&group_delay)?.add(&angular_freq)?)
}

/// `[B, F, T]` magnitude and phase to `[B, 2, F, T]` real and imaginary parts.
pub fn polar_to_rect(magnitude: &Var, phase: &Var) -> Result<Var> {
    let &[b, f, t] = magnitude.shape() else {
        return Err(Error::InvalidShape(format!("magnitude must be [B, F, T], got {:?}", magnitude.shape())));
    };
    let re = magnitude.mul(&phase.cos())?.reshape(&[b, 1, f, t])?;
    let im = magnitude.mul(&phase.sin())?.reshape(&[b, 1, f, t])?;
    Var::concat(&[re, im], 1)
}

/// Mean squared error over real and imaginary parts.
pub fn complex_loss(estimate_rect: &Var, target_rect: &Tensor) -> Result<Var> {
    Ok(estimate_rect.sub(&Var::constant(target_rect.clone()))?.square().mean())
}

pub fn time_loss(estimate: &Var, target: &Tensor) -> Result<Var> {
    Ok(estimate.sub(&Var::constant(target.clone()))?.abs().mean())
}

/// Raises the modulus of each bin of a rectangular spectrum to `c`, keeping
/// its angle: `(re, im) * (re^2 + im^2 + eps)^((c - 1) / 2)`.
pub fn compress_rect(rect: &Var, c: f64) -> Result<Var> {
    let re = rect.narrow(1, 0, 1)?;
    let im = rect.narrow(1, 1, 1)?;
    let scale = re.square().add(&im.square())?.add_scalar(COMPRESSION_EPS).powf((c - 1.0) / 2.0);
    Var::concat(&[re.mul(&scale)?, im.mul(&scale)?], 1)
}

/// Inverse of [`compress_rect`] without the stabilizer: moduli raised to `1/c`.
pub fn decompress_rect(rect: &Var, c: f64) -> Result<Var> {
    let re = rect.narrow(1, 0, 1)?;
    let im = rect.narrow(1, 1, 1)?;
    let modulus_sq = re.square().add(&im.square())?;
    let scale = modulus_sq.add_scalar(COMPRESSION_EPS).powf((1.0 / c - 1.0) / 2.0);
    Var::concat(&[re.mul(&scale)?, im.mul(&scale)?], 1)
}

/// Distance between a spectrum and its projection onto the set of STFTs:
/// `mean((S - stft(istft(S)))^2)`. With `compression = Some(c)` the spectrum is
/// taken as compressed, decompressed before inversion, and the projection is
/// recompressed before comparison.
pub fn consistency_loss(stft: &Stft, rect: &Var, compression: Option<f64>, samples: usize) -> Result<Var> {
    let linear = match compression {
        Some(c) => decompress_rect(rect, c)?,
        None => rect.clone(),
    };
    let wave = stft.inverse_var(&linear, samples)?;
    let projected = stft.forward_var(&wave)?;
    let projected = match compression {
        Some(c) => compress_rect(&projected, c)?,
        None => projected,
    };
    Ok(rect.sub(&projected)?.square().mean())
}

/// Consistency of a spectrogram in whichever domain it is stored in.
pub fn spectrogram_consistency(stft: &Stft, spec: &Spectrogram, samples: usize) -> Result<f64> {
    let (re, im) = spec.to_rect();
    let rect = Var::constant(join_rect(&re, &im)?);
    let c = spec.compressed.then_some(spec.config.compression);
    Ok(consistency_loss(stft, &rect, c, samples)?.value().item())
}

/// Component values of one evaluation of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub metric: f64,
    pub magnitude: f64,
    pub phase: f64,
    pub complex: f64,
    pub time: f64,
    pub consistency: f64,
    pub total: f64,
}

impl fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "magnitude={:.6e} phase={:.6e} complex={:.6e} time={:.6e} consistency={:.6e} total={:.6e}",
            self.magnitude, self.phase, self.complex, self.time, self.consistency, self.total
        )
    }
}

/// Differentiable components of the objective. Components not used by the
/// chosen mode may be given as detached values.
pub struct LossTerms {
    pub magnitude: Var,
    pub phase: Var,
    pub complex: Var,
    pub time: Var,
    pub consistency: Var,
}

/// `λ_metric·0 + λ_mag·L_mag + λ_pha·L_pha + λ_com·L_com + λ_time·L_time + λ_con·L_con`
/// with the time or consistency weight zeroed according to `mode`.
pub fn total_loss(mode: LossMode, terms: &LossTerms, weights: &LossWeights) -> Result<(Var, LossBreakdown)> {
    weights.validate()?;
    let w = weights.effective(mode);
    let mut total = Var::constant(Tensor::scalar(w.metric * 0.0));
    for (weight, term) in [
        (w.magnitude, &terms.magnitude),
        (w.phase, &terms.phase),
        (w.complex, &terms.complex),
        (w.time, &terms.time),
        (w.consistency, &terms.consistency),
    ] {
        if weight != 0.0 {
            total = total.add(&term.scale(weight))?;
        }
    }
    let breakdown = LossBreakdown {
        metric: 0.0,
        magnitude: terms.magnitude.value().item(),
        phase: terms.phase.value().item(),
        complex: terms.complex.value().item(),
        time: terms.time.value().item(),
        consistency: terms.consistency.value().item(),
        total: total.value().item(),
    };
    Ok((total, breakdown))
}

/// Everything needed to score an enhancement of one batch.
pub struct Targets<'a> {
    /// Compressed noisy magnitude the mask is applied to.
    pub noisy_magnitude: &'a Tensor,
    /// Compressed clean spectrogram.
    pub clean: &'a Spectrogram,
    /// Clean waveform `[B, N]`.
    pub clean_wave: &'a Tensor,
}

/// Builds the full objective from the network's mask and phase.
pub fn objective(
    stft: &Stft,
    mask: &Var,
    phase: &Var,
    targets: &Targets<'_>,
    weights: &LossWeights,
    mode: LossMode,
) -> Result<(Var, LossBreakdown)> {
    let c = stft.config().compression;
    let samples = targets.clean_wave.shape()[1];
    let magnitude = mask.mul(&Var::constant(targets.noisy_magnitude.clone()))?;
    let rect = polar_to_rect(&magnitude, phase)?;
    let (clean_re, clean_im) = targets.clean.to_rect();
    let clean_rect = join_rect(&clean_re, &clean_im)?;

    let w = weights.effective(mode);
    // Components carrying zero weight are evaluated on detached values.
    let live = |weight: f64, v: &Var| if weight != 0.0 { v.clone() } else { Var::constant(v.value().clone()) };
    let linear = polar_to_rect(&live(w.time, &magnitude).powf(1.0 / c), &live(w.time, phase))?;
    let wave = stft.inverse_var(&linear, samples)?;
    let terms = LossTerms {
        magnitude: magnitude_loss(&magnitude, &targets.clean.magnitude)?,
        phase: phase_loss(phase, &targets.clean.phase)?,
        complex: complex_loss(&rect, &clean_rect)?,
        time: time_loss(&wave, targets.clean_wave)?,
        consistency: consistency_loss(stft, &live(w.consistency, &rect), Some(c), samples)?,
    };
    total_loss(mode, &terms, weights)
}
