use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dense::{DenseBlock, DenseBlockSpec};
use super::gpfca::{Gpfca, GpfcaConfig};
use super::layers::{Conv, ConvTranspose, Norm, PRelu};
use super::param::{Module, Param};
use crate::collect_params;
use crate::error::{Error, Result};
use crate::spectral::{Spectrogram, Stft};
use crate::tensor::conv::{mac_count, ConvSpec, Padding};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dense: DenseBlockSpec,
    pub gpfca: GpfcaConfig,
    /// Number of (time-axis, frequency-axis) GPFCA pairs.
    pub ts_block_count: usize,
    /// Upper bound of the magnitude mask.
    pub mask_max: f64,
    /// Add the phase head's output onto the noisy compressed spectrum before
    /// taking the angle, so zero head weights reproduce the noisy phase.
    pub phase_residual: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dense: DenseBlockSpec::default(),
            gpfca: GpfcaConfig::default(),
            ts_block_count: 2,
            mask_max: 2.0,
            phase_residual: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.dense.validate()?;
        self.gpfca.validate()?;
        if self.dense.channels != self.gpfca.channels {
            return Err(Error::Config(format!(
                "dense block channels {} differ from GPFCA channels {}",
                self.dense.channels, self.gpfca.channels
            )));
        }
        if self.ts_block_count == 0 {
            return Err(Error::Config("ts_block_count must be at least 1".into()));
        }
        if !(self.mask_max > 0.0 && self.mask_max.is_finite()) {
            return Err(Error::Config(format!("mask_max {} must be positive", self.mask_max)));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.dense.channels
    }
}

/// Frequency bins after the stride-2 encoder reduction.
pub fn reduced_bins(f: usize) -> usize {
    (f - 1) / 2 + 1
}

fn resample_spec(c: usize) -> ConvSpec {
    ConvSpec::conv2d(c, c, [1, 3], [1, 1], 1)
        .with_stride([1, 2])
        .with_padding(Padding::Explicit([0, 1]))
}

/// Records convolution MACs spent in each named stage of a forward pass.
#[derive(Debug, Default, Clone)]
pub struct StageMeter {
    last: u64,
    pub stages: Vec<(String, u64)>,
}

impl StageMeter {
    pub fn start() -> Self {
        StageMeter {
            last: mac_count(),
            stages: Vec::new(),
        }
    }

    pub fn mark(&mut self, name: impl Into<String>) {
        let now = mac_count();
        self.stages.push((name.into(), now - self.last));
        self.last = now;
    }
}

fn mark(meter: &mut Option<&mut StageMeter>, name: impl FnOnce() -> String) {
    if let Some(m) = meter.as_deref_mut() {
        m.mark(name());
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub in_conv: Conv,
    pub in_norm: Norm,
    pub in_act: PRelu,
    pub dense: DenseBlock,
    pub down: Conv,
    pub down_norm: Norm,
    pub down_act: PRelu,
}

impl Encoder {
    pub fn new(name: &str, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let c = cfg.channels();
        Ok(Encoder {
            in_conv: Conv::new2d(&format!("{name}.in_conv"), ConvSpec::conv2d(2, c, [1, 1], [1, 1], 1), true, rng)?,
            in_norm: Norm::instance(&format!("{name}.in_norm"), c),
            in_act: PRelu::new(&format!("{name}.in_act"), c),
            dense: DenseBlock::new(&format!("{name}.dense"), &cfg.dense, rng)?,
            down: Conv::new2d(&format!("{name}.down"), resample_spec(c), true, rng)?,
            down_norm: Norm::instance(&format!("{name}.down_norm"), c),
            down_act: PRelu::new(&format!("{name}.down_act"), c),
        })
    }

    /// `[B, 2, T, F] -> [B, C, T, F']`.
    pub fn forward(&self, tape: &Tape, x: &Var, meter: &mut Option<&mut StageMeter>) -> Result<Var> {
        let h = self.in_conv.forward(tape, x)?;
        let h = self.in_act.forward(tape, &self.in_norm.forward(tape, &h)?)?;
        mark(meter, || "encoder.in_conv".into());
        let h = self.dense.forward(tape, &h)?;
        mark(meter, || "encoder.dense".into());
        let h = self.down.forward(tape, &h)?;
        let h = self.down_act.forward(tape, &self.down_norm.forward(tape, &h)?)?;
        mark(meter, || "encoder.down".into());
        Ok(h)
    }
}

impl Module for Encoder {
    fn params(&self) -> Vec<&Param> {
        collect_params!(self; in_conv, in_norm, in_act, dense, down, down_norm, down_act)
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        collect_params!(mut self; in_conv, in_norm, in_act, dense, down, down_norm, down_act)
    }
}

/// One GPFCA along time (frequency folded into the batch) followed by one
/// along frequency (time folded into the batch).
#[derive(Debug, Clone)]
pub struct TsBlock {
    pub time: Gpfca,
    pub freq: Gpfca,
}

impl TsBlock {
    pub fn new(name: &str, cfg: &GpfcaConfig, rng: &mut impl Rng) -> Result<Self> {
        Ok(TsBlock {
            time: Gpfca::new(&format!("{name}.time"), cfg, rng)?,
            freq: Gpfca::new(&format!("{name}.freq"), cfg, rng)?,
        })
    }

    pub fn forward_time(&self, tape: &Tape, x: &Var) -> Result<Var> {
        let &[b, c, t, f] = x.shape() else { unreachable!("encoder output is rank 4") };
        let h = x.permute(&[0, 3, 1, 2])?.reshape(&[b * f, c, t])?;
        let h = self.time.forward(tape, &h)?;
        h.reshape(&[b, f, c, t])?.permute(&[0, 2, 3, 1])
    }

    pub fn forward_freq(&self, tape: &Tape, x: &Var) -> Result<Var> {
        let &[b, c, t, f] = x.shape() else { unreachable!("encoder output is rank 4") };
        let h = x.permute(&[0, 2, 1, 3])?.reshape(&[b * t, c, f])?;
        let h = self.freq.forward(tape, &h)?;
        h.reshape(&[b, t, c, f])?.permute(&[0, 2, 1, 3])
    }
}

impl Module for TsBlock {
    fn params(&self) -> Vec<&Param> {
        collect_params!(self; time, freq)
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        collect_params!(mut self; time, freq)
    }
}

/// Dense block, transposed convolution back to full resolution, and a
/// single-channel projection squashed into `(0, mask_max)`.
#[derive(Debug, Clone)]
pub struct MaskDecoder {
    pub dense: DenseBlock,
    pub up: ConvTranspose,
    pub proj: Conv,
    pub norm: Norm,
    pub act: PRelu,
    pub out: Conv,
    pub mask_max: f64,
}

impl MaskDecoder {
    pub fn new(name: &str, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let c = cfg.channels();
        Ok(MaskDecoder {
            dense: DenseBlock::new(&format!("{name}.dense"), &cfg.dense, rng)?,
            up: ConvTranspose::new(&format!("{name}.up"), resample_spec(c), rng)?,
            proj: Conv::new2d(&format!("{name}.proj"), ConvSpec::conv2d(c, 1, [1, 1], [1, 1], 1), true, rng)?,
            norm: Norm::instance(&format!("{name}.norm"), 1),
            act: PRelu::new(&format!("{name}.act"), 1),
            out: Conv::new2d(&format!("{name}.out"), ConvSpec::conv2d(1, 1, [1, 1], [1, 1], 1), true, rng)?,
            mask_max: cfg.mask_max,
        })
    }

    /// `[B, C, T, F'] -> [B, 1, T, F]`.
    pub fn forward(&self, tape: &Tape, x: &Var, bins: usize) -> Result<Var> {
        let t = x.shape()[2];
        let h = self.dense.forward(tape, x)?;
        let h = self.up.forward(tape, &h, [t, bins])?;
        let h = self.proj.forward(tape, &h)?;
        let h = self.act.forward(tape, &self.norm.forward(tape, &h)?)?;
        Ok(self.out.forward(tape, &h)?.sigmoid().scale(self.mask_max))
    }
}

impl Module for MaskDecoder {
    fn params(&self) -> Vec<&Param> {
        collect_params!(self; dense, up, proj, norm, act, out)
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        collect_params!(mut self; dense, up, proj, norm, act, out)
    }
}

/// Dense block, transposed convolution, and two single-channel projections
/// read as the real and imaginary parts of a phase estimate.
#[derive(Debug, Clone)]
pub struct PhaseDecoder {
    pub dense: DenseBlock,
    pub up: ConvTranspose,
    pub norm: Norm,
    pub act: PRelu,
    pub real: Conv,
    pub imag: Conv,
}

impl PhaseDecoder {
    pub fn new(name: &str, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let c = cfg.channels();
        let head = ConvSpec::conv2d(c, 1, [1, 1], [1, 1], 1);
        Ok(PhaseDecoder {
            dense: DenseBlock::new(&format!("{name}.dense"), &cfg.dense, rng)?,
            up: ConvTranspose::new(&format!("{name}.up"), resample_spec(c), rng)?,
            norm: Norm::instance(&format!("{name}.norm"), c),
            act: PRelu::new(&format!("{name}.act"), c),
            real: Conv::new2d(&format!("{name}.real"), head, true, rng)?,
            imag: Conv::new2d(&format!("{name}.imag"), head, true, rng)?,
        })
    }

    /// `[B, C, T, F'] -> ([B, 1, T, F], [B, 1, T, F])` before the angle.
    pub fn forward(&self, tape: &Tape, x: &Var, bins: usize) -> Result<(Var, Var)> {
        let t = x.shape()[2];
        let h = self.dense.forward(tape, x)?;
        let h = self.up.forward(tape, &h, [t, bins])?;
        let h = self.act.forward(tape, &self.norm.forward(tape, &h)?)?;
        Ok((self.real.forward(tape, &h)?, self.imag.forward(tape, &h)?))
    }
}

impl Module for PhaseDecoder {
    fn params(&self) -> Vec<&Param> {
        collect_params!(self; dense, up, norm, act, real, imag)
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        collect_params!(mut self; dense, up, norm, act, real, imag)
    }
}

/// Mask and phase, each `[B, F, T]`.
pub struct ModelOutput {
    pub mask: Var,
    pub phase: Var,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub ts_blocks: Vec<TsBlock>,
    pub mask_decoder: MaskDecoder,
    pub phase_decoder: PhaseDecoder,
}

impl Model {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Model {
            config: config.clone(),
            encoder: Encoder::new("encoder", config, &mut rng)?,
            ts_blocks: (1..=config.ts_block_count)
                .map(|i| TsBlock::new(&format!("ts{i}"), &config.gpfca, &mut rng))
                .collect::<Result<_>>()?,
            mask_decoder: MaskDecoder::new("mask_decoder", config, &mut rng)?,
            phase_decoder: PhaseDecoder::new("phase_decoder", config, &mut rng)?,
        })
    }

    /// Sets the heads so the mask is exactly 1 and the phase equals the input
    /// phase wherever the input magnitude is nonzero.
    pub fn set_identity_heads(&mut self) -> Result<()> {
        if !self.config.phase_residual {
            return Err(Error::Config("an identity phase needs phase_residual = true".into()));
        }
        if self.config.mask_max <= 1.0 {
            return Err(Error::Config("a unit mask needs mask_max > 1".into()));
        }
        let target = 1.0 / self.config.mask_max;
        self.mask_decoder.out.zero();
        let bias = self.mask_decoder.out.bias.as_mut().expect("mask output has a bias");
        bias.value = Tensor::full(&[1], (target / (1.0 - target)).ln());
        self.phase_decoder.real.zero();
        self.phase_decoder.imag.zero();
        Ok(())
    }

    /// Runs the network on compressed magnitude and phase, both `[B, F, T]`.
    pub fn forward(&self, tape: &Tape, magnitude: &Tensor, phase: &Tensor) -> Result<ModelOutput> {
        self.forward_metered(tape, magnitude, phase, None)
    }

    pub fn forward_metered(
        &self,
        tape: &Tape,
        magnitude: &Tensor,
        phase: &Tensor,
        meter: Option<&mut StageMeter>,
    ) -> Result<ModelOutput> {
        let mut meter = meter;
        let &[b, f, t] = magnitude.shape() else {
            return Err(Error::InvalidShape(format!("magnitude must be [B, F, T], got {:?}", magnitude.shape())));
        };
        if phase.shape() != magnitude.shape() {
            return Err(Error::InvalidShape(format!(
                "phase {:?} and magnitude {:?} differ",
                phase.shape(),
                magnitude.shape()
            )));
        }
        if f < 3 {
            return Err(Error::InvalidShape(format!("need at least 3 frequency bins, got {f}")));
        }
        let to_tf = |x: &Tensor| -> Result<Var> { Var::constant(x.clone()).reshape(&[b, 1, f, t])?.permute(&[0, 1, 3, 2]) };
        let mag_tf = to_tf(magnitude)?;
        let pha_tf = to_tf(phase)?;
        let input = Var::concat(&[mag_tf.clone(), pha_tf.clone()], 1)?;

        let mut h = self.encoder.forward(tape, &input, &mut meter)?;
        for (i, block) in self.ts_blocks.iter().enumerate() {
            h = block.forward_time(tape, &h)?;
            mark(&mut meter, || format!("ts{}.time", i + 1));
            h = block.forward_freq(tape, &h)?;
            mark(&mut meter, || format!("ts{}.freq", i + 1));
        }
        let mask = self.mask_decoder.forward(tape, &h, f)?;
        mark(&mut meter, || "mask_decoder".into());
        let (mut re, mut im) = self.phase_decoder.forward(tape, &h, f)?;
        mark(&mut meter, || "phase_decoder".into());
        if self.config.phase_residual {
            re = re.add(&mag_tf.mul(&pha_tf.cos())?)?;
            im = im.add(&mag_tf.mul(&pha_tf.sin())?)?;
        }
        let phase = Var::atan2(&im, &re)?;
        let to_ft = |x: &Var| -> Result<Var> { x.permute(&[0, 1, 3, 2])?.reshape(&[b, f, t]) };
        Ok(ModelOutput {
            mask: to_ft(&mask)?,
            phase: to_ft(&phase)?,
        })
    }

    /// Enhances `[B, N]` waveforms: the mask scales the compressed noisy
    /// magnitude, the predicted phase replaces the noisy one, and the result
    /// is decompressed and inverted to the input length.
    pub fn enhance(&self, stft: &Stft, wave: &Tensor) -> Result<Tensor> {
        let n = wave.shape().get(1).copied().unwrap_or(0);
        let noisy = stft.stft(wave)?.compress()?;
        let tape = Tape::inference();
        let out = self.forward(&tape, &noisy.magnitude, &noisy.phase)?;
        let mut magnitude = noisy.magnitude.clone();
        for (m, k) in magnitude.data_mut().iter_mut().zip(out.mask.value().data()) {
            *m *= k;
        }
        let enhanced = Spectrogram {
            magnitude,
            phase: out.phase.value().clone(),
            config: noisy.config.clone(),
            compressed: true,
        };
        stft.istft(&enhanced.decompress()?, n)
    }
}

impl Module for Model {
    fn params(&self) -> Vec<&Param> {
        collect_params!(self; encoder, ts_blocks, mask_decoder, phase_decoder)
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        collect_params!(mut self; encoder, ts_blocks, mask_decoder, phase_decoder)
    }
}
