//! Short-time Fourier analysis and synthesis, magnitude compression and WAV I/O.
//!
//! Spectra are laid out `[B, F, T]`: `F = fft_size / 2 + 1` bins by `T` frames.
//! Synthesis is weighted overlap-add divided by the summed squared window, so
//! any window whose squared shifts cover every sample reconstructs exactly.

mod fft;
mod wav;

use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use fft::{naive_dft, RealFft};
pub use wav::{wav_read, wav_write};

use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor, DType, Tensor, Var};

/// Envelope values below this are treated as uncovered samples.
const ENVELOPE_FLOOR: f64 = 1e-11;
const COLA_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    Hann,
    Rectangular,
}

impl Window {
    /// Periodic window of length `n`.
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        match self {
            Window::Hann => (0..n)
                .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
                .collect(),
            Window::Rectangular => vec![1.0; n],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Window::Hann => "hann",
            Window::Rectangular => "rectangular",
        }
    }

    pub fn parse(s: &str) -> Option<Window> {
        match s {
            "hann" => Some(Window::Hann),
            "rectangular" => Some(Window::Rectangular),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectroConfig {
    pub fft_size: usize,
    pub win_length: usize,
    pub hop: usize,
    pub window: Window,
    pub sample_rate: u32,
    pub segment_seconds: f64,
    pub compression: f64,
    pub center: bool,
}

impl Default for SpectroConfig {
    fn default() -> Self {
        SpectroConfig {
            fft_size: 400,
            win_length: 400,
            hop: 100,
            window: Window::Hann,
            sample_rate: 16_000,
            segment_seconds: 2.0,
            compression: 0.3,
            center: true,
        }
    }
}

impl SpectroConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fft_size == 0 || self.win_length == 0 || self.hop == 0 {
            return Err(Error::Config("fft_size, win_length and hop must be positive".into()));
        }
        if self.win_length > self.fft_size {
            return Err(Error::Config(format!(
                "win_length {} exceeds fft_size {}",
                self.win_length, self.fft_size
            )));
        }
        if self.hop > self.win_length {
            return Err(Error::Config(format!(
                "hop {} exceeds win_length {}",
                self.hop, self.win_length
            )));
        }
        if !(self.compression > 0.0 && self.compression <= 1.0) {
            return Err(Error::Config(format!(
                "compression exponent {} outside (0, 1]",
                self.compression
            )));
        }
        if self.sample_rate == 0 || !(self.segment_seconds > 0.0) {
            return Err(Error::Config("sample_rate and segment_seconds must be positive".into()));
        }
        let dev = self.cola_deviation();
        if dev >= COLA_TOLERANCE {
            return Err(Error::Config(format!(
                "{} window of length {} is not overlap-add constant at hop {} (deviation {dev:e})",
                self.window.name(),
                self.win_length,
                self.hop
            )));
        }
        Ok(())
    }

    /// Analysis window zero-padded and centred to `fft_size`.
    pub fn window_coefficients(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.fft_size];
        let offset = (self.fft_size - self.win_length) / 2;
        w[offset..offset + self.win_length].copy_from_slice(&self.window.coefficients(self.win_length));
        w
    }

    /// Largest relative spread of the summed squared window over one hop period.
    pub fn cola_deviation(&self) -> f64 {
        let w = self.window.coefficients(self.win_length);
        let sums: Vec<f64> = (0..self.hop)
            .map(|r| w.iter().skip(r).step_by(self.hop).map(|v| v * v).sum())
            .collect();
        let max = sums.iter().cloned().fold(f64::MIN, f64::max);
        let min = sums.iter().cloned().fold(f64::MAX, f64::min);
        if max <= 0.0 {
            return f64::INFINITY;
        }
        (max - min) / max
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn frames(&self, samples: usize) -> Result<usize> {
        if self.center {
            let pad = self.fft_size / 2;
            if samples <= pad || samples < self.win_length.min(pad + 1) {
                return Err(Error::InvalidShape(format!(
                    "{samples} samples are too short to reflect-pad by {pad}"
                )));
            }
            Ok(samples / self.hop + 1)
        } else {
            if samples < self.fft_size.max(self.win_length) {
                return Err(Error::InvalidShape(format!(
                    "{samples} samples are shorter than the window ({})",
                    self.fft_size
                )));
            }
            Ok((samples - self.fft_size) / self.hop + 1)
        }
    }

    pub fn segment_samples(&self) -> usize {
        (self.segment_seconds * self.sample_rate as f64).round() as usize
    }
}

/// Magnitude and phase, each `[B, F, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub magnitude: Tensor,
    pub phase: Tensor,
    pub config: SpectroConfig,
    /// Whether `magnitude` holds `|X|^c` rather than `|X|`.
    pub compressed: bool,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    config: SpectroConfig,
    compressed: bool,
    shape: Vec<usize>,
}

impl Spectrogram {
    pub fn batch(&self) -> usize {
        self.magnitude.shape()[0]
    }

    pub fn bins(&self) -> usize {
        self.magnitude.shape()[1]
    }

    pub fn frames(&self) -> usize {
        self.magnitude.shape()[2]
    }

    pub fn from_rect(re: &Tensor, im: &Tensor, config: &SpectroConfig, compressed: bool) -> Result<Self> {
        if re.shape() != im.shape() || re.rank() != 3 {
            return Err(Error::InvalidShape(format!(
                "real {:?} and imaginary {:?} parts must share a [B,F,T] shape",
                re.shape(),
                im.shape()
            )));
        }
        let mut magnitude = re.clone();
        let mut phase = re.clone();
        for (i, (&a, &b)) in re.data().iter().zip(im.data()).enumerate() {
            magnitude.data_mut()[i] = a.hypot(b);
            phase.data_mut()[i] = wrap_phase(b.atan2(a));
        }
        Ok(Spectrogram {
            magnitude,
            phase,
            config: config.clone(),
            compressed,
        })
    }

    pub fn to_rect(&self) -> (Tensor, Tensor) {
        let mut re = self.magnitude.clone();
        let mut im = self.magnitude.clone();
        for (i, (&m, &p)) in self.magnitude.data().iter().zip(self.phase.data()).enumerate() {
            re.data_mut()[i] = m * p.cos();
            im.data_mut()[i] = m * p.sin();
        }
        (re, im)
    }

    /// Raises magnitudes to the configured exponent. Phase is untouched.
    pub fn compress(&self) -> Result<Self> {
        if self.compressed {
            return Err(Error::InvalidShape("spectrogram is already compressed".into()));
        }
        let c = self.config.compression;
        Ok(Spectrogram {
            magnitude: self.magnitude.map(|m| m.powf(c)),
            phase: self.phase.clone(),
            config: self.config.clone(),
            compressed: true,
        })
    }

    pub fn decompress(&self) -> Result<Self> {
        if !self.compressed {
            return Err(Error::InvalidShape("spectrogram is not compressed".into()));
        }
        let inv = 1.0 / self.config.compression;
        Ok(Spectrogram {
            magnitude: self.magnitude.map(|m| m.powf(inv)),
            phase: self.phase.clone(),
            config: self.config.clone(),
            compressed: false,
        })
    }

    /// Writes `<stem>.pktn` (magnitude then phase) and `<stem>.json`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let mut buf = Vec::new();
        write_tensor(&mut buf, &self.magnitude, DType::F64)?;
        write_tensor(&mut buf, &self.phase, DType::F64)?;
        fs::write(stem.with_extension("pktn"), buf)?;
        let sidecar = Sidecar {
            config: self.config.clone(),
            compressed: self.compressed,
            shape: self.magnitude.shape().to_vec(),
        };
        let text = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(stem.with_extension("json"), text)?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let text = fs::read_to_string(stem.with_extension("json"))?;
        let sidecar: Sidecar = serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
        let bytes = fs::read(stem.with_extension("pktn"))?;
        let mut r = bytes.as_slice();
        let (magnitude, _) = read_tensor(&mut r)?;
        let (phase, _) = read_tensor(&mut r)?;
        if magnitude.shape() != sidecar.shape.as_slice() || phase.shape() != sidecar.shape.as_slice() {
            return Err(Error::Format(format!(
                "sidecar shape {:?} disagrees with stored tensors",
                sidecar.shape
            )));
        }
        Ok(Spectrogram {
            magnitude,
            phase,
            config: sidecar.config,
            compressed: sidecar.compressed,
        })
    }
}

/// Maps an angle into `(-pi, pi]`.
pub fn wrap_phase(p: f64) -> f64 {
    if p <= -PI {
        p + 2.0 * PI
    } else {
        p
    }
}

/// Analysis/synthesis engine for one configuration.
#[derive(Clone)]
pub struct Stft {
    config: SpectroConfig,
    window: Arc<Vec<f64>>,
    fft: Arc<RealFft>,
}

impl Stft {
    pub fn new(config: &SpectroConfig) -> Result<Self> {
        config.validate()?;
        Ok(Stft {
            config: config.clone(),
            window: Arc::new(config.window_coefficients()),
            fft: Arc::new(RealFft::new(config.fft_size)),
        })
    }

    pub fn config(&self) -> &SpectroConfig {
        &self.config
    }

    fn pad_len(&self) -> usize {
        if self.config.center {
            self.config.fft_size / 2
        } else {
            0
        }
    }

    fn padded(&self, x: &[f64]) -> Vec<f64> {
        let p = self.pad_len();
        let n = x.len() as isize;
        (0..x.len() + 2 * p)
            .map(|j| x[reflect(j as isize - p as isize, n)])
            .collect()
    }

    /// One signal to interleaved `[F, T]` real and imaginary planes.
    fn analyze(&self, x: &[f64], frames: usize) -> (Vec<f64>, Vec<f64>) {
        let (n, f, hop) = (self.config.fft_size, self.config.bins(), self.config.hop);
        let xp = self.padded(x);
        let mut re = vec![0.0; f * frames];
        let mut im = vec![0.0; f * frames];
        let mut frame = vec![0.0; n];
        let (mut fr, mut fi) = (vec![0.0; f], vec![0.0; f]);
        for t in 0..frames {
            for (i, v) in frame.iter_mut().enumerate() {
                *v = xp[t * hop + i] * self.window[i];
            }
            self.fft.forward(&frame, &mut fr, &mut fi);
            for k in 0..f {
                re[k * frames + t] = fr[k];
                im[k * frames + t] = fi[k];
            }
        }
        (re, im)
    }

    fn analyze_adjoint(&self, gre: &[f64], gim: &[f64], frames: usize, samples: usize) -> Vec<f64> {
        let (n, f, hop) = (self.config.fft_size, self.config.bins(), self.config.hop);
        let p = self.pad_len();
        let mut gp = vec![0.0; samples + 2 * p];
        let (mut fr, mut fi) = (vec![0.0; f], vec![0.0; f]);
        let mut frame = vec![0.0; n];
        for t in 0..frames {
            for k in 0..f {
                fr[k] = gre[k * frames + t];
                fi[k] = gim[k * frames + t];
            }
            self.fft.forward_adjoint(&fr, &fi, &mut frame);
            for i in 0..n {
                gp[t * hop + i] += frame[i] * self.window[i];
            }
        }
        let mut gx = vec![0.0; samples];
        for (j, g) in gp.iter().enumerate() {
            gx[reflect(j as isize - p as isize, samples as isize)] += g;
        }
        gx
    }

    fn envelope(&self, frames: usize) -> Vec<f64> {
        let (n, hop) = (self.config.fft_size, self.config.hop);
        let mut env = vec![0.0; (frames - 1) * hop + n];
        for t in 0..frames {
            for i in 0..n {
                env[t * hop + i] += self.window[i] * self.window[i];
            }
        }
        env
    }

    fn synthesize(&self, re: &[f64], im: &[f64], frames: usize, samples: usize) -> Vec<f64> {
        let (n, f, hop) = (self.config.fft_size, self.config.bins(), self.config.hop);
        let env = self.envelope(frames);
        let mut acc = vec![0.0; env.len()];
        let (mut fr, mut fi) = (vec![0.0; f], vec![0.0; f]);
        let mut frame = vec![0.0; n];
        for t in 0..frames {
            for k in 0..f {
                fr[k] = re[k * frames + t];
                fi[k] = im[k * frames + t];
            }
            self.fft.inverse(&fr, &fi, &mut frame);
            for i in 0..n {
                acc[t * hop + i] += frame[i] * self.window[i];
            }
        }
        let p = self.pad_len();
        (0..samples)
            .map(|m| match (acc.get(m + p), env.get(m + p)) {
                (Some(&a), Some(&e)) if e > ENVELOPE_FLOOR => a / e,
                _ => 0.0,
            })
            .collect()
    }

    fn synthesize_adjoint(&self, g: &[f64], frames: usize) -> (Vec<f64>, Vec<f64>) {
        let (n, f, hop) = (self.config.fft_size, self.config.bins(), self.config.hop);
        let env = self.envelope(frames);
        let p = self.pad_len();
        let mut gacc = vec![0.0; env.len()];
        for (m, &gm) in g.iter().enumerate() {
            if let Some(&e) = env.get(m + p) {
                if e > ENVELOPE_FLOOR {
                    gacc[m + p] = gm / e;
                }
            }
        }
        let mut gre = vec![0.0; f * frames];
        let mut gim = vec![0.0; f * frames];
        let mut frame = vec![0.0; n];
        let (mut fr, mut fi) = (vec![0.0; f], vec![0.0; f]);
        for t in 0..frames {
            for i in 0..n {
                frame[i] = gacc[t * hop + i] * self.window[i];
            }
            self.fft.inverse_adjoint(&frame, &mut fr, &mut fi);
            for k in 0..f {
                gre[k * frames + t] = fr[k];
                gim[k * frames + t] = fi[k];
            }
        }
        (gre, gim)
    }

    fn check_wave(&self, shape: &[usize]) -> Result<(usize, usize, usize)> {
        if shape.len() != 2 {
            return Err(Error::InvalidShape(format!("waveform must be [B,N], got {shape:?}")));
        }
        let frames = self.config.frames(shape[1])?;
        Ok((shape[0], shape[1], frames))
    }

    fn check_rect(&self, shape: &[usize]) -> Result<(usize, usize)> {
        if shape.len() != 4 || shape[1] != 2 {
            return Err(Error::InvalidShape(format!(
                "rectangular spectrum must be [B,2,F,T], got {shape:?}"
            )));
        }
        if shape[2] != self.config.bins() {
            return Err(Error::mismatch("frequency bins", self.config.bins(), shape[2]));
        }
        Ok((shape[0], shape[3]))
    }

    /// Rectangular spectrum `[B, 2, F, T]` with real part at index 0.
    pub fn forward_rect(&self, wave: &Tensor) -> Result<Tensor> {
        let (b, n, frames) = self.check_wave(wave.shape())?;
        let f = self.config.bins();
        let plane = f * frames;
        let mut out = Vec::with_capacity(b * 2 * plane);
        for bi in 0..b {
            let (re, im) = self.analyze(&wave.data()[bi * n..(bi + 1) * n], frames);
            out.extend(re);
            out.extend(im);
        }
        Ok(Tensor::from_parts(vec![b, 2, f, frames], out))
    }

    pub fn inverse_rect(&self, rect: &Tensor, samples: usize) -> Result<Tensor> {
        let (b, frames) = self.check_rect(rect.shape())?;
        let plane = self.config.bins() * frames;
        let mut out = Vec::with_capacity(b * samples);
        for bi in 0..b {
            let base = bi * 2 * plane;
            let d = rect.data();
            out.extend(self.synthesize(&d[base..base + plane], &d[base + plane..base + 2 * plane], frames, samples));
        }
        Ok(Tensor::from_parts(vec![b, samples], out))
    }

    pub fn stft(&self, wave: &Tensor) -> Result<Spectrogram> {
        let rect = self.forward_rect(wave)?;
        let (re, im) = split_rect(&rect);
        Spectrogram::from_rect(&re, &im, &self.config, false)
    }

    /// Inverts an uncompressed spectrogram to `samples` samples per item.
    pub fn istft(&self, spec: &Spectrogram, samples: usize) -> Result<Tensor> {
        if spec.config != self.config {
            return Err(Error::Config(
                "spectrogram was produced under a different spectral configuration".into(),
            ));
        }
        if spec.compressed {
            return Err(Error::InvalidShape("istft needs an uncompressed spectrogram".into()));
        }
        let (re, im) = spec.to_rect();
        self.inverse_rect(&join_rect(&re, &im)?, samples)
    }

    /// Differentiable [`forward_rect`](Self::forward_rect).
    pub fn forward_var(&self, wave: &Var) -> Result<Var> {
        let value = self.forward_rect(wave.value())?;
        let (b, n, frames) = self.check_wave(wave.shape())?;
        let this = self.clone();
        Ok(Var::from_op(
            "stft",
            value,
            vec![wave.clone()],
            Box::new(move |g, _, _| {
                let plane = this.config.bins() * frames;
                let mut gx = Vec::with_capacity(b * n);
                for bi in 0..b {
                    let base = bi * 2 * plane;
                    let d = g.data();
                    gx.extend(this.analyze_adjoint(
                        &d[base..base + plane],
                        &d[base + plane..base + 2 * plane],
                        frames,
                        n,
                    ));
                }
                vec![Some(Tensor::from_parts(vec![b, n], gx))]
            }),
        ))
    }

    /// Differentiable [`inverse_rect`](Self::inverse_rect).
    pub fn inverse_var(&self, rect: &Var, samples: usize) -> Result<Var> {
        let value = self.inverse_rect(rect.value(), samples)?;
        let (b, frames) = self.check_rect(rect.shape())?;
        let this = self.clone();
        Ok(Var::from_op(
            "istft",
            value,
            vec![rect.clone()],
            Box::new(move |g, _, _| {
                let f = this.config.bins();
                let mut out = Vec::with_capacity(b * 2 * f * frames);
                for bi in 0..b {
                    let (gre, gim) = this.synthesize_adjoint(&g.data()[bi * samples..(bi + 1) * samples], frames);
                    out.extend(gre);
                    out.extend(gim);
                }
                vec![Some(Tensor::from_parts(vec![b, 2, f, frames], out))]
            }),
        ))
    }
}

fn reflect(i: isize, n: isize) -> usize {
    let period = 2 * (n - 1);
    let mut j = i.rem_euclid(period.max(1));
    if j >= n {
        j = period - j;
    }
    j as usize
}

/// Splits `[B, 2, F, T]` into real and imaginary `[B, F, T]`.
pub fn split_rect(rect: &Tensor) -> (Tensor, Tensor) {
    let s = rect.shape();
    let (b, plane) = (s[0], s[2] * s[3]);
    let mut re = Vec::with_capacity(b * plane);
    let mut im = Vec::with_capacity(b * plane);
    for bi in 0..b {
        let base = bi * 2 * plane;
        re.extend_from_slice(&rect.data()[base..base + plane]);
        im.extend_from_slice(&rect.data()[base + plane..base + 2 * plane]);
    }
    let shape = vec![b, s[2], s[3]];
    (Tensor::from_parts(shape.clone(), re), Tensor::from_parts(shape, im))
}

pub fn join_rect(re: &Tensor, im: &Tensor) -> Result<Tensor> {
    if re.shape() != im.shape() || re.rank() != 3 {
        return Err(Error::InvalidShape(format!(
            "cannot join {:?} and {:?} into [B,2,F,T]",
            re.shape(),
            im.shape()
        )));
    }
    let s = re.shape();
    let plane = s[1] * s[2];
    let mut out = Vec::with_capacity(2 * re.numel());
    for bi in 0..s[0] {
        out.extend_from_slice(&re.data()[bi * plane..(bi + 1) * plane]);
        out.extend_from_slice(&im.data()[bi * plane..(bi + 1) * plane]);
    }
    Ok(Tensor::from_parts(vec![s[0], 2, s[1], s[2]], out))
}

/// Signal-to-noise ratio of `estimate` against `reference`, in dB.
pub fn snr_db(reference: &[f64], estimate: &[f64]) -> f64 {
    let signal: f64 = reference.iter().map(|v| v * v).sum();
    let noise: f64 = reference.iter().zip(estimate).map(|(a, b)| (a - b) * (a - b)).sum();
    10.0 * (signal / noise.max(1e-300)).log10()
}
