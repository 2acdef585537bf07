//! Real-input transforms of arbitrary length on top of `rustfft`'s mixed-radix
//! planner, together with the adjoints the tape needs.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

pub struct RealFft {
    n: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl RealFft {
    pub fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        RealFft {
            n,
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn bins(&self) -> usize {
        self.n / 2 + 1
    }

    fn has_nyquist(&self, k: usize) -> bool {
        self.n % 2 == 0 && k == self.n / 2
    }

    /// One-sided spectrum `X[k] = sum_n x[n] e^{-2 pi i k n / N}`.
    pub fn forward(&self, frame: &[f64], re: &mut [f64], im: &mut [f64]) {
        let mut buf: Vec<Complex64> = frame.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.forward.process(&mut buf);
        for k in 0..self.bins() {
            re[k] = buf[k].re;
            im[k] = buf[k].im;
        }
    }

    /// Real inverse with `1/N` scaling from a one-sided spectrum. Imaginary
    /// parts of the DC and Nyquist bins are ignored.
    pub fn inverse(&self, re: &[f64], im: &[f64], out: &mut [f64]) {
        let n = self.n;
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for k in 0..self.bins() {
            let imag = if k == 0 || self.has_nyquist(k) { 0.0 } else { im[k] };
            buf[k] = Complex64::new(re[k], imag);
            if k > 0 && !self.has_nyquist(k) {
                buf[n - k] = buf[k].conj();
            }
        }
        self.inverse.process(&mut buf);
        let scale = 1.0 / n as f64;
        for (o, v) in out.iter_mut().zip(&buf) {
            *o = v.re * scale;
        }
    }

    /// Adjoint of [`forward`](Self::forward): maps bin gradients to a frame gradient.
    pub fn forward_adjoint(&self, gre: &[f64], gim: &[f64], out: &mut [f64]) {
        let mut buf = vec![Complex64::new(0.0, 0.0); self.n];
        for k in 0..self.bins() {
            buf[k] = Complex64::new(gre[k], gim[k]);
        }
        self.inverse.process(&mut buf);
        for (o, v) in out.iter_mut().zip(&buf) {
            *o = v.re;
        }
    }

    /// Adjoint of [`inverse`](Self::inverse): maps a frame gradient to bin gradients.
    pub fn inverse_adjoint(&self, g: &[f64], gre: &mut [f64], gim: &mut [f64]) {
        let mut buf: Vec<Complex64> = g.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.forward.process(&mut buf);
        let n = self.n as f64;
        for k in 0..self.bins() {
            let edge = k == 0 || self.has_nyquist(k);
            let c = if edge { 1.0 } else { 2.0 };
            gre[k] = c * buf[k].re / n;
            gim[k] = if edge { 0.0 } else { c * buf[k].im / n };
        }
    }
}

/// Direct `O(N^2)` one-sided DFT, kept as the reference the fast path is
/// checked against.
pub fn naive_dft(x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = x.len();
    let bins = n / 2 + 1;
    let mut re = vec![0.0; bins];
    let mut im = vec![0.0; bins];
    for k in 0..bins {
        for (j, &v) in x.iter().enumerate() {
            // Reduce k*j mod n first so the angle stays small and accurate.
            let theta = 2.0 * std::f64::consts::PI * ((k * j) % n) as f64 / n as f64;
            re[k] += v * theta.cos();
            im[k] -= v * theta.sin();
        }
    }
    (re, im)
}
