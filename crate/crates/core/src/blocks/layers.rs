use rand::Rng;

use super::param::{Module, Param, ParamKind};
use crate::error::Result;
use crate::tensor::conv::{conv1d, conv2d, conv_transpose2d, ConvSpec};
use crate::tensor::{Tape, Tensor, Var};

pub const NORM_EPS: f64 = 1e-5;
pub const PRELU_INIT: f64 = 0.25;

/// Convolution over `[B, C, T]` (one-dimensional) or `[B, C, H, W]`.
#[derive(Debug, Clone)]
pub struct Conv {
    pub spec: ConvSpec,
    pub weight: Param,
    pub bias: Option<Param>,
}

impl Conv {
    fn build(name: &str, spec: ConvSpec, shape: &[usize], bias: bool, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let fan_in = spec.weight_shape()[1..].iter().product();
        Ok(Conv {
            spec,
            weight: Param::fan_in_uniform(format!("{name}.weight"), shape, fan_in, ParamKind::ConvWeight, rng),
            bias: bias.then(|| {
                Param::fan_in_uniform(format!("{name}.bias"), &[spec.out_channels], fan_in, ParamKind::Bias, rng)
            }),
        })
    }

    pub fn new1d(name: &str, spec: ConvSpec, bias: bool, rng: &mut impl Rng) -> Result<Self> {
        Self::build(name, spec, &spec.weight_shape_1d(), bias, rng)
    }

    pub fn new2d(name: &str, spec: ConvSpec, bias: bool, rng: &mut impl Rng) -> Result<Self> {
        Self::build(name, spec, &spec.weight_shape(), bias, rng)
    }

    pub fn forward(&self, tape: &Tape, x: &Var) -> Result<Var> {
        let w = self.weight.var(tape);
        let b = self.bias.as_ref().map(|p| p.var(tape));
        if self.weight.value.rank() == 3 {
            conv1d(x, &w, b.as_ref(), &self.spec)
        } else {
            conv2d(x, &w, b.as_ref(), &self.spec)
        }
    }

    /// Zeroes weight and bias so the layer outputs exactly zero.
    pub fn zero(&mut self) {
        for p in self.params_mut() {
            p.value = Tensor::zeros(p.value.shape());
        }
    }
}

impl Module for Conv {
    fn params(&self) -> Vec<&Param> {
        let mut v = vec![&self.weight];
        v.extend(self.bias.as_ref());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = vec![&mut self.weight];
        v.extend(self.bias.as_mut());
        v
    }
}

/// Transposed two-dimensional convolution with weight `[C_in, C_out, Kh, Kw]`.
#[derive(Debug, Clone)]
pub struct ConvTranspose {
    pub spec: ConvSpec,
    pub weight: Param,
    pub bias: Param,
}

impl ConvTranspose {
    pub fn new(name: &str, spec: ConvSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let [kh, kw] = spec.kernel;
        let fan_in = spec.out_channels * kh * kw;
        let shape = [spec.in_channels, spec.out_channels, kh, kw];
        Ok(ConvTranspose {
            spec,
            weight: Param::fan_in_uniform(format!("{name}.weight"), &shape, fan_in, ParamKind::ConvWeight, rng),
            bias: Param::fan_in_uniform(format!("{name}.bias"), &[spec.out_channels], fan_in, ParamKind::Bias, rng),
        })
    }

    pub fn forward(&self, tape: &Tape, x: &Var, out_hw: [usize; 2]) -> Result<Var> {
        conv_transpose2d(x, &self.weight.var(tape), Some(&self.bias.var(tape)), &self.spec, out_hw)
    }
}

impl Module for ConvTranspose {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Per-channel standardization followed by a learnable affine map. The axis
/// range that is standardized decides the flavour: `2..4` on `[B, C, T, F]`
/// is instance norm, `1..2` on `[B, C, T]` is a layer norm across channels.
#[derive(Debug, Clone)]
pub struct Norm {
    pub axes: (usize, usize),
    pub gamma: Param,
    pub beta: Param,
}

impl Norm {
    fn build(name: &str, channels: usize, axes: (usize, usize)) -> Self {
        Norm {
            axes,
            gamma: Param::new(format!("{name}.gamma"), Tensor::full(&[channels], 1.0), ParamKind::NormAffine),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(&[channels]), ParamKind::NormAffine),
        }
    }

    /// Statistics over time and frequency of each `(b, c)` map.
    pub fn instance(name: &str, channels: usize) -> Self {
        Self::build(name, channels, (2, 4))
    }

    /// Statistics over channels at each `(b, t)` position.
    pub fn channel(name: &str, channels: usize) -> Self {
        Self::build(name, channels, (1, 2))
    }

    pub fn forward(&self, tape: &Tape, x: &Var) -> Result<Var> {
        let y = x.normalize(self.axes.0, self.axes.1, NORM_EPS)?;
        y.channel_affine(Some(&self.gamma.var(tape)), Some(&self.beta.var(tape)))
    }
}

impl Module for Norm {
    fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

#[derive(Debug, Clone)]
pub struct PRelu {
    pub alpha: Param,
}

impl PRelu {
    pub fn new(name: &str, channels: usize) -> Self {
        PRelu {
            alpha: Param::new(format!("{name}.alpha"), Tensor::full(&[channels], PRELU_INIT), ParamKind::Activation),
        }
    }

    pub fn forward(&self, tape: &Tape, x: &Var) -> Result<Var> {
        x.prelu(&self.alpha.var(tape))
    }
}

impl Module for PRelu {
    fn params(&self) -> Vec<&Param> {
        vec![&self.alpha]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.alpha]
    }
}

/// Learnable per-channel multiplier on a residual branch, initialized to zero
/// so a fresh block is the identity.
#[derive(Debug, Clone)]
pub struct ResidualScale {
    pub scale: Param,
}

impl ResidualScale {
    pub fn new(name: &str, channels: usize) -> Self {
        ResidualScale {
            scale: Param::new(name, Tensor::zeros(&[channels]), ParamKind::ResidualScale),
        }
    }

    /// `x + scale ⊙ branch`.
    pub fn apply(&self, tape: &Tape, x: &Var, branch: &Var) -> Result<Var> {
        x.add(&branch.channel_affine(Some(&self.scale.var(tape)), None)?)
    }
}

impl Module for ResidualScale {
    fn params(&self) -> Vec<&Param> {
        vec![&self.scale]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.scale]
    }
}
