use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Conv, Norm, ResidualScale};
use super::param::{Module, Param};
use crate::collect_params;
use crate::error::{Error, Result};
use crate::tensor::conv::ConvSpec;
use crate::tensor::{Tape, Var};

/// Kernel sizes of the four gated groups, in channel-group order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelGroup(pub [usize; 4]);

impl Default for KernelGroup {
    fn default() -> Self {
        KernelGroup([3, 11, 23, 31])
    }
}

impl KernelGroup {
    pub fn validate(&self) -> Result<()> {
        if let Some(k) = self.0.iter().find(|&&k| k == 0 || k % 2 == 0) {
            return Err(Error::Config(format!(
                "kernel group {:?} contains {k}; kernels must be odd and positive",
                self.0
            )));
        }
        if !self.0.iter().all(|&k| is_prime(k)) {
            log::warn!("kernel group {:?} is not all prime", self.0);
        }
        Ok(())
    }
}

fn is_prime(n: usize) -> bool {
    n >= 2 && (2..).take_while(|d| d * d <= n).all(|d| n % d != 0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    /// Standardize across channels at each position.
    Channel,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpfcaConfig {
    pub channels: usize,
    pub kernel_group: KernelGroup,
    /// Hidden width of the feed-forward network is `ffn_expansion * channels`.
    pub ffn_expansion: usize,
    pub norm: NormKind,
    /// Use one depthwise layer for both the gate and the value path of each
    /// fusion gate instead of two.
    pub shared_dwc: bool,
}

impl Default for GpfcaConfig {
    fn default() -> Self {
        GpfcaConfig {
            channels: 64,
            kernel_group: KernelGroup::default(),
            ffn_expansion: 2,
            norm: NormKind::Channel,
            shared_dwc: false,
        }
    }
}

impl GpfcaConfig {
    pub fn hidden(&self) -> usize {
        self.ffn_expansion * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.ffn_expansion == 0 {
            return Err(Error::Config("channels and ffn_expansion must be positive".into()));
        }
        if self.hidden() % 4 != 0 {
            return Err(Error::Config(format!(
                "ffn_expansion * channels = {} must be divisible by 4",
                self.hidden()
            )));
        }
        self.kernel_group.validate()
    }
}

/// `x ⊙ (W mean_T(x) + b)` with a `[C, C]` mixing matrix given as a `[C, C, 1]`
/// pointwise weight.
pub fn sca_forward(x: &Var, weight: &Var, bias: Option<&Var>) -> Result<Var> {
    let &[_, c, _] = x.shape() else {
        return Err(Error::InvalidShape(format!("channel attention input must be [B, C, T], got {:?}", x.shape())));
    };
    let spec = ConvSpec::pointwise(c, c);
    if weight.shape() != spec.weight_shape_1d() {
        return Err(Error::mismatch("attention channels", c, weight.shape()[0]));
    }
    let pooled = x.mean_last_axis()?;
    let weights = crate::tensor::conv::conv1d(&pooled, weight, bias, &spec)?;
    x.mul(&weights)
}

#[derive(Debug, Clone)]
pub struct Sca {
    pub pwc: Conv,
}

impl Sca {
    pub fn new(name: &str, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Sca {
            pwc: Conv::new1d(&format!("{name}.pwc"), ConvSpec::pointwise(channels, channels), true, rng)?,
        })
    }

    pub fn forward(&self, tape: &Tape, x: &Var) -> Result<Var> {
        let b = self.pwc.bias.as_ref().map(|p| p.var(tape));
        sca_forward(x, &self.pwc.weight.var(tape), b.as_ref())
    }
}

impl Module for Sca {
    fn params(&self) -> Vec<&Param> {
        self.pwc.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.pwc.params_mut()
    }
}

/// Depth-wise fusion gate: `PWC(DWC_gate(x)) ⊙ DWC_value(x)`.
#[derive(Debug, Clone)]
pub struct Dfg {
    pub kernel: usize,
    pub gate_dwc: Conv,
    pub pwc: Conv,
    /// `None` when the value path reuses `gate_dwc`.
    pub value_dwc: Option<Conv>,
}

impl Dfg {
    pub fn new(name: &str, channels: usize, kernel: usize, shared_dwc: bool, rng: &mut impl Rng) -> Result<Self> {
        let dw = ConvSpec::depthwise1d(channels, kernel, 1);
        let gate_dwc = Conv::new1d(&format!("{name}.gate_dwc"), dw, true, rng)?;
        let pwc = Conv::new1d(&format!("{name}.pwc"), ConvSpec::pointwise(channels, channels), true, rng)?;
        let value_dwc = match shared_dwc {
            true => None,
            false => Some(Conv::new1d(&format!("{name}.value_dwc"), dw, true, rng)?),
        };
        Ok(Dfg {
            kernel,
            gate_dwc,
            pwc,
            value_dwc,
        })
    }

    pub fn forward(&self, tape: &Tape, x: &Var) -> Result<Var> {
        let g = self.gate_dwc.forward(tape, x)?;
        let gate = self.pwc.forward(tape, &g)?;
        let value = match &self.value_dwc {
            Some(conv) => conv.forward(tape, x)?,
            None => g,
        };
        gate.mul(&value)
    }
}

impl Module for Dfg {
    fn params(&self) -> Vec<&Param> {
        collect_params!(self; gate_dwc, pwc, value_dwc)
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        collect_params!(mut self; gate_dwc, pwc, value_dwc)
    }
}

/// Four fusion gates over the channel quarters, one kernel size each.
#[derive(Debug, Clone)]
pub struct Gpgu {
    pub groups: Vec<Dfg>,
}

impl Gpgu {
    pub fn new(name: &str, channels: usize, kernels: KernelGroup, shared_dwc: bool, rng: &mut impl Rng) -> Result<Self> {
        kernels.validate()?;
        if channels % 4 != 0 {
            return Err(Error::Config(format!("gated unit needs channels divisible by 4, got C={channels}")));
        }
        let groups = kernels
            .0
            .iter()
            .enumerate()
            .map(|(i, &k)| Dfg::new(&format!("{name}.dfg{}", i + 1), channels / 4, k, shared_dwc, rng))
            .collect::<Result<_>>()?;
        Ok(Gpgu { groups })
    }

    pub fn forward(&self, tape: &Tape, x: &Var) -> Result<Var> {
        let parts = x.chunk4()?;
        let outs = parts
            .iter()
            .zip(&self.groups)
            .map(|(a, dfg)| dfg.forward(tape, a))
            .collect::<Result<Vec<_>>>()?;
        Var::concat(&outs, 1)
    }
}

impl Module for Gpgu {
    fn params(&self) -> Vec<&Param> {
        self.groups.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.groups.params_mut()
    }
}

/// Pointwise expansion, gated unit, pointwise compression.
#[derive(Debug, Clone)]
pub struct Gpfn {
    pub expand: Conv,
    pub gpgu: Gpgu,
    pub compress: Conv,
}

impl Gpfn {
    pub fn new(name: &str, cfg: &GpfcaConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let (c, h) = (cfg.channels, cfg.hidden());
        Ok(Gpfn {
            expand: Conv::new1d(&format!("{name}.expand"), ConvSpec::pointwise(c, h), true, rng)?,
            gpgu: Gpgu::new(&format!("{name}.gpgu"), h, cfg.kernel_group, cfg.shared_dwc, rng)?,
            compress: Conv::new1d(&format!("{name}.compress"), ConvSpec::pointwise(h, c), true, rng)?,
        })
    }

    pub fn forward(&self, tape: &Tape, x: &Var) -> Result<Var> {
        let h = self.expand.forward(tape, x)?;
        let h = self.gpgu.forward(tape, &h)?;
        self.compress.forward(tape, &h)
    }
}

impl Module for Gpfn {
    fn params(&self) -> Vec<&Param> {
        collect_params!(self; expand, gpgu, compress)
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        collect_params!(mut self; expand, gpgu, compress)
    }
}

/// Channel-attention sub-block followed by the feed-forward sub-block, each
/// pre-normalized and added back through a zero-initialized residual scale.
#[derive(Debug, Clone)]
pub struct Gpfca {
    pub norm1: Option<Norm>,
    pub pw1: Conv,
    pub dw: Conv,
    pub sca: Sca,
    pub pw2: Conv,
    pub beta: ResidualScale,
    pub norm2: Option<Norm>,
    pub gpfn: Gpfn,
    pub gamma: ResidualScale,
}

impl Gpfca {
    pub fn new(name: &str, cfg: &GpfcaConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let norm = |n: &str| match cfg.norm {
            NormKind::Channel => Some(Norm::channel(&format!("{name}.{n}"), c)),
            NormKind::None => None,
        };
        Ok(Gpfca {
            norm1: norm("norm1"),
            pw1: Conv::new1d(&format!("{name}.pw1"), ConvSpec::pointwise(c, 2 * c), true, rng)?,
            dw: Conv::new1d(&format!("{name}.dw"), ConvSpec::depthwise1d(2 * c, 3, 1), true, rng)?,
            sca: Sca::new(&format!("{name}.sca"), c, rng)?,
            pw2: Conv::new1d(&format!("{name}.pw2"), ConvSpec::pointwise(c, c), true, rng)?,
            beta: ResidualScale::new(&format!("{name}.beta"), c),
            norm2: norm("norm2"),
            gpfn: Gpfn::new(&format!("{name}.gpfn"), cfg, rng)?,
            gamma: ResidualScale::new(&format!("{name}.gamma"), c),
        })
    }

    fn normed(norm: &Option<Norm>, tape: &Tape, x: &Var) -> Result<Var> {
        match norm {
            Some(n) => n.forward(tape, x),
            None => Ok(x.clone()),
        }
    }

    pub fn attention_branch(&self, tape: &Tape, x: &Var) -> Result<Var> {
        let h = Self::normed(&self.norm1, tape, x)?;
        let h = self.dw.forward(tape, &self.pw1.forward(tape, &h)?)?;
        let halves = h.chunk(2)?;
        let h = halves[0].mul(&halves[1])?;
        let h = self.sca.forward(tape, &h)?;
        self.pw2.forward(tape, &h)
    }

    pub fn forward(&self, tape: &Tape, x: &Var) -> Result<Var> {
        let y = self.beta.apply(tape, x, &self.attention_branch(tape, x)?)?;
        let h = Self::normed(&self.norm2, tape, &y)?;
        self.gamma.apply(tape, &y, &self.gpfn.forward(tape, &h)?)
    }
}

impl Module for Gpfca {
    fn params(&self) -> Vec<&Param> {
        collect_params!(self; norm1, pw1, dw, sca, pw2, beta, norm2, gpfn, gamma)
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        collect_params!(mut self; norm1, pw1, dw, sca, pw2, beta, norm2, gpfn, gamma)
    }
}
