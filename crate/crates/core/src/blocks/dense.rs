use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Conv, Norm, PRelu};
use super::param::{Module, Param};
use crate::collect_params;
use crate::error::{Error, Result};
use crate::tensor::conv::ConvSpec;
use crate::tensor::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DenseVariant {
    /// Full dilated convolution per layer.
    Ddb,
    /// Depthwise dilated convolution followed by a pointwise convolution.
    Dsddb,
}

impl DenseVariant {
    pub fn name(self) -> &'static str {
        match self {
            DenseVariant::Ddb => "ddb",
            DenseVariant::Dsddb => "dsddb",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ddb" => Some(DenseVariant::Ddb),
            "dsddb" => Some(DenseVariant::Dsddb),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseBlockSpec {
    pub depth: usize,
    pub channels: usize,
    pub kernel: usize,
    /// Time-axis dilation of each layer.
    pub dilations: Vec<usize>,
    pub variant: DenseVariant,
}

impl Default for DenseBlockSpec {
    fn default() -> Self {
        Self::new(4, 64, 3, DenseVariant::Dsddb)
    }
}

impl DenseBlockSpec {
    /// Dilations double per layer: 1, 2, 4, ...
    pub fn new(depth: usize, channels: usize, kernel: usize, variant: DenseVariant) -> Self {
        DenseBlockSpec {
            depth,
            channels,
            kernel,
            dilations: (0..depth).map(|i| 1 << i).collect(),
            variant,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.channels == 0 {
            return Err(Error::Config("dense block depth and channels must be positive".into()));
        }
        if self.dilations.len() != self.depth {
            return Err(Error::Config(format!(
                "dense block has depth {} but {} dilations",
                self.depth,
                self.dilations.len()
            )));
        }
        if self.kernel % 2 == 0 || self.dilations.contains(&0) {
            return Err(Error::Config(format!(
                "dense block kernel {} must be odd and dilations {:?} positive",
                self.kernel, self.dilations
            )));
        }
        Ok(())
    }

    /// Convolution(s) of layer `i` (1-based): `(depthwise, main)`.
    pub fn layer_specs(&self, i: usize) -> (Option<ConvSpec>, ConvSpec) {
        let (c, k) = (self.channels, self.kernel);
        let cin = i * c;
        let dilation = [self.dilations[i - 1], 1];
        match self.variant {
            DenseVariant::Ddb => (None, ConvSpec::conv2d(cin, c, [k, k], dilation, 1)),
            DenseVariant::Dsddb => (
                Some(ConvSpec::conv2d(cin, cin, [k, k], dilation, cin)),
                ConvSpec::conv2d(cin, c, [1, 1], [1, 1], 1),
            ),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub depthwise: Option<Conv>,
    pub conv: Conv,
    pub norm: Norm,
    pub act: PRelu,
}

impl DenseLayer {
    pub fn forward(&self, tape: &Tape, x: &Var) -> Result<Var> {
        let h = match &self.depthwise {
            Some(dw) => dw.forward(tape, x)?,
            None => x.clone(),
        };
        let h = self.conv.forward(tape, &h)?;
        self.act.forward(tape, &self.norm.forward(tape, &h)?)
    }
}

impl Module for DenseLayer {
    fn params(&self) -> Vec<&Param> {
        collect_params!(self; depthwise, conv, norm, act)
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        collect_params!(mut self; depthwise, conv, norm, act)
    }
}

/// Densely connected stack over `[B, C, T, F]`: layer `i` sees the block
/// input concatenated with every earlier layer output (`i * C` channels) and
/// the block returns the last layer's output.
#[derive(Debug, Clone)]
pub struct DenseBlock {
    pub spec: DenseBlockSpec,
    pub layers: Vec<DenseLayer>,
}

impl DenseBlock {
    pub fn new(name: &str, spec: &DenseBlockSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let layers = (1..=spec.depth)
            .map(|i| {
                let prefix = format!("{name}.layer{i}");
                let (dw, main) = spec.layer_specs(i);
                Ok(DenseLayer {
                    depthwise: match dw {
                        Some(s) => Some(Conv::new2d(&format!("{prefix}.dw"), s, true, rng)?),
                        None => None,
                    },
                    conv: Conv::new2d(&format!("{prefix}.conv"), main, true, rng)?,
                    norm: Norm::instance(&format!("{prefix}.norm"), spec.channels),
                    act: PRelu::new(&format!("{prefix}.act"), spec.channels),
                })
            })
            .collect::<Result<_>>()?;
        Ok(DenseBlock {
            spec: spec.clone(),
            layers,
        })
    }

    pub fn forward(&self, tape: &Tape, x: &Var) -> Result<Var> {
        let mut features = vec![x.clone()];
        for layer in &self.layers {
            let input = match features.len() {
                1 => x.clone(),
                _ => Var::concat(&features, 1)?,
            };
            features.push(layer.forward(tape, &input)?);
        }
        Ok(features.pop().expect("depth >= 1"))
    }
}

impl Module for DenseBlock {
    fn params(&self) -> Vec<&Param> {
        self.layers.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.params_mut()
    }
}
