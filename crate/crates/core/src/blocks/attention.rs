use rand::Rng;

use super::layers::{Conv, Norm};
use super::param::{Module, Param};
use crate::collect_params;
use crate::error::{Error, Result};
use crate::tensor::conv::ConvSpec;
use crate::tensor::{Tape, Var};

/// Pre-norm multi-head self-attention over `[B, C, T]` with a residual
/// connection. It materializes the full `[B * H, T, T]` score matrix and exists
/// as the quadratic-memory baseline for the activation benchmark.
#[derive(Debug, Clone)]
pub struct AttentionReference {
    pub heads: usize,
    pub norm: Norm,
    pub qkv: Conv,
    pub out: Conv,
}

impl AttentionReference {
    pub fn new(name: &str, channels: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide C={channels}")));
        }
        Ok(AttentionReference {
            heads,
            norm: Norm::channel(&format!("{name}.norm"), channels),
            qkv: Conv::new1d(&format!("{name}.qkv"), ConvSpec::pointwise(channels, 3 * channels), true, rng)?,
            out: Conv::new1d(&format!("{name}.out"), ConvSpec::pointwise(channels, channels), true, rng)?,
        })
    }

    pub fn forward(&self, tape: &Tape, x: &Var) -> Result<Var> {
        let &[b, c, t] = x.shape() else {
            return Err(Error::InvalidShape(format!("attention input must be [B, C, T], got {:?}", x.shape())));
        };
        let (h, d) = (self.heads, c / self.heads);
        let qkv = self.qkv.forward(tape, &self.norm.forward(tape, x)?)?;
        let parts = qkv.chunk(3)?;
        let heads = |v: &Var| v.reshape(&[b * h, d, t]);
        let q_t = heads(&parts[0])?.permute(&[0, 2, 1])?.scale(1.0 / (d as f64).sqrt());
        let k = heads(&parts[1])?;
        let v_t = heads(&parts[2])?.permute(&[0, 2, 1])?;
        let attn = q_t.bmm(&k)?.softmax_last()?;
        let mixed = attn.bmm(&v_t)?;
        drop(attn);
        let mixed = mixed.permute(&[0, 2, 1])?.reshape(&[b, c, t])?;
        x.add(&self.out.forward(tape, &mixed)?)
    }
}

impl Module for AttentionReference {
    fn params(&self) -> Vec<&Param> {
        collect_params!(self; norm, qkv, out)
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        collect_params!(mut self; norm, qkv, out)
    }
}
