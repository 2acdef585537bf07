//! Network building blocks and the assembled two-stage model.
//!
//! Every block owns its [`Param`]s and runs forward on a [`Tape`](crate::tensor::Tape):
//! one-dimensional blocks take `[B, C, T]`, two-dimensional ones `[B, C, T, F]`.

mod attention;
mod dense;
mod gpfca;
mod layers;
mod model;
mod param;

pub use attention::AttentionReference;
pub use dense::{DenseBlock, DenseBlockSpec, DenseLayer, DenseVariant};
pub use gpfca::{sca_forward, Dfg, Gpfca, GpfcaConfig, Gpfn, Gpgu, KernelGroup, NormKind, Sca};
pub use layers::{Conv, ConvTranspose, Norm, PRelu, ResidualScale, NORM_EPS, PRELU_INIT};
pub use model::{reduced_bins, Encoder, MaskDecoder, Model, ModelConfig, ModelOutput, PhaseDecoder, StageMeter, TsBlock};
pub use param::{Module, Param, ParamKind};
