use rand::Rng;

use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    ConvWeight,
    Bias,
    NormAffine,
    Activation,
    ResidualScale,
}

/// A named trainable tensor. Names are unique within a model and double as
/// checkpoint keys and tape registration keys.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub kind: ParamKind,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor, kind: ParamKind) -> Self {
        Param {
            name: name.into(),
            value,
            kind,
        }
    }

    /// Uniform in `±1/sqrt(fan_in)`, the usual default for convolutions.
    pub fn fan_in_uniform(name: impl Into<String>, shape: &[usize], fan_in: usize, kind: ParamKind, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self::new(name, Tensor::uniform(shape, -bound, bound, rng), kind)
    }

    pub fn var(&self, tape: &Tape) -> Var {
        tape.param(&self.name, &self.value)
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}

/// Anything owning parameters.
pub trait Module {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// Convolution weights only: the quantity the analytic formulas count.
    fn conv_weight_count(&self) -> usize {
        self.params()
            .iter()
            .filter(|p| p.kind == ParamKind::ConvWeight)
            .map(|p| p.numel())
            .sum()
    }

    /// Replaces every parameter with `N(0, std^2)` draws in visiting order.
    fn randomize(&mut self, std: f64, rng: &mut dyn rand::RngCore) {
        for p in self.params_mut() {
            let shape = p.value.shape().to_vec();
            let mut rng = &mut *rng;
            p.value = Tensor::randn(&shape, std, &mut rng);
        }
    }
}

/// Concatenates the parameter lists of several modules.
#[macro_export]
macro_rules! collect_params {
    ($self:ident; $($field:ident),* $(,)?) => {{
        let mut v = Vec::new();
        $( v.extend($crate::blocks::Module::params(&$self.$field)); )*
        v
    }};
    (mut $self:ident; $($field:ident),* $(,)?) => {{
        let mut v = Vec::new();
        $( v.extend($crate::blocks::Module::params_mut(&mut $self.$field)); )*
        v
    }};
}

impl<M: Module> Module for Vec<M> {
    fn params(&self) -> Vec<&Param> {
        self.iter().flat_map(Module::params).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.iter_mut().flat_map(Module::params_mut).collect()
    }
}

impl<M: Module> Module for Option<M> {
    fn params(&self) -> Vec<&Param> {
        self.iter().flat_map(Module::params).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.iter_mut().flat_map(Module::params_mut).collect()
    }
}

impl Module for Param {
    fn params(&self) -> Vec<&Param> {
        vec![self]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![self]
    }
}
