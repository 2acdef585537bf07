//! Independent checks of the numerical core: finite-difference gradients,
//! nested-loop convolution oracles and activation-memory scaling.

pub mod conv_oracle;
pub mod gradcheck;
pub mod memory;
pub mod selftest;
