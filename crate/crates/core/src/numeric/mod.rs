//! Deterministic `f64` tensors with reverse-mode differentiation.

pub mod grad_check;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;

pub use grad_check::{grad_check, grad_check_params, layer_suite, relative_error};
pub use graph::{Graph, Var};
pub use kernels::conv_out_len;
pub use layers::{FeedForward, LayerNorm, LayerShape, Linear, MultiHeadAttention, TransformerLayer};
pub use optim::{Adam, AdamConfig};
pub use params::{Owner, ParamId, ParamRole, ParamStore, Parameter};
pub use rng::Rng;
pub use tensor::Tensor;

use crate::error::Result;

/// Eager 1-d convolution of `input: channels×time` with `weight: out×in×kernel`.
pub fn conv1d(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, stride: usize, padding: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.input(input.clone());
    let w = g.input(weight.clone());
    let b = bias.map(|b| g.input(b.clone()));
    let y = g.conv1d(x, w, b, stride, padding)?;
    Ok(g.value(y).clone())
}

/// Eager layer normalization over the last axis.
pub fn layer_norm(x: &Tensor, gain: &Tensor, shift: &Tensor, epsilon: f64) -> Result<Tensor> {
    let mut g = Graph::new();
    let (x, gain, shift) = (g.input(x.clone()), g.input(gain.clone()), g.input(shift.clone()));
    let y = g.layer_norm(x, gain, shift, epsilon)?;
    Ok(g.value(y).clone())
}
