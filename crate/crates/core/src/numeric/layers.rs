//! Parameterized building blocks shared by the encoder, adaptor and decoder.

use crate::error::Result;
use crate::numeric::graph::{Graph, Var};
use crate::numeric::params::{Owner, ParamId, ParamRole, ParamStore};
use crate::numeric::rng::Rng;
use crate::numeric::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Affine map `x · W + b` with `W: in×out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: (usize, usize),
        role: ParamRole,
        owner: Owner,
        rng: &mut Rng,
    ) -> Result<Self> {
        let (input, output) = dims;
        let bound = (6.0 / (input + output) as f64).sqrt();
        let weight = store.register(
            format!("{name}.weight"),
            Tensor::uniform(&[input, output], bound, rng),
            role,
            owner,
        )?;
        let bias = store.register(format!("{name}.bias"), Tensor::zeros(&[output]), role, owner)?;
        Ok(Linear { weight, bias })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, owner: Owner) -> Result<Self> {
        let gain = store.register(format!("{name}.gain"), Tensor::full(&[dim], 1.0), ParamRole::LayerNorm, owner)?;
        let shift = store.register(format!("{name}.shift"), Tensor::zeros(&[dim]), ParamRole::LayerNorm, owner)?;
        Ok(LayerNorm { gain, shift })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let shift = g.param(store, self.shift);
        g.layer_norm(x, gain, shift, LAYER_NORM_EPS)
    }
}

/// Query, key, value and output projections of one attention block.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q_proj: Linear,
    pub k_proj: Linear,
    pub v_proj: Linear,
    pub out_proj: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        role: ParamRole,
        owner: Owner,
        rng: &mut Rng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(crate::Error::Config(format!("model width {dim} is not divisible by {heads} heads")));
        }
        let mut lin = |suffix: &str| Linear::new(store, &format!("{name}.{suffix}"), (dim, dim), role, owner, rng);
        Ok(MultiHeadAttention {
            q_proj: lin("q_proj")?,
            k_proj: lin("k_proj")?,
            v_proj: lin("v_proj")?,
            out_proj: lin("out_proj")?,
            heads,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, queries: Var, keys: Var, values: Var, causal: bool) -> Result<Var> {
        let q = self.q_proj.forward(g, store, queries)?;
        let k = self.k_proj.forward(g, store, keys)?;
        let v = self.v_proj.forward(g, store, values)?;
        let attended = g.attention(q, k, v, self.heads, causal)?;
        self.out_proj.forward(g, store, attended)
    }
}

/// Position-wise `fc2(gelu(fc1(x)))`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, owner: Owner, rng: &mut Rng) -> Result<Self> {
        Ok(FeedForward {
            fc1: Linear::new(store, &format!("{name}.fc1"), (dim, hidden), ParamRole::Ffn, owner, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), (hidden, dim), ParamRole::Ffn, owner, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, store, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, store, h)
    }
}

/// Pre-norm transformer layer: self-attention, optional cross-attention, feed-forward.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub self_attn_norm: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub cross: Option<(LayerNorm, MultiHeadAttention)>,
    pub ffn_norm: LayerNorm,
    pub ffn: FeedForward,
    pub causal: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerShape {
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub causal: bool,
    pub cross_attention: bool,
}

impl TransformerLayer {
    pub fn new(store: &mut ParamStore, name: &str, shape: LayerShape, owner: Owner, rng: &mut Rng) -> Result<Self> {
        let LayerShape { dim, heads, ffn_dim, causal, cross_attention } = shape;
        let self_attn_norm = LayerNorm::new(store, &format!("{name}.self_attn_layer_norm"), dim, owner)?;
        let self_attn = MultiHeadAttention::new(store, &format!("{name}.self_attn"), dim, heads, ParamRole::SelfAttn, owner, rng)?;
        let cross = if cross_attention {
            let norm = LayerNorm::new(store, &format!("{name}.encoder_attn_layer_norm"), dim, owner)?;
            let attn = MultiHeadAttention::new(store, &format!("{name}.encoder_attn"), dim, heads, ParamRole::EncoderAttn, owner, rng)?;
            Some((norm, attn))
        } else {
            None
        };
        let ffn_norm = LayerNorm::new(store, &format!("{name}.final_layer_norm"), dim, owner)?;
        let ffn = FeedForward::new(store, &format!("{name}.ffn"), dim, ffn_dim, owner, rng)?;
        Ok(TransformerLayer { self_attn_norm, self_attn, cross, ffn_norm, ffn, causal })
    }

    /// Cross-attention runs only when `memory` is given.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, memory: Option<Var>) -> Result<Var> {
        let h = self.self_attn_norm.forward(g, store, x)?;
        let h = self.self_attn.forward(g, store, h, h, h, self.causal)?;
        let mut x = g.add(x, h)?;
        if let (Some((norm, attn)), Some(mem)) = (&self.cross, memory) {
            let h = norm.forward(g, store, x)?;
            let h = attn.forward(g, store, h, mem, mem, false)?;
            x = g.add(x, h)?;
        }
        let h = self.ffn_norm.forward(g, store, x)?;
        let h = self.ffn.forward(g, store, h)?;
        g.add(x, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::grad_check::grad_check_params;

    #[test]
    fn transformer_layer_gradients_match_finite_differences() {
        let mut rng = Rng::new(21);
        let mut store = ParamStore::new();
        let shape = LayerShape { dim: 8, heads: 2, ffn_dim: 12, causal: true, cross_attention: true };
        let layer = TransformerLayer::new(&mut store, "dec.layers.0", shape, Owner::Decoder, &mut rng).unwrap();
        let x = Tensor::randn(&[3, 8], 1.0, &mut rng);
        let mem = Tensor::randn(&[4, 8], 1.0, &mut rng);
        // Key biases shift every score in a softmax row equally: their true
        // gradient is zero and the difference quotient is pure rounding noise.
        let ids: Vec<ParamId> = store.iter().filter(|(_, p)| !p.name().contains("k_proj.bias")).map(|(id, _)| id).collect();
        let err = grad_check_params(
            &mut store,
            &ids,
            |g, s| {
                let x = g.input(x.clone());
                let m = g.input(mem.clone());
                let y = layer.forward(g, s, x, Some(m))?;
                let t = g.input(Tensor::randn(&[3, 8], 1.0, &mut Rng::new(2)));
                let p = g.mul(y, t)?;
                Ok(g.sum(p))
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
