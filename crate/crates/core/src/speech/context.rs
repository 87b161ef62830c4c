use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Graph, LayerNorm, LayerShape, Owner, ParamId, ParamRole, ParamStore, Rng, Tensor, TransformerLayer, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContextEncoderConfig {
    pub layer_count: usize,
    pub model_dim: usize,
    pub head_count: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
}

impl Default for ContextEncoderConfig {
    fn default() -> Self {
        ContextEncoderConfig { layer_count: 4, model_dim: 64, head_count: 4, ffn_dim: 128, max_positions: 256 }
    }
}

impl ContextEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.head_count == 0 || self.model_dim % self.head_count != 0 {
            return Err(Error::Config(format!(
                "context encoder width {} must be divisible by {} heads",
                self.model_dim, self.head_count
            )));
        }
        if self.max_positions == 0 {
            return Err(Error::Config("max_positions must be positive".into()));
        }
        Ok(())
    }
}

/// Transformer stack producing context vectors `C` from latents `Z`.
#[derive(Clone, Debug)]
pub struct ContextEncoder {
    pub config: ContextEncoderConfig,
    positions: ParamId,
    mask_embedding: ParamId,
    layers: Vec<TransformerLayer>,
    final_norm: Option<LayerNorm>,
}

impl ContextEncoder {
    pub fn new(config: ContextEncoderConfig, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let positions = store.register(
            "encoder.embed_positions",
            Tensor::randn(&[config.max_positions, d], 0.5, rng),
            ParamRole::Positional,
            Owner::Encoder,
        )?;
        let mask_embedding = store.register("encoder.mask_emb", Tensor::uniform(&[d], 1.0, rng), ParamRole::Other, Owner::Encoder)?;
        let shape = LayerShape { dim: d, heads: config.head_count, ffn_dim: config.ffn_dim, causal: false, cross_attention: false };
        let layers = (0..config.layer_count)
            .map(|i| TransformerLayer::new(store, &format!("encoder.layers.{i}"), shape, Owner::Encoder, rng))
            .collect::<Result<Vec<_>>>()?;
        // The closing norm belongs to the stack; a zero-layer encoder has none.
        let final_norm = if config.layer_count > 0 {
            Some(LayerNorm::new(store, "encoder.layer_norm", d, Owner::Encoder)?)
        } else {
            None
        };
        Ok(ContextEncoder { config, positions, mask_embedding, layers, final_norm })
    }

    /// Replaces masked frames by the learned mask embedding, adds positions
    /// and runs the transformer stack. Output length equals input length.
    pub fn contextualize(&self, g: &mut Graph, store: &ParamStore, z: Var, mask: &[bool]) -> Result<Var> {
        let t = g.value(z).rows();
        if mask.len() != t {
            return Err(Error::shape("contextualize", format!("{t} latent frames but a mask of {}", mask.len())));
        }
        if t > self.config.max_positions {
            return Err(Error::shape(
                "contextualize",
                format!("{t} frames exceed the {} learned positions", self.config.max_positions),
            ));
        }
        let mut x = z;
        if mask.iter().any(|&m| m) {
            let fill = g.param(store, self.mask_embedding);
            x = g.replace_rows(x, fill, mask)?;
        }
        let table = g.param(store, self.positions);
        let ids: Vec<usize> = (0..t).collect();
        let pos = g.gather_rows(table, &ids)?;
        x = g.add(x, pos)?;
        for layer in &self.layers {
            x = layer.forward(g, store, x, None)?;
        }
        if let Some(norm) = &self.final_norm {
            x = norm.forward(g, store, x)?;
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_layer() -> (ContextEncoder, ParamStore) {
        let mut store = ParamStore::new();
        let cfg = ContextEncoderConfig { layer_count: 0, model_dim: 8, head_count: 2, ffn_dim: 16, max_positions: 16 };
        let enc = ContextEncoder::new(cfg, &mut store, &mut Rng::new(4)).unwrap();
        (enc, store)
    }

    #[test]
    fn unmasked_zero_layer_adds_positions() {
        let (enc, store) = zero_layer();
        let mut g = Graph::new();
        let zt = Tensor::randn(&[5, 8], 1.0, &mut Rng::new(9));
        let z = g.input(zt.clone());
        let c = enc.contextualize(&mut g, &store, z, &[false; 5]).unwrap();
        let pos = store.by_name("encoder.embed_positions").unwrap().value();
        for t in 0..5 {
            for j in 0..8 {
                assert_eq!(g.value(c).row(t)[j], zt.row(t)[j] + pos.row(t)[j]);
            }
        }
    }

    #[test]
    fn fully_masked_zero_layer_is_mask_plus_position() {
        let (enc, store) = zero_layer();
        let mut g = Graph::new();
        let z = g.input(Tensor::randn(&[4, 8], 1.0, &mut Rng::new(9)));
        let c = enc.contextualize(&mut g, &store, z, &[true; 4]).unwrap();
        let pos = store.by_name("encoder.embed_positions").unwrap().value();
        let m = store.by_name("encoder.mask_emb").unwrap().value();
        for t in 0..4 {
            let minus_pos: Vec<f64> = g.value(c).row(t).iter().zip(pos.row(t)).map(|(a, b)| a - b).collect();
            for (a, b) in minus_pos.iter().zip(m.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mask_length_mismatch_is_an_error() {
        let (enc, store) = zero_layer();
        let mut g = Graph::new();
        let z = g.input(Tensor::zeros(&[4, 8]));
        assert!(enc.contextualize(&mut g, &store, z, &[false; 3]).is_err());
    }
}
