use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Graph, LayerNorm, LayerShape, Linear, Owner, ParamId, ParamRole, ParamStore, Rng, Tensor, TransformerLayer, Var};

use super::vocab::{Vocab, BOS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub layer_count: usize,
    pub model_dim: usize,
    pub head_count: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    /// Language codes; tag `i` sits at vocabulary id `4 + i`.
    pub languages: Vec<String>,
    pub max_positions: usize,
    pub tie_output_to_embedding: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            layer_count: 2,
            model_dim: 64,
            head_count: 4,
            ffn_dim: 128,
            vocab_size: 64,
            languages: vec!["en".into()],
            max_positions: 64,
            tie_output_to_embedding: true,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.head_count == 0 || self.model_dim % self.head_count != 0 {
            return Err(Error::Config(format!(
                "decoder width {} must be divisible by {} heads",
                self.model_dim, self.head_count
            )));
        }
        if self.vocab_size < 4 + self.languages.len() {
            return Err(Error::Config(format!(
                "vocabulary of {} cannot hold 4 reserved entries and {} language tags",
                self.vocab_size,
                self.languages.len()
            )));
        }
        if self.max_positions == 0 {
            return Err(Error::Config("max_positions must be positive".into()));
        }
        Ok(())
    }

    /// Sizes the config for `vocab`.
    pub fn with_vocab(mut self, vocab: &Vocab) -> Self {
        self.vocab_size = vocab.len();
        self.languages = vocab.languages().to_vec();
        self
    }

    pub fn is_lang_tag(&self, id: usize) -> bool {
        (4..4 + self.languages.len()).contains(&id)
    }
}

/// Embeds token ids: scaled token embedding plus learned positions.
fn embed(g: &mut Graph, store: &ParamStore, tokens: ParamId, positions: ParamId, ids: &[usize], dim: usize) -> Result<Var> {
    let table = g.param(store, tokens);
    let e = g.gather_rows(table, ids)?;
    let e = g.scale(e, (dim as f64).sqrt());
    let ptable = g.param(store, positions);
    let pos: Vec<usize> = (0..ids.len()).collect();
    let p = g.gather_rows(ptable, &pos)?;
    g.add(e, p)
}

/// Autoregressive transformer decoder with cross-attention to a memory.
#[derive(Clone, Debug)]
pub struct TextDecoder {
    pub config: DecoderConfig,
    pub embed_tokens: ParamId,
    embed_positions: ParamId,
    embed_norm: LayerNorm,
    layers: Vec<TransformerLayer>,
    final_norm: Option<LayerNorm>,
    output: Option<Linear>,
}

impl TextDecoder {
    pub fn new(config: DecoderConfig, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let embed_tokens = store.register(
            "decoder.embed_tokens.weight",
            Tensor::randn(&[config.vocab_size, d], 1.0 / (d as f64).sqrt(), rng),
            ParamRole::Embedding,
            Owner::Decoder,
        )?;
        let embed_positions = store.register(
            "decoder.embed_positions.weight",
            Tensor::randn(&[config.max_positions, d], 0.1, rng),
            ParamRole::Positional,
            Owner::Decoder,
        )?;
        let embed_norm = LayerNorm::new(store, "decoder.layernorm_embedding", d, Owner::Decoder)?;
        let shape = LayerShape { dim: d, heads: config.head_count, ffn_dim: config.ffn_dim, causal: true, cross_attention: true };
        let layers = (0..config.layer_count)
            .map(|i| TransformerLayer::new(store, &format!("decoder.layers.{i}"), shape, Owner::Decoder, rng))
            .collect::<Result<Vec<_>>>()?;
        let final_norm = if config.layer_count > 0 {
            Some(LayerNorm::new(store, "decoder.layer_norm", d, Owner::Decoder)?)
        } else {
            None
        };
        let output = if config.tie_output_to_embedding {
            None
        } else {
            Some(Linear::new(store, "decoder.output_projection", (d, config.vocab_size), ParamRole::Embedding, Owner::Decoder, rng)?)
        };
        Ok(TextDecoder { config, embed_tokens, embed_positions, embed_norm, layers, final_norm, output })
    }

    fn check_prefix(&self, prefix: &[usize]) -> Result<()> {
        let Some(&first) = prefix.first() else {
            return Err(Error::Usage("decoder prefix is empty".into()));
        };
        if !self.config.is_lang_tag(first) {
            return Err(Error::UnknownLanguage(format!("prefix starts with token {first}, which is not a language tag")));
        }
        if prefix.len() > self.config.max_positions {
            return Err(Error::shape(
                "decode_forward",
                format!("prefix of {} tokens exceeds {} positions", prefix.len(), self.config.max_positions),
            ));
        }
        if let Some(&bad) = prefix.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::shape("decode_forward", format!("token {bad} outside vocabulary of {}", self.config.vocab_size)));
        }
        Ok(())
    }

    /// Per-position vocabulary logits (`len×vocab`) for a prefix that starts
    /// with a language tag. Cross-attention is skipped when `memory` is
    /// `None`.
    pub fn decode_forward(&self, g: &mut Graph, store: &ParamStore, prefix: &[usize], memory: Option<Var>) -> Result<Var> {
        self.check_prefix(prefix)?;
        if let Some(m) = memory {
            let w = g.value(m).cols();
            if w != self.config.model_dim || g.value(m).rows() == 0 {
                return Err(Error::shape(
                    "decode_forward",
                    format!("memory {:?} does not match decoder width {}", g.value(m).shape(), self.config.model_dim),
                ));
            }
        }
        let x = embed(g, store, self.embed_tokens, self.embed_positions, prefix, self.config.model_dim)?;
        let mut x = self.embed_norm.forward(g, store, x)?;
        for layer in &self.layers {
            x = layer.forward(g, store, x, memory)?;
        }
        if let Some(norm) = &self.final_norm {
            x = norm.forward(g, store, x)?;
        }
        match &self.output {
            None => {
                let table = g.param(store, self.embed_tokens);
                g.matmul_ext(x, table, true)
            }
            Some(proj) => proj.forward(g, store, x),
        }
    }
}

/// Bidirectional text encoder used only by denoising pretraining. Shares the
/// decoder's token embedding.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    positions: ParamId,
    embed_norm: LayerNorm,
    layers: Vec<TransformerLayer>,
    final_norm: LayerNorm,
    dim: usize,
    max_positions: usize,
}

pub const TEXT_ENCODER_LAYERS: usize = 2;

impl TextEncoder {
    pub fn new(decoder: &DecoderConfig, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        let d = decoder.model_dim;
        let positions = store.register(
            "text_encoder.embed_positions.weight",
            Tensor::randn(&[decoder.max_positions, d], 0.1, rng),
            ParamRole::Positional,
            Owner::Encoder,
        )?;
        let embed_norm = LayerNorm::new(store, "text_encoder.layernorm_embedding", d, Owner::Encoder)?;
        let shape = LayerShape { dim: d, heads: decoder.head_count, ffn_dim: decoder.ffn_dim, causal: false, cross_attention: false };
        let layers = (0..TEXT_ENCODER_LAYERS)
            .map(|i| TransformerLayer::new(store, &format!("text_encoder.layers.{i}"), shape, Owner::Encoder, rng))
            .collect::<Result<Vec<_>>>()?;
        let final_norm = LayerNorm::new(store, "text_encoder.layer_norm", d, Owner::Encoder)?;
        Ok(TextEncoder { positions, embed_norm, layers, final_norm, dim: d, max_positions: decoder.max_positions })
    }

    pub fn encode(&self, g: &mut Graph, store: &ParamStore, decoder: &TextDecoder, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() || ids.len() > self.max_positions {
            return Err(Error::shape("text_encoder", format!("{} tokens for {} positions", ids.len(), self.max_positions)));
        }
        let x = embed(g, store, decoder.embed_tokens, self.positions, ids, self.dim)?;
        let mut x = self.embed_norm.forward(g, store, x)?;
        for layer in &self.layers {
            x = layer.forward(g, store, x, None)?;
        }
        self.final_norm.forward(g, store, x)
    }
}

/// Teacher-forcing pair: decoder input `[tag, y…]`, target `[y…, </s>]`.
pub fn teacher_forcing(tag: usize, tokens: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut input = Vec::with_capacity(tokens.len() + 1);
    input.push(tag);
    input.extend_from_slice(tokens);
    let mut target = tokens.to_vec();
    target.push(super::vocab::EOS);
    (input, target)
}

/// Encoder-side source sequence: `[<s>, x…, </s>]`.
pub fn bracket(tokens: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(tokens.len() + 2);
    out.push(BOS);
    out.extend_from_slice(tokens);
    out.push(super::vocab::EOS);
    out
}
