//! Self-supervised speech encoder: a strided convolutional feature encoder
//! followed by a transformer context network, plus its contrastive
//! pretraining objective.

pub mod context;
pub mod contrastive;
pub mod feature;
pub mod logmel;
pub mod mask;
pub mod quantizer;
pub mod wav;

use serde::{Deserialize, Serialize};

pub use context::{ContextEncoder, ContextEncoderConfig};
pub use contrastive::{contrastive_loss, sample_candidates, ContrastiveConfig};
pub use feature::{ConvSpec, FeatureEncoder, FeatureEncoderConfig};
pub use logmel::{cmvn, logmel_frontend, MelConfig, MelFrontend};
pub use mask::MaskSpec;
pub use quantizer::{Quantized, Quantizer, QuantizerConfig};

use crate::error::{Error, Result};
use crate::numeric::{Adam, AdamConfig, Graph, ParamStore, Rng, Var};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpeechEncoderConfig {
    pub feature: FeatureEncoderConfig,
    pub context: ContextEncoderConfig,
}

impl SpeechEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        self.feature.validate()?;
        self.context.validate()?;
        if self.feature.latent_dim != self.context.model_dim {
            return Err(Error::Config(format!(
                "feature encoder emits width {} but the context network expects {}",
                self.feature.latent_dim, self.context.model_dim
            )));
        }
        Ok(())
    }

    /// Number of context frames produced for `samples` input samples.
    pub fn frames_for(&self, samples: usize) -> Option<usize> {
        self.feature.output_len(samples)
    }
}

#[derive(Clone, Debug)]
pub struct SpeechEncoder {
    pub config: SpeechEncoderConfig,
    pub feature: FeatureEncoder,
    pub context: ContextEncoder,
}

/// Latents and contextualized frames for one utterance.
pub struct Encoded {
    pub latents: Var,
    pub context: Var,
}

impl SpeechEncoder {
    pub fn new(config: SpeechEncoderConfig, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let feature = FeatureEncoder::new(config.feature.clone(), store, rng)?;
        let context = ContextEncoder::new(config.context.clone(), store, rng)?;
        Ok(SpeechEncoder { config, feature, context })
    }

    pub fn dim(&self) -> usize {
        self.config.context.model_dim
    }

    /// Encodes without masking.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, samples: &[f64]) -> Result<Var> {
        Ok(self.encode_masked(g, store, samples, None)?.context)
    }

    /// Encodes with an optional frame mask applied before contextualization.
    pub fn encode_masked(&self, g: &mut Graph, store: &ParamStore, samples: &[f64], mask: Option<&[bool]>) -> Result<Encoded> {
        let latents = self.feature.encode_waveform(g, store, samples)?;
        let frames = g.value(latents).rows();
        let none = vec![false; frames];
        let context = self.context.contextualize(g, store, latents, mask.unwrap_or(&none))?;
        Ok(Encoded { latents, context })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub mask: MaskSpec,
    pub quantizer: QuantizerConfig,
    pub contrastive: ContrastiveConfig,
    pub steps: usize,
    pub learning_rate: f64,
    pub adam: AdamConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            mask: MaskSpec::default(),
            quantizer: QuantizerConfig::default(),
            contrastive: ContrastiveConfig::default(),
            steps: 500,
            learning_rate: 1e-3,
            adam: AdamConfig::default(),
        }
    }
}

/// Contrastive pretraining state. The quantizer lives in the same store as
/// the encoder but is discarded after pretraining.
pub struct Pretrainer {
    pub config: PretrainConfig,
    pub quantizer: Quantizer,
}

/// One pretraining step's statistics.
#[derive(Clone, Copy, Debug)]
pub struct PretrainStats {
    pub loss: f64,
    pub diversity: f64,
    pub masked_frames: usize,
}

impl Pretrainer {
    pub fn new(config: PretrainConfig, encoder: &SpeechEncoder, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        config.mask.validate()?;
        let quantizer = Quantizer::new(config.quantizer.clone(), encoder.config.feature.latent_dim, store, rng)?;
        Ok(Pretrainer { config, quantizer })
    }

    /// Builds the contrastive loss for one utterance. At least one frame is
    /// always masked so the objective is defined.
    pub fn loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        encoder: &SpeechEncoder,
        samples: &[f64],
        rng: &mut Rng,
    ) -> Result<(Var, PretrainStats)> {
        let frames = encoder
            .config
            .frames_for(samples.len())
            .ok_or_else(|| Error::TooShort(format!("{} samples yield no latent frames", samples.len())))?;
        let mut mask = self.config.mask.sample(frames, rng);
        if !mask.iter().any(|&m| m) {
            mask[rng.below(frames)] = true;
        }
        let enc = encoder.encode_masked(g, store, samples, Some(&mask))?;
        let quant = self.quantizer.quantize(g, store, enc.latents, true)?;
        let loss = contrastive_loss(g, enc.context, quant.q, &mask, self.config.contrastive, rng)?;
        let stats = PretrainStats {
            loss: g.value(loss).item(),
            diversity: quant.diversity,
            masked_frames: mask.iter().filter(|&&m| m).count(),
        };
        Ok((loss, stats))
    }

    /// Runs `config.steps` single-utterance updates cycling through `corpus`.
    /// Returns the per-step losses.
    pub fn run(&self, store: &mut ParamStore, encoder: &SpeechEncoder, corpus: &[Vec<f64>], rng: &mut Rng) -> Result<Vec<PretrainStats>> {
        if corpus.is_empty() {
            return Err(Error::Usage("pretraining corpus is empty".into()));
        }
        let mut adam = Adam::new(store, self.config.adam.clone());
        let mut history = Vec::with_capacity(self.config.steps);
        for step in 0..self.config.steps {
            let utt = &corpus[step % corpus.len()];
            let mut g = Graph::new();
            let (loss, stats) = self.loss(&mut g, store, encoder, utt, rng)?;
            if !stats.loss.is_finite() {
                return Err(Error::Diverged(format!("pretraining loss {} at step {step}", stats.loss)));
            }
            g.backward(loss)?;
            store.zero_grad();
            g.accumulate_param_grads(store);
            adam.step(store, self.config.learning_rate);
            history.push(stats);
        }
        Ok(history)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SpeechEncoderConfig {
        SpeechEncoderConfig {
            feature: FeatureEncoderConfig {
                layers: vec![ConvSpec { out_channels: 8, kernel: 4, stride: 4 }, ConvSpec { out_channels: 8, kernel: 2, stride: 2 }],
                latent_dim: 16,
            },
            context: ContextEncoderConfig { layer_count: 1, model_dim: 16, head_count: 2, ffn_dim: 32, max_positions: 64 },
        }
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let mut cfg = tiny();
        cfg.context.model_dim = 8;
        cfg.context.head_count = 2;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn encoder_output_matches_frame_count() {
        let mut store = ParamStore::new();
        let enc = SpeechEncoder::new(tiny(), &mut store, &mut Rng::new(1)).unwrap();
        let wave: Vec<f64> = (0..400).map(|i| (i as f64 * 0.3).sin()).collect();
        let mut g = Graph::new();
        let c = enc.encode(&mut g, &store, &wave).unwrap();
        assert_eq!(g.value(c).shape(), &[50, 16]);
        assert_eq!(tiny().frames_for(400), Some(50));
    }

    #[test]
    fn pretraining_lowers_contrastive_loss() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(3);
        let enc = SpeechEncoder::new(tiny(), &mut store, &mut rng).unwrap();
        let cfg = PretrainConfig {
            mask: MaskSpec { mask_probability: 0.2, span_length: 3 },
            contrastive: ContrastiveConfig { distractors: 5, temperature: 0.1 },
            steps: 60,
            learning_rate: 3e-3,
            adam: AdamConfig { warmup_steps: 5, ..AdamConfig::default() },
            ..PretrainConfig::default()
        };
        let pre = Pretrainer::new(cfg, &enc, &mut store, &mut rng).unwrap();
        let corpus: Vec<Vec<f64>> = (0..4)
            .map(|k| (0..320).map(|i| ((i * (k + 1)) as f64 * 0.07).sin() + 0.3 * ((i / 16 + k) % 3) as f64).collect())
            .collect();
        let hist = pre.run(&mut store, &enc, &corpus, &mut rng).unwrap();
        let head: f64 = hist[..10].iter().map(|s| s.loss).sum::<f64>() / 10.0;
        let tail: f64 = hist[hist.len() - 10..].iter().map(|s| s.loss).sum::<f64>() / 10.0;
        assert!(tail < head, "loss did not fall: {head} -> {tail}");
    }
}
