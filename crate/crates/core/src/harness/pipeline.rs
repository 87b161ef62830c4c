//! The assembled speech encoder → adaptor → text decoder model.

use serde::{Deserialize, Serialize};

use crate::adaptor::{output_length, Adaptor, AdaptorConfig, Mode};
use crate::decoder::{beam_search, label_smoothed_ce, teacher_forcing, DecoderConfig, DecoderScorer, TextDecoder, Vocab, EOS, PAD};
use crate::error::{Error, Result};
use crate::numeric::graph::argmax;
use crate::numeric::{Graph, ParamStore, Rng, Var};
use crate::speech::{SpeechEncoder, SpeechEncoderConfig};

use super::synth::Sample;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: SpeechEncoderConfig,
    pub adaptor: AdaptorConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    /// Sizes the decoder for `vocab` and the adaptor to bridge the encoder
    /// and decoder widths.
    pub fn resolved(&self, vocab: &Vocab) -> ModelConfig {
        let mut c = self.clone();
        c.decoder = c.decoder.with_vocab(vocab);
        c.adaptor.in_dim = c.encoder.context.model_dim;
        c.adaptor.out_dim = c.decoder.model_dim;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.adaptor.validate()?;
        self.decoder.validate()?;
        if self.adaptor.in_dim != self.encoder.context.model_dim || self.adaptor.out_dim != self.decoder.model_dim {
            return Err(Error::Config(format!(
                "adaptor maps {}→{} but the encoder emits {} and the decoder expects {}",
                self.adaptor.in_dim, self.adaptor.out_dim, self.encoder.context.model_dim, self.decoder.model_dim
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Pipeline {
    pub config: ModelConfig,
    pub encoder: SpeechEncoder,
    pub adaptor: Adaptor,
    pub decoder: TextDecoder,
}

/// Teacher-forced statistics over a set of utterances.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvalStats {
    /// Mean label-smoothed loss per target position.
    pub loss: f64,
    /// Fraction of content tokens predicted correctly; `</s>` excluded.
    pub token_accuracy: f64,
    pub targets: usize,
}

impl Pipeline {
    /// Registers all three components in `store`. Each component draws its
    /// initialization from its own stream so one can be rebuilt alone.
    pub fn new(config: ModelConfig, store: &mut ParamStore, rng: &Rng) -> Result<Self> {
        config.validate()?;
        let encoder = SpeechEncoder::new(config.encoder.clone(), store, &mut rng.derive("init-encoder"))?;
        let adaptor = Adaptor::new(config.adaptor.clone(), store, &mut rng.derive("init-adaptor"))?;
        let decoder = TextDecoder::new(config.decoder.clone(), store, &mut rng.derive("init-decoder"))?;
        Ok(Pipeline { config, encoder, adaptor, decoder })
    }

    /// Adapted encoder output for one waveform. Fails if the memory length
    /// disagrees with the adaptor's length formula.
    pub fn memory(&self, g: &mut Graph, store: &ParamStore, audio: &[f64], mode: Mode, rng: &mut Rng) -> Result<Var> {
        let enc = self.encoder.encode(g, store, audio)?;
        let t = g.value(enc).rows();
        let adapted = self.adaptor.adapt(g, store, enc, mode, rng)?;
        let got = g.value(adapted.out).rows();
        let want = output_length(t, &self.adaptor.config, &adapted.dropped);
        if got != want {
            return Err(Error::shape("pipeline", format!("{t} encoder frames became {got} memory frames; expected {want}")));
        }
        Ok(adapted.out)
    }

    fn tag(&self, vocab: &Vocab, sample: &Sample) -> Result<usize> {
        vocab.lang_id(&sample.tgt_lang)
    }

    /// Teacher-forced logits and targets for one utterance.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, vocab: &Vocab, sample: &Sample, mode: Mode, rng: &mut Rng) -> Result<(Var, Vec<usize>)> {
        let memory = self.memory(g, store, &sample.audio, mode, rng)?;
        let (input, target) = teacher_forcing(self.tag(vocab, sample)?, &sample.tgt);
        let logits = self.decoder.decode_forward(g, store, &input, Some(memory))?;
        Ok((logits, target))
    }

    /// Mean label-smoothed loss over every target position of the batch.
    pub fn batch_loss(&self, g: &mut Graph, store: &ParamStore, vocab: &Vocab, batch: &[&Sample], epsilon: f64, rng: &mut Rng) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::Usage("training batch is empty".into()));
        }
        let mut logits = Vec::with_capacity(batch.len());
        let mut targets = Vec::new();
        for s in batch {
            let (l, t) = self.forward(g, store, vocab, s, Mode::Train, rng)?;
            logits.push(l);
            targets.extend(t);
        }
        let all = if logits.len() == 1 { logits[0] } else { g.concat_rows(&logits)? };
        label_smoothed_ce(g, all, &targets, epsilon, PAD)
    }

    /// Evaluation-mode loss and token accuracy.
    pub fn evaluate_teacher_forced(&self, store: &ParamStore, vocab: &Vocab, samples: &[Sample], epsilon: f64) -> Result<EvalStats> {
        let mut rng = Rng::new(0);
        let (mut loss, mut positions, mut correct, mut content) = (0.0, 0, 0, 0);
        for s in samples {
            let mut g = Graph::new();
            let (logits, target) = self.forward(&mut g, store, vocab, s, Mode::Eval, &mut rng)?;
            let l = label_smoothed_ce(&mut g, logits, &target, epsilon, PAD)?;
            loss += g.value(l).item() * target.len() as f64;
            positions += target.len();
            let out = g.value(logits);
            for (i, &y) in target.iter().enumerate() {
                if y != EOS {
                    content += 1;
                    correct += usize::from(argmax(out.row(i)) == y);
                }
            }
        }
        if positions == 0 {
            return Err(Error::Usage("cannot evaluate an empty split".into()));
        }
        Ok(EvalStats { loss: loss / positions as f64, token_accuracy: correct as f64 / content.max(1) as f64, targets: positions })
    }

    /// Beam-search translation into `lang`, without the tag or `</s>`.
    pub fn translate(&self, store: &ParamStore, vocab: &Vocab, audio: &[f64], lang: &str, beam: usize, max_len: usize) -> Result<Vec<usize>> {
        let tag = vocab.lang_id(lang)?;
        if !self.decoder.config.is_lang_tag(tag) {
            return Err(Error::UnknownLanguage(lang.to_string()));
        }
        let mut g = Graph::new();
        let memory = self.memory(&mut g, store, audio, Mode::Eval, &mut Rng::new(0))?;
        let memory = g.value(memory).clone();
        let scorer = DecoderScorer { decoder: &self.decoder, store, memory: Some(&memory) };
        let limit = max_len.min(self.decoder.config.max_positions.saturating_sub(1)).max(1);
        let best = beam_search(&scorer, &[tag], EOS, beam, limit)?.into_iter().next().map(|h| h.tokens).unwrap_or_default();
        Ok(best.into_iter().take_while(|&t| t != EOS).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::synth::{synth_generate, SynthTaskSpec};

    pub(crate) fn tiny_model() -> ModelConfig {
        use crate::speech::{ContextEncoderConfig, ConvSpec, FeatureEncoderConfig};
        ModelConfig {
            encoder: SpeechEncoderConfig {
                feature: FeatureEncoderConfig {
                    layers: vec![ConvSpec { out_channels: 8, kernel: 8, stride: 8 }, ConvSpec { out_channels: 16, kernel: 2, stride: 2 }],
                    latent_dim: 16,
                },
                context: ContextEncoderConfig { layer_count: 1, model_dim: 16, head_count: 2, ffn_dim: 32, max_positions: 128 },
            },
            adaptor: AdaptorConfig { layer_count: 2, ..AdaptorConfig::default() },
            decoder: DecoderConfig { layer_count: 1, model_dim: 16, head_count: 2, ffn_dim: 32, ..DecoderConfig::default() },
        }
    }

    #[test]
    fn memory_length_follows_the_adaptor_formula() {
        let spec = SynthTaskSpec { train_size: 3, valid_size: 1, test_size: 1, mono_size: 1, ..SynthTaskSpec::default() };
        let ds = synth_generate(&spec, 1).unwrap();
        let cfg = tiny_model().resolved(&ds.vocab);
        let mut store = ParamStore::new();
        let p = Pipeline::new(cfg, &mut store, &Rng::new(1)).unwrap();
        for s in &ds.train {
            let mut g = Graph::new();
            let m = p.memory(&mut g, &store, &s.audio, Mode::Eval, &mut Rng::new(0)).unwrap();
            let frames = p.encoder.config.frames_for(s.audio.len()).unwrap();
            assert_eq!(g.value(m).rows(), output_length(frames, &p.adaptor.config, &[false, false]));
            assert_eq!(g.value(m).cols(), 16);
        }
        let stats = p.evaluate_teacher_forced(&store, &ds.vocab, &ds.valid, 0.3).unwrap();
        assert!(stats.loss.is_finite());
        let out = p.translate(&store, &ds.vocab, &ds.test[0].audio, "de", 2, 8).unwrap();
        assert!(out.len() <= 8);
        assert!(matches!(p.translate(&store, &ds.vocab, &ds.test[0].audio, "xx", 2, 8), Err(Error::UnknownLanguage(_))));
    }

    #[test]
    fn mismatched_widths_are_rejected() {
        let mut cfg = tiny_model();
        cfg.adaptor.out_dim = 32;
        assert!(cfg.validate().is_err());
    }
}
