use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{conv_out_len, Graph, LayerNorm, Linear, Owner, ParamId, ParamRole, ParamStore, Rng, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// Temporal convolution stack that turns raw samples into latent frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureEncoderConfig {
    pub layers: Vec<ConvSpec>,
    /// Width of the latent frames after the output projection.
    pub latent_dim: usize,
}

impl Default for FeatureEncoderConfig {
    fn default() -> Self {
        FeatureEncoderConfig {
            layers: vec![
                ConvSpec { out_channels: 32, kernel: 8, stride: 4 },
                ConvSpec { out_channels: 64, kernel: 4, stride: 2 },
                ConvSpec { out_channels: 64, kernel: 4, stride: 2 },
            ],
            latent_dim: 64,
        }
    }
}

impl FeatureEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("feature encoder needs at least one conv layer".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.stride == 0 || l.kernel < l.stride || l.out_channels == 0 {
                return Err(Error::Config(format!(
                    "feature conv layer {i}: need out_channels ≥ 1 and kernel ≥ stride ≥ 1, got {l:?}"
                )));
            }
        }
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn total_stride(&self) -> usize {
        self.layers.iter().map(|l| l.stride).product()
    }

    /// Fewest input samples that yield one latent frame.
    pub fn receptive_field(&self) -> usize {
        self.layers.iter().rev().fold(1, |r, l| (r - 1) * l.stride + l.kernel)
    }

    /// Latent frame count for `samples` inputs, or `None` if too short.
    pub fn output_len(&self, samples: usize) -> Option<usize> {
        self.layers.iter().try_fold(samples, |t, l| conv_out_len(t, l.kernel, l.stride, 0))
    }
}

#[derive(Clone, Debug)]
pub struct FeatureEncoder {
    pub config: FeatureEncoderConfig,
    convs: Vec<(ParamId, ParamId)>,
    norm: LayerNorm,
    proj: Linear,
}

impl FeatureEncoder {
    pub fn new(config: FeatureEncoderConfig, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut convs = Vec::with_capacity(config.layers.len());
        let mut in_ch = 1;
        for (i, l) in config.layers.iter().enumerate() {
            let fan_in = (in_ch * l.kernel) as f64;
            let w = store.register(
                format!("encoder.feature_extractor.conv_layers.{i}.weight"),
                Tensor::randn(&[l.out_channels, in_ch, l.kernel], (2.0 / fan_in).sqrt(), rng),
                ParamRole::ConvFeature,
                Owner::Encoder,
            )?;
            let b = store.register(
                format!("encoder.feature_extractor.conv_layers.{i}.bias"),
                Tensor::zeros(&[l.out_channels]),
                ParamRole::ConvFeature,
                Owner::Encoder,
            )?;
            convs.push((w, b));
            in_ch = l.out_channels;
        }
        let norm = LayerNorm::new(store, "encoder.feature_layer_norm", in_ch, Owner::Encoder)?;
        let proj = Linear::new(store, "encoder.post_extract_proj", (in_ch, config.latent_dim), ParamRole::Other, Owner::Encoder, rng)?;
        Ok(FeatureEncoder { config, convs, norm, proj })
    }

    /// Maps a waveform to latent frames `Z` (`time×latent_dim`).
    pub fn encode_waveform(&self, g: &mut Graph, store: &ParamStore, samples: &[f64]) -> Result<Var> {
        if samples.is_empty() {
            return Err(Error::TooShort("waveform is empty".into()));
        }
        let field = self.config.receptive_field();
        if samples.len() < field {
            return Err(Error::TooShort(format!(
                "waveform of {} samples is shorter than the feature encoder's receptive field of {field} samples",
                samples.len()
            )));
        }
        let mut x = g.input(Tensor::from_parts(vec![1, samples.len()], samples.to_vec()));
        for ((w, b), spec) in self.convs.iter().zip(&self.config.layers) {
            let wv = g.param(store, *w);
            let bv = g.param(store, *b);
            x = g.conv1d(x, wv, Some(bv), spec.stride, 0)?;
            x = g.gelu(x);
        }
        let x = g.transpose(x);
        let x = self.norm.forward(g, store, x)?;
        self.proj.forward(g, store, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn build(config: FeatureEncoderConfig) -> (FeatureEncoder, ParamStore) {
        let mut store = ParamStore::new();
        let enc = FeatureEncoder::new(config, &mut store, &mut Rng::new(1)).unwrap();
        (enc, store)
    }

    #[test]
    fn two_stride_two_layers_quarter_the_length() {
        let cfg = FeatureEncoderConfig {
            layers: vec![ConvSpec { out_channels: 4, kernel: 2, stride: 2 }; 2],
            latent_dim: 8,
        };
        let (enc, store) = build(cfg);
        let mut g = Graph::new();
        let z = enc.encode_waveform(&mut g, &store, &[0.5; 16]).unwrap();
        assert_eq!(g.value(z).shape(), &[4, 8]);
    }

    #[test]
    fn reference_config_length_for_one_second() {
        // 16000 -> (16000-8)/4+1 = 3999 -> (3999-4)/2+1 = 1998 -> (1998-4)/2+1 = 998
        let cfg = FeatureEncoderConfig::default();
        assert_eq!(cfg.output_len(16000), Some(998));
        assert_eq!(cfg.total_stride(), 16);
        let (enc, store) = build(cfg);
        let mut g = Graph::new();
        let wave: Vec<f64> = (0..16000).map(|i| (i as f64 * 0.01).sin()).collect();
        let z = enc.encode_waveform(&mut g, &store, &wave).unwrap();
        assert_eq!(g.value(z).rows(), 998);
    }

    #[test]
    fn silence_with_zero_biases_gives_zero_latents() {
        let (enc, store) = build(FeatureEncoderConfig::default());
        let mut g = Graph::new();
        let z = enc.encode_waveform(&mut g, &store, &[0.0; 400]).unwrap();
        assert!(g.value(z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn too_short_names_the_receptive_field() {
        let (enc, store) = build(FeatureEncoderConfig::default());
        let field = enc.config.receptive_field();
        assert_eq!(field, 44);
        let mut g = Graph::new();
        assert!(enc.encode_waveform(&mut g, &store, &vec![0.1; field]).is_ok());
        let err = enc.encode_waveform(&mut g, &store, &vec![0.1; field - 1]).unwrap_err();
        assert!(err.to_string().contains("44"), "{err}");
        assert!(enc.encode_waveform(&mut g, &store, &[]).is_err());
    }
}
