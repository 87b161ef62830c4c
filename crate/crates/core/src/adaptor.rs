//! Convolutional length adaptor between the speech encoder and the text
//! decoder.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{conv_out_len, Graph, LayerNorm, Owner, ParamId, ParamRole, ParamStore, Rng, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    /// Gated linear unit; the convolution emits twice the output width.
    Glu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptorConfig {
    pub layer_count: usize,
    pub stride: usize,
    pub kernel: usize,
    pub layer_drop: f64,
    pub use_layer_norm: bool,
    pub activation: Activation,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Default for AdaptorConfig {
    fn default() -> Self {
        AdaptorConfig {
            layer_count: 3,
            stride: 2,
            kernel: 3,
            layer_drop: 0.0,
            use_layer_norm: false,
            activation: Activation::Relu,
            in_dim: 64,
            out_dim: 64,
        }
    }
}

impl AdaptorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layer_count == 0 || self.stride == 0 || self.kernel < self.stride {
            return Err(Error::Config(format!(
                "adaptor needs at least one layer, stride ≥ 1 and kernel ≥ stride (layers {}, stride {}, kernel {})",
                self.layer_count, self.stride, self.kernel
            )));
        }
        if !(0.0..1.0).contains(&self.layer_drop) {
            return Err(Error::Config(format!("layer drop {} must lie in [0, 1)", self.layer_drop)));
        }
        if self.in_dim == 0 || self.out_dim == 0 {
            return Err(Error::Config("adaptor widths must be positive".into()));
        }
        // A skipped first layer passes its input through unchanged.
        if self.layer_drop > 0.0 && self.in_dim != self.out_dim {
            return Err(Error::Config(format!(
                "layer drop needs equal input and output widths, got {} and {}",
                self.in_dim, self.out_dim
            )));
        }
        Ok(())
    }

    pub fn padding(&self) -> usize {
        self.kernel / 2
    }

    /// Length after one applied layer.
    pub fn layer_len(&self, t: usize) -> usize {
        conv_out_len(t, self.kernel, self.stride, self.padding()).unwrap_or(0)
    }
}

/// Output length when the layers flagged in `dropped` are skipped.
pub fn output_length(t: usize, config: &AdaptorConfig, dropped: &[bool]) -> usize {
    assert_eq!(dropped.len(), config.layer_count, "one drop flag per adaptor layer");
    dropped.iter().fold(t, |t, &d| if d { t } else { config.layer_len(t) })
}

#[derive(Clone, Debug)]
struct AdaptorLayer {
    weight: ParamId,
    bias: ParamId,
    norm: Option<LayerNorm>,
}

#[derive(Clone, Debug)]
pub struct Adaptor {
    pub config: AdaptorConfig,
    layers: Vec<AdaptorLayer>,
}

/// Output of [`Adaptor::adapt`].
pub struct Adapted {
    pub out: Var,
    /// Which layers were skipped this call; all false in evaluation mode.
    pub dropped: Vec<bool>,
}

impl Adaptor {
    pub fn new(config: AdaptorConfig, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let conv_out = match config.activation {
            Activation::Relu => config.out_dim,
            Activation::Glu => 2 * config.out_dim,
        };
        let mut layers = Vec::with_capacity(config.layer_count);
        for i in 0..config.layer_count {
            let cin = if i == 0 { config.in_dim } else { config.out_dim };
            let fan_in = (cin * config.kernel) as f64;
            let weight = store.register(
                format!("adaptor.layers.{i}.conv.weight"),
                Tensor::randn(&[conv_out, cin, config.kernel], (2.0 / fan_in).sqrt(), rng),
                ParamRole::Adaptor,
                Owner::Adaptor,
            )?;
            let bias = store.register(
                format!("adaptor.layers.{i}.conv.bias"),
                Tensor::zeros(&[conv_out]),
                ParamRole::Adaptor,
                Owner::Adaptor,
            )?;
            let norm = if config.use_layer_norm {
                Some(LayerNorm::new(store, &format!("adaptor.layers.{i}.layer_norm"), config.out_dim, Owner::Adaptor)?)
            } else {
                None
            };
            layers.push(AdaptorLayer { weight, bias, norm });
        }
        Ok(Adaptor { config, layers })
    }

    /// Draws the per-layer skip pattern for one training call.
    pub fn sample_drops(&self, rng: &mut Rng) -> Vec<bool> {
        (0..self.config.layer_count).map(|_| self.config.layer_drop > 0.0 && rng.bernoulli(self.config.layer_drop)).collect()
    }

    /// Maps `time×in_dim` encoder output to `time'×out_dim`. Evaluation mode
    /// applies every layer and leaves `rng` untouched.
    pub fn adapt(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode, rng: &mut Rng) -> Result<Adapted> {
        let dropped = match mode {
            Mode::Train => self.sample_drops(rng),
            Mode::Eval => vec![false; self.config.layer_count],
        };
        let out = self.adapt_with(g, store, x, &dropped)?;
        Ok(Adapted { out, dropped })
    }

    /// Applies the adaptor with an explicit skip pattern.
    pub fn adapt_with(&self, g: &mut Graph, store: &ParamStore, x: Var, dropped: &[bool]) -> Result<Var> {
        let t = g.value(x);
        if t.shape().len() != 2 || t.cols() != self.config.in_dim {
            return Err(Error::shape("adapt", format!("expected time×{}, got {:?}", self.config.in_dim, t.shape())));
        }
        if dropped.len() != self.layers.len() {
            return Err(Error::shape("adapt", format!("{} drop flags for {} layers", dropped.len(), self.layers.len())));
        }
        if t.rows() == 0 || output_length(t.rows(), &self.config, dropped) == 0 {
            return Err(Error::TooShort(format!("adaptor input of {} frames; at least 1 frame is required", t.rows())));
        }
        let mut h = x;
        for (layer, &skip) in self.layers.iter().zip(dropped) {
            if skip {
                continue;
            }
            let w = g.param(store, layer.weight);
            let b = g.param(store, layer.bias);
            let ct = g.transpose(h);
            let y = g.conv1d(ct, w, Some(b), self.config.stride, self.config.padding())?;
            let y = g.transpose(y);
            h = match self.config.activation {
                Activation::Relu => g.relu(y),
                Activation::Glu => g.glu(y)?,
            };
            if let Some(norm) = &layer.norm {
                h = norm.forward(g, store, h)?;
            }
        }
        Ok(h)
    }
}

/// One row of the adaptor ablation grid with the BLEU reported for it.
#[derive(Clone, Debug, PartialEq)]
pub struct GridRow {
    pub config: AdaptorConfig,
    pub reported_bleu: f64,
}

/// The eight stride/depth/drop/norm combinations of the en-de adaptor
/// ablation, in published order, on default widths.
pub fn enumerate_table4_grid() -> Vec<GridRow> {
    const ROWS: [(usize, usize, f64, bool, f64); 8] = [
        (2, 3, 0.0, false, 19.76),
        (2, 3, 0.3, false, 23.23),
        (2, 3, 0.2, false, 22.38),
        (2, 3, 0.2, true, 19.4),
        (2, 4, 0.0, false, 21.73),
        (2, 4, 0.3, false, 0.14),
        (3, 3, 0.3, false, 21.27),
        (3, 3, 0.0, false, 22.23),
    ];
    ROWS.iter()
        .map(|&(stride, layer_count, layer_drop, use_layer_norm, reported_bleu)| GridRow {
            config: AdaptorConfig { stride, layer_count, layer_drop, use_layer_norm, ..AdaptorConfig::default() },
            reported_bleu,
        })
        .collect()
}
