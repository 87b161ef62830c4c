use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Graph, Linear, Owner, ParamId, ParamRole, ParamStore, Rng, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuantizerConfig {
    pub group_count: usize,
    pub entries_per_group: usize,
    /// Softmax temperature of the straight-through relaxation.
    pub temperature: f64,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        QuantizerConfig { group_count: 2, entries_per_group: 16, temperature: 1.0 }
    }
}

/// Product quantizer: each group picks one codebook entry and the picks are
/// concatenated back to the latent width.
#[derive(Clone, Debug)]
pub struct Quantizer {
    pub config: QuantizerConfig,
    latent_dim: usize,
    logits: Linear,
    codebook: ParamId,
}

/// Output of [`Quantizer::quantize`].
pub struct Quantized {
    pub q: Var,
    /// Selected entry per frame and group.
    pub indices: Vec<Vec<usize>>,
    /// Mean over groups of `Σ_v p̄_v²`, where `p̄` is the frame-averaged
    /// selection distribution: `1/entries` when usage is uniform, 1 when a
    /// single entry takes everything.
    pub diversity: f64,
}

impl Quantizer {
    pub fn new(config: QuantizerConfig, latent_dim: usize, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        let QuantizerConfig { group_count, entries_per_group, temperature } = config;
        if group_count == 0 || entries_per_group == 0 || latent_dim % group_count != 0 || temperature <= 0.0 {
            return Err(Error::Config(format!(
                "quantizer needs groups dividing the latent width {latent_dim} and a positive temperature, got {config:?}"
            )));
        }
        let logits = Linear::new(
            store,
            "encoder.quantizer.weight_proj",
            (latent_dim, group_count * entries_per_group),
            ParamRole::Other,
            Owner::Encoder,
            rng,
        )?;
        let codebook = store.register(
            "encoder.quantizer.codevectors",
            Tensor::uniform(&[group_count * entries_per_group, latent_dim / group_count], 1.0, rng),
            ParamRole::Other,
            Owner::Encoder,
        )?;
        Ok(Quantizer { config, latent_dim, logits, codebook })
    }

    pub fn entry_dim(&self) -> usize {
        self.latent_dim / self.config.group_count
    }

    /// Maps latents to codebook vectors. Training mode passes gradients to the
    /// selection logits through the softmax (straight-through); evaluation
    /// mode is a plain hard argmax.
    pub fn quantize(&self, g: &mut Graph, store: &ParamStore, z: Var, train: bool) -> Result<Quantized> {
        let t = g.value(z);
        if t.cols() != self.latent_dim {
            return Err(Error::shape("quantize", format!("latents of width {}, quantizer expects {}", t.cols(), self.latent_dim)));
        }
        let frames = t.rows();
        let (groups, entries) = (self.config.group_count, self.config.entries_per_group);
        let logits = self.logits.forward(g, store, z)?;
        let codebook = g.param(store, self.codebook);
        let mut parts = Vec::with_capacity(groups);
        let mut indices = vec![Vec::with_capacity(groups); frames];
        let mut diversity = 0.0;
        for grp in 0..groups {
            let cols: Vec<usize> = (grp * entries..(grp + 1) * entries).collect();
            let sel = g.gather_cols(logits, &vec![cols; frames])?;
            let sel = g.scale(sel, 1.0 / self.config.temperature);
            let soft = g.softmax(sel);
            let probs = g.value(soft);
            let mut mean = vec![0.0; entries];
            for r in 0..frames {
                for (m, p) in mean.iter_mut().zip(probs.row(r)) {
                    *m += p / frames as f64;
                }
            }
            diversity += mean.iter().map(|p| p * p).sum::<f64>() / groups as f64;
            let hard = if train {
                g.straight_through_one_hot(soft)
            } else {
                let v = g.value(soft).clone();
                let constant = g.input(v);
                g.straight_through_one_hot(constant)
            };
            for (r, row) in g.value(hard).data().chunks(entries).enumerate() {
                indices[r].push(row.iter().position(|&x| x == 1.0).expect("one-hot row"));
            }
            let ids: Vec<usize> = (grp * entries..(grp + 1) * entries).collect();
            let book = g.gather_rows(codebook, &ids)?;
            parts.push(g.matmul(hard, book)?);
        }
        let q = if parts.len() == 1 { parts[0] } else { g.concat_cols(&parts)? };
        Ok(Quantized { q, indices, diversity })
    }

    /// Codebook vectors for explicit selections (one index per group).
    pub fn lookup(&self, store: &ParamStore, indices: &[Vec<usize>]) -> Tensor {
        let book = store.get(self.codebook).value();
        let entries = self.config.entries_per_group;
        let mut data = Vec::with_capacity(indices.len() * self.latent_dim);
        for frame in indices {
            for (grp, &i) in frame.iter().enumerate() {
                data.extend_from_slice(book.row(grp * entries + i));
            }
        }
        Tensor::from_parts(vec![indices.len(), self.latent_dim], data)
    }

    pub fn logits_layer(&self) -> &Linear {
        &self.logits
    }
}
