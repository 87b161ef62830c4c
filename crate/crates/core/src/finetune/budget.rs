use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::numeric::{Owner, ParamRole};

use super::FinetuneStrategy;

/// Dimensions of the full-size speech encoder / adaptor / text decoder
/// pipeline. Only ever counted, never instantiated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReferenceArchSpec {
    pub encoder_layers: usize,
    pub encoder_dim: usize,
    pub encoder_heads: usize,
    pub encoder_ffn: usize,
    /// `(channels, kernel)` of each waveform convolution; no biases, one
    /// layer norm per convolution.
    pub conv_layers: Vec<(usize, usize)>,
    /// Kernel width and groups of the convolutional relative position
    /// embedding (weight-normalized).
    pub pos_conv_kernel: usize,
    pub pos_conv_groups: usize,
    pub decoder_layers: usize,
    pub decoder_dim: usize,
    pub decoder_heads: usize,
    pub decoder_ffn: usize,
    pub vocab_size: usize,
    /// Learned decoder positions including the two offset slots.
    pub decoder_positions: usize,
    pub learned_decoder_positions: bool,
    pub tie_output_to_embedding: bool,
    pub adaptor_layers: usize,
    pub adaptor_kernel: usize,
    /// Gated adaptor convolutions emit twice the decoder width.
    pub adaptor_glu: bool,
    /// Extra parameters counted as trained under every strategy.
    pub always_trained_extras: usize,
}

impl Default for ReferenceArchSpec {
    fn default() -> Self {
        let mut conv_layers = vec![(512, 10)];
        conv_layers.extend([(512, 3); 4]);
        conv_layers.extend([(512, 2); 2]);
        ReferenceArchSpec {
            encoder_layers: 24,
            encoder_dim: 1024,
            encoder_heads: 16,
            encoder_ffn: 4096,
            conv_layers,
            pos_conv_kernel: 128,
            pos_conv_groups: 16,
            decoder_layers: 12,
            decoder_dim: 1024,
            decoder_heads: 16,
            decoder_ffn: 4096,
            vocab_size: 250_054,
            decoder_positions: 1026,
            learned_decoder_positions: true,
            tie_output_to_embedding: true,
            adaptor_layers: 3,
            adaptor_kernel: 3,
            adaptor_glu: true,
            always_trained_extras: 0,
        }
    }
}

fn attention(d: usize) -> usize {
    4 * (d * d + d)
}

fn layer_norm(d: usize) -> usize {
    2 * d
}

fn ffn(d: usize, hidden: usize) -> usize {
    2 * d * hidden + hidden + d
}

impl ReferenceArchSpec {
    /// Parameter count per (owner, role).
    pub fn role_counts(&self) -> BTreeMap<(Owner, ParamRole), usize> {
        use Owner::*;
        use ParamRole::*;
        let mut m: BTreeMap<(Owner, ParamRole), usize> = BTreeMap::new();
        let mut add = |o, r, n| *m.entry((o, r)).or_insert(0) += n;

        let d = self.encoder_dim;
        let mut cin = 1;
        for &(ch, k) in &self.conv_layers {
            add(Encoder, ConvFeature, ch * cin * k);
            add(Encoder, LayerNorm, layer_norm(ch));
            cin = ch;
        }
        add(Encoder, LayerNorm, layer_norm(cin));
        add(Encoder, Other, cin * d + d);
        add(Encoder, Other, d);
        add(Encoder, Positional, d * (d / self.pos_conv_groups) * self.pos_conv_kernel + self.pos_conv_kernel + d);
        for _ in 0..self.encoder_layers {
            add(Encoder, SelfAttn, attention(d));
            add(Encoder, LayerNorm, 2 * layer_norm(d));
            add(Encoder, Ffn, ffn(d, self.encoder_ffn));
        }
        if self.encoder_layers > 0 {
            add(Encoder, LayerNorm, layer_norm(d));
        }

        let e = self.decoder_dim;
        let width = if self.adaptor_glu { 2 * e } else { e };
        for i in 0..self.adaptor_layers {
            let cin = if i == 0 { d } else { e };
            add(Owner::Adaptor, ParamRole::Adaptor, self.adaptor_kernel * cin * width + width);
        }

        add(Decoder, Embedding, self.vocab_size * e);
        if !self.tie_output_to_embedding {
            add(Decoder, Embedding, self.vocab_size * e);
        }
        if self.learned_decoder_positions {
            add(Decoder, Positional, self.decoder_positions * e);
        }
        add(Decoder, LayerNorm, layer_norm(e));
        for _ in 0..self.decoder_layers {
            add(Decoder, SelfAttn, attention(e));
            add(Decoder, EncoderAttn, attention(e));
            add(Decoder, LayerNorm, 3 * layer_norm(e));
            add(Decoder, Ffn, ffn(e, self.decoder_ffn));
        }
        if self.decoder_layers > 0 {
            add(Decoder, LayerNorm, layer_norm(e));
        }
        m
    }

    pub fn total(&self) -> usize {
        self.role_counts().values().sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Budget {
    pub trainable: usize,
    pub total: usize,
    pub fraction: f64,
}

pub fn count_budget(arch: &ReferenceArchSpec, strategy: &FinetuneStrategy) -> Budget {
    let counts = arch.role_counts();
    let total: usize = counts.values().sum();
    let trainable = counts
        .iter()
        .filter(|((o, r), _)| strategy.selects(*o, *r))
        .map(|(_, n)| n)
        .sum::<usize>()
        + arch.always_trained_extras;
    Budget { trainable, total, fraction: trainable as f64 / total as f64 }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BudgetRow {
    pub strategy: FinetuneStrategy,
    /// Reference value reported for this strategy; not computed here.
    pub reported_bleu: Option<f64>,
    pub budget: Budget,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BudgetTable {
    pub rows: Vec<BudgetRow>,
}

pub fn emit_budget_table(arch: &ReferenceArchSpec, strategies: &[(FinetuneStrategy, Option<f64>)]) -> BudgetTable {
    let rows = strategies
        .iter()
        .map(|(s, bleu)| BudgetRow { strategy: s.clone(), reported_bleu: *bleu, budget: count_budget(arch, s) })
        .collect();
    BudgetTable { rows }
}

impl BudgetTable {
    /// All seven ablation strategies with their reported BLEU.
    pub fn reference(arch: &ReferenceArchSpec) -> Self {
        let rows: Vec<_> = FinetuneStrategy::table3().into_iter().map(|(s, b)| (s, Some(b))).collect();
        emit_budget_table(arch, &rows)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("encoder\tdecoder\treported_bleu\ttrainable\tfraction\n");
        for r in &self.rows {
            let bleu = r.reported_bleu.map_or_else(|| "-".to_string(), |b| format!("{b:.1}"));
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{:.4}\n",
                r.strategy.encoder, r.strategy.decoder, bleu, r.budget.trainable, r.budget.fraction
            ));
        }
        out
    }
}

impl fmt::Display for BudgetTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<24} {:<40} {:>10} {:>18}", "encoder finetuning", "decoder finetuning", "ref. BLEU", "FT params")?;
        for r in &self.rows {
            let bleu = r.reported_bleu.map_or_else(|| "-".to_string(), |b| format!("{b:.1}"));
            writeln!(
                f,
                "{:<24} {:<40} {:>10} {:>18}",
                r.strategy.encoder.to_string(),
                r.strategy.decoder.to_string(),
                bleu,
                format!("{:.1}M ({:.1}%)", r.budget.trainable as f64 / 1e6, 100.0 * r.budget.fraction)
            )?;
        }
        Ok(())
    }
}
