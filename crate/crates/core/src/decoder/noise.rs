use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Adam, AdamConfig, Graph, ParamStore, Rng, Var};

use super::loss::label_smoothed_ce;
use super::model::{teacher_forcing, TextDecoder, TextEncoder};
use super::vocab::{MASK, PAD};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    pub mask_ratio: f64,
    /// Poisson mean of span lengths; zero-length draws become 1.
    pub span_lambda: f64,
    pub permute_sentences: bool,
    /// Token closing a sentence unit for permutation.
    pub separator: Option<usize>,
    pub mask_token: usize,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig { mask_ratio: 0.35, span_lambda: 3.5, permute_sentences: false, separator: None, mask_token: MASK }
    }
}

impl NoiseConfig {
    pub fn identity() -> Self {
        NoiseConfig { mask_ratio: 0.0, permute_sentences: false, ..NoiseConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mask_ratio) || self.span_lambda < 0.0 {
            return Err(Error::Config(format!("invalid noise configuration {self:?}")));
        }
        Ok(())
    }
}

/// Corrupted sequence with the number of original tokens hidden under masks.
#[derive(Clone, Debug, PartialEq)]
pub struct Noised {
    pub tokens: Vec<usize>,
    pub masked: usize,
}

/// Reorders sentence units then replaces Poisson-length spans by single mask
/// tokens. Exactly `round(mask_ratio · len)` original tokens are covered; the
/// last span is cut short to land on that count.
pub fn apply_noise_detailed(x: &[usize], noise: &NoiseConfig, rng: &mut Rng) -> Noised {
    let mut seq = x.to_vec();
    if let (true, Some(sep)) = (noise.permute_sentences, noise.separator) {
        let mut units: Vec<Vec<usize>> = Vec::new();
        let mut cur = Vec::new();
        for &t in x {
            cur.push(t);
            if t == sep {
                units.push(std::mem::take(&mut cur));
            }
        }
        if !cur.is_empty() {
            units.push(cur);
        }
        rng.shuffle(&mut units);
        seq = units.concat();
    }
    let n = seq.len();
    let target = ((noise.mask_ratio * n as f64).round() as usize).min(n);
    // Span id covering each position, if any.
    let mut span: Vec<Option<usize>> = vec![None; n];
    let mut covered = 0;
    let mut next_id = 0;
    while covered < target {
        let free: Vec<usize> = (0..n).filter(|&i| span[i].is_none()).collect();
        let start = free[rng.below(free.len())];
        let len = rng.poisson(noise.span_lambda).max(1);
        let mut i = start;
        while i < n && i < start + len && covered < target {
            if span[i].is_none() {
                span[i] = Some(next_id);
                covered += 1;
            }
            i += 1;
        }
        next_id += 1;
    }
    let mut tokens = Vec::with_capacity(n);
    let mut prev = None;
    for (t, s) in seq.iter().zip(&span) {
        match s {
            None => tokens.push(*t),
            Some(id) if prev != Some(*id) => tokens.push(noise.mask_token),
            Some(_) => {}
        }
        prev = *s;
    }
    Noised { tokens, masked: covered }
}

/// The noising function `g`.
pub fn apply_noise(x: &[usize], noise: &NoiseConfig, rng: &mut Rng) -> Vec<usize> {
    apply_noise_detailed(x, noise, rng).tokens
}

/// One monolingual training sentence with its language tag id.
#[derive(Clone, Debug, PartialEq)]
pub struct TaggedText {
    pub lang: usize,
    pub tokens: Vec<usize>,
}

/// Mean label-smoothed negative log-likelihood of reconstructing each `x`
/// from `g(x)`. With `epsilon = 0` this is the mean NLL over target tokens.
pub fn denoising_loss(
    g: &mut Graph,
    store: &ParamStore,
    decoder: &TextDecoder,
    encoder: &TextEncoder,
    batch: &[TaggedText],
    noise: &NoiseConfig,
    epsilon: f64,
    rng: &mut Rng,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Usage("denoising batch is empty".into()));
    }
    let mut logits = Vec::with_capacity(batch.len());
    let mut targets = Vec::new();
    for item in batch {
        if item.tokens.is_empty() {
            return Err(Error::Usage("denoising sentence is empty".into()));
        }
        let corrupted = apply_noise(&item.tokens, noise, rng);
        let memory = encoder.encode(g, store, decoder, &corrupted)?;
        let (input, target) = teacher_forcing(item.lang, &item.tokens);
        logits.push(decoder.decode_forward(g, store, &input, Some(memory))?);
        targets.extend(target);
    }
    let all = if logits.len() == 1 { logits[0] } else { g.concat_rows(&logits)? };
    label_smoothed_ce(g, all, &targets, epsilon, PAD)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoisingConfig {
    pub noise: NoiseConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub label_smoothing: f64,
    pub adam: AdamConfig,
}

impl Default for DenoisingConfig {
    fn default() -> Self {
        DenoisingConfig {
            noise: NoiseConfig::default(),
            steps: 1500,
            batch_size: 8,
            learning_rate: 1e-3,
            label_smoothing: 0.0,
            adam: AdamConfig::default(),
        }
    }
}

/// Runs denoising updates on decoder and text encoder parameters in `store`.
/// Returns per-step losses.
pub fn pretrain_denoising(
    store: &mut ParamStore,
    decoder: &TextDecoder,
    encoder: &TextEncoder,
    corpus: &[TaggedText],
    config: &DenoisingConfig,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    config.noise.validate()?;
    if corpus.is_empty() || config.batch_size == 0 {
        return Err(Error::Usage("denoising needs a nonempty corpus and batch size".into()));
    }
    let mut adam = Adam::new(store, config.adam.clone());
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch: Vec<TaggedText> = (0..config.batch_size).map(|_| corpus[rng.below(corpus.len())].clone()).collect();
        let mut g = Graph::new();
        let loss = denoising_loss(&mut g, store, decoder, encoder, &batch, &config.noise, config.label_smoothing, rng)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Diverged(format!("denoising loss {value} at step {step}")));
        }
        g.backward(loss)?;
        store.zero_grad();
        g.accumulate_param_grads(store);
        adam.step(store, config.learning_rate);
        losses.push(value);
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::model::DecoderConfig;

    #[test]
    fn identity_noise_is_identity() {
        let x: Vec<usize> = (5..25).collect();
        let cfg = NoiseConfig { separator: Some(9), ..NoiseConfig::identity() };
        assert_eq!(apply_noise(&x, &cfg, &mut Rng::new(1)), x);
    }

    #[test]
    fn full_ratio_leaves_only_masks() {
        let x: Vec<usize> = (5..45).collect();
        let cfg = NoiseConfig { mask_ratio: 1.0, ..NoiseConfig::default() };
        let out = apply_noise_detailed(&x, &cfg, &mut Rng::new(1));
        assert_eq!(out.masked, 40);
        assert!(out.tokens.iter().all(|&t| t == MASK));
        assert!(out.tokens.len() < 40);
    }

    #[test]
    fn masked_fraction_over_ten_thousand_tokens() {
        let cfg = NoiseConfig::default();
        let mut rng = Rng::new(42);
        let (mut masked, mut total) = (0, 0);
        for k in 0..300 {
            let x: Vec<usize> = (0..(20 + k % 41)).map(|i| 5 + i % 30).collect();
            masked += apply_noise_detailed(&x, &cfg, &mut rng).masked;
            total += x.len();
        }
        assert!(total >= 10_000);
        let frac = masked as f64 / total as f64;
        assert!((frac - 0.35).abs() < 0.02, "{frac}");
    }

    #[test]
    fn permutation_keeps_sentence_units() {
        let sep = 9;
        let x = vec![5, 6, sep, 7, sep, 8, 8, sep];
        let cfg = NoiseConfig { permute_sentences: true, separator: Some(sep), ..NoiseConfig::identity() };
        let mut seen_change = false;
        for seed in 0..20 {
            let out = apply_noise(&x, &cfg, &mut Rng::new(seed));
            let mut a = out.clone();
            a.sort();
            let mut b = x.clone();
            b.sort();
            assert_eq!(a, b);
            assert_eq!(*out.last().unwrap(), sep);
            seen_change |= out != x;
        }
        assert!(seen_change);
    }

    #[test]
    fn reproducible_under_seed() {
        let x: Vec<usize> = (5..60).collect();
        let cfg = NoiseConfig::default();
        assert_eq!(apply_noise(&x, &cfg, &mut Rng::new(8)), apply_noise(&x, &cfg, &mut Rng::new(8)));
    }

    fn tiny() -> (ParamStore, TextDecoder, TextEncoder) {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(5);
        let cfg = DecoderConfig {
            layer_count: 1,
            model_dim: 16,
            head_count: 2,
            ffn_dim: 32,
            vocab_size: 16,
            languages: vec!["en".into()],
            max_positions: 16,
            tie_output_to_embedding: true,
        };
        let dec = TextDecoder::new(cfg.clone(), &mut store, &mut rng).unwrap();
        let enc = TextEncoder::new(&cfg, &mut store, &mut rng).unwrap();
        (store, dec, enc)
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let (mut store, dec, enc) = tiny();
        store.get_mut(dec.embed_tokens).value_mut().fill(0.0);
        let mut g = Graph::new();
        let batch = [TaggedText { lang: 4, tokens: vec![6, 7, 8] }];
        let l = denoising_loss(&mut g, &store, &dec, &enc, &batch, &NoiseConfig::default(), 0.0, &mut Rng::new(1)).unwrap();
        assert!((g.value(l).item() - 16f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn batch_order_does_not_matter() {
        let (store, dec, enc) = tiny();
        let batch = vec![TaggedText { lang: 4, tokens: vec![6, 7, 8] }, TaggedText { lang: 4, tokens: vec![9, 10, 11] }];
        let rev: Vec<TaggedText> = batch.iter().rev().cloned().collect();
        let id = NoiseConfig::identity();
        let eval = |b: &[TaggedText]| {
            let mut g = Graph::new();
            let l = denoising_loss(&mut g, &store, &dec, &enc, b, &id, 0.0, &mut Rng::new(1)).unwrap();
            g.value(l).item()
        };
        assert!((eval(&batch) - eval(&rev)).abs() < 1e-12);
    }

    #[test]
    fn single_sequence_is_memorized() {
        let (mut store, dec, enc) = tiny();
        let corpus = [TaggedText { lang: 4, tokens: vec![6, 9, 7, 12, 8] }];
        let cfg = DenoisingConfig {
            noise: NoiseConfig::identity(),
            steps: 150,
            batch_size: 1,
            learning_rate: 5e-3,
            adam: AdamConfig { warmup_steps: 10, ..AdamConfig::default() },
            ..DenoisingConfig::default()
        };
        let losses = pretrain_denoising(&mut store, &dec, &enc, &corpus, &cfg, &mut Rng::new(2)).unwrap();
        assert!(*losses.last().unwrap() < 0.02, "{:?}", &losses[losses.len() - 5..]);
    }
}
