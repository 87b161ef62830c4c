use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Graph, Rng, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContrastiveConfig {
    pub distractors: usize,
    /// Divides cosine similarities before the softmax.
    pub temperature: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig { distractors: 10, temperature: 0.1 }
    }
}

/// Candidate columns per masked frame: the frame itself first, then up to
/// `distractors` other masked frames drawn without replacement.
pub fn sample_candidates(masked: usize, distractors: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let k = distractors.min(masked.saturating_sub(1));
    (0..masked)
        .map(|i| {
            let mut row = Vec::with_capacity(k + 1);
            row.push(i);
            row.extend(rng.sample_indices(masked - 1, k).into_iter().map(|j| if j < i { j } else { j + 1 }));
            row
        })
        .collect()
}

/// Mean over masked frames of `−log softmax(cos(c_t, ·)/κ)` picking `q_t`
/// among itself and distractors taken from the other masked frames.
pub fn contrastive_loss(
    g: &mut Graph,
    context: Var,
    targets: Var,
    mask: &[bool],
    config: ContrastiveConfig,
    rng: &mut Rng,
) -> Result<Var> {
    let (c, q) = (g.value(context), g.value(targets));
    if c.shape() != q.shape() || mask.len() != c.rows() {
        return Err(Error::shape(
            "contrastive_loss",
            format!("context {:?}, targets {:?}, mask of {}", c.shape(), q.shape(), mask.len()),
        ));
    }
    if config.temperature <= 0.0 {
        return Err(Error::Config("contrastive temperature must be positive".into()));
    }
    let masked: Vec<usize> = mask.iter().enumerate().filter_map(|(i, &m)| m.then_some(i)).collect();
    if masked.is_empty() {
        return Err(Error::NoMaskedFrames);
    }
    let candidates = sample_candidates(masked.len(), config.distractors, rng);
    let cm = g.gather_rows(context, &masked)?;
    let cm = g.l2_normalize_rows(cm);
    let qm = g.gather_rows(targets, &masked)?;
    let qm = g.l2_normalize_rows(qm);
    let sims = g.matmul_ext(cm, qm, true)?;
    let picked = g.gather_cols(sims, &candidates)?;
    let logits = g.scale(picked, 1.0 / config.temperature);
    let first = vec![Some(0); masked.len()];
    g.smoothed_cross_entropy(logits, &first, 0.0)
}
