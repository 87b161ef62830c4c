use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::numeric::graph::log_sum_exp;
use crate::numeric::{Graph, ParamStore, Tensor};

use super::model::TextDecoder;

/// Next-token log-probabilities given a prefix.
pub trait StepScorer {
    fn vocab_size(&self) -> usize;
    fn log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens after the start prefix, including `</s>` if finished.
    pub tokens: Vec<usize>,
    /// Sum of per-step log-probabilities.
    pub score: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Average log-probability per generated token.
    pub fn normalized(&self) -> f64 {
        self.score / self.tokens.len().max(1) as f64
    }
}

fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.normalized().total_cmp(&a.normalized()).then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search from `start`. Each step keeps the `beam` highest cumulative
/// scores among all one-token extensions (ties to the lower token id);
/// extensions ending in `eos` leave the beam as finished. Search stops once
/// `beam` hypotheses have finished or the beam empties; at `max_len` the live
/// ones are returned with `finished = false`. Output is ranked by average
/// log-probability and truncated to `beam`.
pub fn beam_search<S: StepScorer + ?Sized>(scorer: &S, start: &[usize], eos: usize, beam: usize, max_len: usize) -> Result<Vec<Hypothesis>> {
    if beam == 0 {
        return Err(Error::Usage("beam size must be at least 1".into()));
    }
    if max_len == 0 {
        return Err(Error::Usage("max_len must be at least 1".into()));
    }
    let mut live = vec![Hypothesis { tokens: Vec::new(), score: 0.0, finished: false }];
    let mut done: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        let mut cands: Vec<(f64, usize, usize)> = Vec::with_capacity(live.len() * scorer.vocab_size());
        for (h, hyp) in live.iter().enumerate() {
            let mut prefix = start.to_vec();
            prefix.extend_from_slice(&hyp.tokens);
            let lp = scorer.log_probs(&prefix)?;
            if lp.len() != scorer.vocab_size() {
                return Err(Error::shape("beam_search", format!("{} scores for vocabulary {}", lp.len(), scorer.vocab_size())));
            }
            cands.extend(lp.iter().enumerate().map(|(v, &s)| (hyp.score + s, h, v)));
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.2.cmp(&b.2)).then(a.1.cmp(&b.1)));
        let mut next = Vec::with_capacity(beam);
        for (score, h, v) in cands.into_iter().take(beam) {
            let mut tokens = live[h].tokens.clone();
            tokens.push(v);
            if v == eos {
                done.push(Hypothesis { tokens, score, finished: true });
            } else {
                next.push(Hypothesis { tokens, score, finished: false });
            }
        }
        live = next;
        if done.len() >= beam || live.is_empty() {
            break;
        }
    }
    done.extend(live);
    done.sort_by(rank);
    done.truncate(beam);
    Ok(done)
}

/// Argmax decoding: the lowest id wins ties.
pub fn greedy_decode<S: StepScorer + ?Sized>(scorer: &S, start: &[usize], eos: usize, max_len: usize) -> Result<Hypothesis> {
    let mut hyp = Hypothesis { tokens: Vec::new(), score: 0.0, finished: false };
    for _ in 0..max_len {
        let mut prefix = start.to_vec();
        prefix.extend_from_slice(&hyp.tokens);
        let lp = scorer.log_probs(&prefix)?;
        let v = crate::numeric::graph::argmax(&lp);
        hyp.tokens.push(v);
        hyp.score += lp[v];
        if v == eos {
            hyp.finished = true;
            break;
        }
    }
    Ok(hyp)
}

/// Scores prefixes with a decoder attending to a fixed memory.
pub struct DecoderScorer<'a> {
    pub decoder: &'a TextDecoder,
    pub store: &'a ParamStore,
    pub memory: Option<&'a Tensor>,
}

impl StepScorer for DecoderScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.decoder.config.vocab_size
    }

    fn log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let memory = self.memory.map(|m| g.input(m.clone()));
        let logits = self.decoder.decode_forward(&mut g, self.store, prefix, memory)?;
        let t = g.value(logits);
        let last = t.row(t.rows() - 1);
        let lse = log_sum_exp(last);
        Ok(last.iter().map(|x| x - lse).collect())
    }
}
