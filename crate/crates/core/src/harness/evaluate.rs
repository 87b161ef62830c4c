use std::collections::BTreeMap;
use std::fmt;

use crate::decoder::Vocab;
use crate::error::{Error, Result};
use crate::numeric::ParamStore;

use super::bleu::{is_char_level, BleuStats};
use super::pipeline::Pipeline;
use super::synth::Sample;

#[derive(Clone, Debug, PartialEq)]
pub struct LanguageScore {
    pub lang: String,
    pub bleu: f64,
    pub sentences: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Translation {
    pub id: String,
    pub lang: String,
    pub hypothesis: String,
    pub reference: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Corpus BLEU over the pooled statistics of every sentence.
    pub bleu: f64,
    pub per_language: Vec<LanguageScore>,
    pub translations: Vec<Translation>,
}

/// Decodes every sample with beam search and scores it. Sentences in `ja` or
/// `zh` are scored at character level, including in the pooled score.
pub fn evaluate(model: &Pipeline, store: &ParamStore, vocab: &Vocab, samples: &[Sample], beam: usize, max_len: usize) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Usage("cannot evaluate an empty split".into()));
    }
    let mut pooled = BleuStats::default();
    let mut by_lang: BTreeMap<String, (BleuStats, usize)> = BTreeMap::new();
    let mut translations = Vec::with_capacity(samples.len());
    for s in samples {
        let hyp = model.translate(store, vocab, &s.audio, &s.tgt_lang, beam, max_len)?;
        let hypothesis = vocab.decode(&hyp);
        let reference = vocab.decode(&s.tgt);
        let stats = BleuStats::sentence(&hypothesis, &reference, is_char_level(&s.tgt_lang));
        pooled.add(&stats);
        let entry = by_lang.entry(s.tgt_lang.clone()).or_default();
        entry.0.add(&stats);
        entry.1 += 1;
        translations.push(Translation { id: s.id.clone(), lang: s.tgt_lang.clone(), hypothesis, reference });
    }
    let per_language = by_lang.into_iter().map(|(lang, (st, n))| LanguageScore { lang, bleu: st.score(), sentences: n }).collect();
    Ok(EvalReport { bleu: pooled.score(), per_language, translations })
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "BLEU {:.2} over {} sentences", self.bleu, self.translations.len())?;
        for l in &self.per_language {
            writeln!(f, "  {}: {:.2} ({} sentences)", l.lang, l.bleu, l.sentences)?;
        }
        Ok(())
    }
}

impl EvalReport {
    pub fn translations_tsv(&self) -> String {
        let mut out = String::from("id\tlang\thypothesis\treference\n");
        for t in &self.translations {
            out.push_str(&format!("{}\t{}\t{}\t{}\n", t.id, t.lang, t.hypothesis, t.reference));
        }
        out
    }
}
