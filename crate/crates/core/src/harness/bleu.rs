//! Corpus BLEU with a fixed tokenizer.
//!
//! Word mode splits on whitespace and makes every non-alphanumeric character
//! its own token. Character mode drops whitespace and treats each
//! remaining character as a token.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

/// Target languages scored at character level.
pub fn is_char_level(lang: &str) -> bool {
    matches!(lang, "ja" | "zh")
}

pub fn tokenize(text: &str, char_level: bool) -> Vec<String> {
    if char_level {
        return text.chars().filter(|c| !c.is_whitespace()).map(String::from).collect();
    }
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut cur = String::new();
        for c in word.chars() {
            if !c.is_alphanumeric() {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(c.to_string());
            } else {
                cur.push(c);
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

/// Sufficient statistics; corpus scores pool these over sentences.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BleuStats {
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    for w in tokens.windows(n) {
        *m.entry(w).or_insert(0) += 1;
    }
    m
}

impl BleuStats {
    pub fn sentence(hyp: &str, reference: &str, char_level: bool) -> Self {
        let h = tokenize(hyp, char_level);
        let r = tokenize(reference, char_level);
        let mut s = BleuStats { hyp_len: h.len(), ref_len: r.len(), ..BleuStats::default() };
        for n in 1..=MAX_ORDER {
            let (hc, rc) = (ngrams(&h, n), ngrams(&r, n));
            s.matches[n - 1] = hc.iter().map(|(g, c)| (*c).min(rc.get(g).copied().unwrap_or(0))).sum();
            s.totals[n - 1] = h.len().saturating_sub(n - 1);
        }
        s
    }

    pub fn add(&mut self, o: &BleuStats) {
        for n in 0..MAX_ORDER {
            self.matches[n] += o.matches[n];
            self.totals[n] += o.totals[n];
        }
        self.hyp_len += o.hyp_len;
        self.ref_len += o.ref_len;
    }

    /// Score in `[0, 100]`; zero when any order has no matches.
    pub fn score(&self) -> f64 {
        if self.hyp_len == 0 || (0..MAX_ORDER).any(|n| self.matches[n] == 0 || self.totals[n] == 0) {
            return 0.0;
        }
        let log_p: f64 = (0..MAX_ORDER).map(|n| (self.matches[n] as f64 / self.totals[n] as f64).ln()).sum::<f64>() / MAX_ORDER as f64;
        let bp = (1.0 - self.ref_len as f64 / self.hyp_len as f64).min(0.0);
        100.0 * (log_p + bp).exp()
    }
}

pub fn bleu<H: AsRef<str>, R: AsRef<str>>(hypotheses: &[H], references: &[R], char_level: bool) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::Usage(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if hypotheses.is_empty() {
        return Err(Error::Usage("BLEU of an empty corpus".into()));
    }
    let mut total = BleuStats::default();
    for (h, r) in hypotheses.iter().zip(references) {
        total.add(&BleuStats::sentence(h.as_ref(), r.as_ref(), char_level));
    }
    Ok(total.score())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn punctuation_is_split() {
        assert_eq!(tokenize("Hello, world!", false), ["Hello", ",", "world", "!"]);
        assert_eq!(tokenize("猫 が", true), ["猫", "が"]);
    }

    #[test]
    fn mismatched_or_empty_corpus() {
        assert!(bleu(&["a"], &["a", "b"], false).is_err());
        assert!(bleu::<&str, &str>(&[], &[], false).is_err());
    }
}
