use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Rng;

/// Span masking over latent frames: every frame independently starts a span
/// of `span_length` frames with probability `mask_probability`; overlapping
/// spans merge.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskSpec {
    pub mask_probability: f64,
    pub span_length: usize,
}

impl Default for MaskSpec {
    fn default() -> Self {
        MaskSpec { mask_probability: 0.065, span_length: 10 }
    }
}

impl MaskSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mask_probability) || self.span_length == 0 {
            return Err(Error::Config(format!(
                "mask probability must lie in [0, 1] and span length be ≥ 1, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn sample(&self, frames: usize, rng: &mut Rng) -> Vec<bool> {
        let mut mask = vec![false; frames];
        for start in 0..frames {
            if rng.bernoulli(self.mask_probability) {
                let end = (start + self.span_length).min(frames);
                mask[start..end].iter_mut().for_each(|m| *m = true);
            }
        }
        mask
    }

    /// Probability that frame `t` is covered: some start lies in
    /// `[t − span + 1, t]`, clipped at the sequence start.
    pub fn expected_fraction(&self, frames: usize) -> f64 {
        if frames == 0 {
            return 0.0;
        }
        let q = 1.0 - self.mask_probability;
        let covered: f64 = (0..frames)
            .map(|t| 1.0 - q.powi(self.span_length.min(t + 1) as i32))
            .sum();
        covered / frames as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reproducible_under_seed() {
        let spec = MaskSpec::default();
        assert_eq!(spec.sample(200, &mut Rng::new(3)), spec.sample(200, &mut Rng::new(3)));
    }

    #[test]
    fn empirical_fraction_matches_expectation() {
        let spec = MaskSpec { mask_probability: 0.065, span_length: 10 };
        let mut rng = Rng::new(12);
        let (frames, trials) = (100, 200);
        let masked: usize = (0..trials).map(|_| spec.sample(frames, &mut rng).iter().filter(|&&m| m).count()).sum();
        let got = masked as f64 / (frames * trials) as f64;
        let want = spec.expected_fraction(frames);
        assert!((got - want).abs() < 0.02, "{got} vs {want}");
    }

    #[test]
    fn extremes() {
        let mut rng = Rng::new(0);
        assert!(MaskSpec { mask_probability: 0.0, span_length: 3 }.sample(50, &mut rng).iter().all(|m| !m));
        assert!(MaskSpec { mask_probability: 1.0, span_length: 1 }.sample(50, &mut rng).iter().all(|&m| m));
        assert!(MaskSpec { mask_probability: 1.5, span_length: 1 }.validate().is_err());
    }
}
