//! Log-mel filterbank front-end with utterance-level CMVN.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MelConfig {
    pub sample_rate: usize,
    /// 25 ms at 16 kHz.
    pub window: usize,
    /// 10 ms at 16 kHz.
    pub shift: usize,
    pub fft_size: usize,
    pub mel_channels: usize,
    pub low_hz: f64,
    pub high_hz: f64,
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        MelConfig {
            sample_rate: 16_000,
            window: 400,
            shift: 160,
            fft_size: 512,
            mel_channels: 80,
            low_hz: 0.0,
            high_hz: 8_000.0,
            log_floor: 1e-10,
        }
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

pub struct MelFrontend {
    config: MelConfig,
    window: Vec<f64>,
    /// `mel_channels × (fft_size/2 + 1)` triangular weights.
    filters: Vec<Vec<f64>>,
    fft: Arc<dyn Fft<f64>>,
}

impl MelFrontend {
    pub fn new(config: MelConfig) -> Result<Self> {
        if config.window == 0 || config.shift == 0 || config.fft_size < config.window || config.mel_channels == 0 {
            return Err(Error::Config(format!("invalid mel configuration {config:?}")));
        }
        let n = config.window;
        let window = (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
            .collect();
        let bins = config.fft_size / 2 + 1;
        let (lo, hi) = (hz_to_mel(config.low_hz), hz_to_mel(config.high_hz));
        let edges: Vec<f64> = (0..config.mel_channels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (config.mel_channels + 1) as f64))
            .collect();
        let filters = (0..config.mel_channels)
            .map(|m| {
                let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
                (0..bins)
                    .map(|b| {
                        let f = b as f64 * config.sample_rate as f64 / config.fft_size as f64;
                        ((f - l) / (c - l)).min((r - f) / (r - c)).max(0.0)
                    })
                    .collect()
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(config.fft_size);
        Ok(MelFrontend { config, window, filters, fft })
    }

    pub fn config(&self) -> &MelConfig {
        &self.config
    }

    /// Centre frequency of each filter in Hz.
    pub fn centre_hz(&self) -> Vec<f64> {
        let (lo, hi) = (hz_to_mel(self.config.low_hz), hz_to_mel(self.config.high_hz));
        let m = self.config.mel_channels;
        (1..=m).map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (m + 1) as f64)).collect()
    }

    pub fn frame_count(&self, samples: usize) -> Result<usize> {
        if samples < self.config.window {
            return Err(Error::TooShort(format!(
                "{samples} samples is less than one {}-sample analysis window",
                self.config.window
            )));
        }
        Ok((samples - self.config.window) / self.config.shift + 1)
    }

    /// `frames × mel_channels` log filterbank energies.
    pub fn log_mel(&self, samples: &[f64]) -> Result<Tensor> {
        let frames = self.frame_count(samples.len())?;
        let bins = self.config.fft_size / 2 + 1;
        let mut out = Vec::with_capacity(frames * self.config.mel_channels);
        let mut buf = vec![Complex::new(0.0, 0.0); self.config.fft_size];
        let mut power = vec![0.0; bins];
        for f in 0..frames {
            let start = f * self.config.shift;
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for (i, w) in self.window.iter().enumerate() {
                buf[i].re = samples[start + i] * w;
            }
            self.fft.process(&mut buf);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            for filt in &self.filters {
                let e: f64 = filt.iter().zip(&power).map(|(w, p)| w * p).sum();
                out.push(e.max(self.config.log_floor).ln());
            }
        }
        Tensor::matrix(frames, self.config.mel_channels, out)
    }

    /// Log-mel features followed by per-utterance mean/variance normalization.
    pub fn features(&self, samples: &[f64]) -> Result<Tensor> {
        Ok(cmvn(&self.log_mel(samples)?))
    }
}

/// Standardizes each column to zero mean and unit variance. Constant columns
/// are only centred.
pub fn cmvn(features: &Tensor) -> Tensor {
    let (rows, cols) = (features.rows(), features.cols());
    let mut out = features.clone();
    for c in 0..cols {
        let mean = (0..rows).map(|r| features.row(r)[c]).sum::<f64>() / rows as f64;
        let var = (0..rows).map(|r| (features.row(r)[c] - mean).powi(2)).sum::<f64>() / rows as f64;
        let std = var.sqrt();
        let scale = if std > 1e-10 { 1.0 / std } else { 1.0 };
        for r in 0..rows {
            let x = &mut out.data_mut()[r * cols + c];
            *x = (*x - mean) * scale;
        }
    }
    out
}

/// Default 80-channel front-end: log-mel then CMVN.
pub fn logmel_frontend(samples: &[f64]) -> Result<Tensor> {
    MelFrontend::new(MelConfig::default())?.features(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise(n: usize) -> Vec<f64> {
        let mut rng = crate::numeric::Rng::new(8);
        (0..n).map(|_| rng.normal() * 0.1).collect()
    }

    #[test]
    fn one_second_gives_98_frames() {
        let f = logmel_frontend(&noise(16_000)).unwrap();
        assert_eq!(f.shape(), &[98, 80]);
    }

    #[test]
    fn cmvn_zeroes_channel_means() {
        let f = logmel_frontend(&noise(8_000)).unwrap();
        for c in 0..80 {
            let mean = (0..f.rows()).map(|r| f.row(r)[c]).sum::<f64>() / f.rows() as f64;
            let var = (0..f.rows()).map(|r| (f.row(r)[c] - mean).powi(2)).sum::<f64>() / f.rows() as f64;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn shorter_than_a_window_is_rejected() {
        assert!(matches!(logmel_frontend(&noise(399)), Err(Error::TooShort(_))));
        assert_eq!(logmel_frontend(&noise(400)).unwrap().rows(), 1);
    }

    #[test]
    fn pure_tone_peaks_in_its_mel_channel() {
        // Oracle: HTK mel scale with 82 equally spaced edges over 0..8 kHz;
        // channel m is centred on edge m+1.
        let mel = |hz: f64| 2595.0 * (1.0 + hz / 700.0).log10();
        let inv = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
        let top = mel(8000.0);
        for channel in [40usize, 55, 70] {
            let tone = inv(top * (channel + 1) as f64 / 81.0);
            let wave: Vec<f64> = (0..4000)
                .map(|i| (2.0 * std::f64::consts::PI * tone * i as f64 / 16_000.0).sin())
                .collect();
            let front = MelFrontend::new(MelConfig::default()).unwrap();
            let f = front.log_mel(&wave).unwrap();
            let mut energy = vec![0.0; 80];
            for r in 0..f.rows() {
                for (e, v) in energy.iter_mut().zip(f.row(r)) {
                    *e += v;
                }
            }
            let peak = crate::numeric::graph::argmax(&energy);
            assert_eq!(peak, channel, "tone {tone:.1} Hz");
        }
    }
}
