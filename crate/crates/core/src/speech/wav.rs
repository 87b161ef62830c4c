use std::path::Path;

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;

/// Reads 16-bit 16 kHz mono PCM into amplitudes in `[-1, 1)`.
pub fn read_wav(path: &Path) -> Result<Vec<f64>> {
    let reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1
        || spec.sample_rate != SAMPLE_RATE
        || spec.bits_per_sample != 16
        || spec.sample_format != hound::SampleFormat::Int
    {
        return Err(Error::Config(format!(
            "{}: expected 16-bit 16 kHz mono PCM, found {} channel(s) at {} Hz, {} bits",
            path.display(),
            spec.channels,
            spec.sample_rate,
            spec.bits_per_sample
        )));
    }
    reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0).map_err(Error::from))
        .collect()
}

/// Writes amplitudes (clipped to `[-1, 1]`) as 16-bit 16 kHz mono PCM.
pub fn write_wav(path: &Path, samples: &[f64]) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for &s in samples {
        w.write_sample(quantize_sample(s))?;
    }
    w.finalize()?;
    Ok(())
}

pub fn quantize_sample(s: f64) -> i16 {
    (s.clamp(-1.0, 1.0) * 32767.0).round() as i16
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_within_one_step() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let wave: Vec<f64> = (0..800).map(|i| 0.7 * (i as f64 * 0.05).sin()).collect();
        write_wav(&path, &wave).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.len(), wave.len());
        for (a, b) in wave.iter().zip(&back) {
            assert!((a - b).abs() < 1.0 / 16_000.0);
        }
    }

    #[test]
    fn rejects_stereo() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.wav");
        let spec = hound::WavSpec { channels: 2, sample_rate: 16_000, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        w.write_sample(0i16).unwrap();
        w.write_sample(0i16).unwrap();
        w.finalize().unwrap();
        assert!(read_wav(&path).is_err());
    }
}
