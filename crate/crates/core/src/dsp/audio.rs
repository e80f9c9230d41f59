//! Multichannel audio container and WAV file access.

use std::path::Path;

use ndarray::Array2;

use super::DspError;

/// A multichannel recording. Samples are stored channel-major (`M x T`),
/// finite, with amplitude in [-1, 1].
#[derive(Debug, Clone)]
pub struct MultichannelAudio {
    samples: Array2<f64>,
    sample_rate: f64,
}

impl MultichannelAudio {
    pub fn new(samples: Array2<f64>, sample_rate: f64) -> Result<Self, DspError> {
        if samples.nrows() == 0 || samples.ncols() == 0 {
            return Err(DspError::EmptyAudio);
        }
        if !(sample_rate > 0.0) || !sample_rate.is_finite() {
            return Err(DspError::BadSampleRate(sample_rate));
        }
        for ((ch, idx), &v) in samples.indexed_iter() {
            if !v.is_finite() || v.abs() > 1.0 + 1e-9 {
                return Err(DspError::NonFiniteSample {
                    channel: ch,
                    index: idx,
                });
            }
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn channels(&self) -> usize {
        self.samples.nrows()
    }

    pub fn len_samples(&self) -> usize {
        self.samples.ncols()
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.ncols() as f64 / self.sample_rate
    }

    pub fn samples(&self) -> &Array2<f64> {
        &self.samples
    }

    pub fn channel(&self, ch: usize) -> ndarray::ArrayView1<'_, f64> {
        self.samples.row(ch)
    }
}

/// Reads a WAV file into a channel-major matrix. Integer PCM (16/24/32 bit)
/// and 32-bit float formats are accepted; integers are scaled to [-1, 1).
pub fn read_wav(path: &Path) -> Result<MultichannelAudio, DspError> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(DspError::EmptyAudio);
    }
    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<Result<_, _>>()?,
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 * scale))
                .collect::<Result<_, _>>()?
        }
    };
    let frames = interleaved.len() / channels;
    if frames == 0 {
        return Err(DspError::EmptyAudio);
    }
    let mut samples = Array2::zeros((channels, frames));
    for t in 0..frames {
        for ch in 0..channels {
            samples[(ch, t)] = interleaved[t * channels + ch];
        }
    }
    // Float-format files are allowed to exceed full scale by a hair; clamp
    // rather than reject so round trips through f32 stay loadable.
    samples.mapv_inplace(|v| v.clamp(-1.0, 1.0));
    MultichannelAudio::new(samples, spec.sample_rate as f64)
}

/// Writes audio as 32-bit float WAV, interleaved.
pub fn write_wav(path: &Path, audio: &MultichannelAudio) -> Result<(), DspError> {
    let spec = hound::WavSpec {
        channels: audio.channels() as u16,
        sample_rate: audio.sample_rate().round() as u32,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for t in 0..audio.len_samples() {
        for ch in 0..audio.channels() {
            writer.write_sample(audio.samples[(ch, t)] as f32)?;
        }
    }
    writer.finalize()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn rejects_empty_and_non_finite() {
        assert!(MultichannelAudio::new(Array2::zeros((0, 4)), 48_000.0).is_err());
        assert!(MultichannelAudio::new(Array2::zeros((2, 0)), 48_000.0).is_err());
        let mut s = Array2::zeros((2, 4));
        s[(1, 2)] = f64::NAN;
        assert!(MultichannelAudio::new(s, 48_000.0).is_err());
        assert!(MultichannelAudio::new(Array2::zeros((2, 4)), 0.0).is_err());
        let mut s = Array2::zeros((1, 2));
        s[(0, 0)] = 1.5;
        assert!(MultichannelAudio::new(s, 48_000.0).is_err());
    }

    #[test]
    fn wav_round_trip_preserves_samples() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.wav");
        let mut s = Array2::zeros((3, 100));
        for ch in 0..3 {
            for t in 0..100 {
                s[(ch, t)] = (0.3 * (t as f64 * 0.17 + ch as f64)).sin() * 0.8;
            }
        }
        let audio = MultichannelAudio::new(s, 16_000.0).unwrap();
        write_wav(&path, &audio).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.channels(), 3);
        assert_eq!(back.len_samples(), 100);
        assert!((back.sample_rate() - 16_000.0).abs() < 1e-9);
        for ch in 0..3 {
            for t in 0..100 {
                let diff = (back.samples()[(ch, t)] - audio.samples()[(ch, t)]).abs();
                assert!(diff < 1e-6, "f32 round trip off by {diff}");
            }
        }
    }
}
