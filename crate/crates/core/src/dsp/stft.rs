//! Short-time Fourier transform and analysis-band selection.

use ndarray::Array3;
use num_complex::Complex64;
use rustfft::FftPlanner;

use super::{DspError, MultichannelAudio};

/// Complex STFT of a multichannel recording, shaped (channel, frame, bin)
/// over the one-sided spectrum.
///
/// Bins follow the positive-frequency analysis convention
/// `Y(k) = sum_t y(t) w(t) exp(+j 2 pi k t / L)`: a wave arriving earlier at a
/// channel carries a positive relative phase there, matching the steering
/// model in [`crate::geometry::steering_matrix`].
#[derive(Debug, Clone)]
pub struct StftTensor {
    values: Array3<Complex64>,
    frame_times: Vec<f64>,
    bin_freqs: Vec<f64>,
    window_len: usize,
    hop: usize,
    sample_rate: f64,
}

impl StftTensor {
    /// (channels, frames, bins)
    pub fn shape(&self) -> (usize, usize, usize) {
        let s = self.values.dim();
        (s.0, s.1, s.2)
    }

    pub fn values(&self) -> &Array3<Complex64> {
        &self.values
    }

    /// Center time of each frame, in seconds. Frame `n` covers samples
    /// `[n*hop, n*hop + window_len)`.
    pub fn frame_times(&self) -> &[f64] {
        &self.frame_times
    }

    pub fn bin_freqs(&self) -> &[f64] {
        &self.bin_freqs
    }

    pub fn window_len(&self) -> usize {
        self.window_len
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    /// Assembles a tensor from precomputed parts so tests can feed exact
    /// snapshot values through downstream ops.
    #[cfg(test)]
    pub(crate) fn from_parts(
        values: Array3<Complex64>,
        frame_times: Vec<f64>,
        bin_freqs: Vec<f64>,
        window_len: usize,
        hop: usize,
        sample_rate: f64,
    ) -> Self {
        Self {
            values,
            frame_times,
            bin_freqs,
            window_len,
            hop,
            sample_rate,
        }
    }
}

/// Computes the Hann-windowed STFT. Frames that would run past the end of
/// the recording are dropped; the input must cover at least one window.
pub fn stft(
    audio: &MultichannelAudio,
    window_len: usize,
    hop: usize,
) -> Result<StftTensor, DspError> {
    if hop == 0 {
        return Err(DspError::BadHop);
    }
    let t_len = audio.len_samples();
    if window_len == 0 || window_len > t_len {
        return Err(DspError::AudioTooShort {
            required: window_len.max(1),
            available: t_len,
        });
    }
    let channels = audio.channels();
    let n_frames = (t_len - window_len) / hop + 1;
    let n_bins = window_len / 2 + 1;
    let fs = audio.sample_rate();

    let window: Vec<f64> = (0..window_len)
        .map(|t| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * t as f64 / window_len as f64).cos())
        .collect();

    let fft = FftPlanner::<f64>::new().plan_fft_forward(window_len);
    let mut values = Array3::zeros((channels, n_frames, n_bins));
    let mut buf = vec![Complex64::new(0.0, 0.0); window_len];
    for ch in 0..channels {
        let row = audio.channel(ch);
        for frame in 0..n_frames {
            let start = frame * hop;
            for t in 0..window_len {
                buf[t] = Complex64::new(row[start + t] * window[t], 0.0);
            }
            fft.process(&mut buf);
            for k in 0..n_bins {
                // Conjugate flips the machine FFT's exp(-jwt) kernel to the
                // exp(+jwt) convention documented on StftTensor.
                values[(ch, frame, k)] = buf[k].conj();
            }
        }
    }

    let frame_times: Vec<f64> = (0..n_frames)
        .map(|n| ((n * hop) as f64 + window_len as f64 / 2.0) / fs)
        .collect();
    let bin_freqs: Vec<f64> = (0..n_bins).map(|k| k as f64 * fs / window_len as f64).collect();

    Ok(StftTensor {
        values,
        frame_times,
        bin_freqs,
        window_len,
        hop,
        sample_rate: fs,
    })
}

/// Picks the nearest STFT bin for each of `n_bands` target frequencies spaced
/// evenly over `[f_lo, f_hi]` (a single band sits at `f_lo`). Neighbouring
/// targets may collapse onto the same bin; duplicates are kept.
pub fn band_bins(
    bin_freqs: &[f64],
    f_lo: f64,
    f_hi: f64,
    n_bands: usize,
) -> Result<Vec<usize>, DspError> {
    if n_bands == 0 {
        return Err(DspError::NoBands);
    }
    if !(f_lo < f_hi) || f_lo < 0.0 {
        return Err(DspError::BadBandRange { f_lo, f_hi });
    }
    let nyquist = *bin_freqs.last().ok_or(DspError::NoBands)?;
    if f_hi > nyquist {
        return Err(DspError::AboveNyquist { f_hi, nyquist });
    }
    let mut bins = Vec::with_capacity(n_bands);
    for i in 0..n_bands {
        let target = if n_bands == 1 {
            f_lo
        } else {
            f_lo + (f_hi - f_lo) * i as f64 / (n_bands - 1) as f64
        };
        let bin = bin_freqs
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| {
                let da = (*a - target).abs();
                let db = (*b - target).abs();
                da.partial_cmp(&db).unwrap()
            })
            .map(|(k, _)| k)
            .unwrap();
        bins.push(bin);
    }
    Ok(bins)
}
