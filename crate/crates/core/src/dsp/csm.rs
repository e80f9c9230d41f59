//! Cross-spectral matrices averaged over short STFT windows.

use nalgebra::DMatrix;
use num_complex::Complex64;

use super::{DspError, MultichannelAudio, StftTensor};

/// Narrowband cross-spectral matrix `C = (1/N) sum_n Y_n Y_n^H`, Hermitian
/// positive semidefinite by construction.
#[derive(Debug, Clone)]
pub struct CrossSpectralMatrix {
    entries: DMatrix<Complex64>,
    band_hz: f64,
    n_frames_averaged: u32,
    timestamp: f64,
}

impl CrossSpectralMatrix {
    pub fn new(
        entries: DMatrix<Complex64>,
        band_hz: f64,
        n_frames_averaged: u32,
        timestamp: f64,
    ) -> Result<Self, DspError> {
        if entries.nrows() != entries.ncols() || entries.nrows() == 0 {
            return Err(DspError::Format(format!(
                "CSM must be square and non-empty, got {}x{}",
                entries.nrows(),
                entries.ncols()
            )));
        }
        if entries.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(DspError::Format("non-finite CSM entry".into()));
        }
        Ok(Self {
            entries,
            band_hz,
            n_frames_averaged,
            timestamp,
        })
    }

    pub fn channels(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &DMatrix<Complex64> {
        &self.entries
    }

    pub fn band_hz(&self) -> f64 {
        self.band_hz
    }

    pub fn n_frames_averaged(&self) -> u32 {
        self.n_frames_averaged
    }

    /// Center time of the averaging window, seconds from recording start.
    pub fn timestamp(&self) -> f64 {
        self.timestamp
    }

    /// Largest deviation from Hermitian symmetry, relative to the largest
    /// entry magnitude. Zero input reports zero.
    pub fn hermitian_residual(&self) -> f64 {
        crate::linalg::hermitian_residual(&self.entries)
    }
}

/// Averages outer products `Y Y^H` of one STFT bin over a frame range.
pub fn csm(
    tensor: &StftTensor,
    bin: usize,
    frames: std::ops::Range<usize>,
) -> Result<CrossSpectralMatrix, DspError> {
    let (channels, n_frames, n_bins) = tensor.shape();
    if bin >= n_bins {
        return Err(DspError::BinOutOfRange { bin, bins: n_bins });
    }
    if frames.start >= frames.end || frames.end > n_frames {
        return Err(DspError::BadFrameRange {
            start: frames.start,
            end: frames.end,
            frames: n_frames,
        });
    }
    let count = frames.len();
    let mut acc = DMatrix::<Complex64>::zeros(channels, channels);
    let mut snapshot = vec![Complex64::new(0.0, 0.0); channels];
    for n in frames.clone() {
        for ch in 0..channels {
            snapshot[ch] = tensor.values()[(ch, n, bin)];
        }
        for r in 0..channels {
            for c in 0..channels {
                acc[(r, c)] += snapshot[r] * snapshot[c].conj();
            }
        }
    }
    acc /= Complex64::new(count as f64, 0.0);
    let timestamp =
        frames.clone().map(|n| tensor.frame_times()[n]).sum::<f64>() / count as f64;
    CrossSpectralMatrix::new(acc, tensor.bin_freqs()[bin], count as u32, timestamp)
}

/// Analysis-band layout: `n_bands` center frequencies evenly spaced over
/// `[f_lo_hz, f_hi_hz]`, snapped to the nearest STFT bin.
#[derive(Debug, Clone, PartialEq)]
pub struct BandConfig {
    pub f_lo_hz: f64,
    pub f_hi_hz: f64,
    pub n_bands: usize,
}

impl Default for BandConfig {
    fn default() -> Self {
        Self {
            f_lo_hz: 1500.0,
            f_hi_hz: 4500.0,
            n_bands: 9,
        }
    }
}

/// Time series of per-band CSMs: `csms[window][band]`.
#[derive(Debug, Clone)]
pub struct CsmSequence {
    csms: Vec<Vec<CrossSpectralMatrix>>,
    band_freqs: Vec<f64>,
    channels: usize,
    sample_rate: f64,
}

impl CsmSequence {
    pub fn new(
        csms: Vec<Vec<CrossSpectralMatrix>>,
        band_freqs: Vec<f64>,
        channels: usize,
        sample_rate: f64,
    ) -> Result<Self, DspError> {
        for window in &csms {
            if window.len() != band_freqs.len() {
                return Err(DspError::Format(format!(
                    "window has {} bands, expected {}",
                    window.len(),
                    band_freqs.len()
                )));
            }
            for (c, &f) in window.iter().zip(&band_freqs) {
                if c.channels() != channels {
                    return Err(DspError::ChannelMismatch {
                        expected: channels,
                        got: c.channels(),
                    });
                }
                if (c.band_hz() - f).abs() > 1e-6 {
                    return Err(DspError::Format(format!(
                        "CSM band {} Hz does not match layout {} Hz",
                        c.band_hz(),
                        f
                    )));
                }
            }
        }
        Ok(Self {
            csms,
            band_freqs,
            channels,
            sample_rate,
        })
    }

    pub fn n_windows(&self) -> usize {
        self.csms.len()
    }

    pub fn n_bands(&self) -> usize {
        self.band_freqs.len()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn band_freqs(&self) -> &[f64] {
        &self.band_freqs
    }

    pub fn window(&self, w: usize) -> &[CrossSpectralMatrix] {
        &self.csms[w]
    }

    pub fn get(&self, window: usize, band: usize) -> &CrossSpectralMatrix {
        &self.csms[window][band]
    }

    pub fn windows(&self) -> impl Iterator<Item = &[CrossSpectralMatrix]> {
        self.csms.iter().map(|w| w.as_slice())
    }
}

/// Full front end: STFT, band selection, then one CSM per
/// (window, band) over consecutive groups of `frames_per_csm` frames.
/// A trailing group with fewer frames is dropped.
pub fn csm_sequence(
    audio: &MultichannelAudio,
    window_len: usize,
    hop: usize,
    frames_per_csm: usize,
    bands: &BandConfig,
) -> Result<CsmSequence, DspError> {
    if frames_per_csm == 0 {
        return Err(DspError::NoFramesPerCsm);
    }
    let tensor = super::stft(audio, window_len, hop)?;
    let bins = super::band_bins(
        tensor.bin_freqs(),
        bands.f_lo_hz,
        bands.f_hi_hz,
        bands.n_bands,
    )?;
    let n_frames = tensor.shape().1;
    if n_frames < frames_per_csm {
        return Err(DspError::TooFewFrames {
            frames: n_frames,
            frames_per_csm,
        });
    }
    let n_windows = n_frames / frames_per_csm;
    let band_freqs: Vec<f64> = bins.iter().map(|&b| tensor.bin_freqs()[b]).collect();
    let mut csms = Vec::with_capacity(n_windows);
    for w in 0..n_windows {
        let range = w * frames_per_csm..(w + 1) * frames_per_csm;
        let mut per_band = Vec::with_capacity(bins.len());
        for &bin in &bins {
            per_band.push(csm(&tensor, bin, range.clone())?);
        }
        csms.push(per_band);
    }
    CsmSequence::new(csms, band_freqs, audio.channels(), audio.sample_rate())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::HermitianEigen;
    use ndarray::{Array2, Array3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Builds an StftTensor directly so csm() can be tested against known
    /// snapshots without running a transform.
    fn tensor_from_snapshots(values: Array3<Complex64>, fs: f64) -> StftTensor {
        let (_, frames, bins) = values.dim();
        let window_len = 2 * (bins - 1);
        let hop = window_len / 2;
        let frame_times = (0..frames)
            .map(|n| ((n * hop) as f64 + window_len as f64 / 2.0) / fs)
            .collect();
        let bin_freqs = (0..bins).map(|k| k as f64 * fs / window_len as f64).collect();
        StftTensor::from_parts(values, frame_times, bin_freqs, window_len, hop, fs)
    }

    #[test]
    fn csm_matches_brute_force_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (m, frames, bins) = (4usize, 12usize, 9usize);
        let mut values = Array3::zeros((m, frames, bins));
        for v in values.iter_mut() {
            *v = Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        }
        let tensor = tensor_from_snapshots(values.clone(), 16.0);
        let out = csm(&tensor, 3, 2..9).unwrap();
        assert_eq!(out.n_frames_averaged(), 7);
        for r in 0..m {
            for c in 0..m {
                let mut want = Complex64::new(0.0, 0.0);
                for n in 2..9 {
                    want += values[(r, n, 3)] * values[(c, n, 3)].conj();
                }
                want /= 7.0;
                assert!((out.entries()[(r, c)] - want).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn csm_is_hermitian_psd_with_real_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut values = Array3::zeros((5, 20, 5));
        for v in values.iter_mut() {
            *v = Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        }
        let tensor = tensor_from_snapshots(values, 16.0);
        let out = csm(&tensor, 2, 0..20).unwrap();
        assert!(out.hermitian_residual() < 1e-12);
        for i in 0..5 {
            assert!(out.entries()[(i, i)].im.abs() < 1e-15);
            assert!(out.entries()[(i, i)].re >= 0.0);
        }
        let eig = HermitianEigen::new(out.entries());
        let scale = eig.values[0].max(1e-12);
        assert!(eig.values.iter().all(|&l| l >= -1e-9 * scale));
    }

    #[test]
    fn rank_one_snapshots_recover_direction_vector() {
        // Y_n = a * s_n for scalars s_n gives C = mean|s|^2 * a a^H exactly.
        let m = 6usize;
        let a: Vec<Complex64> = (0..m)
            .map(|i| Complex64::from_polar(1.0, 0.7 * i as f64))
            .collect();
        let scalars: Vec<Complex64> = (0..10)
            .map(|n| Complex64::new(0.3 + 0.05 * n as f64, -0.2 + 0.03 * n as f64))
            .collect();
        let mut values = Array3::zeros((m, scalars.len(), 3));
        for (n, s) in scalars.iter().enumerate() {
            for ch in 0..m {
                values[(ch, n, 1)] = a[ch] * s;
            }
        }
        let tensor = tensor_from_snapshots(values, 16.0);
        let out = csm(&tensor, 1, 0..scalars.len()).unwrap();
        let mean_pow: f64 =
            scalars.iter().map(|s| s.norm_sqr()).sum::<f64>() / scalars.len() as f64;
        for r in 0..m {
            for c in 0..m {
                let want = a[r] * a[c].conj() * mean_pow;
                assert!((out.entries()[(r, c)] - want).norm() < 1e-12);
            }
        }
        // Trace equals summed per-channel mean power.
        let trace: f64 = (0..m).map(|i| out.entries()[(i, i)].re).sum();
        assert!((trace - m as f64 * mean_pow).abs() < 1e-12);
    }

    #[test]
    fn csm_rejects_bad_bin_and_range() {
        let values = Array3::zeros((2, 4, 3));
        let tensor = tensor_from_snapshots(values, 16.0);
        assert!(matches!(
            csm(&tensor, 3, 0..4),
            Err(DspError::BinOutOfRange { .. })
        ));
        assert!(matches!(
            csm(&tensor, 1, 2..2),
            Err(DspError::BadFrameRange { .. })
        ));
        assert!(matches!(
            csm(&tensor, 1, 0..5),
            Err(DspError::BadFrameRange { .. })
        ));
    }

    fn noise_audio(channels: usize, len: usize, fs: f64, seed: u64) -> MultichannelAudio {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = Array2::zeros((channels, len));
        for v in s.iter_mut() {
            *v = rng.gen_range(-0.9..0.9);
        }
        MultichannelAudio::new(s, fs).unwrap()
    }

    #[test]
    fn sequence_window_count_drops_tail() {
        let fs = 16_000.0;
        // 16384 samples, window 512 hop 256: 63 frames; 10 per CSM -> 6.
        let audio = noise_audio(3, 16_384, fs, 1);
        let bands = BandConfig {
            f_lo_hz: 1500.0,
            f_hi_hz: 4500.0,
            n_bands: 5,
        };
        let seq = csm_sequence(&audio, 512, 256, 10, &bands).unwrap();
        assert_eq!(seq.n_windows(), 6);
        assert_eq!(seq.n_bands(), 5);
        assert_eq!(seq.channels(), 3);
        // Band frequencies snap to bin centers and stay ordered.
        assert!(seq.band_freqs().windows(2).all(|w| w[0] < w[1]));
        for &f in seq.band_freqs() {
            let bin = (f / (fs / 512.0)).round();
            assert!((f - bin * fs / 512.0).abs() < 1e-9);
        }
        // Timestamps increase across windows for every band.
        for b in 0..seq.n_bands() {
            for w in 1..seq.n_windows() {
                assert!(seq.get(w, b).timestamp() > seq.get(w - 1, b).timestamp());
            }
        }
    }

    #[test]
    fn splitting_a_recording_concatenates_sequences() {
        // With window == hop there is no frame overlap, so CSMs of two
        // halves equal the corresponding CSMs of the whole recording.
        let fs = 8_000.0;
        let window = 128usize;
        let fpc = 4usize;
        let audio = noise_audio(2, window * fpc * 4, fs, 7);
        let bands = BandConfig {
            f_lo_hz: 1000.0,
            f_hi_hz: 3000.0,
            n_bands: 3,
        };
        let whole = csm_sequence(&audio, window, window, fpc, &bands).unwrap();
        let half_len = window * fpc * 2;
        let first = MultichannelAudio::new(
            audio.samples().slice(ndarray::s![.., ..half_len]).to_owned(),
            fs,
        )
        .unwrap();
        let second = MultichannelAudio::new(
            audio.samples().slice(ndarray::s![.., half_len..]).to_owned(),
            fs,
        )
        .unwrap();
        let sa = csm_sequence(&first, window, window, fpc, &bands).unwrap();
        let sb = csm_sequence(&second, window, window, fpc, &bands).unwrap();
        assert_eq!(whole.n_windows(), sa.n_windows() + sb.n_windows());
        for w in 0..whole.n_windows() {
            let part = if w < sa.n_windows() {
                sa.get(w, 1)
            } else {
                sb.get(w - sa.n_windows(), 1)
            };
            let diff = (whole.get(w, 1).entries() - part.entries()).norm();
            assert!(diff < 1e-12, "window {w} differs by {diff}");
        }
    }

    #[test]
    fn sequence_rejects_too_short_audio() {
        let audio = noise_audio(2, 600, 16_000.0, 3);
        let bands = BandConfig::default();
        // 600 samples at window 512 hop 256 is 1 frame, fewer than 10.
        assert!(matches!(
            csm_sequence(&audio, 512, 256, 10, &bands),
            Err(DspError::TooFewFrames { .. })
        ));
        assert!(matches!(
            csm_sequence(&audio, 512, 256, 0, &bands),
            Err(DspError::NoFramesPerCsm)
        ));
    }
}
