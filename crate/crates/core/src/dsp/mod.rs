//! Time-frequency front end: STFT, band selection, cross-spectral matrices,
//! the on-disk CSM store, and learned low-to-high channel upsampling.

mod audio;
mod csm;
mod stft;
mod store;
mod upsample;

pub use audio::{read_wav, write_wav, MultichannelAudio};
pub use csm::{csm, csm_sequence, BandConfig, CrossSpectralMatrix, CsmSequence};
pub use stft::{band_bins, stft, StftTensor};
pub use store::{read_csm_store, write_csm_store};
pub use upsample::{
    read_upsampler, train_upsampler, upsample_csm, upsample_sequence, write_upsampler,
    LearnedUpsampler,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DspError {
    #[error("audio has {available} samples, shorter than one {required}-sample window")]
    AudioTooShort { required: usize, available: usize },
    #[error("hop must be >= 1")]
    BadHop,
    #[error("audio must have at least 1 channel and 1 sample")]
    EmptyAudio,
    #[error("non-finite sample at channel {channel}, index {index}")]
    NonFiniteSample { channel: usize, index: usize },
    #[error("sample rate must be positive, got {0}")]
    BadSampleRate(f64),
    #[error("bin index {bin} out of range ({bins} bins)")]
    BinOutOfRange { bin: usize, bins: usize },
    #[error("frame range {start}..{end} invalid for {frames} frames")]
    BadFrameRange {
        start: usize,
        end: usize,
        frames: usize,
    },
    #[error("band range invalid: f_lo {f_lo} must be < f_hi {f_hi}")]
    BadBandRange { f_lo: f64, f_hi: f64 },
    #[error("f_hi {f_hi} Hz above Nyquist {nyquist} Hz")]
    AboveNyquist { f_hi: f64, nyquist: f64 },
    #[error("n_bands must be >= 1")]
    NoBands,
    #[error("frames_per_csm must be >= 1")]
    NoFramesPerCsm,
    #[error("recording too short: {frames} STFT frames < frames_per_csm {frames_per_csm}")]
    TooFewFrames {
        frames: usize,
        frames_per_csm: usize,
    },
    #[error("channel count mismatch: expected {expected}, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("no upsampler band within {tol} Hz of {band_hz} Hz")]
    BandMismatch { band_hz: f64, tol: f64 },
    #[error("upsampler needs at least {needed} training pairs, got {got}")]
    TooFewPairs { needed: usize, got: usize },
    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Format(String),
}
