//! Self-supervised spherical acoustic mapping.
//!
//! The pipeline goes from multichannel audio to per-band cross-spectral
//! matrices (CSMs), through either classical imaging (delay-and-sum, MUSIC)
//! or a learned autoencoder whose latent space is a spherical acoustic map
//! (SAM), and finally to direction-of-arrival estimates scored with
//! localization error / recall.
//!
//! Module map:
//! - [`geometry`]: array geometries, spherical tessellations, steering matrices
//! - [`dsp`]: STFT, band selection, CSM estimation, CSM stores, channel upsampling
//! - [`simulator`]: free-field scene rendering with exact ground truth
//! - [`beamform`]: delay-and-sum and MUSIC baselines
//! - [`lam`]: the learnable back-projection autoencoder and its loss
//! - [`train`]: Adam, the self-supervised training loop, gradient checking
//! - [`doae`]: rasterization, K-means DoA extraction, LE/LR scoring

pub mod beamform;
pub mod doae;
pub mod dsp;
pub mod geometry;
pub mod lam;
pub mod linalg;
pub mod simulator;
pub mod train;

pub use num_complex::Complex64;

// Re-exported so downstream crates build against the same versions.
pub use nalgebra;
pub use ndarray;

/// Default speed of sound in air, m/s.
pub const SPEED_OF_SOUND: f64 = 343.0;

/// Derives a per-stream seed from a global seed, splitmix64-style, so
/// parallel jobs (bands, scenes) get decorrelated but reproducible RNGs.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
