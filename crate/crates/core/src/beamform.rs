//! Classical acoustic imaging on a spherical grid: delay-and-sum power maps
//! and the MUSIC pseudo-spectrum.

use nalgebra::DMatrix;
use num_complex::Complex64;
use thiserror::Error;

use crate::dsp::CrossSpectralMatrix;
use crate::geometry::SteeringMatrix;
use crate::linalg::HermitianEigen;

/// Regularizer added to the MUSIC denominator so steering vectors that fall
/// exactly in the signal subspace stay finite.
pub const MUSIC_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum BeamformError {
    #[error("channel count mismatch: CSM has {csm}, steering has {steering}")]
    ChannelMismatch { csm: usize, steering: usize },
    #[error("band mismatch: CSM at {csm_hz} Hz, steering at {steering_hz} Hz")]
    BandMismatch { csm_hz: f64, steering_hz: f64 },
    #[error("n_sources must be in 1..channels, got {n_sources} with {channels} channels")]
    BadSourceCount { n_sources: usize, channels: usize },
}

/// Nonnegative acoustic intensity per tessellation node, for one band.
/// Index `n` refers to node `n` of the tessellation the steering matrix was
/// built from.
#[derive(Debug, Clone)]
pub struct SphericalAcousticMap {
    intensities: Vec<f64>,
    band_hz: f64,
}

impl SphericalAcousticMap {
    pub fn new(intensities: Vec<f64>, band_hz: f64) -> Self {
        assert!(
            intensities.iter().all(|v| v.is_finite() && *v >= 0.0),
            "intensities must be finite and nonnegative"
        );
        Self {
            intensities,
            band_hz,
        }
    }

    pub fn n_points(&self) -> usize {
        self.intensities.len()
    }

    pub fn intensities(&self) -> &[f64] {
        &self.intensities
    }

    pub fn band_hz(&self) -> f64 {
        self.band_hz
    }

    /// Index and value of the strongest node (first index on ties).
    pub fn argmax(&self) -> (usize, f64) {
        let mut best = (0usize, f64::NEG_INFINITY);
        for (i, &v) in self.intensities.iter().enumerate() {
            if v > best.1 {
                best = (i, v);
            }
        }
        best
    }
}

fn check_compat(
    csm: &CrossSpectralMatrix,
    steering: &SteeringMatrix,
) -> Result<(), BeamformError> {
    if csm.channels() != steering.channels() {
        return Err(BeamformError::ChannelMismatch {
            csm: csm.channels(),
            steering: steering.channels(),
        });
    }
    let tol = (1e-6 * csm.band_hz().abs()).max(1e-3);
    if (csm.band_hz() - steering.band_hz()).abs() > tol {
        return Err(BeamformError::BandMismatch {
            csm_hz: csm.band_hz(),
            steering_hz: steering.band_hz(),
        });
    }
    Ok(())
}

/// Delay-and-sum power map: `I_n = re(a_n^H C a_n)`, clamped at zero.
/// The clamp only absorbs rounding noise from single-precision CSM storage;
/// for PSD input the quadratic form is nonnegative already.
pub fn das_map(
    csm: &CrossSpectralMatrix,
    steering: &SteeringMatrix,
) -> Result<SphericalAcousticMap, BeamformError> {
    check_compat(csm, steering)?;
    let a = steering.entries();
    let ca = csm.entries() * a;
    let n_points = a.ncols();
    let mut intensities = Vec::with_capacity(n_points);
    for n in 0..n_points {
        let mut acc = Complex64::new(0.0, 0.0);
        for m in 0..a.nrows() {
            acc += a[(m, n)].conj() * ca[(m, n)];
        }
        intensities.push(acc.re.max(0.0));
    }
    Ok(SphericalAcousticMap::new(intensities, csm.band_hz()))
}

/// MUSIC pseudo-spectrum: `I_n = 1 / (||E^H a_n||^2 + eps)` where `E` spans
/// the noise subspace, the trailing `M - n_sources` eigenvectors of the CSM.
pub fn music_spectrum(
    csm: &CrossSpectralMatrix,
    steering: &SteeringMatrix,
    n_sources: usize,
) -> Result<SphericalAcousticMap, BeamformError> {
    check_compat(csm, steering)?;
    let channels = csm.channels();
    if n_sources == 0 || n_sources >= channels {
        return Err(BeamformError::BadSourceCount {
            n_sources,
            channels,
        });
    }
    let eig = HermitianEigen::new(csm.entries());
    let noise = eig.noise_subspace(n_sources);
    let projected: DMatrix<Complex64> = noise.adjoint() * steering.entries();
    let intensities = (0..projected.ncols())
        .map(|n| {
            let denom: f64 = projected.column(n).iter().map(|v| v.norm_sqr()).sum();
            1.0 / (denom + MUSIC_EPS)
        })
        .collect();
    Ok(SphericalAcousticMap::new(intensities, csm.band_hz()))
}
