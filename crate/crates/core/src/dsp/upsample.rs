//! Learned channel upsampling: a per-band linear map from vectorized
//! low-channel CSMs to vectorized high-channel CSMs, fit by ridge-regularized
//! least squares over paired recordings of the same scenes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use super::{CrossSpectralMatrix, CsmSequence, DspError};
use crate::linalg;

/// Per-band weight matrices `W_f` of shape `(m_hi^2, m_lo^2)` acting on
/// column-major vectorized CSM entries.
#[derive(Debug, Clone)]
pub struct LearnedUpsampler {
    weights: Vec<DMatrix<Complex64>>,
    band_freqs: Vec<f64>,
    m_lo: usize,
    m_hi: usize,
}

impl LearnedUpsampler {
    pub fn m_lo(&self) -> usize {
        self.m_lo
    }

    pub fn m_hi(&self) -> usize {
        self.m_hi
    }

    pub fn band_freqs(&self) -> &[f64] {
        &self.band_freqs
    }

    pub fn weights(&self) -> &[DMatrix<Complex64>] {
        &self.weights
    }
}

fn vec_csm(entries: &DMatrix<Complex64>) -> DVector<Complex64> {
    DVector::from_column_slice(entries.as_slice())
}

/// Fits one weight matrix per band over all windows of all `(low, high)`
/// sequence pairs: `W = Y X^H (X X^H + l I)^{-1}` with `l` scaled by
/// `ridge` times the mean diagonal of `X X^H`. Needs at least `m_lo^2`
/// training windows per band.
pub fn train_upsampler(
    pairs: &[(&CsmSequence, &CsmSequence)],
    ridge: f64,
) -> Result<LearnedUpsampler, DspError> {
    let (first_lo, first_hi) = pairs
        .first()
        .ok_or(DspError::TooFewPairs { needed: 1, got: 0 })?;
    let m_lo = first_lo.channels();
    let m_hi = first_hi.channels();
    if m_lo >= m_hi {
        return Err(DspError::Format(format!(
            "low channel count {m_lo} must be below high channel count {m_hi}"
        )));
    }
    let band_freqs = first_lo.band_freqs().to_vec();
    let mut total_windows = 0usize;
    for (lo, hi) in pairs {
        if lo.channels() != m_lo {
            return Err(DspError::ChannelMismatch {
                expected: m_lo,
                got: lo.channels(),
            });
        }
        if hi.channels() != m_hi {
            return Err(DspError::ChannelMismatch {
                expected: m_hi,
                got: hi.channels(),
            });
        }
        if lo.n_windows() != hi.n_windows() {
            return Err(DspError::Format(format!(
                "paired sequences disagree on window count: {} vs {}",
                lo.n_windows(),
                hi.n_windows()
            )));
        }
        for (a, b) in lo.band_freqs().iter().zip(hi.band_freqs()) {
            if (a - b).abs() > 1e-6 {
                return Err(DspError::Format(format!(
                    "paired sequences disagree on bands: {a} Hz vs {b} Hz"
                )));
            }
        }
        if lo.band_freqs() != band_freqs.as_slice() {
            return Err(DspError::Format("pairs disagree on band layout".into()));
        }
        total_windows += lo.n_windows();
    }
    let d_lo = m_lo * m_lo;
    if total_windows < d_lo {
        return Err(DspError::TooFewPairs {
            needed: d_lo,
            got: total_windows,
        });
    }

    let d_hi = m_hi * m_hi;
    let mut weights = Vec::with_capacity(band_freqs.len());
    for band in 0..band_freqs.len() {
        let mut x_cols = Vec::with_capacity(total_windows);
        let mut y_cols = Vec::with_capacity(total_windows);
        for (lo, hi) in pairs {
            for w in 0..lo.n_windows() {
                x_cols.push(vec_csm(lo.get(w, band).entries()));
                y_cols.push(vec_csm(hi.get(w, band).entries()));
            }
        }
        let x = DMatrix::from_columns(&x_cols);
        let y = DMatrix::from_columns(&y_cols);
        let gram = &x * x.adjoint();
        let lambda = ridge * gram.trace().re.max(0.0) / d_lo as f64 + 1e-300;
        let reg = &gram + DMatrix::<Complex64>::identity(d_lo, d_lo) * Complex64::new(lambda, 0.0);
        let chol = nalgebra::Cholesky::new(reg).ok_or_else(|| {
            DspError::Format(
                "normal equations not positive definite; raise the ridge".into(),
            )
        })?;
        // Solve (X X^H + l I) W^H = X Y^H, then W = (W^H)^H.
        let rhs = &x * y.adjoint();
        let w_h = chol.solve(&rhs);
        debug_assert_eq!(w_h.nrows(), d_lo);
        debug_assert_eq!(w_h.ncols(), d_hi);
        weights.push(w_h.adjoint());
    }
    Ok(LearnedUpsampler {
        weights,
        band_freqs,
        m_lo,
        m_hi,
    })
}

/// Applies the learned map to one CSM, then restores Hermitian symmetry and
/// positive semidefiniteness by projection.
pub fn upsample_csm(
    ups: &LearnedUpsampler,
    low: &CrossSpectralMatrix,
) -> Result<CrossSpectralMatrix, DspError> {
    if low.channels() != ups.m_lo {
        return Err(DspError::ChannelMismatch {
            expected: ups.m_lo,
            got: low.channels(),
        });
    }
    let tol = 1e-3;
    let band = ups
        .band_freqs
        .iter()
        .position(|f| (f - low.band_hz()).abs() <= tol)
        .ok_or(DspError::BandMismatch {
            band_hz: low.band_hz(),
            tol,
        })?;
    let yv = &ups.weights[band] * vec_csm(low.entries());
    let raw = DMatrix::from_column_slice(ups.m_hi, ups.m_hi, yv.as_slice());
    let projected = linalg::psd_project(&linalg::hermitian_part(&raw));
    CrossSpectralMatrix::new(
        projected,
        low.band_hz(),
        low.n_frames_averaged(),
        low.timestamp(),
    )
}

/// Upsamples every window and band of a sequence.
pub fn upsample_sequence(
    ups: &LearnedUpsampler,
    seq: &CsmSequence,
) -> Result<CsmSequence, DspError> {
    let mut out = Vec::with_capacity(seq.n_windows());
    for w in 0..seq.n_windows() {
        let mut per_band = Vec::with_capacity(seq.n_bands());
        for b in 0..seq.n_bands() {
            per_band.push(upsample_csm(ups, seq.get(w, b))?);
        }
        out.push(per_band);
    }
    CsmSequence::new(
        out,
        seq.band_freqs().to_vec(),
        ups.m_hi,
        seq.sample_rate(),
    )
}

const MAGIC: &[u8; 4] = b"LAMU";
const VERSION: u16 = 1;

/// Weights on disk: magic, version u16, m_lo u16, m_hi u16, F u16,
/// band frequencies F x f64, then per band the weight matrix row-major as
/// f64 re/im pairs. Little-endian throughout.
pub fn write_upsampler(path: &Path, ups: &LearnedUpsampler) -> Result<(), DspError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(ups.m_lo as u16).to_le_bytes())?;
    w.write_all(&(ups.m_hi as u16).to_le_bytes())?;
    w.write_all(&(ups.band_freqs.len() as u16).to_le_bytes())?;
    for &f in &ups.band_freqs {
        w.write_all(&f.to_le_bytes())?;
    }
    for mat in &ups.weights {
        for r in 0..mat.nrows() {
            for c in 0..mat.ncols() {
                w.write_all(&mat[(r, c)].re.to_le_bytes())?;
                w.write_all(&mat[(r, c)].im.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_upsampler(path: &Path) -> Result<LearnedUpsampler, DspError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| DspError::Format("file too short for header".into()))?;
    if &magic != MAGIC {
        return Err(DspError::Format(format!(
            "bad magic {:?}, expected {:?}",
            magic, MAGIC
        )));
    }
    let version = read_u16(&mut r)?;
    if version != VERSION {
        return Err(DspError::Format(format!(
            "unsupported upsampler version {version}"
        )));
    }
    let m_lo = read_u16(&mut r)? as usize;
    let m_hi = read_u16(&mut r)? as usize;
    let n_bands = read_u16(&mut r)? as usize;
    if m_lo == 0 || m_hi <= m_lo || n_bands == 0 {
        return Err(DspError::Format("implausible upsampler header".into()));
    }
    let mut band_freqs = Vec::with_capacity(n_bands);
    for _ in 0..n_bands {
        band_freqs.push(read_f64(&mut r)?);
    }
    let (d_lo, d_hi) = (m_lo * m_lo, m_hi * m_hi);
    let mut weights = Vec::with_capacity(n_bands);
    for _ in 0..n_bands {
        let mut mat = DMatrix::<Complex64>::zeros(d_hi, d_lo);
        for row in 0..d_hi {
            for col in 0..d_lo {
                let re = read_f64(&mut r)?;
                let im = read_f64(&mut r)?;
                mat[(row, col)] = Complex64::new(re, im);
            }
        }
        weights.push(mat);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(DspError::Format("trailing bytes after weights".into()));
    }
    Ok(LearnedUpsampler {
        weights,
        band_freqs,
        m_lo,
        m_hi,
    })
}

fn read_u16(r: &mut impl Read) -> Result<u16, DspError> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)
        .map_err(|_| DspError::Format("truncated upsampler file".into()))?;
    Ok(u16::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64, DspError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|_| DspError::Format("truncated upsampler file".into()))?;
    Ok(f64::from_le_bytes(b))
}
