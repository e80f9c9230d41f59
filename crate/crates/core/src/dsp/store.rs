//! Binary CSM store.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic  b"LAMC"
//! u16    format version (currently 1)
//! u16    M   channels
//! u16    F   bands
//! u32    W   windows
//! f64    sample rate of the source audio, Hz
//! f64*F  band center frequencies, Hz
//! then W*F records, window-major (band fastest):
//!   f64        timestamp, seconds
//!   (f32,f32)  M*M entries, row-major, re then im
//! ```
//!
//! Entries are stored at single precision; a round trip is lossy below
//! roughly 1e-7 relative. Frame-averaging counts are not stored and read
//! back as zero.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use num_complex::Complex64;

use super::{CrossSpectralMatrix, CsmSequence, DspError};

const MAGIC: &[u8; 4] = b"LAMC";
const VERSION: u16 = 1;

pub fn write_csm_store(path: &Path, seq: &CsmSequence) -> Result<(), DspError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(seq.channels() as u16).to_le_bytes())?;
    w.write_all(&(seq.n_bands() as u16).to_le_bytes())?;
    w.write_all(&(seq.n_windows() as u32).to_le_bytes())?;
    w.write_all(&seq.sample_rate().to_le_bytes())?;
    for &f in seq.band_freqs() {
        w.write_all(&f.to_le_bytes())?;
    }
    let m = seq.channels();
    for window in seq.windows() {
        for c in window {
            w.write_all(&c.timestamp().to_le_bytes())?;
            for r in 0..m {
                for col in 0..m {
                    let v = c.entries()[(r, col)];
                    w.write_all(&(v.re as f32).to_le_bytes())?;
                    w.write_all(&(v.im as f32).to_le_bytes())?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_csm_store(path: &Path) -> Result<CsmSequence, DspError> {
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
            "unsupported store version {version}, expected {VERSION}"
        )));
    }
    let m = read_u16(&mut r)? as usize;
    let n_bands = read_u16(&mut r)? as usize;
    let n_windows = read_u32(&mut r)? as usize;
    let sample_rate = read_f64(&mut r)?;
    if m == 0 || n_bands == 0 {
        return Err(DspError::Format(
            "store declares zero channels or bands".into(),
        ));
    }
    let mut band_freqs = Vec::with_capacity(n_bands);
    for _ in 0..n_bands {
        band_freqs.push(read_f64(&mut r)?);
    }
    let mut csms = Vec::with_capacity(n_windows);
    for _ in 0..n_windows {
        let mut per_band = Vec::with_capacity(n_bands);
        for &band_hz in &band_freqs {
            let timestamp = read_f64(&mut r)?;
            let mut entries = DMatrix::<Complex64>::zeros(m, m);
            for row in 0..m {
                for col in 0..m {
                    let re = read_f32(&mut r)? as f64;
                    let im = read_f32(&mut r)? as f64;
                    entries[(row, col)] = Complex64::new(re, im);
                }
            }
            per_band.push(CrossSpectralMatrix::new(entries, band_hz, 0, timestamp)?);
        }
        csms.push(per_band);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(DspError::Format("trailing bytes after last record".into()));
    }
    CsmSequence::new(csms, band_freqs, m, sample_rate)
}

fn read_u16(r: &mut impl Read) -> Result<u16, DspError> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)
        .map_err(|_| DspError::Format("truncated store".into()))?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32, DspError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| DspError::Format("truncated store".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32(r: &mut impl Read) -> Result<f32, DspError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| DspError::Format("truncated store".into()))?;
    Ok(f32::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64, DspError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|_| DspError::Format("truncated store".into()))?;
    Ok(f64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample_sequence(m: usize, bands: usize, windows: usize, seed: u64) -> CsmSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let band_freqs: Vec<f64> = (0..bands).map(|i| 1000.0 + 250.0 * i as f64).collect();
        let mut csms = Vec::new();
        for w in 0..windows {
            let mut per_band = Vec::new();
            for &f in &band_freqs {
                // Random Hermitian PSD entries via G G^H.
                let g = DMatrix::from_fn(m, m, |_, _| {
                    Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
                });
                let c = &g * g.adjoint();
                per_band
                    .push(CrossSpectralMatrix::new(c, f, 10, 0.1 * w as f64 + 0.05).unwrap());
            }
            csms.push(per_band);
        }
        CsmSequence::new(csms, band_freqs, m, 16_000.0).unwrap()
    }

    #[test]
    fn round_trip_preserves_everything_to_single_precision() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seq.lamc");
        let seq = sample_sequence(4, 3, 5, 42);
        write_csm_store(&path, &seq).unwrap();
        let back = read_csm_store(&path).unwrap();
        assert_eq!(back.channels(), 4);
        assert_eq!(back.n_bands(), 3);
        assert_eq!(back.n_windows(), 5);
        assert!((back.sample_rate() - 16_000.0).abs() < 1e-12);
        for (bf, of) in back.band_freqs().iter().zip(seq.band_freqs()) {
            assert_eq!(bf, of);
        }
        for w in 0..5 {
            for b in 0..3 {
                let orig = seq.get(w, b);
                let got = back.get(w, b);
                assert_eq!(got.timestamp(), orig.timestamp());
                let scale = orig.entries().norm();
                let diff = (got.entries() - orig.entries()).norm();
                assert!(diff <= 1e-6 * scale, "window {w} band {b}: {diff}");
            }
        }
    }

    #[test]
    fn written_bytes_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.lamc");
        let p2 = dir.path().join("b.lamc");
        write_csm_store(&p1, &sample_sequence(3, 2, 4, 9)).unwrap();
        write_csm_store(&p2, &sample_sequence(3, 2, 4, 9)).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn expected_file_size() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sized.lamc");
        let (m, f, w) = (4usize, 3usize, 5usize);
        write_csm_store(&path, &sample_sequence(m, f, w, 1)).unwrap();
        let header = 4 + 2 + 2 + 2 + 4 + 8 + 8 * f;
        let record = 8 + 8 * m * m;
        assert_eq!(
            std::fs::metadata(&path).unwrap().len() as usize,
            header + w * f * record
        );
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seq.lamc");
        write_csm_store(&path, &sample_sequence(3, 2, 2, 3)).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(read_csm_store(&path), Err(DspError::Format(_))));

        let mut bad = good.clone();
        bad[4] = 99;
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(read_csm_store(&path), Err(DspError::Format(_))));

        std::fs::write(&path, &good[..good.len() - 5]).unwrap();
        assert!(matches!(read_csm_store(&path), Err(DspError::Format(_))));

        let mut bad = good.clone();
        bad.push(0);
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(read_csm_store(&path), Err(DspError::Format(_))));
    }
}
