//! Equirectangular grayscale image export for spherical maps.

use std::path::Path;

use lam_core::ndarray::Array2;
use lam_core::train::write_atomic;

/// Writes `grid` (azimuth x elevation cells, azimuth ascending from -180,
/// elevation ascending from -90) as a binary grayscale PPM. Image row 0 is
/// +90 elevation, the last row is -90; columns run -180 to +180 left to
/// right. Values are min-max normalized to 0..=255 so brightness grows
/// monotonically with intensity; a constant grid comes out black.
pub fn write_gray_ppm(path: &Path, grid: &Array2<f64>) -> std::io::Result<()> {
    let (az_bins, el_bins) = grid.dim();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in grid.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = hi - lo;
    let mut bytes = Vec::with_capacity(3 * az_bins * el_bins + 32);
    bytes.extend_from_slice(format!("P6\n{az_bins} {el_bins}\n255\n").as_bytes());
    for row in 0..el_bins {
        let e = el_bins - 1 - row;
        for a in 0..az_bins {
            let v = if span > 0.0 {
                (grid[(a, e)] - lo) / span
            } else {
                0.0
            };
            let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            bytes.extend_from_slice(&[g, g, g]);
        }
    }
    write_atomic(path, &bytes)
}
