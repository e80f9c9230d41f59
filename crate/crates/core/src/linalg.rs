//! Dense complex Hermitian eigendecomposition via cyclic Jacobi rotations.
//!
//! Array covariance matrices are small (M <= 32), so a hand-rolled Jacobi
//! solver is plenty fast and, unlike iterative LAPACK-style solvers, fully
//! deterministic: same input bytes, same output bytes, on every platform.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

/// Eigendecomposition of a Hermitian matrix.
///
/// Eigenvalues are sorted descending. Ties keep their pre-sort order, and
/// every eigenvector's global phase is fixed by making its first
/// non-negligible component real-positive, so results are reproducible.
pub struct HermitianEigen {
    /// Eigenvalues, descending.
    pub values: DVector<f64>,
    /// Unit-norm eigenvectors as columns, matching `values` order.
    pub vectors: DMatrix<Complex64>,
}

impl HermitianEigen {
    /// Decompose `a`, which must be Hermitian (only its Hermitian part is read
    /// in exact arithmetic; small asymmetries are averaged away first).
    pub fn new(a: &DMatrix<Complex64>) -> Self {
        assert_eq!(a.nrows(), a.ncols(), "matrix must be square");
        let n = a.nrows();
        let mut m = hermitian_part(a);
        let mut v = DMatrix::<Complex64>::identity(n, n);

        let scale: f64 = m.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        let tol = if scale > 0.0 { scale * 1e-15 } else { 0.0 };

        for _sweep in 0..64 {
            let mut off = 0.0f64;
            for p in 0..n {
                for q in (p + 1)..n {
                    off += m[(p, q)].norm_sqr();
                }
            }
            if off.sqrt() <= tol {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    jacobi_rotate(&mut m, &mut v, p, q);
                }
            }
        }

        let mut order: Vec<usize> = (0..n).collect();
        let diag: Vec<f64> = (0..n).map(|i| m[(i, i)].re).collect();
        order.sort_by(|&i, &j| diag[j].partial_cmp(&diag[i]).unwrap().then(i.cmp(&j)));

        let values = DVector::from_iterator(n, order.iter().map(|&i| diag[i]));
        let mut vectors = DMatrix::<Complex64>::zeros(n, n);
        for (dst, &src) in order.iter().enumerate() {
            vectors.column_mut(dst).copy_from(&v.column(src));
        }
        fix_column_phases(&mut vectors);

        Self { values, vectors }
    }

    /// Columns spanning the noise subspace: eigenvectors of the
    /// `n - n_sources` smallest eigenvalues.
    pub fn noise_subspace(&self, n_sources: usize) -> DMatrix<Complex64> {
        let n = self.vectors.nrows();
        assert!(n_sources < n);
        self.vectors.columns(n_sources, n - n_sources).into_owned()
    }
}

/// One two-sided Jacobi rotation zeroing m[(p, q)].
fn jacobi_rotate(m: &mut DMatrix<Complex64>, v: &mut DMatrix<Complex64>, p: usize, q: usize) {
    let beta = m[(p, q)];
    let abs_b = beta.norm();
    if abs_b == 0.0 {
        return;
    }
    let phase = beta / abs_b;
    let alpha = m[(p, p)].re;
    let gamma = m[(q, q)].re;
    let tau = (gamma - alpha) / (2.0 * abs_b);
    let t = if tau >= 0.0 {
        1.0 / (tau + (1.0 + tau * tau).sqrt())
    } else {
        -1.0 / (-tau + (1.0 + tau * tau).sqrt())
    };
    let c = 1.0 / (1.0 + t * t).sqrt();
    let s = t * c;

    let n = m.nrows();
    // Column update: A <- A * U with U = [[c, s*phase], [-s*conj(phase), c]]
    for k in 0..n {
        let akp = m[(k, p)];
        let akq = m[(k, q)];
        m[(k, p)] = akp * c - akq * s * phase.conj();
        m[(k, q)] = akp * s * phase + akq * c;
    }
    // Row update: A <- U^H * A
    for k in 0..n {
        let apk = m[(p, k)];
        let aqk = m[(q, k)];
        m[(p, k)] = apk * c - aqk * s * phase;
        m[(q, k)] = apk * s * phase.conj() + aqk * c;
    }
    m[(p, q)] = Complex64::new(0.0, 0.0);
    m[(q, p)] = Complex64::new(0.0, 0.0);
    m[(p, p)] = Complex64::new(m[(p, p)].re, 0.0);
    m[(q, q)] = Complex64::new(m[(q, q)].re, 0.0);

    for k in 0..n {
        let vkp = v[(k, p)];
        let vkq = v[(k, q)];
        v[(k, p)] = vkp * c - vkq * s * phase.conj();
        v[(k, q)] = vkp * s * phase + vkq * c;
    }
}

fn fix_column_phases(vectors: &mut DMatrix<Complex64>) {
    let n = vectors.nrows();
    for j in 0..vectors.ncols() {
        let col_max = (0..n)
            .map(|i| vectors[(i, j)].norm())
            .fold(0.0f64, f64::max);
        if col_max == 0.0 {
            continue;
        }
        let lead = (0..n).find(|&i| vectors[(i, j)].norm() > 1e-12 * col_max);
        if let Some(i) = lead {
            let z = vectors[(i, j)];
            let rot = z.conj() / z.norm();
            for k in 0..n {
                vectors[(k, j)] *= rot;
            }
            let zi = vectors[(i, j)];
            vectors[(i, j)] = Complex64::new(zi.norm(), 0.0);
        }
    }
}

/// (A + A^H) / 2.
pub fn hermitian_part(a: &DMatrix<Complex64>) -> DMatrix<Complex64> {
    (a + a.adjoint()) * Complex64::new(0.5, 0.0)
}

/// Nearest PSD matrix in Frobenius norm: symmetrize, then clip negative
/// eigenvalues to zero.
pub fn psd_project(a: &DMatrix<Complex64>) -> DMatrix<Complex64> {
    let eig = HermitianEigen::new(a);
    let n = a.nrows();
    let mut out = DMatrix::<Complex64>::zeros(n, n);
    for (j, &lambda) in eig.values.iter().enumerate() {
        if lambda <= 0.0 {
            continue;
        }
        let v = eig.vectors.column(j);
        for r in 0..n {
            for c in 0..n {
                out[(r, c)] += v[r] * v[c].conj() * lambda;
            }
        }
    }
    out
}

/// Largest absolute deviation from Hermitian symmetry.
pub fn hermitian_residual(a: &DMatrix<Complex64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            worst = worst.max((a[(i, j)] - a[(j, i)].conj()).norm());
        }
    }
    worst / 2.0
}
