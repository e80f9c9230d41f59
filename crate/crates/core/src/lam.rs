//! The learnable back-projection autoencoder.
//!
//! Per band, the encoder back-projects a CSM onto the tessellation through a
//! learnable matrix `B` (initialized to the physical steering matrix), a
//! four-step convolutional denoiser refines the resulting intensity field,
//! and a fixed steering-matrix decoder reconstructs the CSM from the
//! denoised field. Training minimizes reconstruction error plus sparsity and
//! total-variation penalties on the field; no labels are involved.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use thiserror::Error;

use crate::beamform::SphericalAcousticMap;
use crate::dsp::{CrossSpectralMatrix, CsmSequence};
use crate::geometry::SteeringMatrix;
use crate::linalg::hermitian_part;

/// Kernel lengths of the four denoising steps, in step order.
pub const KERNEL_LENS: [usize; 4] = [3, 5, 7, 9];

#[derive(Debug, Error)]
pub enum LamError {
    #[error("channel count mismatch: expected {expected}, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("node count mismatch: expected {expected}, got {got}")]
    NodeMismatch { expected: usize, got: usize },
    #[error("band count mismatch: expected {expected}, got {got}")]
    BandMismatch { expected: usize, got: usize },
    #[error("band frequency mismatch: {a} Hz vs {b} Hz")]
    BandFreqMismatch { a: f64, b: f64 },
    #[error(
        "input too far from Hermitian: back-projection at node {node} has \
         imaginary residue {residue:.3e} beyond {tol:.3e}"
    )]
    NonHermitian { node: usize, residue: f64, tol: f64 },
    #[error("latent intensity {value:.3e} at node {node} below -1e-9")]
    NegativeLatent { node: usize, value: f64 },
    #[error("gamma must be > 0, got {0}")]
    BadGamma(f64),
    #[error("kernel {step} has length {got}, expected {expected}")]
    BadKernelLen {
        step: usize,
        got: usize,
        expected: usize,
    },
    #[error("non-finite parameter or input")]
    NonFinite,
    #[error("neighbor index {index} out of range for {nodes} nodes")]
    BadNeighbor { index: usize, nodes: usize },
    #[error("parameter vector has length {got}, expected {expected}")]
    BadFlatLen { got: usize, expected: usize },
    #[error("{0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Learnable state for one frequency band.
#[derive(Debug, Clone)]
pub struct LamBandModel {
    b: DMatrix<Complex64>,
    kernels: [Vec<f64>; 4],
    biases: [f64; 4],
    band_hz: f64,
}

impl LamBandModel {
    /// Initializes for training: `B` copies the physical steering matrix so
    /// the untrained encoder is exactly delay-and-sum back-projection;
    /// kernels start as a unit impulse with uniform noise of +/-0.01 on every
    /// tap; biases start at zero.
    pub fn init(steering: &SteeringMatrix, rng: &mut impl rand::Rng) -> Self {
        let kernels = KERNEL_LENS.map(|len| {
            (0..len)
                .map(|tap| {
                    let center = (len - 1) / 2;
                    let impulse = if tap == center { 1.0 } else { 0.0 };
                    impulse + rng.gen_range(-0.01..0.01)
                })
                .collect()
        });
        Self {
            b: steering.entries().clone(),
            kernels,
            biases: [0.0; 4],
            band_hz: steering.band_hz(),
        }
    }

    pub fn from_parts(
        b: DMatrix<Complex64>,
        kernels: [Vec<f64>; 4],
        biases: [f64; 4],
        band_hz: f64,
    ) -> Result<Self, LamError> {
        for (step, (k, &len)) in kernels.iter().zip(KERNEL_LENS.iter()).enumerate() {
            if k.len() != len {
                return Err(LamError::BadKernelLen {
                    step: step + 1,
                    got: k.len(),
                    expected: len,
                });
            }
        }
        let finite = b.iter().all(|v| v.re.is_finite() && v.im.is_finite())
            && kernels.iter().flatten().all(|v| v.is_finite())
            && biases.iter().all(|v| v.is_finite())
            && band_hz.is_finite();
        if !finite {
            return Err(LamError::NonFinite);
        }
        Ok(Self {
            b,
            kernels,
            biases,
            band_hz,
        })
    }

    pub fn channels(&self) -> usize {
        self.b.nrows()
    }

    pub fn n_points(&self) -> usize {
        self.b.ncols()
    }

    pub fn band_hz(&self) -> f64 {
        self.band_hz
    }

    pub fn b(&self) -> &DMatrix<Complex64> {
        &self.b
    }

    pub fn kernels(&self) -> &[Vec<f64>; 4] {
        &self.kernels
    }

    pub fn biases(&self) -> &[f64; 4] {
        &self.biases
    }

    /// Real parameter count: 2 per complex entry of `B`, all kernel taps,
    /// one bias per step.
    pub fn parameter_count(&self) -> usize {
        2 * self.b.nrows() * self.b.ncols() + KERNEL_LENS.iter().sum::<usize>() + 4
    }

    /// Flattens parameters into one real vector: `B` column-major with
    /// re/im interleaved, then kernels in step order, then biases.
    /// [`BandGradient::flatten`] uses the same layout.
    pub fn flatten_params(&self) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for v in self.b.iter() {
            out.push(v.re);
            out.push(v.im);
        }
        for k in &self.kernels {
            out.extend_from_slice(k);
        }
        out.extend_from_slice(&self.biases);
        DVector::from_vec(out)
    }

    /// Inverse of [`Self::flatten_params`].
    pub fn assign_from_flat(&mut self, flat: &DVector<f64>) -> Result<(), LamError> {
        if flat.len() != self.parameter_count() {
            return Err(LamError::BadFlatLen {
                got: flat.len(),
                expected: self.parameter_count(),
            });
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(LamError::NonFinite);
        }
        let mut idx = 0;
        for v in self.b.iter_mut() {
            *v = Complex64::new(flat[idx], flat[idx + 1]);
            idx += 2;
        }
        for k in &mut self.kernels {
            for tap in k.iter_mut() {
                *tap = flat[idx];
                idx += 1;
            }
        }
        for bias in &mut self.biases {
            *bias = flat[idx];
            idx += 1;
        }
        Ok(())
    }
}

/// Per-band intensity fields through the denoiser: the raw back-projection
/// `x0` and the four post-activation stages.
#[derive(Debug, Clone)]
pub struct LatentTrace {
    pub x0: DVector<f64>,
    pub x1: DVector<f64>,
    pub x2: DVector<f64>,
    pub x3: DVector<f64>,
    pub x4: DVector<f64>,
}

impl LatentTrace {
    pub fn stages(&self) -> [&DVector<f64>; 5] {
        [&self.x0, &self.x1, &self.x2, &self.x3, &self.x4]
    }
}

/// Back-projection `x0_n = re(b_n^H C b_n)`.
///
/// For Hermitian `C` the quadratic form is real; the imaginary residue is
/// checked against `1e-9 * (|re| + 1)` and anything beyond that is treated
/// as a non-Hermitian input error. CSMs that went through single-precision
/// storage should be symmetrized first (see [`forward`]).
pub fn encode(c: &CrossSpectralMatrix, model: &LamBandModel) -> Result<DVector<f64>, LamError> {
    if c.channels() != model.channels() {
        return Err(LamError::ChannelMismatch {
            expected: model.channels(),
            got: c.channels(),
        });
    }
    let b = &model.b;
    let cb = c.entries() * b;
    let m = b.nrows();
    let n_points = b.ncols();
    let mut x0 = DVector::zeros(n_points);
    for n in 0..n_points {
        let mut q = Complex64::new(0.0, 0.0);
        for row in 0..m {
            q += b[(row, n)].conj() * cb[(row, n)];
        }
        let tol = 1e-9 * (q.re.abs() + 1.0);
        if q.im.abs() > tol {
            return Err(LamError::NonHermitian {
                node: n,
                residue: q.im.abs(),
                tol,
            });
        }
        x0[n] = q.re;
    }
    Ok(x0)
}

/// Same-length 1-D convolution (machine-learning convention, no kernel
/// flip) over the tessellation index order, zero-padded at the ends:
/// `out[i] = sum_j kernel[j] * x[i + j - (len-1)/2]`.
fn conv_same(kernel: &[f64], x: &DVector<f64>) -> DVector<f64> {
    let n = x.len();
    let center = (kernel.len() - 1) / 2;
    let mut out = DVector::zeros(n);
    for i in 0..n {
        let mut acc = 0.0;
        for (j, &k) in kernel.iter().enumerate() {
            let idx = i as isize + j as isize - center as isize;
            if idx >= 0 && (idx as usize) < n {
                acc += k * x[idx as usize];
            }
        }
        out[i] = acc;
    }
    out
}

/// Adjoint of [`conv_same`] as a linear operator in `x`.
fn conv_same_adjoint(kernel: &[f64], v: &DVector<f64>) -> DVector<f64> {
    let n = v.len();
    let center = (kernel.len() - 1) / 2;
    let mut out = DVector::zeros(n);
    for p in 0..n {
        let mut acc = 0.0;
        for (j, &k) in kernel.iter().enumerate() {
            let idx = p as isize - j as isize + center as isize;
            if idx >= 0 && (idx as usize) < n {
                acc += k * v[idx as usize];
            }
        }
        out[p] = acc;
    }
    out
}

/// Four refinement steps, each `x_t = relu(conv(k_t, x_{t-1}) + x0 + bias_t)`
/// with the raw back-projection fed back in as a residual at every step.
pub fn denoise(x0: &DVector<f64>, model: &LamBandModel) -> LatentTrace {
    let mut stages: Vec<DVector<f64>> = Vec::with_capacity(4);
    let mut prev = x0.clone();
    for (t, kernel) in model.kernels.iter().enumerate() {
        let mut z = conv_same(kernel, &prev);
        z += x0;
        z.add_scalar_mut(model.biases[t]);
        let x = z.map(|v| v.max(0.0));
        stages.push(x.clone());
        prev = x;
    }
    let mut it = stages.into_iter();
    LatentTrace {
        x0: x0.clone(),
        x1: it.next().unwrap(),
        x2: it.next().unwrap(),
        x3: it.next().unwrap(),
        x4: it.next().unwrap(),
    }
}

/// Reconstruction `C_hat = A diag(x4) A^H`, Hermitian by construction and
/// PSD for nonnegative `x4`. Entries below `-1e-9` are rejected; the tiny
/// negative slack is clamped to zero.
pub fn decode(
    x4: &DVector<f64>,
    steering: &SteeringMatrix,
) -> Result<CrossSpectralMatrix, LamError> {
    if x4.len() != steering.directions() {
        return Err(LamError::NodeMismatch {
            expected: steering.directions(),
            got: x4.len(),
        });
    }
    for (n, &v) in x4.iter().enumerate() {
        if !v.is_finite() {
            return Err(LamError::NonFinite);
        }
        if v < -1e-9 {
            return Err(LamError::NegativeLatent { node: n, value: v });
        }
    }
    let a = steering.entries();
    let mut scaled = a.clone();
    for (n, mut col) in scaled.column_iter_mut().enumerate() {
        col *= Complex64::new(x4[n].max(0.0), 0.0);
    }
    let chat = scaled * a.adjoint();
    CrossSpectralMatrix::new(chat, steering.band_hz(), 0, 0.0)
        .map_err(|e| LamError::Format(e.to_string()))
}

/// Self-supervised objective
/// `L = (1/M^2) ||C - C_hat||_F^2 + gamma * (||x4||_1 + TV(x4))` where the
/// total variation sums `|x4_i - x4_j|` over every listed (i, j) neighbor
/// pair as written (symmetric lists count each unordered pair twice).
pub fn loss(
    c: &CrossSpectralMatrix,
    c_hat: &CrossSpectralMatrix,
    x4: &DVector<f64>,
    gamma: f64,
    neighbor_lists: &[Vec<usize>],
) -> Result<f64, LamError> {
    if !(gamma > 0.0) {
        return Err(LamError::BadGamma(gamma));
    }
    if c.channels() != c_hat.channels() {
        return Err(LamError::ChannelMismatch {
            expected: c.channels(),
            got: c_hat.channels(),
        });
    }
    if neighbor_lists.len() != x4.len() {
        return Err(LamError::NodeMismatch {
            expected: x4.len(),
            got: neighbor_lists.len(),
        });
    }
    let m = c.channels();
    let mut mse = 0.0;
    for (a, b) in c.entries().iter().zip(c_hat.entries().iter()) {
        mse += (a - b).norm_sqr();
    }
    mse /= (m * m) as f64;
    let l1: f64 = x4.iter().map(|v| v.abs()).sum();
    let mut tv = 0.0;
    for (i, neighbors) in neighbor_lists.iter().enumerate() {
        for &j in neighbors {
            if j >= x4.len() {
                return Err(LamError::BadNeighbor {
                    index: j,
                    nodes: x4.len(),
                });
            }
            tv += (x4[i] - x4[j]).abs();
        }
    }
    Ok(mse + gamma * (l1 + tv))
}

/// Gradient of the loss for one band, laid out like the model parameters.
/// `d_b` packages `dL/d re(B)` as its real part and `dL/d im(B)` as its
/// imaginary part.
#[derive(Debug, Clone)]
pub struct BandGradient {
    pub d_b: DMatrix<Complex64>,
    pub d_kernels: [Vec<f64>; 4],
    pub d_biases: [f64; 4],
}

impl BandGradient {
    /// Same layout as [`LamBandModel::flatten_params`].
    pub fn flatten(&self) -> DVector<f64> {
        let mut out =
            Vec::with_capacity(2 * self.d_b.nrows() * self.d_b.ncols() + 24 + 4);
        for v in self.d_b.iter() {
            out.push(v.re);
            out.push(v.im);
        }
        for k in &self.d_kernels {
            out.extend_from_slice(k);
        }
        out.extend_from_slice(&self.d_biases);
        DVector::from_vec(out)
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Full forward pass for one band plus the loss.
pub fn band_loss(
    c: &CrossSpectralMatrix,
    model: &LamBandModel,
    steering: &SteeringMatrix,
    gamma: f64,
    neighbor_lists: &[Vec<usize>],
) -> Result<(f64, LatentTrace), LamError> {
    let x0 = encode(c, model)?;
    let trace = denoise(&x0, model);
    let c_hat = decode(&trace.x4, steering)?;
    let l = loss(c, &c_hat, &trace.x4, gamma, neighbor_lists)?;
    Ok((l, trace))
}

/// Forward pass plus reverse-mode gradient with respect to every band
/// parameter. ReLU and |.| use the subgradient that is zero at the kink.
pub fn band_loss_and_grad(
    c: &CrossSpectralMatrix,
    model: &LamBandModel,
    steering: &SteeringMatrix,
    gamma: f64,
    neighbor_lists: &[Vec<usize>],
) -> Result<(f64, LatentTrace, BandGradient), LamError> {
    let x0 = encode(c, model)?;
    let trace = denoise(&x0, model);
    let c_hat = decode(&trace.x4, steering)?;
    let l = loss(c, &c_hat, &trace.x4, gamma, neighbor_lists)?;
    let m = c.channels();
    let n_points = model.n_points();
    let a = steering.entries();

    // dMSE/dx4 through the decoder: re(a_n^H (C_hat - C) a_n) * 2/M^2.
    let diff = c_hat.entries() - c.entries();
    let da = &diff * a;
    let scale = 2.0 / (m * m) as f64;
    let mut g4 = DVector::zeros(n_points);
    for n in 0..n_points {
        let mut q = Complex64::new(0.0, 0.0);
        for row in 0..m {
            q += a[(row, n)].conj() * da[(row, n)];
        }
        g4[n] = scale * q.re;
    }
    // Sparsity and total variation subgradients.
    for n in 0..n_points {
        g4[n] += gamma * sign(trace.x4[n]);
    }
    for (i, neighbors) in neighbor_lists.iter().enumerate() {
        for &j in neighbors {
            let s = gamma * sign(trace.x4[i] - trace.x4[j]);
            g4[i] += s;
            g4[j] -= s;
        }
    }

    // Back through the four relu(conv + residual + bias) steps.
    let stages = trace.stages();
    let mut d_kernels = KERNEL_LENS.map(|len| vec![0.0; len]);
    let mut d_biases = [0.0; 4];
    let mut g0 = DVector::<f64>::zeros(n_points);
    let mut upstream = g4;
    for t in (0..4).rev() {
        let x_out = stages[t + 1];
        let x_in = stages[t];
        // Masked by the activation: x_out > 0 iff the pre-activation was > 0.
        let v = DVector::from_fn(n_points, |i, _| {
            if x_out[i] > 0.0 {
                upstream[i]
            } else {
                0.0
            }
        });
        d_biases[t] = v.sum();
        let kernel = &model.kernels[t];
        let center = (kernel.len() - 1) / 2;
        for j in 0..kernel.len() {
            let mut acc = 0.0;
            for i in 0..n_points {
                let idx = i as isize + j as isize - center as isize;
                if idx >= 0 && (idx as usize) < n_points {
                    acc += v[i] * x_in[idx as usize];
                }
            }
            d_kernels[t][j] = acc;
        }
        g0 += &v; // residual connection from x0 into every step
        upstream = conv_same_adjoint(kernel, &v);
        if t == 0 {
            g0 += &upstream; // conv input of step 1 is x0 itself
        }
    }

    // Through the encoder: x0_n = re(b_n^H C b_n) gives
    // dL/dB = 2 * H B diag(g0) with H the Hermitian part of C.
    let h = hermitian_part(c.entries());
    let mut d_b = h * &model.b;
    for (n, mut col) in d_b.column_iter_mut().enumerate() {
        col *= Complex64::new(2.0 * g0[n], 0.0);
    }

    Ok((
        l,
        trace,
        BandGradient {
            d_b,
            d_kernels,
            d_biases,
        },
    ))
}

/// A full multiband model: learnable band models plus the fixed steering
/// matrices used by the decoder, and the configuration text the model was
/// trained under (stored verbatim in checkpoints).
#[derive(Debug, Clone)]
pub struct LamModel {
    bands: Vec<LamBandModel>,
    steerings: Vec<SteeringMatrix>,
    config: String,
}

impl LamModel {
    pub fn new(
        bands: Vec<LamBandModel>,
        steerings: Vec<SteeringMatrix>,
        config: String,
    ) -> Result<Self, LamError> {
        if bands.len() != steerings.len() || bands.is_empty() {
            return Err(LamError::BandMismatch {
                expected: steerings.len().max(1),
                got: bands.len(),
            });
        }
        for (b, s) in bands.iter().zip(&steerings) {
            if (b.band_hz() - s.band_hz()).abs() > 1e-6 {
                return Err(LamError::BandFreqMismatch {
                    a: b.band_hz(),
                    b: s.band_hz(),
                });
            }
            if b.channels() != s.channels() {
                return Err(LamError::ChannelMismatch {
                    expected: s.channels(),
                    got: b.channels(),
                });
            }
            if b.n_points() != s.directions() {
                return Err(LamError::NodeMismatch {
                    expected: s.directions(),
                    got: b.n_points(),
                });
            }
        }
        Ok(Self {
            bands,
            steerings,
            config,
        })
    }

    /// Fresh model with one band per steering matrix; band seeds are derived
    /// from `seed` so the result does not depend on band evaluation order.
    pub fn init(
        steerings: Vec<SteeringMatrix>,
        config: String,
        seed: u64,
    ) -> Result<Self, LamError> {
        use rand::SeedableRng;
        let bands = steerings
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mut rng =
                    rand_chacha::ChaCha8Rng::seed_from_u64(crate::mix_seed(seed, i as u64));
                LamBandModel::init(s, &mut rng)
            })
            .collect();
        Self::new(bands, steerings, config)
    }

    pub fn n_bands(&self) -> usize {
        self.bands.len()
    }

    pub fn channels(&self) -> usize {
        self.bands[0].channels()
    }

    pub fn n_points(&self) -> usize {
        self.bands[0].n_points()
    }

    pub fn band_freqs(&self) -> Vec<f64> {
        self.bands.iter().map(|b| b.band_hz()).collect()
    }

    pub fn bands(&self) -> &[LamBandModel] {
        &self.bands
    }

    pub fn bands_mut(&mut self) -> &mut [LamBandModel] {
        &mut self.bands
    }

    pub fn steerings(&self) -> &[SteeringMatrix] {
        &self.steerings
    }

    pub fn config(&self) -> &str {
        &self.config
    }

    pub fn parameter_count(&self) -> usize {
        self.bands.iter().map(|b| b.parameter_count()).sum()
    }
}

fn check_sequence(seq: &CsmSequence, model: &LamModel) -> Result<(), LamError> {
    if seq.n_bands() != model.n_bands() {
        return Err(LamError::BandMismatch {
            expected: model.n_bands(),
            got: seq.n_bands(),
        });
    }
    if seq.channels() != model.channels() {
        return Err(LamError::ChannelMismatch {
            expected: model.channels(),
            got: seq.channels(),
        });
    }
    for (f, b) in seq.band_freqs().iter().zip(model.bands()) {
        if (f - b.band_hz()).abs() > 1e-6 {
            return Err(LamError::BandFreqMismatch {
                a: *f,
                b: b.band_hz(),
            });
        }
    }
    Ok(())
}

/// Runs encode/denoise over every window and band, returning the denoised
/// field `x4` as a map per (window, band). Bands and windows are processed
/// in parallel with output order identical to sequential evaluation. CSMs
/// are symmetrized on entry, so stores round-tripped through f32 are fine.
pub fn forward(
    seq: &CsmSequence,
    model: &LamModel,
) -> Result<Vec<Vec<SphericalAcousticMap>>, LamError> {
    let traced = forward_traced(seq, model)?;
    Ok(traced
        .into_iter()
        .map(|per_band| per_band.into_iter().map(|(map, _)| map).collect())
        .collect())
}

/// Like [`forward`] but keeps every intermediate stage.
pub fn forward_traced(
    seq: &CsmSequence,
    model: &LamModel,
) -> Result<Vec<Vec<(SphericalAcousticMap, LatentTrace)>>, LamError> {
    check_sequence(seq, model)?;
    let jobs: Vec<(usize, usize)> = (0..seq.n_windows())
        .flat_map(|w| (0..seq.n_bands()).map(move |b| (w, b)))
        .collect();
    let results: Result<Vec<_>, LamError> = jobs
        .par_iter()
        .map(|&(w, band)| {
            let raw = seq.get(w, band);
            let sym = CrossSpectralMatrix::new(
                hermitian_part(raw.entries()),
                raw.band_hz(),
                raw.n_frames_averaged(),
                raw.timestamp(),
            )
            .map_err(|e| LamError::Format(e.to_string()))?;
            let x0 = encode(&sym, &model.bands()[band])?;
            let trace = denoise(&x0, &model.bands()[band]);
            let map = SphericalAcousticMap::new(
                trace.x4.iter().copied().collect(),
                model.bands()[band].band_hz(),
            );
            Ok((map, trace))
        })
        .collect();
    let mut flat = results?.into_iter();
    let mut out = Vec::with_capacity(seq.n_windows());
    for _ in 0..seq.n_windows() {
        let mut per_band = Vec::with_capacity(seq.n_bands());
        for _ in 0..seq.n_bands() {
            per_band.push(flat.next().unwrap());
        }
        out.push(per_band);
    }
    Ok(out)
}

const MAGIC: &[u8; 4] = b"LAMM";
const VERSION: u16 = 1;

/// Writes a checkpoint: magic, version u16, M u16, N u16, F u16, band
/// frequencies F x f64, then per band `B` (column-major, re/im interleaved,
/// 2*M*N f64), 24 kernel taps, 4 biases, and finally the config text as a
/// u32 length-prefixed UTF-8 blob. Little-endian throughout.
pub fn write_checkpoint(path: &Path, model: &LamModel) -> Result<(), LamError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(model.channels() as u16).to_le_bytes())?;
    w.write_all(&(model.n_points() as u16).to_le_bytes())?;
    w.write_all(&(model.n_bands() as u16).to_le_bytes())?;
    for b in model.bands() {
        w.write_all(&b.band_hz().to_le_bytes())?;
    }
    for band in model.bands() {
        for v in band.b.iter() {
            w.write_all(&v.re.to_le_bytes())?;
            w.write_all(&v.im.to_le_bytes())?;
        }
        for k in &band.kernels {
            for &tap in k {
                w.write_all(&tap.to_le_bytes())?;
            }
        }
        for &bias in &band.biases {
            w.write_all(&bias.to_le_bytes())?;
        }
    }
    let blob = model.config.as_bytes();
    w.write_all(&(blob.len() as u32).to_le_bytes())?;
    w.write_all(blob)?;
    w.flush()?;
    Ok(())
}

/// Everything a checkpoint stores. Steering matrices are not persisted;
/// callers rebuild them from the embedded config and pair them with the
/// band models via [`LamModel::new`].
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub channels: usize,
    pub n_points: usize,
    pub band_freqs: Vec<f64>,
    pub bands: Vec<LamBandModel>,
    pub config: String,
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, LamError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| LamError::Format("file too short for header".into()))?;
    if &magic != MAGIC {
        return Err(LamError::Format(format!(
            "bad magic {:?}, expected {:?}",
            magic, MAGIC
        )));
    }
    let version = read_u16(&mut r)?;
    if version != VERSION {
        return Err(LamError::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let m = read_u16(&mut r)? as usize;
    let n = read_u16(&mut r)? as usize;
    let f = read_u16(&mut r)? as usize;
    if m == 0 || n == 0 || f == 0 {
        return Err(LamError::Format("empty checkpoint dimensions".into()));
    }
    let mut band_freqs = Vec::with_capacity(f);
    for _ in 0..f {
        band_freqs.push(read_f64(&mut r)?);
    }
    let mut bands = Vec::with_capacity(f);
    for &band_hz in &band_freqs {
        let mut b = DMatrix::<Complex64>::zeros(m, n);
        for v in b.iter_mut() {
            let re = read_f64(&mut r)?;
            let im = read_f64(&mut r)?;
            *v = Complex64::new(re, im);
        }
        let mut kernels = KERNEL_LENS.map(|len| vec![0.0; len]);
        for k in &mut kernels {
            for tap in k.iter_mut() {
                *tap = read_f64(&mut r)?;
            }
        }
        let mut biases = [0.0; 4];
        for bias in &mut biases {
            *bias = read_f64(&mut r)?;
        }
        bands.push(LamBandModel::from_parts(b, kernels, biases, band_hz)?);
    }
    let blob_len = {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)
            .map_err(|_| LamError::Format("truncated checkpoint".into()))?;
        u32::from_le_bytes(b) as usize
    };
    let mut blob = vec![0u8; blob_len];
    r.read_exact(&mut blob)
        .map_err(|_| LamError::Format("truncated config blob".into()))?;
    let config = String::from_utf8(blob)
        .map_err(|e| LamError::Format(format!("config blob not UTF-8: {e}")))?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(LamError::Format("trailing bytes after config blob".into()));
    }
    Ok(Checkpoint {
        channels: m,
        n_points: n,
        band_freqs,
        bands,
        config,
    })
}

fn read_u16(r: &mut impl Read) -> Result<u16, LamError> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)
        .map_err(|_| LamError::Format("truncated checkpoint".into()))?;
    Ok(u16::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64, LamError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|_| LamError::Format("truncated checkpoint".into()))?;
    Ok(f64::from_le_bytes(b))
}
