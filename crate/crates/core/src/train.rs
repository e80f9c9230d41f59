//! Self-supervised optimization of the acoustic mapping model.
//!
//! Each frequency band is an independent optimization problem: a batch is a
//! set of CSM windows of one band and the loss is averaged over the batch.
//! Band jobs run in parallel with seeds derived from the config seed, so the
//! trained parameters do not depend on band evaluation order. Within a band
//! the update sequence is strictly sequential and deterministic.
//!
//! The gradient is the hand-written reverse-mode pass from the `lam` module;
//! the finite-difference harness here is the correctness authority for it.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::dsp::{CrossSpectralMatrix, CsmSequence};
use crate::geometry::{SteeringMatrix, Tessellation};
use crate::lam::{band_loss, band_loss_and_grad, LamBandModel, LamError, LamModel};
use crate::linalg::hermitian_part;
use crate::mix_seed;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("bad training config: {0}")]
    BadConfig(String),
    #[error("{split} dataset is empty")]
    EmptyDataset { split: &'static str },
    #[error("tessellation has {got} nodes, model expects {expected}")]
    NodeMismatch { expected: usize, got: usize },
    #[error("non-finite gradient in band {band}, epoch {epoch}, batch {batch}")]
    NaNGradient {
        band: usize,
        epoch: usize,
        batch: usize,
    },
    #[error("non-finite loss in band {band}, epoch {epoch}, batch {batch}")]
    NonFiniteLoss {
        band: usize,
        epoch: usize,
        batch: usize,
    },
    #[error(
        "training diverged in band {band}, epoch {epoch}: loss {loss:.3e} \
         exceeds 1e3 x initial {initial:.3e}"
    )]
    Diverged {
        band: usize,
        epoch: usize,
        loss: f64,
        initial: f64,
    },
    #[error(transparent)]
    Lam(#[from] LamError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

/// Hyperparameters for one training run. Defaults follow the reference
/// protocol for 32-channel data; 4-channel upsampled runs use batch size 8.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub gamma: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-6,
            gamma: 1e-4,
            batch_size: 32,
            max_epochs: 500,
            patience: 20,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(TrainError::BadConfig(format!(
                "learning_rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(TrainError::BadConfig(format!(
                "gamma must be positive and finite, got {}",
                self.gamma
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch_size must be >= 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(TrainError::BadConfig("max_epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// First and second moment accumulators for Adam. `t` counts completed steps
/// and drives the bias correction.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: DVector<f64>,
    v: DVector<f64>,
    t: u64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: DVector::zeros(n),
            v: DVector::zeros(n),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.len() == 0
    }
}

/// One Adam update in place. Returns the index of the first non-finite
/// gradient entry instead of contaminating the state.
pub fn adam_step(
    params: &mut DVector<f64>,
    grads: &DVector<f64>,
    state: &mut AdamState,
    lr: f64,
) -> Result<(), usize> {
    assert_eq!(params.len(), grads.len(), "param/grad length mismatch");
    assert_eq!(params.len(), state.m.len(), "param/state length mismatch");
    if let Some(bad) = grads.iter().position(|g| !g.is_finite()) {
        return Err(bad);
    }
    state.t += 1;
    let b1 = state.beta1;
    let b2 = state.beta2;
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + state.epsilon);
    }
    Ok(())
}

/// One row of the loss curve. Epoch 0 is the evaluation of the untouched
/// model; later epochs report the mean batch loss seen during updates and
/// the validation loss afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct BandReport {
    pub band_hz: f64,
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub bands: Vec<BandReport>,
    pub wall_seconds: f64,
}

impl TrainReport {
    /// CSV with one row per (epoch, band). Wall time is deliberately left
    /// out so reruns with the same seed produce identical bytes.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,band,train_loss,val_loss\n");
        let max_epochs = self
            .bands
            .iter()
            .map(|b| b.records.len())
            .max()
            .unwrap_or(0);
        for e in 0..max_epochs {
            for (band, report) in self.bands.iter().enumerate() {
                if let Some(rec) = report.records.get(e) {
                    writeln!(
                        out,
                        "{},{},{},{}",
                        rec.epoch, band, rec.train_loss, rec.val_loss
                    )
                    .unwrap();
                }
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), TrainError> {
        crate::train::write_atomic(path, self.to_csv().as_bytes())?;
        Ok(())
    }
}

/// Writes via a sibling temp file and rename so a crash cannot leave a
/// truncated artifact behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let stem = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "artifact".into());
    let tmp = dir.join(format!(".{stem}.tmp"));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}

/// Gathers every window of one band across a list of sequences, symmetrized
/// so encode's Hermitian check cannot trip on storage round-off.
fn collect_band(scenes: &[CsmSequence], band: usize) -> Vec<CrossSpectralMatrix> {
    let mut out = Vec::new();
    for seq in scenes {
        for w in 0..seq.n_windows() {
            let raw = seq.get(w, band);
            out.push(
                CrossSpectralMatrix::new(
                    hermitian_part(raw.entries()),
                    raw.band_hz(),
                    raw.n_frames_averaged(),
                    raw.timestamp(),
                )
                .expect("symmetrized CSM is valid"),
            );
        }
    }
    out
}

fn mean_loss(
    band: &LamBandModel,
    steering: &SteeringMatrix,
    set: &[CrossSpectralMatrix],
    gamma: f64,
    neighbors: &[Vec<usize>],
) -> Result<f64, LamError> {
    let mut total = 0.0;
    for c in set {
        total += band_loss(c, band, steering, gamma, neighbors)?.0;
    }
    Ok(total / set.len() as f64)
}

fn train_band(
    mut band: LamBandModel,
    steering: &SteeringMatrix,
    train: &[CrossSpectralMatrix],
    val: &[CrossSpectralMatrix],
    neighbors: &[Vec<usize>],
    cfg: &TrainConfig,
    band_idx: usize,
) -> Result<(LamBandModel, BandReport), TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, band_idx as u64));
    let mut params = band.flatten_params();
    let mut state = AdamState::new(params.len());

    let initial_train = mean_loss(&band, steering, train, cfg.gamma, neighbors)?;
    let initial_val = mean_loss(&band, steering, val, cfg.gamma, neighbors)?;
    let mut records = vec![EpochRecord {
        epoch: 0,
        train_loss: initial_train,
        val_loss: initial_val,
    }];
    let mut best_epoch = 0;
    let mut best_val = initial_val;
    let mut best_params = params.clone();
    let mut since_best = 0usize;

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut n_samples = 0usize;
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut grad_sum = DVector::zeros(params.len());
            let mut batch_loss = 0.0;
            for &i in batch {
                let (l, _, g) =
                    band_loss_and_grad(&train[i], &band, steering, cfg.gamma, neighbors)?;
                if !l.is_finite() {
                    return Err(TrainError::NonFiniteLoss {
                        band: band_idx,
                        epoch,
                        batch: batch_idx,
                    });
                }
                batch_loss += l;
                grad_sum += g.flatten();
            }
            grad_sum /= batch.len() as f64;
            epoch_loss += batch_loss;
            n_samples += batch.len();
            if adam_step(&mut params, &grad_sum, &mut state, cfg.learning_rate).is_err() {
                return Err(TrainError::NaNGradient {
                    band: band_idx,
                    epoch,
                    batch: batch_idx,
                });
            }
            band.assign_from_flat(&params)?;
        }
        let train_loss = epoch_loss / n_samples as f64;
        let val_loss = mean_loss(&band, steering, val, cfg.gamma, neighbors)?;
        records.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });

        let reference = initial_train.max(initial_val).max(f64::MIN_POSITIVE);
        for l in [train_loss, val_loss] {
            if !l.is_finite() || l > 1e3 * reference {
                return Err(TrainError::Diverged {
                    band: band_idx,
                    epoch,
                    loss: l,
                    initial: reference,
                });
            }
        }

        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best_params = params.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }

    band.assign_from_flat(&best_params)?;
    Ok((
        band,
        BandReport {
            band_hz: steering.band_hz(),
            records,
            best_epoch,
            best_val_loss: best_val,
        },
    ))
}

/// Trains every band of `model` on the given scenes and returns the model
/// with the best-validation parameters per band. Deterministic for a fixed
/// config seed regardless of thread scheduling.
pub fn train(
    model: LamModel,
    train_scenes: &[CsmSequence],
    val_scenes: &[CsmSequence],
    tess: &Tessellation,
    cfg: &TrainConfig,
) -> Result<(LamModel, TrainReport), TrainError> {
    cfg.validate()?;
    if train_scenes.is_empty() {
        return Err(TrainError::EmptyDataset { split: "train" });
    }
    if val_scenes.is_empty() {
        return Err(TrainError::EmptyDataset { split: "validation" });
    }
    if tess.len() != model.n_points() {
        return Err(TrainError::NodeMismatch {
            expected: model.n_points(),
            got: tess.len(),
        });
    }
    for seq in train_scenes.iter().chain(val_scenes) {
        check_scene(seq, &model)?;
    }

    let started = std::time::Instant::now();
    let neighbors = tess.neighbor_lists();
    let config_text = model.config().to_string();
    let steerings = model.steerings().to_vec();

    let outcomes: Result<Vec<_>, TrainError> = model
        .bands()
        .par_iter()
        .enumerate()
        .map(|(f, band)| {
            let train_set = collect_band(train_scenes, f);
            let val_set = collect_band(val_scenes, f);
            if train_set.is_empty() {
                return Err(TrainError::EmptyDataset { split: "train" });
            }
            if val_set.is_empty() {
                return Err(TrainError::EmptyDataset { split: "validation" });
            }
            train_band(
                band.clone(),
                &steerings[f],
                &train_set,
                &val_set,
                neighbors,
                cfg,
                f,
            )
        })
        .collect();

    let mut bands = Vec::new();
    let mut reports = Vec::new();
    for (band, report) in outcomes? {
        bands.push(band);
        reports.push(report);
    }
    let trained = LamModel::new(bands, steerings, config_text)?;
    Ok((
        trained,
        TrainReport {
            bands: reports,
            wall_seconds: started.elapsed().as_secs_f64(),
        },
    ))
}

fn check_scene(seq: &CsmSequence, model: &LamModel) -> Result<(), TrainError> {
    if seq.n_bands() != model.n_bands() {
        return Err(TrainError::Lam(LamError::BandMismatch {
            expected: model.n_bands(),
            got: seq.n_bands(),
        }));
    }
    if seq.channels() != model.channels() {
        return Err(TrainError::Lam(LamError::ChannelMismatch {
            expected: model.channels(),
            got: seq.channels(),
        }));
    }
    for (f, b) in seq.band_freqs().iter().zip(model.bands()) {
        if (f - b.band_hz()).abs() > 1e-6 {
            return Err(TrainError::Lam(LamError::BandFreqMismatch {
                a: *f,
                b: b.band_hz(),
            }));
        }
    }
    Ok(())
}

/// Outcome of one finite-difference sweep. `passed` compares the max
/// relative error against the requested tolerance; callers decide how to
/// surface a failure, the harness itself never panics on a bad gradient.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub skipped_kinks: usize,
    pub max_rel_error: f64,
    pub worst_param: Option<usize>,
    pub tolerance: f64,
    pub passed: bool,
}

/// Total offset radius of the four denoiser convolutions. A perturbation of
/// encoder column n can only reach nodes within this index distance of n.
const CONV_REACH: usize = 10;

/// Compares the analytic gradient against central finite differences over a
/// random subset of parameters. Parameters whose influence cone touches a
/// kink of ReLU, |.|, or the TV term (margin below `KINK_MARGIN`) are
/// excluded from the comparison and counted instead.
pub fn check_gradients(
    model: &LamBandModel,
    steering: &SteeringMatrix,
    c: &CrossSpectralMatrix,
    neighbors: &[Vec<usize>],
    gamma: f64,
    n_params: usize,
    tolerance: f64,
    seed: u64,
) -> Result<GradCheckReport, TrainError> {
    const KINK_MARGIN: f64 = 1e-3;
    const H: f64 = 1e-5;

    let sym = CrossSpectralMatrix::new(
        hermitian_part(c.entries()),
        c.band_hz(),
        c.n_frames_averaged(),
        c.timestamp(),
    )
    .expect("symmetrized CSM is valid");

    let (_, trace, grad) = band_loss_and_grad(&sym, model, steering, gamma, neighbors)?;
    let analytic = grad.flatten();
    let n_points = model.n_points();
    let m = model.channels();

    // Nodes where a tiny parameter nudge can cross a nondifferentiable
    // point: ReLU or L1 kinks at any stage, or a TV difference near zero.
    let mut kink_node = vec![false; n_points];
    for stage in trace.stages() {
        for (i, &v) in stage.iter().enumerate() {
            if v.abs() < KINK_MARGIN {
                kink_node[i] = true;
            }
        }
    }
    for (i, list) in neighbors.iter().enumerate() {
        for &j in list {
            if (trace.x4[i] - trace.x4[j]).abs() < KINK_MARGIN {
                kink_node[i] = true;
                kink_node[j] = true;
            }
        }
    }
    let any_kink = kink_node.iter().any(|&k| k);
    let node_clean = |n: usize| {
        let lo = n.saturating_sub(CONV_REACH);
        let hi = (n + CONV_REACH).min(n_points - 1);
        (lo..=hi).all(|i| !kink_node[i])
    };

    let total = analytic.len();
    let mut indices: Vec<usize> = (0..total).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    indices.truncate(n_params.min(total));

    let base = model.flatten_params();
    let mut probe = model.clone();
    let mut checked = 0usize;
    let mut skipped = 0usize;
    let mut max_rel = 0.0f64;
    let mut worst = None;

    for &p in &indices {
        // Layout of the flat vector: 2*M*N encoder reals, then kernels and
        // biases which influence every node.
        let clean = if p < 2 * m * n_points {
            node_clean(p / (2 * m))
        } else {
            !any_kink
        };
        if !clean {
            skipped += 1;
            continue;
        }
        let mut theta = base.clone();
        theta[p] = base[p] + H;
        probe.assign_from_flat(&theta)?;
        let plus = band_loss(&sym, &probe, steering, gamma, neighbors)?.0;
        theta[p] = base[p] - H;
        probe.assign_from_flat(&theta)?;
        let minus = band_loss(&sym, &probe, steering, gamma, neighbors)?.0;
        let fd = (plus - minus) / (2.0 * H);
        let denom = analytic[p].abs().max(fd.abs()).max(1e-8);
        let rel = (analytic[p] - fd).abs() / denom;
        if rel > max_rel {
            max_rel = rel;
            worst = Some(p);
        }
        checked += 1;
    }

    Ok(GradCheckReport {
        checked,
        skipped_kinks: skipped,
        max_rel_error: max_rel,
        worst_param: worst,
        tolerance,
        passed: max_rel <= tolerance,
    })
}

/// Per-band seeding helper used by trainers and dataset builders alike.
pub fn band_rng(seed: u64, band: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, band as u64))
}

/// Draws a random Hermitian PSD matrix scaled to unit mean diagonal, handy
/// for harness inputs.
pub fn random_psd_csm(
    m: usize,
    band_hz: f64,
    rng: &mut impl Rng,
) -> CrossSpectralMatrix {
    use crate::Complex64;
    use nalgebra::DMatrix;
    let g = DMatrix::from_fn(m, m, |_, _| {
        Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
    });
    let mut h = &g * g.adjoint();
    let trace: f64 = (0..m).map(|i| h[(i, i)].re).sum();
    h /= Complex64::new(trace / m as f64, 0.0);
    CrossSpectralMatrix::new(h, band_hz, 1, 0.0).expect("PSD construction is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{fibonacci_tessellation, steering_matrix, ArrayGeometry};
    use crate::Complex64;
    use nalgebra::DMatrix;

    fn setup(n_points: usize) -> (Tessellation, SteeringMatrix) {
        let geo = ArrayGeometry::tetra();
        let tess = fibonacci_tessellation(n_points, 4).unwrap();
        let steering = steering_matrix(&geo, &tess, 2000.0, crate::SPEED_OF_SOUND).unwrap();
        (tess, steering)
    }

    fn rank1_at(steering: &SteeringMatrix, node: usize, power: f64, floor: f64) -> DMatrix<Complex64> {
        let a = steering.column(node);
        let mut c = DMatrix::from_fn(steering.channels(), steering.channels(), |i, j| {
            a[i] * a[j].conj() * Complex64::new(power, 0.0)
        });
        for i in 0..steering.channels() {
            c[(i, i)] += Complex64::new(floor, 0.0);
        }
        c
    }

    /// Builds a one-band sequence whose windows are noisy rank-1 CSMs at a
    /// fixed node.
    fn synthetic_scene(
        steering: &SteeringMatrix,
        node: usize,
        n_windows: usize,
        seed: u64,
    ) -> CsmSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = steering.channels();
        let windows: Vec<Vec<CrossSpectralMatrix>> = (0..n_windows)
            .map(|w| {
                let mut c = rank1_at(steering, node, 1.0, 0.01);
                let g = DMatrix::from_fn(m, m, |_, _| {
                    Complex64::new(rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05))
                });
                c += &g * g.adjoint();
                vec![CrossSpectralMatrix::new(c, steering.band_hz(), 10, w as f64).unwrap()]
            })
            .collect();
        CsmSequence::new(windows, vec![steering.band_hz()], m, 16000.0).unwrap()
    }

    fn tiny_model(steering: &SteeringMatrix, seed: u64) -> LamModel {
        LamModel::init(vec![steering.clone()], "test".into(), seed).unwrap()
    }

    #[test]
    fn adam_zero_gradient_leaves_params_unchanged() {
        let mut p = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let g = DVector::zeros(3);
        let mut st = AdamState::new(3);
        for _ in 0..10 {
            adam_step(&mut p, &g, &mut st, 0.1).unwrap();
        }
        assert_eq!(p, DVector::from_vec(vec![1.0, -2.0, 0.5]));
        assert!(st.m.iter().all(|&v| v == 0.0));
        assert!(st.v.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adam_constant_gradient_step_approaches_lr() {
        // With a constant gradient the bias-corrected ratio m_hat/sqrt(v_hat)
        // tends to sign(g), so the update magnitude tends to lr.
        let lr = 0.01;
        let mut p = DVector::from_vec(vec![0.0]);
        let g = DVector::from_vec(vec![3.7]);
        let mut st = AdamState::new(1);
        let mut last = p[0];
        let mut step = 0.0;
        for _ in 0..500 {
            adam_step(&mut p, &g, &mut st, lr).unwrap();
            step = (p[0] - last).abs();
            last = p[0];
        }
        assert!((step - lr).abs() < 0.01 * lr, "step {step} vs lr {lr}");
    }

    #[test]
    fn adam_quadratic_descends_then_settles() {
        // f(w) = w^2 from w = 1 with lr = 0.1. The iterate decreases
        // monotonically until it crosses zero near step 11, overshoots to
        // about -0.27, and damps toward zero afterwards.
        let mut p = DVector::from_vec(vec![1.0]);
        let mut st = AdamState::new(1);
        let mut history = vec![p[0]];
        for _ in 0..100 {
            let g = DVector::from_vec(vec![2.0 * p[0]]);
            adam_step(&mut p, &g, &mut st, 0.1).unwrap();
            history.push(p[0]);
        }
        for i in 0..10 {
            assert!(history[i + 1] < history[i], "not descending at step {i}");
        }
        assert!(history.iter().all(|w| *w > -0.3));
        assert!(history[100].abs() < 0.01, "final {}", history[100]);
    }

    #[test]
    fn adam_rejects_nan_gradient() {
        let mut p = DVector::from_vec(vec![1.0, 2.0]);
        let g = DVector::from_vec(vec![0.0, f64::NAN]);
        let mut st = AdamState::new(2);
        assert_eq!(adam_step(&mut p, &g, &mut st, 0.1), Err(1));
        assert_eq!(p, DVector::from_vec(vec![1.0, 2.0]));
        assert_eq!(st.t, 0);
    }

    #[test]
    fn train_overfits_single_scene() {
        let (tess, steering) = setup(16);
        let scene = synthetic_scene(&steering, 5, 24, 11);
        let val = synthetic_scene(&steering, 5, 8, 12);
        let model = tiny_model(&steering, 3);
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            batch_size: 8,
            max_epochs: 60,
            patience: 60,
            ..TrainConfig::default()
        };
        let (_, report) = train(model, &[scene], &[val], &tess, &cfg).unwrap();
        let rec = &report.bands[0].records;
        let first = rec[0].train_loss;
        let last = rec.last().unwrap().train_loss;
        assert!(
            last < 0.5 * first,
            "no overfit: first {first:.4e} last {last:.4e}"
        );
        assert!(rec.iter().all(|r| r.train_loss >= 0.0 && r.val_loss >= 0.0));
    }

    #[test]
    fn train_best_epoch_beats_all_others() {
        let (tess, steering) = setup(12);
        let scene = synthetic_scene(&steering, 3, 16, 21);
        let val = synthetic_scene(&steering, 3, 6, 22);
        let model = tiny_model(&steering, 5);
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            batch_size: 8,
            max_epochs: 30,
            patience: 5,
            ..TrainConfig::default()
        };
        let (_, report) = train(model, &[scene], &[val], &tess, &cfg).unwrap();
        let band = &report.bands[0];
        let best = band.best_val_loss;
        assert!(band
            .records
            .iter()
            .all(|r| best <= r.val_loss + 1e-15));
        assert_eq!(
            band.records[band.best_epoch].val_loss, best,
            "best_epoch does not point at the best record"
        );
    }

    #[test]
    fn train_is_deterministic() {
        let (tess, steering) = setup(12);
        let scene = synthetic_scene(&steering, 4, 12, 31);
        let val = synthetic_scene(&steering, 4, 6, 32);
        let cfg = TrainConfig {
            learning_rate: 1e-4,
            batch_size: 4,
            max_epochs: 8,
            patience: 8,
            seed: 77,
            ..TrainConfig::default()
        };
        let run = || {
            let model = tiny_model(&steering, 9);
            let (m, r) = train(model, std::slice::from_ref(&scene), std::slice::from_ref(&val), &tess, &cfg).unwrap();
            (m.bands()[0].flatten_params(), r.to_csv())
        };
        let (p1, csv1) = run();
        let (p2, csv2) = run();
        assert_eq!(p1, p2, "parameters differ between identical runs");
        assert_eq!(csv1, csv2, "reports differ between identical runs");
    }

    #[test]
    fn train_larger_gamma_gives_sparser_fields() {
        let (tess, steering) = setup(16);
        let scene = synthetic_scene(&steering, 7, 20, 41);
        let val = synthetic_scene(&steering, 7, 6, 42);
        let mean_l1 = |gamma: f64| {
            let model = tiny_model(&steering, 13);
            let cfg = TrainConfig {
                learning_rate: 1e-3,
                gamma,
                batch_size: 8,
                max_epochs: 40,
                patience: 40,
                seed: 1,
                ..TrainConfig::default()
            };
            let (trained, _) =
                train(model, std::slice::from_ref(&scene), std::slice::from_ref(&val), &tess, &cfg).unwrap();
            let band = &trained.bands()[0];
            let mut total = 0.0;
            for w in 0..scene.n_windows() {
                let c = CrossSpectralMatrix::new(
                    hermitian_part(scene.get(w, 0).entries()),
                    steering.band_hz(),
                    1,
                    0.0,
                )
                .unwrap();
                let x0 = crate::lam::encode(&c, band).unwrap();
                let trace = crate::lam::denoise(&x0, band);
                total += trace.x4.iter().map(|v| v.abs()).sum::<f64>();
            }
            total / scene.n_windows() as f64
        };
        let sparse = mean_l1(1.0);
        let dense = mean_l1(1e-4);
        assert!(
            sparse < dense,
            "gamma=1 mean L1 {sparse:.4e} not below gamma=1e-4 {dense:.4e}"
        );
    }

    #[test]
    fn train_rejects_empty_datasets_and_bad_config() {
        let (tess, steering) = setup(8);
        let scene = synthetic_scene(&steering, 2, 4, 51);
        let model = tiny_model(&steering, 1);
        let cfg = TrainConfig::default();
        let err = train(model, &[], std::slice::from_ref(&scene), &tess, &cfg).unwrap_err();
        assert!(matches!(err, TrainError::EmptyDataset { split: "train" }));

        let model = tiny_model(&steering, 1);
        let err = train(model, std::slice::from_ref(&scene), &[], &tess, &cfg).unwrap_err();
        assert!(matches!(err, TrainError::EmptyDataset { split: "validation" }));

        let bad = TrainConfig {
            learning_rate: -1.0,
            ..TrainConfig::default()
        };
        let model = tiny_model(&steering, 1);
        let err = train(model, std::slice::from_ref(&scene), std::slice::from_ref(&scene), &tess, &bad).unwrap_err();
        assert!(matches!(err, TrainError::BadConfig(_)));
    }

    #[test]
    fn train_aborts_on_divergence() {
        let (tess, steering) = setup(12);
        let scene = synthetic_scene(&steering, 4, 12, 61);
        let val = synthetic_scene(&steering, 4, 4, 62);
        let model = tiny_model(&steering, 2);
        let cfg = TrainConfig {
            learning_rate: 1e6,
            batch_size: 4,
            max_epochs: 50,
            patience: 50,
            ..TrainConfig::default()
        };
        let err = train(model, &[scene], &[val], &tess, &cfg).unwrap_err();
        assert!(
            matches!(
                err,
                TrainError::Diverged { .. }
                    | TrainError::NonFiniteLoss { .. }
                    | TrainError::NaNGradient { .. }
            ),
            "unexpected error {err}"
        );
    }

    #[test]
    fn gradient_check_passes_on_random_psd_csm() {
        // 2*4*24 + 28 = 220 parameters, enough for a 200-sample sweep.
        let geo = ArrayGeometry::tetra();
        let tess = fibonacci_tessellation(24, 4).unwrap();
        let steering = steering_matrix(&geo, &tess, 2500.0, crate::SPEED_OF_SOUND).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut band = LamBandModel::init(&steering, &mut rng);
        // Raised biases keep the operating point away from ReLU kinks.
        let flat_len = band.parameter_count();
        let mut flat = band.flatten_params();
        for i in (flat_len - 4)..flat_len {
            flat[i] = 0.3;
        }
        band.assign_from_flat(&flat).unwrap();
        let c = random_psd_csm(4, 2500.0, &mut rng);
        let report = check_gradients(
            &band,
            &steering,
            &c,
            tess.neighbor_lists(),
            1e-4,
            200,
            1e-4,
            99,
        )
        .unwrap();
        assert!(
            report.passed,
            "max rel error {:.3e} at {:?} with {} checked, {} skipped",
            report.max_rel_error, report.worst_param, report.checked, report.skipped_kinks
        );
        assert!(report.checked >= 100, "only {} checked", report.checked);
    }

    #[test]
    fn gradient_check_zero_csm_gives_zero_gradient() {
        let (tess, steering) = setup(12);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let band = LamBandModel::init(&steering, &mut rng);
        let zero = CrossSpectralMatrix::new(DMatrix::zeros(4, 4), steering.band_hz(), 1, 0.0)
            .unwrap();
        // With C = 0 and zero-initialized biases the latent field is zero,
        // the MSE term reduces to |C_hat|^2 / M^2, and the subgradient
        // convention at the kinks makes every component exactly zero.
        let (_, _, grad) =
            band_loss_and_grad(&zero, &band, &steering, 1e-4, tess.neighbor_lists()).unwrap();
        assert!(grad.flatten().iter().all(|&g| g == 0.0));
        // Every parameter sits at a kink, so the sweep checks nothing.
        let report = check_gradients(
            &band,
            &steering,
            &zero,
            tess.neighbor_lists(),
            1e-4,
            200,
            1e-4,
            5,
        )
        .unwrap();
        assert_eq!(report.checked, 0);
        assert!(report.skipped_kinks > 0);
    }

    #[test]
    fn gradient_check_zero_tolerance_fails_without_panic() {
        let geo = ArrayGeometry::tetra();
        let tess = fibonacci_tessellation(24, 4).unwrap();
        let steering = steering_matrix(&geo, &tess, 2500.0, crate::SPEED_OF_SOUND).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut band = LamBandModel::init(&steering, &mut rng);
        let n = band.parameter_count();
        let mut flat = band.flatten_params();
        for i in (n - 4)..n {
            flat[i] = 0.3;
        }
        band.assign_from_flat(&flat).unwrap();
        let c = random_psd_csm(4, 2500.0, &mut rng);
        let report = check_gradients(
            &band,
            &steering,
            &c,
            tess.neighbor_lists(),
            1e-4,
            200,
            0.0,
            99,
        )
        .unwrap();
        assert!(!report.passed);
        assert!(report.max_rel_error > 0.0);
    }

    #[test]
    fn report_csv_has_expected_shape() {
        let report = TrainReport {
            bands: vec![BandReport {
                band_hz: 2000.0,
                records: vec![
                    EpochRecord {
                        epoch: 0,
                        train_loss: 1.0,
                        val_loss: 1.5,
                    },
                    EpochRecord {
                        epoch: 1,
                        train_loss: 0.5,
                        val_loss: 0.75,
                    },
                ],
                best_epoch: 1,
                best_val_loss: 0.75,
            }],
            wall_seconds: 0.1,
        };
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "epoch,band,train_loss,val_loss");
        assert_eq!(lines[1], "0,0,1,1.5");
        assert_eq!(lines[2], "1,0,0.5,0.75");
    }

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.csv");
        write_atomic(&path, b"first").unwrap();
        write_atomic(&path, b"second").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"second");
        assert!(std::fs::read_dir(dir.path()).unwrap().count() == 1);
    }
}
