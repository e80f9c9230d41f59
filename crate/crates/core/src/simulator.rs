//! Free-field scene simulator with exact direction-of-arrival ground truth.
//!
//! Sources are far-field plane waves: channel m receives the source waveform
//! delayed by tau_m = -(p_m . r)/c, implemented as a frequency-domain phase
//! ramp so fractional delays are exact. There is no distance attenuation and
//! no reverberation, which keeps the rank-1 decoder model exactly realizable
//! and the ground truth free of labeling error.
//!
//! Moving sources hold a constant direction per label frame (default 100 ms)
//! and adjacent segments with different directions are joined by a 10 ms
//! linear crossfade so the waveform stays click free.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::{csm_sequence, write_csm_store, BandConfig, DspError, MultichannelAudio};
use crate::geometry::{angles_from_direction, ArrayGeometry, GeometryError};
use crate::{mix_seed, Complex64, SPEED_OF_SOUND};

/// Label frame length in seconds; matches common sound-event grids.
pub const LABEL_FRAME_S: f64 = 0.1;
/// Linear crossfade length at direction changes, seconds.
pub const CROSSFADE_S: f64 = 0.01;
/// Noise standard deviation used when the scene has no signal power to
/// reference an SNR against (all gains zero).
pub const SILENT_SCENE_NOISE_STD: f64 = 0.1;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("bad scene spec: {0}")]
    BadSpec(String),
    #[error("source {index}: direction track does not cover [0, duration)")]
    TrackNotCovering { index: usize },
    #[error("source {index}: sample rate {got} does not match scene rate {expected}")]
    SampleRateMismatch {
        index: usize,
        expected: f64,
        got: f64,
    },
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest format error: {0}")]
    Manifest(String),
}

/// One sound source: a mono waveform and a piecewise-constant direction
/// track. Breakpoint times must be strictly increasing and the first one
/// must be at or before t = 0 so the track covers the whole scene.
#[derive(Debug, Clone)]
pub struct SourceTrajectory {
    pub waveform: Vec<f64>,
    pub sample_rate: f64,
    pub direction_track: Vec<(f64, Vector3<f64>)>,
    pub gain: f64,
}

impl SourceTrajectory {
    pub fn new(
        waveform: Vec<f64>,
        sample_rate: f64,
        direction_track: Vec<(f64, Vector3<f64>)>,
        gain: f64,
    ) -> Result<Self, SimError> {
        if waveform.is_empty() {
            return Err(SimError::BadSpec("empty source waveform".into()));
        }
        if waveform.iter().any(|v| !v.is_finite()) {
            return Err(SimError::BadSpec("non-finite source sample".into()));
        }
        if !(sample_rate > 0.0) {
            return Err(SimError::BadSpec("source sample rate must be > 0".into()));
        }
        if direction_track.is_empty() {
            return Err(SimError::BadSpec("empty direction track".into()));
        }
        for pair in direction_track.windows(2) {
            if pair[1].0 <= pair[0].0 {
                return Err(SimError::BadSpec(
                    "direction track times must be strictly increasing".into(),
                ));
            }
        }
        for (_, d) in &direction_track {
            if (d.norm() - 1.0).abs() > 1e-6 {
                return Err(SimError::BadSpec(format!(
                    "direction norm {} is not 1",
                    d.norm()
                )));
            }
        }
        if !(gain >= 0.0) || !gain.is_finite() {
            return Err(SimError::BadSpec("gain must be finite and >= 0".into()));
        }
        Ok(Self {
            waveform,
            sample_rate,
            direction_track: direction_track
                .into_iter()
                .map(|(t, d)| (t, d.normalize()))
                .collect(),
            gain,
        })
    }

    /// Source that stays at one direction for the whole scene.
    pub fn static_source(
        waveform: Vec<f64>,
        sample_rate: f64,
        direction: Vector3<f64>,
        gain: f64,
    ) -> Result<Self, SimError> {
        Self::new(waveform, sample_rate, vec![(0.0, direction)], gain)
    }

    /// Sample-and-hold lookup: direction of the latest breakpoint at or
    /// before `t`. Returns None when `t` precedes the first breakpoint.
    pub fn direction_at(&self, t: f64) -> Option<Vector3<f64>> {
        let mut current = None;
        for &(bt, d) in &self.direction_track {
            if bt <= t {
                current = Some(d);
            } else {
                break;
            }
        }
        current
    }
}

/// Full description of one scene. `snr_db` may be infinite for a noiseless
/// render; it is measured against the summed source power.
#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub sources: Vec<SourceTrajectory>,
    pub duration: f64,
    pub snr_db: f64,
    pub sample_rate: f64,
    pub geometry: ArrayGeometry,
    pub seed: u64,
}

impl SceneSpec {
    fn validate(&self) -> Result<(), SimError> {
        if !(self.duration > 0.0) {
            return Err(SimError::BadSpec("duration must be > 0".into()));
        }
        if self.sources.is_empty() || self.sources.len() > 8 {
            return Err(SimError::BadSpec(format!(
                "scene needs 1..=8 sources, got {}",
                self.sources.len()
            )));
        }
        if !(self.sample_rate > 0.0) {
            return Err(SimError::BadSpec("sample rate must be > 0".into()));
        }
        if self.snr_db.is_nan() {
            return Err(SimError::BadSpec("snr_db must not be NaN".into()));
        }
        for (i, s) in self.sources.iter().enumerate() {
            if (s.sample_rate - self.sample_rate).abs() > 1e-9 {
                return Err(SimError::SampleRateMismatch {
                    index: i,
                    expected: self.sample_rate,
                    got: s.sample_rate,
                });
            }
            if s.direction_track[0].0 > 0.0 {
                return Err(SimError::TrackNotCovering { index: i });
            }
        }
        Ok(())
    }
}

/// Exact per-label-frame truth. A source is listed in a frame when its gain
/// is positive and its waveform still has samples there.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub frame_duration: f64,
    pub frames: Vec<Vec<(usize, Vector3<f64>)>>,
}

impl GroundTruth {
    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn frame_center(&self, i: usize) -> f64 {
        (i as f64 + 0.5) * self.frame_duration
    }

    /// CSV rows frame_index,source_id,azimuth_deg,elevation_deg; frames with
    /// no active source produce no rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame_index,source_id,azimuth_deg,elevation_deg\n");
        for (i, frame) in self.frames.iter().enumerate() {
            for (id, dir) in frame {
                let (az, el) = angles_from_direction(dir);
                writeln!(out, "{i},{id},{az},{el}").unwrap();
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), SimError> {
        crate::train::write_atomic(path, self.to_csv().as_bytes())?;
        Ok(())
    }

    /// Reads rows back. `n_frames` restores trailing silent frames that the
    /// sparse CSV cannot represent.
    pub fn read_csv(
        path: &Path,
        n_frames: usize,
        frame_duration: f64,
    ) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path)?;
        let mut frames: Vec<Vec<(usize, Vector3<f64>)>> = vec![Vec::new(); n_frames];
        for (lineno, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 4 {
                return Err(SimError::Manifest(format!(
                    "ground truth line {} has {} fields, expected 4",
                    lineno + 1,
                    parts.len()
                )));
            }
            let parse_err = |what: &str| {
                SimError::Manifest(format!("bad {what} on ground truth line {}", lineno + 1))
            };
            let frame: usize = parts[0].parse().map_err(|_| parse_err("frame_index"))?;
            let id: usize = parts[1].parse().map_err(|_| parse_err("source_id"))?;
            let az: f64 = parts[2].parse().map_err(|_| parse_err("azimuth"))?;
            let el: f64 = parts[3].parse().map_err(|_| parse_err("elevation"))?;
            if frame >= n_frames {
                return Err(SimError::Manifest(format!(
                    "frame index {frame} out of range 0..{n_frames}"
                )));
            }
            frames[frame].push((id, crate::geometry::direction_from_angles(az, el)));
        }
        Ok(Self {
            frame_duration,
            frames,
        })
    }
}

/// Delays `chunk` by a fractional number of samples per channel using one
/// zero-padded FFT. `delays` are in samples; positive delays shift content
/// later. Sinc tails that fall outside the padded window are discarded, so
/// `pad` must comfortably exceed the largest |delay|.
fn fractional_delay(chunk: &[f64], delays: &[f64], pad: usize) -> Vec<Vec<f64>> {
    let n = chunk.len() + 2 * pad;
    let fft_len = n.next_power_of_two();
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(fft_len);
    let inv = planner.plan_fft_inverse(fft_len);

    let mut spec = vec![Complex64::new(0.0, 0.0); fft_len];
    for (i, &v) in chunk.iter().enumerate() {
        spec[pad + i] = Complex64::new(v, 0.0);
    }
    fwd.process(&mut spec);

    delays
        .iter()
        .map(|&d| {
            let mut shifted = vec![Complex64::new(0.0, 0.0); fft_len];
            for k in 0..fft_len {
                // Signed bin frequency keeps the ramp Hermitian so the
                // output stays real.
                let kf = if k <= fft_len / 2 {
                    k as f64
                } else {
                    k as f64 - fft_len as f64
                };
                let phase = -2.0 * std::f64::consts::PI * kf * d / fft_len as f64;
                shifted[k] = spec[k] * Complex64::new(0.0, phase).exp();
            }
            inv.process(&mut shifted);
            let scale = 1.0 / fft_len as f64;
            (0..chunk.len() + pad)
                .map(|i| shifted[pad + i].re * scale)
                .collect()
        })
        .collect()
}

/// Renders the scene to multichannel audio plus exact ground truth.
/// Deterministic for a fixed spec. If the mix peaks above 0.999 the whole
/// signal (noise included) is rescaled, which preserves the SNR and every
/// spatial statistic.
pub fn render_scene(spec: &SceneSpec) -> Result<(MultichannelAudio, GroundTruth), SimError> {
    spec.validate()?;
    let fs = spec.sample_rate;
    let n_samples = (spec.duration * fs).round() as usize;
    if n_samples == 0 {
        return Err(SimError::BadSpec("duration shorter than one sample".into()));
    }
    let m = spec.geometry.channels();
    let frame_len = (LABEL_FRAME_S * fs).round().max(1.0) as usize;
    let n_frames = n_samples.div_ceil(frame_len);
    let xf = (CROSSFADE_S * fs).round() as usize;
    let positions = spec.geometry.positions();
    let max_delay_s = positions.iter().map(|p| p.norm()).fold(0.0, f64::max) / SPEED_OF_SOUND;
    let pad = (max_delay_s * fs).ceil() as usize + 64;

    let mut mix = vec![vec![0.0f64; n_samples]; m];
    let mut truth: Vec<Vec<(usize, Vector3<f64>)>> = vec![Vec::new(); n_frames];

    for (sid, src) in spec.sources.iter().enumerate() {
        let active_len = src.waveform.len().min(n_samples);
        // Per-frame direction, sampled at the frame center.
        let mut frame_dirs = Vec::with_capacity(n_frames);
        for i in 0..n_frames {
            let t = (i as f64 + 0.5) * frame_len as f64 / fs;
            let dir = src
                .direction_at(t)
                .ok_or(SimError::TrackNotCovering { index: sid })?;
            frame_dirs.push(dir);
            if src.gain > 0.0 && i * frame_len < active_len {
                truth[i].push((sid, dir));
            }
        }
        if src.gain == 0.0 {
            continue;
        }

        // Merge consecutive frames that share a direction into segments.
        let mut segments: Vec<(usize, usize, Vector3<f64>)> = Vec::new();
        for (i, dir) in frame_dirs.iter().enumerate() {
            let start = i * frame_len;
            if start >= active_len {
                break;
            }
            let end = ((i + 1) * frame_len).min(active_len);
            match segments.last_mut() {
                Some((_, seg_end, seg_dir)) if *seg_dir == *dir => *seg_end = end,
                _ => segments.push((start, end, *dir)),
            }
        }

        let n_segs = segments.len();
        for (k, &(a, b, dir)) in segments.iter().enumerate() {
            let delays: Vec<f64> = positions
                .iter()
                .map(|p| -(p.dot(&dir)) / SPEED_OF_SOUND * fs)
                .collect();
            // Render past the segment end so the next segment can fade in
            // over this one.
            let render_end = if k + 1 < n_segs {
                (b + xf).min(active_len)
            } else {
                b
            };
            let chunk = &src.waveform[a..render_end];
            let delayed = fractional_delay(chunk, &delays, pad);
            for (ch, channel_out) in delayed.iter().enumerate() {
                for t in a..render_end {
                    let mut w = 1.0;
                    if k > 0 && t < a + xf {
                        w *= (t - a) as f64 / xf as f64;
                    }
                    if k + 1 < n_segs && t >= b {
                        w *= 1.0 - (t - b) as f64 / xf as f64;
                    }
                    mix[ch][t] += src.gain * w * channel_out[t - a];
                }
            }
        }
    }

    // Noise to meet the requested SNR against the summed source power. A
    // scene with no signal fails back to a fixed noise level.
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let signal_power: f64 =
        mix.iter().flatten().map(|v| v * v).sum::<f64>() / (m * n_samples) as f64;
    let noise_std = if !spec.snr_db.is_finite() {
        0.0
    } else if signal_power > 0.0 {
        (signal_power * 10f64.powf(-spec.snr_db / 10.0)).sqrt()
    } else {
        SILENT_SCENE_NOISE_STD
    };
    if noise_std > 0.0 {
        for channel in &mut mix {
            for v in channel.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += noise_std * z;
            }
        }
    }

    let peak = mix.iter().flatten().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if peak > 0.999 {
        let scale = 0.999 / peak;
        for channel in &mut mix {
            for v in channel.iter_mut() {
                *v *= scale;
            }
        }
    }

    let flat: Vec<f64> = mix.into_iter().flatten().collect();
    let samples = ndarray::Array2::from_shape_vec((m, n_samples), flat)
        .expect("mix dimensions are consistent");
    let audio = MultichannelAudio::new(samples, fs)?;
    Ok((
        audio,
        GroundTruth {
            frame_duration: frame_len as f64 / fs,
            frames: truth,
        },
    ))
}

/// White Gaussian noise with the given standard deviation.
pub fn white_noise(n: usize, std: f64, rng: &mut impl Rng) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect()
}

/// Noise with a speech-like spectral tilt: white noise through a one-pole
/// lowpass (about -6 dB per octave above `knee_hz`), rescaled to `rms`.
pub fn speech_shaped_noise(n: usize, sample_rate: f64, rms: f64, rng: &mut impl Rng) -> Vec<f64> {
    let knee_hz = 300.0;
    let a = (-2.0 * std::f64::consts::PI * knee_hz / sample_rate).exp();
    let mut out = Vec::with_capacity(n);
    let mut y = 0.0;
    for _ in 0..n {
        let z: f64 = StandardNormal.sample(rng);
        y = a * y + (1.0 - a) * z;
        out.push(y);
    }
    let actual = (out.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    if actual > 0.0 {
        let s = rms / actual;
        for v in &mut out {
            *v *= s;
        }
    }
    out
}

/// Amplitude-modulated sine: carrier at `carrier_hz`, envelope swinging
/// between 0.2 and 1.0 at `mod_hz`, peak amplitude `amp`.
pub fn am_tone(n: usize, sample_rate: f64, carrier_hz: f64, mod_hz: f64, amp: f64) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let t = i as f64 / sample_rate;
            let env = 0.6 + 0.4 * (2.0 * std::f64::consts::PI * mod_hz * t).sin();
            amp * env * (2.0 * std::f64::consts::PI * carrier_hz * t).sin()
        })
        .collect()
}

/// Seeds serialize as 16-digit hex because TOML integers are i64 and
/// derived seeds use the full u64 range.
mod hex_seed {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{v:016x}"))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        let text = String::deserialize(d)?;
        u64::from_str_radix(&text, 16).map_err(serde::de::Error::custom)
    }
}

/// Dataset-wide front-end settings shared by every scene.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetConfig {
    pub n_scenes: usize,
    #[serde(with = "hex_seed")]
    pub seed: u64,
    pub window_len: usize,
    pub hop: usize,
    pub frames_per_csm: usize,
    pub f_lo: f64,
    pub f_hi: f64,
    pub n_bands: usize,
}

impl DatasetConfig {
    pub fn band_config(&self) -> BandConfig {
        BandConfig {
            f_lo_hz: self.f_lo,
            f_hi_hz: self.f_hi,
            n_bands: self.n_bands,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SceneRecord {
    pub id: usize,
    #[serde(with = "hex_seed")]
    pub seed: u64,
    pub split: String,
    pub wav: String,
    pub store: String,
    pub ground_truth: String,
    pub n_label_frames: usize,
    pub label_frame_s: f64,
}

/// Manifest written next to the rendered artifacts; all paths are relative
/// to the manifest's directory.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub config: DatasetConfig,
    pub scenes: Vec<SceneRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<(), SimError> {
        let text = toml::to_string_pretty(self).map_err(|e| SimError::Manifest(e.to_string()))?;
        crate::train::write_atomic(path, text.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| SimError::Manifest(e.to_string()))
    }

    pub fn scenes_for<'a>(&'a self, split: &'a str) -> impl Iterator<Item = &'a SceneRecord> + 'a {
        self.scenes.iter().filter(move |s| s.split == split)
    }
}

/// Renders `n_scenes` scenes, writes WAV, CSM store, and ground truth per
/// scene, and emits a manifest with a seeded 80/20 train/validation split.
/// Per-scene seeds are derived from the dataset seed, so the output does not
/// depend on render order or thread count.
pub fn make_dataset(
    cfg: &DatasetConfig,
    make_spec: impl Fn(usize, u64) -> SceneSpec + Sync,
    out_dir: &Path,
) -> Result<DatasetManifest, SimError> {
    if cfg.n_scenes == 0 {
        return Err(SimError::BadSpec("n_scenes must be >= 1".into()));
    }
    std::fs::create_dir_all(out_dir)?;

    let rendered: Result<Vec<SceneRecord>, SimError> = (0..cfg.n_scenes)
        .into_par_iter()
        .map(|id| {
            let scene_seed = mix_seed(cfg.seed, id as u64);
            let spec = make_spec(id, scene_seed);
            let (audio, truth) = render_scene(&spec)?;
            let seq = csm_sequence(
                &audio,
                cfg.window_len,
                cfg.hop,
                cfg.frames_per_csm,
                &cfg.band_config(),
            )?;
            let wav = format!("scene_{id:04}.wav");
            let store = format!("scene_{id:04}.lamc");
            let gt = format!("scene_{id:04}_gt.csv");
            crate::dsp::write_wav(&out_dir.join(&wav), &audio)?;
            write_csm_store(&out_dir.join(&store), &seq)?;
            truth.write_csv(&out_dir.join(&gt))?;
            Ok(SceneRecord {
                id,
                seed: scene_seed,
                split: String::new(),
                wav,
                store,
                ground_truth: gt,
                n_label_frames: truth.n_frames(),
                label_frame_s: truth.frame_duration,
            })
        })
        .collect();
    let mut scenes = rendered?;

    // Seeded split: shuffle ids, last 20% become validation.
    let mut order: Vec<usize> = (0..cfg.n_scenes).collect();
    {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, u64::MAX));
        order.shuffle(&mut rng);
    }
    let n_val = cfg.n_scenes / 5;
    let mut warnings = Vec::new();
    if n_val == 0 {
        warnings.push(format!(
            "dataset has {} scene(s); validation split is empty",
            cfg.n_scenes
        ));
    }
    for (rank, &id) in order.iter().enumerate() {
        scenes[id].split = if rank < cfg.n_scenes - n_val {
            "train".into()
        } else {
            "validation".into()
        };
    }

    let manifest = DatasetManifest {
        config: cfg.clone(),
        scenes,
        warnings,
    };
    manifest.save(&out_dir.join("manifest.toml"))?;
    Ok(manifest)
}
