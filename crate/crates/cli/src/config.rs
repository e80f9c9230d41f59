//! Experiment configuration shared by every subcommand.
//!
//! The config is a TOML file parsed and validated before any compute runs.
//! Unknown keys are rejected so typos fail loudly instead of silently
//! falling back to defaults. `parse(serialize(c)) == c` holds for every
//! valid config, which is what lets a checkpoint carry its training config
//! as an embedded blob and rebuild the exact steering matrices later.

use std::path::Path;

use lam_core::dsp::BandConfig;
use lam_core::geometry::{fibonacci_tessellation, ArrayGeometry, Tessellation};
use lam_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// "em32", "tetra", or a path to a geometry TOML file.
    pub geometry: String,
    /// Tessellation size and neighbor count for the spherical grid.
    pub tessellation_points: usize,
    pub tessellation_neighbors: usize,
    /// STFT front end.
    pub sample_rate: f64,
    pub window_len: usize,
    pub hop: usize,
    pub frames_per_csm: usize,
    /// Band selection, inclusive edges in Hz.
    pub f_lo_hz: f64,
    pub f_hi_hz: f64,
    pub n_bands: usize,
    /// DoA raster grid (azimuth x elevation cells).
    pub az_bins: usize,
    pub el_bins: usize,
    /// Base seed for every derived RNG stream. TOML integers are i64, so
    /// seeds above i64::MAX round-trip as 16-digit hex strings.
    #[serde(with = "seed_value")]
    pub seed: u64,
    pub train: TrainSection,
}

mod seed_value {
    use serde::de::{self, Visitor};
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        if *v <= i64::MAX as u64 {
            s.serialize_u64(*v)
        } else {
            s.serialize_str(&format!("{v:016x}"))
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        struct SeedVisitor;
        impl Visitor<'_> for SeedVisitor {
            type Value = u64;
            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("a nonnegative integer or hex string")
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<u64, E> {
                Ok(v)
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<u64, E> {
                u64::try_from(v).map_err(|_| E::custom("seed must be nonnegative"))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<u64, E> {
                u64::from_str_radix(v, 16).map_err(|e| E::custom(format!("bad hex seed: {e}")))
            }
        }
        d.deserialize_any(SeedVisitor)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub gamma: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            geometry: "em32".into(),
            tessellation_points: 242,
            tessellation_neighbors: 6,
            sample_rate: 16_000.0,
            window_len: 1024,
            hop: 512,
            frames_per_csm: 10,
            f_lo_hz: 1_500.0,
            f_hi_hz: 4_500.0,
            n_bands: 9,
            az_bins: 72,
            el_bins: 36,
            seed: 0,
            train: TrainSection::default(),
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            learning_rate: t.learning_rate,
            gamma: t.gamma,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        let cfg: Self = toml::from_str(text).map_err(|e| format!("config: {e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.geometry.trim().is_empty() {
            return Err("geometry: must be a builtin name or a file path".into());
        }
        if self.tessellation_points < 4 {
            return Err(format!(
                "tessellation_points: need at least 4, got {}",
                self.tessellation_points
            ));
        }
        if self.tessellation_neighbors == 0
            || self.tessellation_neighbors >= self.tessellation_points
        {
            return Err(format!(
                "tessellation_neighbors: must be in 1..{}, got {}",
                self.tessellation_points, self.tessellation_neighbors
            ));
        }
        if !(self.sample_rate.is_finite() && self.sample_rate > 0.0) {
            return Err(format!("sample_rate: must be positive, got {}", self.sample_rate));
        }
        if self.window_len == 0 || self.hop == 0 || self.hop > self.window_len {
            return Err(format!(
                "window_len/hop: need 0 < hop <= window_len, got {}/{}",
                self.window_len, self.hop
            ));
        }
        if self.frames_per_csm == 0 {
            return Err("frames_per_csm: must be positive".into());
        }
        if !(self.f_lo_hz > 0.0 && self.f_hi_hz > self.f_lo_hz) {
            return Err(format!(
                "f_lo_hz/f_hi_hz: need 0 < f_lo < f_hi, got {}/{}",
                self.f_lo_hz, self.f_hi_hz
            ));
        }
        if self.f_hi_hz >= self.sample_rate / 2.0 {
            return Err(format!(
                "f_hi_hz: {} is at or above Nyquist for sample_rate {}",
                self.f_hi_hz, self.sample_rate
            ));
        }
        if self.n_bands == 0 {
            return Err("n_bands: must be positive".into());
        }
        if self.az_bins < 2 || self.el_bins < 2 {
            return Err(format!(
                "az_bins/el_bins: need at least 2 each, got {}/{}",
                self.az_bins, self.el_bins
            ));
        }
        if !(self.train.learning_rate.is_finite() && self.train.learning_rate > 0.0) {
            return Err(format!(
                "train.learning_rate: must be positive, got {}",
                self.train.learning_rate
            ));
        }
        if !(self.train.gamma.is_finite() && self.train.gamma >= 0.0) {
            return Err(format!(
                "train.gamma: must be nonnegative, got {}",
                self.train.gamma
            ));
        }
        if self.train.batch_size == 0 || self.train.max_epochs == 0 {
            return Err("train.batch_size/max_epochs: must be positive".into());
        }
        Ok(())
    }

    /// Resolves the geometry field: builtin name first, then file path.
    pub fn resolve_geometry(&self) -> Result<ArrayGeometry, String> {
        if let Ok(g) = ArrayGeometry::builtin(&self.geometry) {
            return Ok(g);
        }
        let path = Path::new(&self.geometry);
        if path.exists() {
            return ArrayGeometry::load(path)
                .map_err(|e| format!("geometry: failed to load {}: {e}", self.geometry));
        }
        Err(format!(
            "geometry: \"{}\" is not a builtin (em32, tetra) or an existing file",
            self.geometry
        ))
    }

    pub fn tessellation(&self) -> Result<Tessellation, String> {
        fibonacci_tessellation(self.tessellation_points, self.tessellation_neighbors)
            .map_err(|e| format!("tessellation: {e}"))
    }

    pub fn band_config(&self) -> BandConfig {
        BandConfig {
            f_lo_hz: self.f_lo_hz,
            f_hi_hz: self.f_hi_hz,
            n_bands: self.n_bands,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.train.learning_rate,
            gamma: self.train.gamma,
            batch_size: self.train.batch_size,
            max_epochs: self.train.max_epochs,
            patience: self.train.patience,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml();
        let back = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn custom_round_trips() {
        let mut cfg = ExperimentConfig::default();
        cfg.geometry = "tetra".into();
        cfg.tessellation_points = 162;
        cfg.seed = 0xdead_beef_0bad_cafe;
        cfg.train.learning_rate = 3e-5;
        let back = ExperimentConfig::parse(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn huge_seed_round_trips_as_hex() {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = u64::MAX - 17;
        let text = cfg.to_toml();
        assert!(text.contains("seed = \"ffffffffffffffee\""), "{text}");
        assert_eq!(ExperimentConfig::parse(&text).unwrap().seed, cfg.seed);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = ExperimentConfig::parse("banana = 3\n").unwrap_err();
        assert!(err.contains("banana"), "{err}");
    }

    #[test]
    fn unknown_nested_key_rejected() {
        assert!(ExperimentConfig::parse("[train]\nmomentum = 0.9\n").is_err());
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg = ExperimentConfig::parse("geometry = \"tetra\"\n").unwrap();
        assert_eq!(cfg.geometry, "tetra");
        assert_eq!(cfg.tessellation_points, 242);
        assert_eq!(cfg.n_bands, 9);
    }

    #[test]
    fn bad_geometry_name_is_a_config_error() {
        let cfg = ExperimentConfig::parse("geometry = \"octo\"\n").unwrap();
        let err = cfg.resolve_geometry().unwrap_err();
        assert!(err.contains("geometry"), "{err}");
        assert!(err.contains("octo"), "{err}");
    }

    #[test]
    fn validation_catches_band_edges() {
        assert!(ExperimentConfig::parse("f_lo_hz = 5000.0\nf_hi_hz = 1000.0\n").is_err());
        assert!(ExperimentConfig::parse("f_hi_hz = 9000.0\n").is_err());
    }

    #[test]
    fn validation_catches_hop_above_window() {
        assert!(ExperimentConfig::parse("window_len = 64\nhop = 128\n").is_err());
    }
}
