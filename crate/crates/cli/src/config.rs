use std::fs;
use std::path::{Path, PathBuf};

use reverb_doa::eval::Method;
use reverb_doa::room_sim::Preset;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::LabError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

/// Everything a run depends on. The JSON config file uses the same field
/// names; command-line flags override it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabConfig {
    pub preset: Preset,
    pub seed: u64,
    /// Labeled windows; defaults to one per DOA. `0` means every
    /// class-balanced labeled window available.
    #[serde(rename = "J")]
    pub j: Option<usize>,
    pub alpha: f64,
    /// Restrict train/evaluate to one method.
    pub method: Option<Method>,
    pub out: PathBuf,
    pub jobs: Option<usize>,
    /// Allow training-scale commands on the full-scale presets.
    pub full: bool,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub batch: Option<usize>,
    pub precision: Option<Precision>,
    pub mc_samples: usize,
    /// Frames per classifier input.
    pub window: usize,
    /// Hop between labeled/evaluated windows, in frames.
    pub stride: usize,
    /// Hop between windows of the unlabeled pool.
    pub unlabeled_stride: Option<usize>,
}

impl Default for LabConfig {
    fn default() -> Self {
        LabConfig {
            preset: Preset::Desk,
            seed: 1,
            j: None,
            alpha: 10.0,
            method: None,
            out: PathBuf::from("runs"),
            jobs: None,
            full: false,
            epochs: None,
            lr: None,
            batch: None,
            precision: None,
            mc_samples: 1,
            window: 32,
            stride: 32,
            unlabeled_stride: None,
        }
    }
}

/// A config with every scale-dependent default filled in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    pub preset: Preset,
    pub seed: u64,
    pub j: Option<usize>,
    pub alpha: f64,
    pub method: Option<Method>,
    pub out: PathBuf,
    pub jobs: Option<usize>,
    pub full: bool,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub precision: Precision,
    pub mc_samples: usize,
    pub window: usize,
    pub stride: usize,
    pub unlabeled_stride: usize,
}

impl LabConfig {
    pub fn from_file(path: &Path) -> Result<Self, LabError> {
        let text = fs::read_to_string(path).map_err(|source| LabError::Io { path: path.to_path_buf(), source })?;
        serde_json::from_str(&text).map_err(|e| LabError::Config(format!("{}: {e}", path.display())))
    }

    pub fn resolve(&self) -> Result<Settings, LabError> {
        let desk = self.preset == Preset::Desk;
        let s = Settings {
            preset: self.preset,
            seed: self.seed,
            j: self.j,
            alpha: self.alpha,
            method: self.method,
            out: self.out.clone(),
            jobs: self.jobs,
            full: self.full,
            epochs: self.epochs.unwrap_or(300),
            lr: self.lr.unwrap_or(if desk { 1e-3 } else { 5e-5 }),
            batch: self.batch.unwrap_or(if desk { 32 } else { 256 }),
            precision: self.precision.unwrap_or(if desk { Precision::F32 } else { Precision::F64 }),
            mc_samples: self.mc_samples,
            window: self.window,
            stride: self.stride,
            unlabeled_stride: self.unlabeled_stride.unwrap_or(if desk { self.stride / 2 } else { self.stride }),
        };
        if !(s.alpha > 0.0 && s.alpha.is_finite()) {
            return Err(LabError::Config(format!("alpha must be positive, got {}", s.alpha)));
        }
        if !(s.lr > 0.0 && s.lr.is_finite()) || s.batch == 0 || s.epochs == 0 || s.mc_samples == 0 {
            return Err(LabError::Config("lr, batch, epochs and mc_samples must be positive".into()));
        }
        if s.window == 0 || s.stride == 0 || s.unlabeled_stride == 0 {
            return Err(LabError::Config("window and strides must be positive".into()));
        }
        if s.jobs == Some(0) {
            return Err(LabError::Config("--jobs must be at least 1".into()));
        }
        Ok(s)
    }
}

impl Settings {
    /// Training-scale commands on the full-scale presets need `--full`, and
    /// full-scale training always uses the design room.
    pub fn check_training_scale(&self) -> Result<(), LabError> {
        if self.preset.is_full_scale() && !self.full {
            return Err(LabError::Config(format!(
                "preset {} is full-scale (hours of compute); pass --full to run it",
                self.preset
            )));
        }
        if self.full && self.preset != Preset::Design && self.preset != Preset::Desk {
            return Err(LabError::Config(format!("train on the design preset, not {}", self.preset)));
        }
        Ok(())
    }

    /// sha256 over the canonical JSON form.
    pub fn digest(&self) -> String {
        let text = serde_json::to_string(self).expect("settings serialize");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_defaults() {
        let s = LabConfig::default().resolve().unwrap();
        assert_eq!((s.epochs, s.batch, s.unlabeled_stride), (300, 32, 16));
        assert_eq!(s.precision, Precision::F32);
    }

    #[test]
    fn full_scale_presets_need_full() {
        let mut c = LabConfig { preset: Preset::Design, ..Default::default() };
        assert!(matches!(c.resolve().unwrap().check_training_scale(), Err(LabError::Config(_))));
        c.full = true;
        let s = c.resolve().unwrap();
        s.check_training_scale().unwrap();
        assert_eq!((s.lr, s.batch), (5e-5, 256));
        c.preset = Preset::Test1;
        assert!(c.resolve().unwrap().check_training_scale().is_err());
    }

    #[test]
    fn digest_tracks_config() {
        let a = LabConfig::default().resolve().unwrap();
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.alpha = 20.0;
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn json_round_trip_uses_flag_names() {
        let c: LabConfig = serde_json::from_str(r#"{"J": 38, "alpha": 50, "preset": "desk", "jobs": 2}"#).unwrap();
        assert_eq!((c.j, c.alpha, c.jobs), (Some(38), 50.0, Some(2)));
        assert!(serde_json::from_str::<LabConfig>(r#"{"bogus": 1}"#).is_err());
    }
}
