//! RTF-phase input samples from two-channel recordings.
//!
//! Each STFT frame gives one single-frame RTF estimate per bin,
//! `H(k) = D2(k) conj(D1(k)) / |D1(k)|^2`, i.e. the ratio `D2/D1` with
//! channel 1 as reference. A sample is the wrapped phase of `P` consecutive
//! RTF frames, stored as a `P x K` row-major grid (one row per frame).

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::room_sim::MicSignals;

/// Bins with `|D1(k)|^2` below this are treated as dead.
pub const DEAD_BIN_POWER: f64 = 1e-30;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("signal of {len} samples is shorter than one {nfft}-point frame")]
    TooShort { len: usize, nfft: usize },
    #[error("need at least {needed} frames for a window, got {got}")]
    TooFewFrames { needed: usize, got: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("empty dataset")]
    Empty,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed feature file: {msg}")]
    Format { path: PathBuf, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub nfft: usize,
    pub hop: usize,
}

impl Default for StftConfig {
    /// 256-point Hamming frames with 50% overlap.
    fn default() -> Self {
        StftConfig { nfft: 256, hop: 128 }
    }
}

impl StftConfig {
    /// Retained bins `K = nfft / 2` (DC up to, excluding, Nyquist).
    pub fn bins(&self) -> usize {
        self.nfft / 2
    }

    pub fn frame_count(&self, len: usize) -> usize {
        if len < self.nfft {
            0
        } else {
            (len - self.nfft) / self.hop + 1
        }
    }
}

/// Periodic Hamming window.
pub fn hamming(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

pub type Spectrum = Vec<Complex64>;

/// Short-time spectra with a reusable FFT plan.
pub struct Stft {
    cfg: StftConfig,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(cfg: StftConfig) -> Result<Self, FeatureError> {
        if cfg.nfft < 2 || cfg.nfft % 2 != 0 || cfg.hop == 0 {
            return Err(FeatureError::Config(format!("bad STFT setup {cfg:?}")));
        }
        let fft = FftPlanner::new().plan_fft_forward(cfg.nfft);
        Ok(Stft { cfg, window: hamming(cfg.nfft), fft })
    }

    /// Frame `t` covers samples `[t hop, t hop + nfft)`; bins `0..K` are kept.
    pub fn frames(&self, signal: &[f64]) -> Result<Vec<Spectrum>, FeatureError> {
        let n = self.cfg.frame_count(signal.len());
        if n == 0 {
            return Err(FeatureError::TooShort { len: signal.len(), nfft: self.cfg.nfft });
        }
        let mut buf = vec![Complex64::new(0.0, 0.0); self.cfg.nfft];
        Ok((0..n)
            .map(|t| {
                let seg = &signal[t * self.cfg.hop..t * self.cfg.hop + self.cfg.nfft];
                for ((b, &x), &w) in buf.iter_mut().zip(seg).zip(&self.window) {
                    *b = Complex64::new(x * w, 0.0);
                }
                self.fft.process(&mut buf);
                buf[..self.cfg.bins()].to_vec()
            })
            .collect())
    }
}

pub fn stft_frames(signal: &[f64], cfg: StftConfig) -> Result<Vec<Spectrum>, FeatureError> {
    Stft::new(cfg)?.frames(signal)
}

/// Single-frame RTF estimate; `dead[k]` marks bins below the power guard,
/// whose value is set to 1 (phase 0).
#[derive(Debug, Clone, PartialEq)]
pub struct RtfFrame {
    pub values: Vec<Complex64>,
    pub dead: Vec<bool>,
}

impl RtfFrame {
    /// Wrapped phase in `[-pi, pi]`.
    pub fn phase(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().map(|h| h.arg())
    }
}

pub fn estimate_rtf(d1: &[Complex64], d2: &[Complex64]) -> RtfFrame {
    let mut values = Vec::with_capacity(d1.len());
    let mut dead = Vec::with_capacity(d1.len());
    for (a, b) in d1.iter().zip(d2) {
        let psd = a.norm_sqr();
        if psd < DEAD_BIN_POWER {
            values.push(Complex64::new(1.0, 0.0));
            dead.push(true);
        } else {
            values.push(b * a.conj() / psd);
            dead.push(false);
        }
    }
    RtfFrame { values, dead }
}

/// STFT frames of both channels for every recording span, concatenated in
/// stream order, with the DOA label of each frame.
#[derive(Debug, Clone)]
pub struct StreamSpectra {
    pub d1: Vec<Spectrum>,
    pub d2: Vec<Spectrum>,
    pub labels: Vec<usize>,
}

impl StreamSpectra {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn rtf_frames(&self) -> Vec<RtfFrame> {
        self.d1.iter().zip(&self.d2).map(|(a, b)| estimate_rtf(a, b)).collect()
    }
}

/// Frames are computed per recording so no frame mixes two recordings;
/// windows built on top may still straddle a DOA change.
pub fn stream_spectra(sig: &MicSignals, cfg: StftConfig) -> Result<StreamSpectra, FeatureError> {
    let stft = Stft::new(cfg)?;
    let mut out = StreamSpectra { d1: Vec::new(), d2: Vec::new(), labels: Vec::new() };
    for span in &sig.spans {
        let r = span.start..span.start + span.len;
        let f1 = stft.frames(&sig.d1[r.clone()])?;
        let f2 = stft.frames(&sig.d2[r])?;
        out.labels.extend(std::iter::repeat_n(span.doa_index, f1.len()));
        out.d1.extend(f1);
        out.d2.extend(f2);
    }
    Ok(out)
}

/// One classifier input: `P x K` wrapped RTF phases.
#[derive(Debug, Clone, PartialEq)]
pub struct InputSample {
    pub phase: Vec<f64>,
    /// DOA index when every frame of the window shares it.
    pub label: Option<usize>,
    pub start_frame: usize,
    pub normalized: bool,
}

/// Number of windows of `p` frames with the given stride.
pub fn window_count(frames: usize, p: usize, stride: usize) -> usize {
    if frames < p || stride == 0 {
        0
    } else {
        (frames - p) / stride + 1
    }
}

/// Sliding windows of `p` frames. A window is labeled only if all of its
/// frames carry the same DOA.
pub fn build_input_samples(
    frames: &[RtfFrame],
    labels: &[usize],
    p: usize,
    stride: usize,
) -> Result<Vec<InputSample>, FeatureError> {
    if stride == 0 || p == 0 {
        return Err(FeatureError::Config("window length and stride must be positive".into()));
    }
    if labels.len() != frames.len() {
        return Err(FeatureError::Config("one label per frame required".into()));
    }
    if frames.len() < p {
        return Err(FeatureError::TooFewFrames { needed: p, got: frames.len() });
    }
    Ok((0..window_count(frames.len(), p, stride))
        .map(|w| {
            let start = w * stride;
            let phase = frames[start..start + p].iter().flat_map(|f| f.phase()).collect();
            let first = labels[start];
            let label = labels[start..start + p].iter().all(|&l| l == first).then_some(first);
            InputSample { phase, label, start_frame: start, normalized: false }
        })
        .collect())
}

/// Global affine map onto `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub min: f64,
    pub max: f64,
}

impl NormStats {
    pub fn is_degenerate(&self) -> bool {
        !(self.max > self.min)
    }

    pub fn apply(&self, x: f64) -> f64 {
        if self.is_degenerate() {
            0.0
        } else {
            (x - self.min) / (self.max - self.min)
        }
    }
}

/// Fit min/max over every value of every sample and normalize in place.
/// A constant dataset maps to zeros; check [`NormStats::is_degenerate`].
pub fn normalize_unit_interval(samples: &mut [InputSample]) -> Result<NormStats, FeatureError> {
    let mut it = samples.iter().flat_map(|s| s.phase.iter().copied()).peekable();
    if it.peek().is_none() {
        return Err(FeatureError::Empty);
    }
    let (min, max) = it.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let stats = NormStats { min, max };
    apply_normalization(samples, stats);
    Ok(stats)
}

/// Apply stored statistics verbatim (no refit, no clamping).
pub fn apply_normalization(samples: &mut [InputSample], stats: NormStats) {
    for s in samples {
        for v in s.phase.iter_mut() {
            *v = stats.apply(*v);
        }
        s.normalized = true;
    }
}

/// Picks `per_class` labeled windows for every class: the eligible
/// (single-DOA) windows are shuffled under `seed` and the first ones found
/// per class are kept. Returned indices are in stream order.
pub fn select_balanced(
    samples: &[InputSample],
    classes: usize,
    per_class: usize,
    seed: u64,
) -> Result<Vec<usize>, FeatureError> {
    let mut order: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].label.is_some()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut taken = vec![0usize; classes];
    let mut picked = Vec::with_capacity(classes * per_class);
    for i in order {
        let y = samples[i].label.expect("filtered");
        if y < classes && taken[y] < per_class {
            taken[y] += 1;
            picked.push(i);
        }
    }
    if let Some(c) = taken.iter().position(|&n| n < per_class) {
        return Err(FeatureError::Config(format!(
            "class {c} has only {} labeled windows, {per_class} requested",
            taken[c]
        )));
    }
    picked.sort_unstable();
    Ok(picked)
}

/// Largest per-class count available for every class.
pub fn max_balanced(samples: &[InputSample], classes: usize) -> usize {
    let mut n = vec![0usize; classes];
    for s in samples {
        if let Some(y) = s.label.filter(|&y| y < classes) {
            n[y] += 1;
        }
    }
    n.into_iter().min().unwrap_or(0)
}

/// A windowed, optionally normalized feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub meta: FeatureMeta,
    pub samples: Vec<InputSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMeta {
    pub k: usize,
    pub p: usize,
    pub stride: usize,
    pub nfft: usize,
    pub hop: usize,
    pub norm: Option<NormStats>,
    /// Number of RTF frames the windows were cut from.
    pub frame_count: usize,
    pub sample_count: usize,
    pub grid: Vec<f64>,
    /// Per-sample DOA index, -1 for windows spanning a DOA change.
    pub labels: Vec<i64>,
    pub start_frames: Vec<usize>,
    pub source: String,
}

impl FeatureSet {
    pub fn num_classes(&self) -> usize {
        self.meta.grid.len()
    }
}

/// Frames, windows and (optionally) normalizes a recording stream. With
/// `stats = None` normalization is fitted on this set.
pub fn extract_features(
    sig: &MicSignals,
    grid: &[f64],
    stft: StftConfig,
    p: usize,
    stride: usize,
    stats: Option<NormStats>,
    source: &str,
) -> Result<FeatureSet, FeatureError> {
    let spectra = stream_spectra(sig, stft)?;
    let frames = spectra.rtf_frames();
    let mut samples = build_input_samples(&frames, &spectra.labels, p, stride)?;
    let norm = match stats {
        Some(s) => {
            apply_normalization(&mut samples, s);
            s
        }
        None => normalize_unit_interval(&mut samples)?,
    };
    let meta = FeatureMeta {
        k: stft.bins(),
        p,
        stride,
        nfft: stft.nfft,
        hop: stft.hop,
        norm: Some(norm),
        frame_count: frames.len(),
        sample_count: samples.len(),
        grid: grid.to_vec(),
        labels: samples.iter().map(|s| s.label.map_or(-1, |l| l as i64)).collect(),
        start_frames: samples.iter().map(|s| s.start_frame).collect(),
        source: source.to_string(),
    };
    Ok(FeatureSet { meta, samples })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FeatureError + '_ {
    move |source| FeatureError::Io { path: path.to_path_buf(), source }
}

/// Write `<stem>.feat` (little-endian f32, sample-major) and `<stem>.json`.
pub fn save_features(dir: &Path, stem: &str, set: &FeatureSet) -> Result<(PathBuf, PathBuf), FeatureError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let feat = dir.join(format!("{stem}.feat"));
    let json = dir.join(format!("{stem}.json"));
    let mut bytes = Vec::with_capacity(set.samples.len() * set.meta.p * set.meta.k * 4);
    for s in &set.samples {
        for v in &s.phase {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    fs::write(&feat, bytes).map_err(io_err(&feat))?;
    let text = serde_json::to_string_pretty(&set.meta).expect("feature sidecar serializes");
    fs::write(&json, text).map_err(io_err(&json))?;
    Ok((feat, json))
}

/// Load a feature set from its `.feat` or `.json` path.
pub fn load_features(path: &Path) -> Result<FeatureSet, FeatureError> {
    let feat = path.with_extension("feat");
    let json = path.with_extension("json");
    let text = fs::read_to_string(&json).map_err(io_err(&json))?;
    let meta: FeatureMeta =
        serde_json::from_str(&text).map_err(|e| FeatureError::Format { path: json.clone(), msg: e.to_string() })?;
    let bytes = fs::read(&feat).map_err(io_err(&feat))?;
    let per = meta.p * meta.k;
    if bytes.len() != 4 * per * meta.sample_count || meta.labels.len() != meta.sample_count {
        return Err(FeatureError::Format { path: feat, msg: "size does not match sidecar".into() });
    }
    let vals: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    let samples = vals
        .chunks(per.max(1))
        .take(meta.sample_count)
        .enumerate()
        .map(|(i, c)| InputSample {
            phase: c.to_vec(),
            label: usize::try_from(meta.labels[i]).ok(),
            start_frame: meta.start_frames.get(i).copied().unwrap_or(0),
            normalized: meta.norm.is_some(),
        })
        .collect();
    Ok(FeatureSet { meta, samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(phases: &[f64]) -> RtfFrame {
        RtfFrame {
            values: phases.iter().map(|&p| Complex64::from_polar(1.0, p)).collect(),
            dead: vec![false; phases.len()],
        }
    }

    #[test]
    fn frame_count_formula() {
        let cfg = StftConfig::default();
        assert_eq!(cfg.frame_count(16000), 124);
        assert_eq!(stft_frames(&vec![0.0; 16000], cfg).unwrap().len(), 124);
        assert!(matches!(stft_frames(&[0.0; 100], cfg), Err(FeatureError::TooShort { .. })));
    }

    #[test]
    fn zero_signal_gives_zero_spectra() {
        let f = stft_frames(&[0.0; 512], StftConfig::default()).unwrap();
        assert!(f.iter().flatten().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn identical_and_scaled_channels() {
        let d1: Vec<Complex64> = (0..8).map(|k| Complex64::new(1.0 + k as f64, -0.5)).collect();
        let same = estimate_rtf(&d1, &d1);
        assert!(same.values.iter().all(|h| (h - 1.0).norm() < 1e-12));
        let d2: Vec<Complex64> = d1.iter().map(|v| v * 2.0).collect();
        let twice = estimate_rtf(&d1, &d2);
        assert!(twice.values.iter().all(|h| (h - 2.0).norm() < 1e-12));
        assert!(twice.phase().all(|p| p.abs() < 1e-12));
    }

    #[test]
    fn dead_bins_fall_back_to_zero_phase() {
        let d1 = vec![Complex64::new(0.0, 0.0), Complex64::new(1.0, 0.0)];
        let d2 = vec![Complex64::new(0.0, 1.0), Complex64::new(0.0, 1.0)];
        let h = estimate_rtf(&d1, &d2);
        assert_eq!(h.dead, vec![true, false]);
        assert_eq!(h.phase().next().unwrap(), 0.0);
    }

    #[test]
    fn windows_and_labels() {
        let frames: Vec<RtfFrame> = (0..124).map(|_| frame(&[0.1; 4])).collect();
        let labels = vec![3; 124];
        let s = build_input_samples(&frames, &labels, 32, 32).unwrap();
        assert_eq!(s.len(), 3);
        assert!(s.iter().all(|w| w.phase.len() == 32 * 4 && w.label == Some(3)));

        let mut mixed = labels.clone();
        mixed[40] = 4;
        let s = build_input_samples(&frames, &mixed, 32, 32).unwrap();
        assert_eq!(s.iter().map(|w| w.label).collect::<Vec<_>>(), vec![Some(3), None, Some(3)]);
        assert!(matches!(
            build_input_samples(&frames[..10], &labels[..10], 32, 32),
            Err(FeatureError::TooFewFrames { .. })
        ));
    }

    #[test]
    fn balanced_selection() {
        let mk = |l: Option<usize>| InputSample { phase: vec![], label: l, start_frame: 0, normalized: true };
        let s: Vec<InputSample> = [Some(0), Some(1), None, Some(0), Some(1), Some(0)].into_iter().map(mk).collect();
        assert_eq!(max_balanced(&s, 2), 2);
        let one = select_balanced(&s, 2, 1, 9).unwrap();
        assert_eq!(one.len(), 2);
        assert_eq!(one.iter().map(|&i| s[i].label.unwrap()).sum::<usize>(), 1);
        assert_eq!(select_balanced(&s, 2, 2, 9).unwrap(), select_balanced(&s, 2, 2, 9).unwrap());
        assert!(select_balanced(&s, 2, 3, 9).is_err());
    }

    #[test]
    fn normalization_edge_cases() {
        let mut s = vec![InputSample { phase: vec![-PI, 0.0, PI], label: None, start_frame: 0, normalized: false }];
        let st = normalize_unit_interval(&mut s).unwrap();
        assert_eq!(s[0].phase, vec![0.0, 0.5, 1.0]);
        assert_eq!((st.min, st.max), (-PI, PI));

        let mut c = vec![InputSample { phase: vec![0.3; 5], label: None, start_frame: 0, normalized: false }];
        let st = normalize_unit_interval(&mut c).unwrap();
        assert!(st.is_degenerate());
        assert!(c[0].phase.iter().all(|&v| v == 0.0));

        assert!(matches!(normalize_unit_interval(&mut []), Err(FeatureError::Empty)));
    }

    #[test]
    fn stored_stats_are_idempotent_after_first_application() {
        let mut s = vec![InputSample { phase: vec![-1.0, 2.0, 0.5], label: None, start_frame: 0, normalized: false }];
        let st = normalize_unit_interval(&mut s).unwrap();
        let once = s.clone();
        let mut again = once.clone();
        let refit = normalize_unit_interval(&mut again).unwrap();
        assert_eq!(again, once);
        assert_eq!((refit.min, refit.max), (0.0, 1.0));
        assert!(!st.is_degenerate());
    }
}
