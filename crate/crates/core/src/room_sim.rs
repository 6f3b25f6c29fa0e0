//! Two-microphone reverberant recordings from the image-source method.
//!
//! Recordings follow `d_i = a_i * s + u_i` with `a_i` the room impulse
//! response between source and microphone `i`, `s` white Gaussian source
//! signal and `u_i` white Gaussian sensor noise at a fixed per-channel SNR.

use std::f64::consts::{LN_10, PI};
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Point = [f64; 3];

#[derive(Debug, Error)]
pub enum RoomError {
    #[error("infeasible room: absorption {absorption:.4} >= 1 for rt60 {rt60} s")]
    Infeasible { absorption: f64, rt60: f64 },
    #[error("geometry: {0}")]
    Geometry(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("impulse response too short: {0}")]
    InsufficientLength(String),
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed sidecar: {msg}")]
    Format { path: PathBuf, msg: String },
}

/// Candidate azimuths in degrees, strictly increasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoaGrid {
    angles: Vec<f64>,
}

impl DoaGrid {
    pub fn new(angles: Vec<f64>) -> Result<Self, RoomError> {
        if angles.is_empty() || angles.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(RoomError::Config("DOA grid must be nonempty and strictly increasing".into()));
        }
        Ok(DoaGrid { angles })
    }

    /// `count` angles from `start` in steps of `step` degrees.
    pub fn uniform(start: f64, step: f64, count: usize) -> Self {
        DoaGrid { angles: (0..count).map(|i| start + step * i as f64).collect() }
    }

    /// -90..=90 degrees at 5 degree resolution (37 directions).
    pub fn full() -> Self {
        Self::uniform(-90.0, 5.0, 37)
    }

    /// -90..=90 degrees at 10 degree resolution (19 directions).
    pub fn desk() -> Self {
        Self::uniform(-90.0, 10.0, 19)
    }

    pub fn len(&self) -> usize {
        self.angles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.angles.is_empty()
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn angle(&self, index: usize) -> f64 {
        self.angles[index]
    }

    pub fn index_of(&self, angle: f64) -> Option<usize> {
        self.angles.iter().position(|&a| (a - angle).abs() < 1e-9)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Design,
    Validation,
    Test1,
    Test2,
    Desk,
}

impl Preset {
    pub const ALL: [Preset; 5] = [Preset::Design, Preset::Validation, Preset::Test1, Preset::Test2, Preset::Desk];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Design => "design",
            Preset::Validation => "validation",
            Preset::Test1 => "test1",
            Preset::Test2 => "test2",
            Preset::Desk => "desk",
        }
    }

    /// Whether this is one of the four full-scale room configurations.
    pub fn is_full_scale(self) -> bool {
        self != Preset::Desk
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = RoomError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| RoomError::UnknownPreset(s.to_string()))
    }
}

/// Shoebox room with two omnidirectional microphones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomConfig {
    pub dims: Point,
    pub rt60: f64,
    pub c: f64,
    pub fs: f64,
    pub mics: [Point; 2],
    /// Point the source ring is centred on.
    pub source_origin: Point,
    pub source_range: f64,
    pub grid: DoaGrid,
    /// Per-channel SNR in dB; `None` disables sensor noise.
    pub snr_db: Option<f64>,
    pub realizations: usize,
    pub signal_seconds: f64,
    /// Image order override; `Some(0)` gives an anechoic room.
    pub max_order: Option<usize>,
    /// Tune the wall reflection coefficient so the simulated responses decay
    /// at `rt60`, instead of using the Sabine value directly.
    pub calibrate_reflection: bool,
    /// Half-width of the fractional-delay kernel, in samples.
    pub sinc_half_width: f64,
}

impl RoomConfig {
    pub fn preset(preset: Preset) -> Self {
        let dims = [6.0, 6.0, 2.4];
        let centre = [3.0, 3.0, 1.2];
        let half = 0.04;
        let mut cfg = RoomConfig {
            dims,
            rt60: 0.5,
            c: 343.0,
            fs: 16000.0,
            mics: [[centre[0], centre[1] - half, centre[2]], [centre[0], centre[1] + half, centre[2]]],
            source_origin: centre,
            source_range: 1.5,
            grid: DoaGrid::full(),
            snr_db: Some(20.0),
            realizations: 10,
            signal_seconds: 1.0,
            max_order: None,
            calibrate_reflection: true,
            sinc_half_width: 64.0,
        };
        match preset {
            Preset::Design => {}
            Preset::Validation => cfg.rt60 = 0.7,
            Preset::Test1 | Preset::Test2 => {
                cfg.mics[0][1] += 0.005;
                cfg.mics[1][1] -= 0.003;
                if preset == Preset::Test2 {
                    cfg.rt60 = 0.6;
                }
            }
            Preset::Desk => {
                cfg.grid = DoaGrid::desk();
                cfg.realizations = 2;
            }
        }
        cfg
    }

    pub fn volume(&self) -> f64 {
        self.dims.iter().product()
    }

    pub fn surface(&self) -> f64 {
        let [x, y, z] = self.dims;
        2.0 * (x * y + x * z + y * z)
    }

    pub fn spacing(&self) -> f64 {
        distance(self.mics[0], self.mics[1])
    }

    /// Source position for grid direction `doa_index`. Azimuth is measured
    /// from broadside (+x) towards microphone 2 (+y).
    pub fn source_position(&self, doa_index: usize) -> Point {
        let th = self.grid.angle(doa_index).to_radians();
        let o = self.source_origin;
        [o[0] + self.source_range * th.cos(), o[1] + self.source_range * th.sin(), o[2]]
    }

    pub fn samples_per_recording(&self) -> usize {
        (self.signal_seconds * self.fs).round() as usize
    }

    pub fn validate(&self) -> Result<(), RoomError> {
        if !(self.rt60 > 0.0) || !(self.fs > 0.0) || !(self.c > 0.0) {
            return Err(RoomError::Config("rt60, fs and c must be positive".into()));
        }
        if self.dims.iter().any(|&d| !(d > 0.0)) {
            return Err(RoomError::Config("room dimensions must be positive".into()));
        }
        if self.realizations == 0 || self.samples_per_recording() == 0 {
            return Err(RoomError::Config("need at least one realization of nonzero length".into()));
        }
        for m in &self.mics {
            self.check_inside(*m, "microphone")?;
        }
        for t in 0..self.grid.len() {
            self.check_inside(self.source_position(t), "source")?;
        }
        Ok(())
    }

    fn check_inside(&self, p: Point, what: &str) -> Result<(), RoomError> {
        if (0..3).all(|i| p[i] > 0.0 && p[i] < self.dims[i]) {
            Ok(())
        } else {
            Err(RoomError::Geometry(format!("{what} at {p:?} is not strictly inside room {:?}", self.dims)))
        }
    }
}

pub fn distance(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Sabine reverberation time for a uniform absorption coefficient.
pub fn sabine_rt60(room: &RoomConfig, absorption: f64) -> f64 {
    24.0 * room.volume() * LN_10 / (room.c * room.surface() * absorption)
}

/// Uniform wall reflection coefficient reproducing `room.rt60` under Sabine's
/// formula: `beta = sqrt(1 - alpha)`, `alpha = 24 V ln10 / (c S RT60)`.
pub fn inverse_sabine_reflection(room: &RoomConfig) -> Result<f64, RoomError> {
    if !(room.rt60 > 0.0) || !(room.volume() > 0.0) {
        return Err(RoomError::Config("rt60 and room volume must be positive".into()));
    }
    let alpha = 24.0 * room.volume() * LN_10 / (room.c * room.surface() * room.rt60);
    if alpha >= 1.0 {
        return Err(RoomError::Infeasible { absorption: alpha, rt60: room.rt60 });
    }
    Ok((1.0 - alpha).sqrt())
}

/// Smallest order whose image amplitude factor `beta^n` is below 1e-4 of the
/// direct path, capped at `2 ceil(rt60 c / min_dim)`.
pub fn max_reflection_order(room: &RoomConfig, beta: f64) -> usize {
    if let Some(n) = room.max_order {
        return n;
    }
    if beta <= 0.0 {
        return 0;
    }
    let min_dim = room.dims.iter().copied().fold(f64::INFINITY, f64::min);
    let cap = 2 * (room.rt60 * room.c / min_dim).ceil() as usize;
    if beta >= 1.0 {
        return cap;
    }
    let n = ((1e-4f64).ln() / beta.ln()).ceil() as usize;
    n.min(cap)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImpulseResponse {
    pub taps: Vec<f64>,
    pub fs: f64,
}

impl ImpulseResponse {
    pub fn energy(&self) -> f64 {
        self.taps.iter().map(|v| v * v).sum()
    }
}

/// Hann-windowed sinc fractional-delay kernel value at offset `t` samples,
/// nonzero on `|t| < half_width`.
pub fn windowed_sinc(t: f64, half_width: f64) -> f64 {
    if t.abs() >= half_width {
        return 0.0;
    }
    let w = 0.5 * (1.0 + (PI * t / half_width).cos());
    let s = if t.abs() < 1e-12 { 1.0 } else { (PI * t).sin() / (PI * t) };
    w * s
}

/// Adds `gain * windowed_sinc(n - delay)` to every tap in the kernel support.
/// The sine and window cosine are advanced by rotation instead of being
/// re-evaluated per tap.
fn splat_kernel(taps: &mut [f64], delay: f64, gain: f64, half_width: f64) {
    let Some(last) = taps.len().checked_sub(1) else { return };
    let lo = (delay - half_width).ceil().max(0.0);
    let hi = (delay + half_width).floor().min(last as f64);
    if hi < lo {
        return;
    }
    let (lo, hi) = (lo as usize, hi as usize);
    let t0 = lo as f64 - delay;
    let mut sin_pt = (PI * t0).sin();
    let step = PI / half_width;
    let (ds, dc) = step.sin_cos();
    let (mut ws, mut wc) = (step * t0).sin_cos();
    for (i, tap) in taps[lo..=hi].iter_mut().enumerate() {
        let t = t0 + i as f64;
        if t.abs() < half_width {
            let s = if t.abs() < 1e-9 { 1.0 } else { sin_pt / (PI * t) };
            *tap += gain * 0.5 * (1.0 + wc) * s;
        }
        sin_pt = -sin_pt;
        (ws, wc) = (ws * dc + wc * ds, wc * dc - ws * ds);
    }
}

/// One image source: reflection count, distance to the receiver.
#[derive(Debug, Clone, Copy)]
struct Image {
    order: usize,
    dist: f64,
}

fn for_each_image(dims: Point, src: Point, mic: Point, max_order: usize, max_dist: f64, mut f: impl FnMut(Image)) {
    let bound = |l: f64| ((max_dist / (2.0 * l)).ceil() as i64).saturating_add(1).min(max_order as i64 / 2 + 1);
    let (bx, by, bz) = (bound(dims[0]), bound(dims[1]), bound(dims[2]));
    let axis = |m: i64, q: i64, i: usize| -> (f64, usize) {
        let p = (1 - 2 * q) as f64 * src[i] + 2.0 * m as f64 * dims[i] - mic[i];
        (p, (2 * m - q).unsigned_abs() as usize)
    };
    for mx in -bx..=bx {
        for q in 0..2 {
            let (px, nx) = axis(mx, q, 0);
            if nx > max_order || px.abs() > max_dist {
                continue;
            }
            for my in -by..=by {
                for j in 0..2 {
                    let (py, ny) = axis(my, j, 1);
                    if nx + ny > max_order || px.hypot(py) > max_dist {
                        continue;
                    }
                    for mz in -bz..=bz {
                        for k in 0..2 {
                            let (pz, nz) = axis(mz, k, 2);
                            let order = nx + ny + nz;
                            if order > max_order {
                                continue;
                            }
                            let dist = (px * px + py * py + pz * pz).sqrt();
                            if dist <= max_dist {
                                f(Image { order, dist });
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Image-source impulse response with explicit reflection coefficient.
///
/// Each image contributes `beta^order / (4 pi d)` at delay `d / c`, spread
/// over `+-half_width` samples with a Hann-windowed sinc. The response has `len` taps;
/// images arriving later are dropped.
#[allow(clippy::too_many_arguments)]
pub fn image_source_rir_with_beta(
    dims: Point,
    c: f64,
    fs: f64,
    beta: f64,
    src: Point,
    mic: Point,
    max_order: usize,
    len: usize,
    half_width: f64,
) -> ImpulseResponse {
    let mut taps = vec![0.0; len];
    let max_dist = (len as f64 + half_width) * c / fs;
    let beta_pow: Vec<f64> = (0..=max_order).map(|n| beta.powi(n as i32)).collect();
    for_each_image(dims, src, mic, max_order, max_dist, |img| {
        let gain = beta_pow[img.order] / (4.0 * PI * img.dist);
        if gain == 0.0 {
            return;
        }
        splat_kernel(&mut taps, img.dist / c * fs, gain, half_width);
    });
    ImpulseResponse { taps, fs }
}

/// Reflection coefficient whose image-source response has a Schroeder RT60
/// equal to `room.rt60` (within 0.5%).
///
/// Specular image sources in a shoebox decay more slowly than the diffuse
/// field Sabine's formula assumes, so the Sabine coefficient overshoots the
/// target. This bisects on `beta` below the Sabine value, measuring a
/// broadside-source response to microphone 1 of length `2 rt60 fs`.
pub fn calibrated_reflection(room: &RoomConfig) -> Result<f64, RoomError> {
    let sabine = inverse_sabine_reflection(room)?;
    if room.max_order == Some(0) {
        return Ok(sabine);
    }
    let src = room.source_position(room.grid.len() / 2);
    let len = (2.0 * room.rt60 * room.fs).ceil() as usize;
    let measure = |beta: f64| {
        let order = max_reflection_order(room, beta);
        let ir = image_source_rir_with_beta(room.dims, room.c, room.fs, beta, src, room.mics[0], order, len, room.sinc_half_width);
        rt60_schroeder(&ir)
    };
    let (mut lo, mut hi) = (0.0, sabine);
    if measure(hi)? <= room.rt60 {
        return Ok(sabine);
    }
    let mut beta = 0.5 * (lo + hi);
    for _ in 0..40 {
        beta = 0.5 * (lo + hi);
        let rt = measure(beta).unwrap_or(0.0);
        if (rt - room.rt60).abs() < 5e-3 * room.rt60 {
            break;
        }
        if rt > room.rt60 {
            hi = beta;
        } else {
            lo = beta;
        }
    }
    Ok(beta)
}

/// Reflection coefficient used for dataset generation.
pub fn room_reflection(room: &RoomConfig) -> Result<f64, RoomError> {
    if room.calibrate_reflection {
        calibrated_reflection(room)
    } else {
        inverse_sabine_reflection(room)
    }
}

/// Impulse response length: the RT60 span for reverberant rooms, the direct
/// path plus kernel support for anechoic ones.
pub fn rir_length(room: &RoomConfig, src: Point, mic: Point, max_order: usize) -> usize {
    let direct = (distance(src, mic) / room.c * room.fs + room.sinc_half_width).ceil() as usize + 1;
    if max_order == 0 {
        direct
    } else {
        direct.max((room.rt60 * room.fs).ceil() as usize)
    }
}

/// Image-source impulse response between `src` and `mic` for `room`.
pub fn image_source_rir(room: &RoomConfig, src: Point, mic: Point, max_order: usize) -> Result<ImpulseResponse, RoomError> {
    room.check_inside(src, "source")?;
    room.check_inside(mic, "microphone")?;
    if distance(src, mic) < 1e-9 {
        return Err(RoomError::Geometry("source and microphone coincide".into()));
    }
    let beta = room_reflection(room)?;
    let len = rir_length(room, src, mic, max_order);
    Ok(image_source_rir_with_beta(room.dims, room.c, room.fs, beta, src, mic, max_order, len, room.sinc_half_width))
}

/// Summed squared image amplitudes per reflection order.
pub fn image_shell_energies(room: &RoomConfig, beta: f64, src: Point, mic: Point, max_order: usize) -> Vec<f64> {
    let mut shells = vec![0.0; max_order + 1];
    for_each_image(room.dims, src, mic, max_order, f64::INFINITY, |img| {
        shells[img.order] += (beta.powi(img.order as i32) / (4.0 * PI * img.dist)).powi(2);
    });
    shells
}

/// Reverberation time from Schroeder backward integration.
///
/// The energy decay curve is fitted by least squares between -5 dB and
/// -35 dB and extrapolated to 60 dB of decay. The fit region must span at
/// least one millisecond.
pub fn rt60_schroeder(ir: &ImpulseResponse) -> Result<f64, RoomError> {
    let mut edc = vec![0.0; ir.taps.len()];
    let mut acc = 0.0;
    for (e, &h) in edc.iter_mut().zip(&ir.taps).rev() {
        acc += h * h;
        *e = acc;
    }
    if acc <= 0.0 {
        return Err(RoomError::InsufficientLength("zero-energy response".into()));
    }
    let db: Vec<f64> = edc.iter().map(|&e| 10.0 * (e / acc).log10()).collect();
    let start = db.iter().position(|&v| v <= -5.0);
    let end = db.iter().position(|&v| v <= -35.0);
    let (Some(start), Some(end)) = (start, end) else {
        return Err(RoomError::InsufficientLength("decay does not reach -35 dB".into()));
    };
    let min_len = (ir.fs * 1e-3).ceil() as usize;
    if end <= start || end - start < min_len.max(2) {
        return Err(RoomError::InsufficientLength("no measurable decay region".into()));
    }
    let n = (end - start) as f64;
    let (mut st, mut sy, mut stt, mut sty) = (0.0, 0.0, 0.0, 0.0);
    for (i, &y) in db.iter().enumerate().take(end).skip(start) {
        let t = i as f64 / ir.fs;
        st += t;
        sy += y;
        stt += t * t;
        sty += t * y;
    }
    let slope = (n * sty - st * sy) / (n * stt - st * st);
    if !(slope < 0.0) {
        return Err(RoomError::InsufficientLength("energy decay curve is not decreasing".into()));
    }
    Ok(-60.0 / slope)
}

/// Full linear convolution via FFT.
pub fn fft_convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let out_len = a.len() + b.len() - 1;
    let n = out_len.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let pad = |x: &[f64]| {
        let mut v: Vec<Complex64> = x.iter().map(|&r| Complex64::new(r, 0.0)).collect();
        v.resize(n, Complex64::new(0.0, 0.0));
        v
    };
    let (mut fa, mut fb) = (pad(a), pad(b));
    fwd.process(&mut fa);
    fwd.process(&mut fb);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x *= y;
    }
    inv.process(&mut fa);
    fa[..out_len].iter().map(|v| v.re / n as f64).collect()
}

/// Full linear convolution by the direct double loop.
pub fn direct_convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, &x) in a.iter().enumerate() {
        for (j, &y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64
}

/// Contiguous run of one recording inside a signal stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub len: usize,
    pub doa_index: usize,
    pub realization: usize,
}

/// Two-channel recordings with per-span DOA labels.
#[derive(Debug, Clone, PartialEq)]
pub struct MicSignals {
    pub d1: Vec<f64>,
    pub d2: Vec<f64>,
    pub fs: f64,
    pub spans: Vec<Span>,
}

/// `d_i = (a_i * s)[..len(s)] + u_i`, with `u_i` white Gaussian noise scaled
/// so the per-channel SNR is exactly `snr_db`. An infinite `snr_db` disables
/// the noise. Each channel's noise stream is drawn from `noise_seeds[i]`.
pub fn render_microphone_signals(
    rir1: &ImpulseResponse,
    rir2: &ImpulseResponse,
    src_signal: &[f64],
    snr_db: f64,
    noise_seeds: [u64; 2],
) -> Result<MicSignals, RoomError> {
    if src_signal.is_empty() {
        return Err(RoomError::Degenerate("empty source signal".into()));
    }
    if snr_db.is_nan() {
        return Err(RoomError::Config("SNR must not be NaN".into()));
    }
    let n = src_signal.len();
    let mut chans = [rir1, rir2].map(|rir| {
        let mut y = fft_convolve(src_signal, &rir.taps);
        y.truncate(n);
        y
    });
    if snr_db.is_finite() {
        for (y, &seed) in chans.iter_mut().zip(&noise_seeds) {
            let p_sig = power(y);
            if !(p_sig > 0.0) {
                return Err(RoomError::Degenerate("silent channel, SNR undefined".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let scale = (p_sig / 10f64.powf(snr_db / 10.0) / power(&u)).sqrt();
            for (v, e) in y.iter_mut().zip(&u) {
                *v += scale * e;
            }
        }
    }
    let [d1, d2] = chans;
    Ok(MicSignals { d1, d2, fs: rir1.fs, spans: vec![Span { start: 0, len: n, doa_index: 0, realization: 0 }] })
}

/// SplitMix64 finaliser used to derive independent stream seeds.
pub fn mix_seed(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5EED_u64, |acc, &p| mix_seed(acc ^ mix_seed(p)))
}

fn point_key(p: Point) -> u64 {
    p.iter().fold(0, |acc, v| mix_seed(acc ^ v.to_bits()))
}

/// Every (realization, DOA) recording for `room`, concatenated into one
/// stream. Realizations are interleaved round-robin: all DOAs of realization
/// 0, then all DOAs of realization 1, and so on, so DOA changes only happen
/// at recording boundaries.
pub fn generate_room_dataset(room: &RoomConfig, seed: u64) -> Result<MicSignals, RoomError> {
    room.validate()?;
    let beta = room_reflection(room)?;
    let order = max_reflection_order(room, beta);
    let rirs: Vec<[ImpulseResponse; 2]> = (0..room.grid.len())
        .into_par_iter()
        .map(|t| {
            let src = room.source_position(t);
            let one = |mic| {
                let len = rir_length(room, src, mic, order);
                image_source_rir_with_beta(room.dims, room.c, room.fs, beta, src, mic, order, len, room.sinc_half_width)
            };
            [one(room.mics[0]), one(room.mics[1])]
        })
        .collect();
    let n = room.samples_per_recording();
    let snr = room.snr_db.unwrap_or(f64::INFINITY);
    let jobs: Vec<(usize, usize)> = (0..room.realizations)
        .flat_map(|r| (0..room.grid.len()).map(move |t| (r, t)))
        .collect();
    let recordings: Vec<MicSignals> = jobs
        .par_iter()
        .map(|&(r, t)| {
            let key = [seed, r as u64, t as u64];
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&key));
            let s: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let noise = room.mics.map(|m| derive_seed(&[key[0], key[1], key[2], point_key(m)]));
            render_microphone_signals(&rirs[t][0], &rirs[t][1], &s, snr, noise)
        })
        .collect::<Result<_, _>>()?;
    let mut out = MicSignals { d1: Vec::with_capacity(n * jobs.len()), d2: Vec::with_capacity(n * jobs.len()), fs: room.fs, spans: Vec::new() };
    for (rec, &(r, t)) in recordings.into_iter().zip(&jobs) {
        out.spans.push(Span { start: out.d1.len(), len: rec.d1.len(), doa_index: t, realization: r });
        out.d1.extend(rec.d1);
        out.d2.extend(rec.d2);
    }
    Ok(out)
}

/// JSON sidecar describing a `.sig` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalSidecar {
    pub preset: String,
    pub seed: u64,
    pub fs: f64,
    pub grid: Vec<f64>,
    pub samples_per_channel: usize,
    /// Channel-major layout: all of channel 1, then all of channel 2.
    pub layout: String,
    pub spans: Vec<Span>,
    pub room: RoomConfig,
}

pub fn signal_paths(dir: &Path, preset: &str, seed: u64) -> (PathBuf, PathBuf) {
    let stem = format!("{preset}_{seed}");
    (dir.join(format!("{stem}.sig")), dir.join(format!("{stem}.json")))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RoomError + '_ {
    move |source| RoomError::Io { path: path.to_path_buf(), source }
}

/// Write `<preset>_<seed>.sig` (little-endian f32, channel-major) and the
/// `.json` sidecar into `dir`. Returns both paths.
pub fn save_signals(
    dir: &Path,
    preset: &str,
    seed: u64,
    room: &RoomConfig,
    sig: &MicSignals,
) -> Result<(PathBuf, PathBuf), RoomError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let (sig_path, json_path) = signal_paths(dir, preset, seed);
    let mut bytes = Vec::with_capacity(8 * sig.d1.len());
    for v in sig.d1.iter().chain(&sig.d2) {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(&sig_path, bytes).map_err(io_err(&sig_path))?;
    let side = SignalSidecar {
        preset: preset.to_string(),
        seed,
        fs: sig.fs,
        grid: room.grid.angles().to_vec(),
        samples_per_channel: sig.d1.len(),
        layout: "channel-major f32le".into(),
        spans: sig.spans.clone(),
        room: room.clone(),
    };
    let mut f = fs::File::create(&json_path).map_err(io_err(&json_path))?;
    let text = serde_json::to_string_pretty(&side).expect("sidecar serializes");
    f.write_all(text.as_bytes()).map_err(io_err(&json_path))?;
    Ok((sig_path, json_path))
}

/// Read a dataset written by [`save_signals`], given the `.sig` or `.json` path.
pub fn load_signals(path: &Path) -> Result<(SignalSidecar, MicSignals), RoomError> {
    let sig_path = path.with_extension("sig");
    let json_path = path.with_extension("json");
    let text = fs::read_to_string(&json_path).map_err(io_err(&json_path))?;
    let side: SignalSidecar = serde_json::from_str(&text)
        .map_err(|e| RoomError::Format { path: json_path.clone(), msg: e.to_string() })?;
    let bytes = fs::read(&sig_path).map_err(io_err(&sig_path))?;
    let n = side.samples_per_channel;
    if bytes.len() != 8 * n {
        return Err(RoomError::Format {
            path: sig_path,
            msg: format!("expected {} bytes, found {}", 8 * n, bytes.len()),
        });
    }
    let vals: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    let sig = MicSignals { d1: vals[..n].to_vec(), d2: vals[n..].to_vec(), fs: side.fs, spans: side.spans.clone() };
    Ok((side, sig))
}
