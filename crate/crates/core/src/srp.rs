//! SRP-PHAT baseline over a discrete DOA grid.
//!
//! Far-field steering with `tau(theta) = spacing sin(theta) / c`. Positive
//! `theta` means the wavefront reaches mic 2 first, matching the geometry in
//! [`crate::room_sim`].

use std::f64::consts::PI;

use num_complex::Complex64;
use thiserror::Error;

use crate::room_sim::DoaGrid;

#[derive(Debug, Error, PartialEq)]
pub enum SrpError {
    #[error("no frames to steer")]
    Empty,
    #[error("channel mismatch: {0}")]
    Mismatch(String),
    #[error("invalid steering setup: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteeringTable {
    pub delays: Vec<f64>,
    pub grid: DoaGrid,
    pub spacing: f64,
    pub c: f64,
    pub fs: f64,
    pub nfft: usize,
}

pub fn steering_delays(spacing: f64, c: f64, grid: &DoaGrid) -> Vec<f64> {
    grid.angles().iter().map(|a| spacing * a.to_radians().sin() / c).collect()
}

impl SteeringTable {
    pub fn new(spacing: f64, c: f64, fs: f64, nfft: usize, grid: DoaGrid) -> Result<Self, SrpError> {
        if !(spacing > 0.0 && c > 0.0 && fs > 0.0) || nfft == 0 {
            return Err(SrpError::Config(format!("spacing {spacing}, c {c}, fs {fs}, nfft {nfft}")));
        }
        Ok(SteeringTable { delays: steering_delays(spacing, c, &grid), grid, spacing, c, fs, nfft })
    }
}

/// Steered power per grid DOA, summed over frames and all bins but DC.
pub fn srp_phat_spectrum(
    frames1: &[Vec<Complex64>],
    frames2: &[Vec<Complex64>],
    table: &SteeringTable,
) -> Result<Vec<f64>, SrpError> {
    if frames1.is_empty() {
        return Err(SrpError::Empty);
    }
    if frames1.len() != frames2.len() {
        return Err(SrpError::Mismatch(format!("{} vs {} frames", frames1.len(), frames2.len())));
    }
    let k = frames1[0].len();
    if frames1.iter().chain(frames2).any(|f| f.len() != k) {
        return Err(SrpError::Mismatch("frames differ in bin count".into()));
    }
    // Accumulate the PHAT-weighted cross spectrum per bin, then steer once.
    let mut cross = vec![Complex64::new(0.0, 0.0); k];
    for (f1, f2) in frames1.iter().zip(frames2) {
        for (acc, (a, b)) in cross.iter_mut().zip(f1.iter().zip(f2)) {
            let g = a * b.conj();
            let n = g.norm();
            if n >= 1e-30 {
                *acc += g / n;
            }
        }
    }
    let df = table.fs / table.nfft as f64;
    Ok(table
        .delays
        .iter()
        .map(|&tau| {
            cross
                .iter()
                .enumerate()
                .skip(1)
                .map(|(bin, g)| (g * Complex64::from_polar(1.0, 2.0 * PI * bin as f64 * df * tau)).re)
                .sum()
        })
        .collect())
}

/// Index of the grid maximum; ties go to the smaller `|theta|`, then to
/// the lower index.
pub fn argmax_doa(power: &[f64], grid: &DoaGrid) -> usize {
    let mut best = 0;
    for (i, &p) in power.iter().enumerate().skip(1) {
        let b = power[best];
        if p > b || (p == b && grid.angle(i).abs() < grid.angle(best).abs()) {
            best = i;
        }
    }
    best
}

/// Returns the grid index of the estimated DOA.
pub fn estimate_doa_srp(
    frames1: &[Vec<Complex64>],
    frames2: &[Vec<Complex64>],
    table: &SteeringTable,
) -> Result<usize, SrpError> {
    let p = srp_phat_spectrum(frames1, frames2, table)?;
    Ok(argmax_doa(&p, &table.grid))
}
