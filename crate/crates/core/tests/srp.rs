use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reverb_doa::features::{stream_spectra, StftConfig};
use reverb_doa::room_sim::{generate_room_dataset, DoaGrid, Preset, RoomConfig};
use reverb_doa::srp::*;

const FS: f64 = 16000.0;
const NFFT: usize = 256;

fn table() -> SteeringTable {
    SteeringTable::new(0.08, 343.0, FS, NFFT, DoaGrid::full()).unwrap()
}

/// Far-field frames with mic 2 leading mic 1 by `tau` seconds.
fn delayed_frames(tau: f64, frames: usize, seed: u64) -> (Vec<Vec<Complex64>>, Vec<Vec<Complex64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut f1 = vec![];
    let mut f2 = vec![];
    for _ in 0..frames {
        let s: Vec<Complex64> = (0..NFFT / 2)
            .map(|_| Complex64::from_polar(rng.random_range(0.1..2.0), rng.random_range(-PI..PI)))
            .collect();
        // D1 = S, D2 = S e^{+j w tau}: the wave reaches mic 2 earlier
        let d2 = s
            .iter()
            .enumerate()
            .map(|(k, v)| v * Complex64::from_polar(1.0, 2.0 * PI * k as f64 * FS / NFFT as f64 * tau))
            .collect();
        f1.push(s);
        f2.push(d2);
    }
    (f1, f2)
}

#[test]
fn pure_delay_peaks_at_true_direction() {
    let t = table();
    for (i, &tau) in t.delays.iter().enumerate() {
        let (f1, f2) = delayed_frames(tau, 4, i as u64);
        let p = srp_phat_spectrum(&f1, &f2, &t).unwrap();
        assert_eq!(argmax_doa(&p, &t.grid), i, "angle {}", t.grid.angle(i));
        for (j, &v) in p.iter().enumerate() {
            if j != i {
                assert!(v < p[i], "angle {} bin {j}", t.grid.angle(i));
            }
        }
    }
}

#[test]
fn steering_delays_are_bounded_and_odd() {
    let t = table();
    let bound = 0.08 / 343.0;
    for (i, &d) in t.delays.iter().enumerate() {
        assert!(d.abs() <= bound + 1e-18);
        assert!((d + t.delays[t.delays.len() - 1 - i]).abs() < 1e-18);
    }
}

#[test]
fn swapping_channels_mirrors_the_estimate() {
    let t = table();
    let (f1, f2) = delayed_frames(t.delays[9], 3, 1);
    let a = srp_phat_spectrum(&f1, &f2, &t).unwrap();
    let b = srp_phat_spectrum(&f2, &f1, &t).unwrap();
    for (i, v) in a.iter().enumerate() {
        assert!((v - b[b.len() - 1 - i]).abs() < 1e-9);
    }
    let ia = argmax_doa(&a, &t.grid);
    let ib = argmax_doa(&b, &t.grid);
    assert_eq!(t.grid.angle(ia), -t.grid.angle(ib));
}

#[test]
fn phat_ignores_gain_and_common_shift() {
    let t = table();
    let (f1, f2) = delayed_frames(t.delays[25], 3, 2);
    let base = srp_phat_spectrum(&f1, &f2, &t).unwrap();
    let scaled: Vec<Vec<Complex64>> = f2.iter().map(|f| f.iter().map(|v| v * 3.7).collect()).collect();
    let shift = |fr: &Vec<Vec<Complex64>>| -> Vec<Vec<Complex64>> {
        fr.iter()
            .map(|f| f.iter().enumerate().map(|(k, v)| v * Complex64::from_polar(1.0, -2.0 * PI * k as f64 * 5.0 / NFFT as f64)).collect())
            .collect()
    };
    for p in [srp_phat_spectrum(&f1, &scaled, &t).unwrap(), srp_phat_spectrum(&shift(&f1), &shift(&f2), &t).unwrap()] {
        for (a, b) in p.iter().zip(&base) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

fn desk_window_accuracy(room: &RoomConfig) -> f64 {
    let sig = generate_room_dataset(room, 1).unwrap();
    let sp = stream_spectra(&sig, StftConfig::default()).unwrap();
    let table = SteeringTable::new(room.spacing(), room.c, room.fs, NFFT, room.grid.clone()).unwrap();
    let (mut n, mut hit) = (0, 0);
    let mut s = 0;
    while s + 32 <= sp.len() {
        let l = sp.labels[s];
        if sp.labels[s..s + 32].iter().all(|&x| x == l) {
            n += 1;
            if estimate_doa_srp(&sp.d1[s..s + 32], &sp.d2[s..s + 32], &table).unwrap() == l {
                hit += 1;
            }
        }
        s += 32;
    }
    100.0 * hit as f64 / n as f64
}

#[test]
fn anechoic_desk_is_nearly_perfect() {
    let mut room = RoomConfig::preset(Preset::Desk);
    room.max_order = Some(0);
    let acc = desk_window_accuracy(&room);
    assert!(acc >= 95.0, "{acc}");
}

#[test]
fn reverberant_desk_beats_chance() {
    let room = RoomConfig::preset(Preset::Desk);
    let acc = desk_window_accuracy(&room);
    assert!(acc >= 3.0 * 100.0 / 19.0, "{acc}");
}
