use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reverb_doa::features::*;
use reverb_doa::room_sim::{generate_room_dataset, Preset, RoomConfig};
use rustfft::FftPlanner;

fn wrap(p: f64) -> f64 {
    (p + PI).rem_euclid(2.0 * PI) - PI
}

fn half_spectrum(x: &[f64]) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(x.len()).process(&mut buf);
    buf.truncate(x.len() / 2);
    buf
}

fn angle_diff(a: f64, b: f64) -> f64 {
    wrap(a - b).abs()
}

#[test]
fn circular_delay_gives_linear_phase() {
    let n_fft = 256;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for delay in [1usize, 3, 7, 20] {
        let x: Vec<f64> = (0..n_fft).map(|_| rng.random_range(-1.0..1.0)).collect();
        let shifted: Vec<f64> = (0..n_fft).map(|i| x[(i + n_fft - delay) % n_fft]).collect();
        let d1 = half_spectrum(&x);
        let d2 = half_spectrum(&shifted);
        let rtf = estimate_rtf(&d1, &d2);
        for (k, ph) in rtf.phase().enumerate() {
            if rtf.dead[k] {
                continue;
            }
            let expect = wrap(-2.0 * PI * (k * delay) as f64 / n_fft as f64);
            assert!(angle_diff(ph, expect) < 1e-2, "delay {delay} bin {k}: {ph} vs {expect}");
        }
    }
}

#[test]
fn sinusoid_peaks_at_its_bin() {
    let cfg = StftConfig::default();
    for m in [5usize, 17, 64, 100] {
        let sig: Vec<f64> = (0..4096).map(|t| (2.0 * PI * m as f64 * t as f64 / 256.0).sin()).collect();
        for frame in stft_frames(&sig, cfg).unwrap() {
            let peak = frame.iter().enumerate().max_by(|a, b| a.1.norm().total_cmp(&b.1.norm())).unwrap().0;
            assert_eq!(peak, m);
        }
    }
}

#[test]
fn one_second_gives_124_frames() {
    let cfg = StftConfig::default();
    assert_eq!(cfg.frame_count(16000), 124);
    assert_eq!(stft_frames(&vec![0.0; 16000], cfg).unwrap().len(), 124);
    assert!(matches!(stft_frames(&[0.0; 100], cfg), Err(FeatureError::TooShort { .. })));
}

#[test]
fn desk_features_have_expected_counts() {
    let room = RoomConfig::preset(Preset::Desk);
    let sig = generate_room_dataset(&room, 1).unwrap();
    let grid = room.grid.angles().to_vec();
    let set = extract_features(&sig, &grid, StftConfig::default(), 32, 32, None, "desk_1").unwrap();
    assert_eq!(set.meta.frame_count, 19 * 2 * 124);
    assert_eq!(set.samples.len(), window_count(19 * 2 * 124, 32, 32));
    assert!(set.samples.iter().all(|s| s.phase.len() == 32 * 128 && s.normalized));
    assert!(set.samples.iter().flat_map(|s| &s.phase).all(|&v| (0.0..=1.0).contains(&v)));
    // stored statistics reproduce the same features
    let again = extract_features(&sig, &grid, StftConfig::default(), 32, 32, set.meta.norm, "desk_1").unwrap();
    assert_eq!(again.samples, set.samples);
    let dir = tempfile::tempdir().unwrap();
    let (feat, _) = save_features(dir.path(), "desk_1", &set).unwrap();
    let back = load_features(&feat).unwrap();
    assert_eq!(back.meta, set.meta);
    assert_eq!(back.samples.len(), set.samples.len());
    for (a, b) in back.samples.iter().zip(&set.samples) {
        assert_eq!(a.label, b.label);
        assert!(a.phase.iter().zip(&b.phase).all(|(x, y)| (x - y).abs() < 1e-6));
    }
}

#[test]
fn labeled_windows_never_mix_directions() {
    let room = RoomConfig::preset(Preset::Desk);
    let sig = generate_room_dataset(&room, 3).unwrap();
    let spectra = stream_spectra(&sig, StftConfig::default()).unwrap();
    let frames = spectra.rtf_frames();
    let samples = build_input_samples(&frames, &spectra.labels, 32, 8).unwrap();
    let mut mixed = 0;
    for s in &samples {
        let labels = &spectra.labels[s.start_frame..s.start_frame + 32];
        match s.label {
            Some(y) => assert!(labels.iter().all(|&l| l == y)),
            None => mixed += 1,
        }
    }
    assert!(mixed > 0);
}

#[test]
fn balanced_selection_is_seeded() {
    let room = RoomConfig::preset(Preset::Desk);
    let sig = generate_room_dataset(&room, 1).unwrap();
    let set = extract_features(&sig, room.grid.angles(), StftConfig::default(), 32, 32, None, "x").unwrap();
    let a = select_balanced(&set.samples, 19, 1, 7).unwrap();
    assert_eq!(a, select_balanced(&set.samples, 19, 1, 7).unwrap());
    let mut seen = vec![0; 19];
    for &i in &a {
        seen[set.samples[i].label.unwrap()] += 1;
    }
    assert!(seen.iter().all(|&n| n == 1));
    let most = max_balanced(&set.samples, 19);
    assert!(most >= 1);
    assert!(select_balanced(&set.samples, 19, most + 1, 7).is_err());
}
