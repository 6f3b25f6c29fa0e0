use std::f64::consts::LN_10;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reverb_doa::room_sim::*;

fn design() -> RoomConfig {
    RoomConfig::preset(Preset::Design)
}

#[test]
fn sabine_coefficient_matches_hand_formula() {
    let room = design();
    let alpha = 24.0 * 86.4 * LN_10 / (343.0 * 129.6 * 0.5);
    let beta = inverse_sabine_reflection(&room).unwrap();
    assert!((beta - (1.0 - alpha).sqrt()).abs() < 1e-12);
    // feeding alpha back through Sabine reproduces rt60
    assert!((sabine_rt60(&room, 1.0 - beta * beta) - 0.5).abs() < 1e-9);
}

#[test]
fn long_rt60_drives_beta_to_one() {
    let mut room = design();
    room.rt60 = 1e9;
    assert!(inverse_sabine_reflection(&room).unwrap() > 1.0 - 1e-8);
}

#[test]
fn anechoic_direct_path_lands_at_expected_sample() {
    let room = design();
    let mic = room.mics[0];
    let src = [mic[0] + 1.5, mic[1], mic[2]];
    let len = 200;
    let ir = image_source_rir_with_beta(room.dims, room.c, room.fs, 0.0, src, mic, 0, len, room.sinc_half_width);
    let expect: f64 = 1.5 / 343.0 * 16000.0;
    assert!((expect - 69.97).abs() < 0.01);
    let peak = ir.taps.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
    assert_eq!(peak, 70);
    // centroid of the main lobe sits on the fractional delay
    let lobe: Vec<(f64, f64)> = (67..=73).map(|i| (i as f64, ir.taps[i])).collect();
    let centre = lobe.iter().map(|(i, v)| i * v).sum::<f64>() / lobe.iter().map(|(_, v)| v).sum::<f64>();
    assert!((centre - expect).abs() < 0.05, "{centre}");
    // beta = 0 leaves only the direct path even with reflections enabled
    let ir5 = image_source_rir_with_beta(room.dims, room.c, room.fs, 0.0, src, mic, 5, len, room.sinc_half_width);
    assert_eq!(ir.taps, ir5.taps);
}

#[test]
fn pure_impulse_has_no_decay_region() {
    let ir = ImpulseResponse { taps: vec![0.0, 1.0, 0.0, 0.0], fs: 16000.0 };
    assert!(matches!(rt60_schroeder(&ir), Err(RoomError::InsufficientLength(_))));
}

#[test]
fn exponential_envelope_gives_known_rt60() {
    let fs = 16000.0;
    let tau = 0.05;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let taps: Vec<f64> = (0..(2.0 * fs) as usize)
        .map(|i| {
            let s: f64 = if rng.random::<bool>() { 1.0 } else { -1.0 };
            s * (-(i as f64) / fs / tau).exp()
        })
        .collect();
    // amplitude envelope exp(-t/tau): energy falls 60 dB after 3 ln10 tau = 6.91 tau
    let rt = rt60_schroeder(&ImpulseResponse { taps, fs }).unwrap();
    assert!((rt - 6.91 * tau).abs() < 0.05 * 6.91 * tau, "{rt}");
}

#[test]
fn design_rir_has_target_reverberation_time() {
    let room = design();
    for t in [0, 18, 30] {
        let src = room.source_position(t);
        let beta = room_reflection(&room).unwrap();
        let ir = image_source_rir(&room, src, room.mics[1], max_reflection_order(&room, beta)).unwrap();
        assert!(ir.taps.len() as f64 >= room.rt60 * room.fs);
        let rt = rt60_schroeder(&ir).unwrap();
        assert!((rt - 0.5).abs() <= 0.075, "doa {t}: {rt}");
    }
}

#[test]
fn mirrored_geometry_gives_identical_response() {
    let room = design();
    let src = [1.7, 2.2, 1.0];
    let mic = [3.1, 2.9, 1.3];
    let mirror = |p: Point| [room.dims[0] - p[0], p[1], p[2]];
    let beta = 0.8;
    let a = image_source_rir_with_beta(room.dims, room.c, room.fs, beta, src, mic, 6, 4000, 64.0);
    let b = image_source_rir_with_beta(room.dims, room.c, room.fs, beta, mirror(src), mirror(mic), 6, 4000, 64.0);
    let worst = a.taps.iter().zip(&b.taps).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-12, "{worst}");
}

#[test]
fn reflection_shells_do_not_gain_energy() {
    let room = design();
    let shells = image_shell_energies(&room, 0.83, room.source_position(5), room.mics[0], 12);
    for w in shells.windows(2) {
        assert!(w[1] <= w[0] * (1.0 + 1e-12), "{shells:?}");
    }
}

#[test]
fn fft_convolution_matches_direct() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..3 {
        let a: Vec<f64> = (0..1000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..rng.random_range(1..1000)).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = fft_convolve(&a, &b);
        let d = direct_convolve(&a, &b);
        assert_eq!(f.len(), d.len());
        let worst = f.iter().zip(&d).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-9, "{worst}");
    }
}

fn short_rirs() -> (ImpulseResponse, ImpulseResponse) {
    let room = design();
    let src = room.source_position(10);
    let one = |mic| image_source_rir_with_beta(room.dims, room.c, room.fs, 0.7, src, mic, 3, 1500, 64.0);
    (one(room.mics[0]), one(room.mics[1]))
}

#[test]
fn rendered_snr_is_exact() {
    let (r1, r2) = short_rirs();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s: Vec<f64> = (0..16000).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
    let clean = render_microphone_signals(&r1, &r2, &s, f64::INFINITY, [0, 0]).unwrap();
    let mut y1 = fft_convolve(&s, &r1.taps);
    y1.truncate(s.len());
    assert_eq!(clean.d1, y1);
    let noisy = render_microphone_signals(&r1, &r2, &s, 20.0, [5, 6]).unwrap();
    for (n, c) in [(&noisy.d1, &clean.d1), (&noisy.d2, &clean.d2)] {
        let ps: f64 = c.iter().map(|v| v * v).sum();
        let pn: f64 = n.iter().zip(c.iter()).map(|(a, b)| (a - b).powi(2)).sum();
        let snr = 10.0 * (ps / pn).log10();
        assert!((snr - 20.0).abs() < 0.1, "{snr}");
    }
}

#[test]
fn swapping_microphones_swaps_channels() {
    let room = RoomConfig::preset(Preset::Desk);
    let mut swapped = room.clone();
    swapped.mics = [room.mics[1], room.mics[0]];
    let a = generate_room_dataset(&room, 4).unwrap();
    let b = generate_room_dataset(&swapped, 4).unwrap();
    assert_eq!(a.d1, b.d2);
    assert_eq!(a.d2, b.d1);
}

#[test]
fn desk_dataset_is_deterministic_and_well_formed() {
    let room = RoomConfig::preset(Preset::Desk);
    let a = generate_room_dataset(&room, 1).unwrap();
    let b = generate_room_dataset(&room, 1).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.spans.len(), 38);
    assert_eq!(a.d1.len(), a.d2.len());
    assert_eq!(a.d1.len(), 38 * 16000);
    let mut next = 0;
    for s in &a.spans {
        assert_eq!(s.start, next);
        assert!(s.doa_index < 19);
        next += s.len;
    }
    let c = generate_room_dataset(&room, 2).unwrap();
    assert_ne!(a.d1, c.d1);
}

#[test]
fn design_preset_has_370_recordings() {
    let room = design();
    assert_eq!(room.grid.len() * room.realizations, 370);
    assert!((room.spacing() - 0.08).abs() < 1e-12);
}

#[test]
fn signal_files_round_trip_through_f32() {
    let room = RoomConfig::preset(Preset::Desk);
    let sig = generate_room_dataset(&room, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (path, json) = save_signals(dir.path(), "desk", 1, &room, &sig).unwrap();
    assert!(path.ends_with("desk_1.sig") && json.ends_with("desk_1.json"));
    let (side, back) = load_signals(&path).unwrap();
    assert_eq!(side.spans, sig.spans);
    assert_eq!(side.grid.len(), 19);
    for (a, b) in back.d1.iter().zip(&sig.d1) {
        assert_eq!(*a, *b as f32 as f64);
    }
    assert!(load_signals(&dir.path().join("missing.sig")).is_err());
}
