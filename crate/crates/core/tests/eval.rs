use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reverb_doa::eval::*;
use reverb_doa::room_sim::DoaGrid;

#[test]
fn uniform_guessing_approaches_its_expectation() {
    let grid = DoaGrid::full();
    let t = grid.len();
    // exact E|a - b| for independent uniform grid angles
    let mut expect = 0.0;
    for i in 0..t {
        for j in 0..t {
            expect += (grid.angle(i) - grid.angle(j)).abs();
        }
    }
    expect /= (t * t) as f64;
    assert!((expect - 61.62).abs() < 0.01);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 200_000;
    let est: Vec<usize> = (0..n).map(|_| rng.random_range(0..t)).collect();
    let tru: Vec<usize> = (0..n).map(|_| rng.random_range(0..t)).collect();
    let r = evaluate_indices(Method::SrpPhat, "design", None, &est, &tru, &grid).unwrap();
    assert!((r.mae_degrees - expect).abs() < 0.5, "{}", r.mae_degrees);
    assert!((r.accuracy_percent - 100.0 / t as f64).abs() < 0.2, "{}", r.accuracy_percent);
}

#[test]
fn scores_ignore_sample_order() {
    let grid = DoaGrid::desk();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut pairs: Vec<(usize, usize)> = (0..500).map(|_| (rng.random_range(0..19), rng.random_range(0..19))).collect();
    let score = |p: &[(usize, usize)]| {
        let (e, t): (Vec<usize>, Vec<usize>) = p.iter().copied().unzip();
        evaluate_indices(Method::Cnn, "desk", Some(19), &e, &t, &grid).unwrap()
    };
    let a = score(&pairs);
    pairs.shuffle(&mut rng);
    let b = score(&pairs);
    assert!((a.mae_degrees - b.mae_degrees).abs() < 1e-9);
    assert_eq!(a.accuracy_percent, b.accuracy_percent);
    assert_eq!(a.histogram, b.histogram);
}

#[test]
fn perfect_estimates_score_perfectly() {
    let grid = DoaGrid::desk();
    let idx: Vec<usize> = (0..19).chain(0..19).collect();
    let r = evaluate_indices(Method::VaeSsl, "desk", Some(19), &idx, &idx, &grid).unwrap();
    assert_eq!(r.mae_degrees, 0.0);
    assert_eq!(r.accuracy_percent, 100.0);
    let h = normalize_rows(&r.histogram);
    for (i, row) in h.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            assert_eq!(*v, if i == j { 1.0 } else { 0.0 });
        }
    }
}

#[test]
fn bad_inputs_are_rejected() {
    let grid = DoaGrid::desk();
    assert!(matches!(mae_degrees(&[], &[]), Err(EvalError::Empty)));
    assert!(matches!(frame_accuracy(&[1], &[1, 2]), Err(EvalError::Mismatch { .. })));
    assert!(matches!(doa_counts(&[3.0], &[0.0], &grid), Err(EvalError::OffGrid(_))));
    assert!(matches!(evaluate_indices(Method::Cnn, "desk", None, &[19], &[0], &grid), Err(EvalError::OffGrid(_))));
    assert!("svm".parse::<Method>().is_err());
}

#[test]
fn histogram_file_carries_a_full_matrix() {
    let grid = DoaGrid::desk();
    let h = doa_histogram(&[-90.0, 0.0, 10.0], &[-90.0, 0.0, 0.0], &grid).unwrap();
    let csv = histogram_csv(&h, &grid);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 20);
    assert!(lines.iter().all(|l| l.split(',').count() == 20));
    assert_eq!(histogram_file_name(Method::VaeSsl, "desk", Some(19)), "hist_vae-ssl_desk_19.csv");
}

#[test]
fn results_table_round_trips() {
    let grid = DoaGrid::desk();
    let mut results = vec![];
    for (m, j) in [(Method::VaeSsl, Some(19)), (Method::Cnn, Some(19)), (Method::VaeSsl, Some(38)), (Method::SrpPhat, None)] {
        let est = [0usize, 3, 5, 7];
        let tru = [0usize, 3, 6, 9];
        results.push(evaluate_indices(m, "desk", j, &est, &tru, &grid).unwrap());
    }
    let table = emit_results_table(&results);
    let back = parse_results_csv(&table.to_csv()).unwrap();
    assert_eq!(back.len(), results.len());
    for r in &results {
        let e = TableEntry::from(r);
        let got = back.iter().find(|b| b.method == e.method && b.j == e.j).unwrap();
        assert!((got.mae_degrees - e.mae_degrees).abs() < 1e-6);
        assert!((got.accuracy_percent - e.accuracy_percent).abs() < 1e-6);
    }
}
