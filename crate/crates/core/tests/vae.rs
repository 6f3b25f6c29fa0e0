use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use reverb_doa::features::InputSample;
use reverb_doa::vae::*;
use reverb_doa::Tensor;

fn random_input(net: &NetConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..net.input_len()).map(|_| rng.random_range(0.0..1.0)).collect()
}

fn normals(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn ln_normal_unit(x: &[f64], mu: &[f64]) -> f64 {
    x.iter().zip(mu).map(|(a, m)| -0.5 * ((a - m).powi(2) + ln_two_pi())).sum()
}

/// `C(x, y)` assembled by hand from the three forward passes.
fn naive_c(p: &ModelParams<f64>, x: &[f64], y: usize, eps: &[f64]) -> f64 {
    let (mu, var) = inference_forward(p, x, y).unwrap();
    let z: Vec<f64> = (0..mu.len()).map(|i| mu[i] + var[i].sqrt() * eps[i]).collect();
    let mean = generative_forward(p, y, &z).unwrap();
    let lpx = ln_normal_unit(x, &mean);
    let lpz = ln_normal_unit(&z, &vec![0.0; z.len()]);
    let lqz: f64 = (0..z.len()).map(|i| -0.5 * ((z[i] - mu[i]).powi(2) / var[i] + var[i].ln() + ln_two_pi())).sum();
    let t = p.net.classes as f64;
    -(lpx + (1.0 / t).ln() + lpz - lqz)
}

#[test]
fn factored_unlabeled_term_matches_direct_expectation() {
    let net = NetConfig::tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst: f64 = 0.0;
    for cfg in 0..100u64 {
        let p = ModelParams::<f64>::init(net, cfg).unwrap();
        let x = random_input(&net, &mut rng);
        let eps = normals(net.latent, &mut rng);
        let d = unlabeled_objective(&p, &x, &eps).unwrap();
        let q = classifier_forward(&p, &[&x]).unwrap();
        let q = q.data();
        let expect: f64 = (0..net.classes).map(|y| q[y] * naive_c(&p, &x, y, &eps)).sum::<f64>()
            + q.iter().map(|v| v * v.ln()).sum::<f64>();
        worst = worst.max((d - expect).abs());
    }
    assert!(worst < 1e-10, "{worst}");
}

#[test]
fn labeled_cost_matches_hand_assembly() {
    let net = NetConfig::tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for seed in 0..10 {
        let p = ModelParams::<f64>::init(net, seed).unwrap();
        let x = random_input(&net, &mut rng);
        let eps = normals(net.latent, &mut rng);
        let y = (seed % 3) as usize;
        let (c, aux) = labeled_objective(&p, &x, y, &eps).unwrap();
        assert!((c - naive_c(&p, &x, y, &eps)).abs() < 1e-10);
        let q = classifier_forward(&p, &[&x]).unwrap();
        assert!((aux + q.data()[y].ln()).abs() < 1e-12);
    }
}

#[test]
fn zero_model_has_closed_form_cost() {
    let net = NetConfig::standard(37);
    let p = ModelParams::<f64>::zeros(net).unwrap();
    let x = vec![0.0; net.input_len()];
    let (c, aux) = labeled_objective(&p, &x, 4, &[0.0, 0.0]).unwrap();
    let expect = 2048.0 * ln_two_pi() + 37f64.ln();
    assert!((c - expect).abs() < 1e-9);
    assert!((c - 3767.6).abs() < 0.1);
    assert!((aux - 37f64.ln()).abs() < 1e-12);
}

fn tiny_batch(seed: u64) -> (Vec<Vec<f64>>, Vec<usize>, Vec<f64>, Vec<Vec<f64>>, Vec<f64>) {
    let net = NetConfig::tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lab: Vec<Vec<f64>> = (0..2).map(|_| random_input(&net, &mut rng)).collect();
    let unl: Vec<Vec<f64>> = (0..2).map(|_| random_input(&net, &mut rng)).collect();
    let le = normals(2 * net.latent, &mut rng);
    let ue = normals(2 * net.latent, &mut rng);
    (lab, vec![0, 2], le, unl, ue)
}

/// Worst per-tensor relative L2 error between `grads` and central
/// differences of `value`.
fn fd_error(p: &ModelParams<f64>, grads: &[Tensor<f64>], value: impl Fn(&ModelParams<f64>) -> f64) -> f64 {
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (s, g) in grads.iter().enumerate() {
        let mut num = vec![0.0; g.numel()];
        for (k, n) in num.iter_mut().enumerate() {
            let mut q = p.clone();
            q.tensors[s].data_mut()[k] += h;
            let up = value(&q);
            q.tensors[s].data_mut()[k] -= 2.0 * h;
            *n = (up - value(&q)) / (2.0 * h);
        }
        let diff = g.data().iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let na = g.data().iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = num.iter().map(|a| a * a).sum::<f64>().sqrt();
        if na.max(nn) > 1e-8 {
            worst = worst.max(diff / na.max(nn));
        }
    }
    worst
}

#[test]
fn objective_gradient_matches_finite_differences() {
    let net = NetConfig::tiny();
    let p = ModelParams::<f64>::init(net, 3).unwrap();
    let (lab, ys, le, unl, ue) = tiny_batch(8);
    let lr: Vec<&[f64]> = lab.iter().map(|v| v.as_slice()).collect();
    let ur: Vec<&[f64]> = unl.iter().map(|v| v.as_slice()).collect();
    let batch = ObjectiveBatch { labeled: &lr, labels: &ys, labeled_eps: &le, unlabeled: &ur, unlabeled_eps: &ue };
    let alpha = 7.0;
    let (_, grads) = objective_gradients(&p, batch, alpha, true).unwrap();
    let worst = fd_error(&p, &grads, |q| objective_gradients(q, batch, alpha, false).unwrap().0.j_alpha(alpha));
    assert!(worst < 1e-4, "{worst}");
}

#[test]
fn objective_is_additive_over_batches() {
    let net = NetConfig::tiny();
    let p = ModelParams::<f64>::init(net, 4).unwrap();
    let (lab, ys, le, unl, ue) = tiny_batch(2);
    let lr: Vec<&[f64]> = lab.iter().map(|v| v.as_slice()).collect();
    let ur: Vec<&[f64]> = unl.iter().map(|v| v.as_slice()).collect();
    let m = net.latent;
    let full = ObjectiveBatch { labeled: &lr, labels: &ys, labeled_eps: &le, unlabeled: &ur, unlabeled_eps: &ue };
    let (whole, gw) = objective_gradients(&p, full, 3.0, false).unwrap();
    let mut sum = 0.0;
    let mut gsum: Vec<Tensor<f64>> = p.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect();
    for i in 0..2 {
        let part = ObjectiveBatch {
            labeled: &lr[i..i + 1],
            labels: &ys[i..i + 1],
            labeled_eps: &le[i * m..(i + 1) * m],
            unlabeled: &ur[i..i + 1],
            unlabeled_eps: &ue[i * m..(i + 1) * m],
        };
        let (v, g) = objective_gradients(&p, part, 3.0, false).unwrap();
        sum += v.j_alpha(3.0);
        for (a, b) in gsum.iter_mut().zip(&g) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }
    assert!((whole.j_alpha(3.0) - sum).abs() < 1e-9 * sum.abs());
    for (a, b) in gw.iter().zip(&gsum) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-9 * (1.0 + x.abs()));
        }
    }
}

#[test]
fn supervised_gradient_matches_finite_differences() {
    let net = NetConfig::tiny();
    let p = ModelParams::<f64>::init(net, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let xs: Vec<Vec<f64>> = (0..3).map(|_| random_input(&net, &mut rng)).collect();
    let xr: Vec<&[f64]> = xs.iter().map(|v| v.as_slice()).collect();
    let ys = [2, 0, 1];
    let (loss, g) = supervised_gradients(&p, &xr, &ys, true).unwrap();
    let q = classifier_forward(&p, &xr).unwrap();
    let direct: f64 = ys.iter().enumerate().map(|(i, &y)| -q.data()[i * 3 + y].ln()).sum();
    assert!((loss - direct).abs() < 1e-12);
    for (s, t) in Slot::ALL.iter().zip(&g) {
        if !s.is_classifier() {
            assert!(t.data().iter().all(|&v| v == 0.0), "{}", s.name());
        }
    }
    let worst = fd_error(&p, &g, |q| supervised_gradients(q, &xr, &ys, false).unwrap().0);
    assert!(worst < 1e-5, "{worst}");
}

fn sample(phase: Vec<f64>, label: Option<usize>) -> InputSample {
    InputSample { phase, label, start_frame: 0, normalized: true }
}

#[test]
fn tiny_model_memorizes_a_handful_of_samples() {
    let net = NetConfig::tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let labeled: Vec<InputSample> = (0..6).map(|i| sample(random_input(&net, &mut rng), Some(i % 3))).collect();
    let mut cfg = TrainConfig::standard(6, 10.0, 1);
    cfg.lr = 1e-2;
    cfg.batch = 6;
    cfg.epochs = 150;
    let (p, report) = train_vae_ssl::<f64>(net, &labeled, &labeled, &labeled, &cfg).unwrap();
    assert_eq!(report.best_val_acc, 100.0);
    let xs: Vec<&[f64]> = labeled.iter().map(|s| s.phase.as_slice()).collect();
    let pred = predict_indices(&p, &xs).unwrap();
    assert_eq!(pred, vec![0, 1, 2, 0, 1, 2]);
    let first = &report.epochs[0];
    let last = report.epochs.last().unwrap();
    assert!(last.j_alpha < first.j_alpha);
}

#[test]
fn training_is_deterministic() {
    let net = NetConfig::tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let labeled: Vec<InputSample> = (0..3).map(|i| sample(random_input(&net, &mut rng), Some(i))).collect();
    let unlabeled: Vec<InputSample> = (0..7).map(|_| sample(random_input(&net, &mut rng), None)).collect();
    let mut cfg = TrainConfig::standard(3, 20.0, 4);
    cfg.batch = 4;
    cfg.epochs = 4;
    cfg.lr = 1e-3;
    let a = train_vae_ssl::<f64>(net, &labeled, &unlabeled, &labeled, &cfg).unwrap();
    let b = train_vae_ssl::<f64>(net, &labeled, &unlabeled, &labeled, &cfg).unwrap();
    assert_eq!(a.0.tensors, b.0.tensors);
    assert_eq!(a.1, b.1);
    cfg.seed = 5;
    let c = train_vae_ssl::<f64>(net, &labeled, &unlabeled, &labeled, &cfg).unwrap();
    assert_ne!(a.0.tensors, c.0.tensors);
}

#[test]
fn label_budget_must_cover_every_class() {
    let net = NetConfig::tiny();
    let labeled = vec![sample(vec![0.5; net.input_len()], Some(0))];
    let cfg = TrainConfig::standard(4, 10.0, 1);
    assert!(matches!(train_supervised_cnn::<f64>(net, &labeled, &labeled, &cfg), Err(VaeError::Config(_))));
}

#[test]
fn checkpoints_round_trip() {
    let net = NetConfig::tiny();
    let p = ModelParams::<f64>::init(net, 2).unwrap();
    let mut m = CheckpointManifest::describe("vae-ssl", &net);
    m.alpha = 50.0;
    let dir = tempfile::tempdir().unwrap();
    let (raw, json) = save_checkpoint(dir.path(), "m", &p, &m).unwrap();
    assert!(raw.ends_with("m.ckpt") && json.ends_with("m.json"));
    let (back, bm) = load_checkpoint(&json).unwrap();
    assert_eq!(back.tensors, p.tensors);
    assert_eq!(bm, m);
    std::fs::write(&raw, [0u8; 8]).unwrap();
    assert!(matches!(load_checkpoint(&raw), Err(VaeError::Format { .. })));
}
