//! Semi-supervised VAE (M2) for DOA classification.
//!
//! Three networks share one parameter store:
//!
//! * classifier `q(y|x)`: two 3x3 conv + ReLU + 2x2 max-pool stages, a
//!   hidden dense layer and a softmax over the `T` candidate directions;
//! * inference `q(z|x,y)`: the same trunk, with the one-of-`T` label joined
//!   at the hidden layer, and a linear head giving the mean and log-variance
//!   of the `M`-dimensional latent code;
//! * generative `p(x|y,z)`: dense layers from `[y, z]` back to the trunk's
//!   feature map, then unpool + transposed conv twice to a linear `P x K`
//!   mean with identity covariance.
//!
//! The label join is realized with a split weight, `W_f f + W_y y`, which is
//! the same map as a dense layer over `[f, y]` but lets the enumeration over
//! all labels reuse `W_f f`.
//!
//! Per sample and label, `-C = ln N(x|mu_x, I) + ln(1/T) + ln N(z|0, I)
//! - ln N(z|mu_z, var_z)` with `z` reparameterized; unlabeled samples
//! contribute `D = sum_y q(y|x) [C(x,y) + ln q(y|x)]`, and labeled samples an
//! extra `alpha * (-ln q(y|x))`.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{AdError, AdamState, Tape, Tensor, Var};
use crate::features::{InputSample, NormStats};
use crate::room_sim::mix_seed;
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum VaeError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("sample {index} is not normalized or has the wrong size")]
    BadInput { index: usize },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Autodiff(#[from] AdError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

/// Network dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NetConfig {
    /// Number of candidate directions `T`.
    pub classes: usize,
    /// Latent dimension `M`.
    pub latent: usize,
    /// Input rows (`P` frames).
    pub rows: usize,
    /// Input columns (`K` bins).
    pub cols: usize,
    pub channels: usize,
    pub hidden: usize,
}

impl NetConfig {
    /// 32x128 inputs, 8-channel convolutions, 200 hidden units, `M = 2`.
    pub fn standard(classes: usize) -> Self {
        NetConfig { classes, latent: 2, rows: 32, cols: 128, channels: 8, hidden: 200 }
    }

    /// Small network for finite-difference checks.
    pub fn tiny() -> Self {
        NetConfig { classes: 3, latent: 2, rows: 4, cols: 8, channels: 2, hidden: 6 }
    }

    pub fn input_len(&self) -> usize {
        self.rows * self.cols
    }

    /// Length of the flattened trunk output.
    pub fn flat(&self) -> usize {
        self.channels * (self.rows / 4) * (self.cols / 4)
    }

    pub fn validate(&self) -> Result<(), VaeError> {
        if self.rows % 4 != 0 || self.cols % 4 != 0 || self.rows == 0 || self.cols == 0 {
            return Err(VaeError::Config(format!("input {}x{} must be a nonzero multiple of 4", self.rows, self.cols)));
        }
        if self.classes < 2 || self.latent == 0 || self.channels == 0 || self.hidden == 0 {
            return Err(VaeError::Config(format!("degenerate network {self:?}")));
        }
        Ok(())
    }
}

/// Parameter tensors, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    ClsConv1W,
    ClsConv1B,
    ClsConv2W,
    ClsConv2B,
    ClsFc1W,
    ClsFc1B,
    ClsOutW,
    ClsOutB,
    InfConv1W,
    InfConv1B,
    InfConv2W,
    InfConv2B,
    InfFc1W,
    InfFc1Y,
    InfFc1B,
    InfHeadW,
    InfHeadB,
    GenFc1W,
    GenFc1B,
    GenFc2W,
    GenFc2B,
    GenTconv1W,
    GenTconv1B,
    GenTconv2W,
    GenTconv2B,
}

impl Slot {
    pub const ALL: [Slot; 25] = [
        Slot::ClsConv1W,
        Slot::ClsConv1B,
        Slot::ClsConv2W,
        Slot::ClsConv2B,
        Slot::ClsFc1W,
        Slot::ClsFc1B,
        Slot::ClsOutW,
        Slot::ClsOutB,
        Slot::InfConv1W,
        Slot::InfConv1B,
        Slot::InfConv2W,
        Slot::InfConv2B,
        Slot::InfFc1W,
        Slot::InfFc1Y,
        Slot::InfFc1B,
        Slot::InfHeadW,
        Slot::InfHeadB,
        Slot::GenFc1W,
        Slot::GenFc1B,
        Slot::GenFc2W,
        Slot::GenFc2B,
        Slot::GenTconv1W,
        Slot::GenTconv1B,
        Slot::GenTconv2W,
        Slot::GenTconv2B,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Slot::ClsConv1W => "classifier.conv1.weight",
            Slot::ClsConv1B => "classifier.conv1.bias",
            Slot::ClsConv2W => "classifier.conv2.weight",
            Slot::ClsConv2B => "classifier.conv2.bias",
            Slot::ClsFc1W => "classifier.fc1.weight",
            Slot::ClsFc1B => "classifier.fc1.bias",
            Slot::ClsOutW => "classifier.out.weight",
            Slot::ClsOutB => "classifier.out.bias",
            Slot::InfConv1W => "inference.conv1.weight",
            Slot::InfConv1B => "inference.conv1.bias",
            Slot::InfConv2W => "inference.conv2.weight",
            Slot::InfConv2B => "inference.conv2.bias",
            Slot::InfFc1W => "inference.fc1.weight",
            Slot::InfFc1Y => "inference.fc1.label_weight",
            Slot::InfFc1B => "inference.fc1.bias",
            Slot::InfHeadW => "inference.head.weight",
            Slot::InfHeadB => "inference.head.bias",
            Slot::GenFc1W => "generative.fc1.weight",
            Slot::GenFc1B => "generative.fc1.bias",
            Slot::GenFc2W => "generative.fc2.weight",
            Slot::GenFc2B => "generative.fc2.bias",
            Slot::GenTconv1W => "generative.tconv1.weight",
            Slot::GenTconv1B => "generative.tconv1.bias",
            Slot::GenTconv2W => "generative.tconv2.weight",
            Slot::GenTconv2B => "generative.tconv2.bias",
        }
    }

    pub fn shape(self, n: &NetConfig) -> Vec<usize> {
        let (c, h, t, m, f) = (n.channels, n.hidden, n.classes, n.latent, n.flat());
        match self {
            Slot::ClsConv1W | Slot::InfConv1W => vec![c, 1, 3, 3],
            Slot::ClsConv2W | Slot::InfConv2W | Slot::GenTconv1W => vec![c, c, 3, 3],
            Slot::ClsConv1B | Slot::ClsConv2B | Slot::InfConv1B | Slot::InfConv2B | Slot::GenTconv1B => vec![c],
            Slot::ClsFc1W | Slot::InfFc1W => vec![h, f],
            Slot::ClsFc1B | Slot::InfFc1B | Slot::GenFc1B => vec![h],
            Slot::ClsOutW => vec![t, h],
            Slot::ClsOutB => vec![t],
            Slot::InfFc1Y => vec![h, t],
            Slot::InfHeadW => vec![2 * m, h],
            Slot::InfHeadB => vec![2 * m],
            Slot::GenFc1W => vec![h, t + m],
            Slot::GenFc2W => vec![f, h],
            Slot::GenFc2B => vec![f],
            Slot::GenTconv2W => vec![c, 1, 3, 3],
            Slot::GenTconv2B => vec![1],
        }
    }

    /// Fan-in used for the default uniform initialization.
    fn fan_in(self, n: &NetConfig) -> usize {
        let (c, h, t, m, f) = (n.channels, n.hidden, n.classes, n.latent, n.flat());
        match self {
            Slot::ClsConv1W | Slot::ClsConv1B | Slot::InfConv1W | Slot::InfConv1B => 9,
            Slot::ClsConv2W | Slot::ClsConv2B | Slot::InfConv2W | Slot::InfConv2B => 9 * c,
            Slot::ClsFc1W | Slot::ClsFc1B => f,
            Slot::InfFc1W | Slot::InfFc1Y | Slot::InfFc1B => f + t,
            Slot::ClsOutW | Slot::ClsOutB | Slot::InfHeadW | Slot::InfHeadB | Slot::GenFc2W | Slot::GenFc2B => h,
            Slot::GenFc1W | Slot::GenFc1B => t + m,
            // transposed kernels count fan-in over their output channels
            Slot::GenTconv1W | Slot::GenTconv1B => 9 * c,
            Slot::GenTconv2W | Slot::GenTconv2B => 9,
        }
    }

    pub fn is_classifier(self) -> bool {
        (self as usize) <= Slot::ClsOutB as usize
    }
}

/// All network weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<S> {
    pub net: NetConfig,
    pub tensors: Vec<Tensor<S>>,
}

impl<S: Scalar> ModelParams<S> {
    pub fn zeros(net: NetConfig) -> Result<Self, VaeError> {
        net.validate()?;
        Ok(ModelParams { net, tensors: Slot::ALL.iter().map(|s| Tensor::zeros(&s.shape(&net))).collect() })
    }

    /// Uniform in `+-1/sqrt(fan_in)` for weights and biases alike.
    pub fn init(net: NetConfig, seed: u64) -> Result<Self, VaeError> {
        net.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed ^ 0x1_417));
        let tensors = Slot::ALL
            .iter()
            .map(|s| {
                let bound = 1.0 / (s.fan_in(&net) as f64).sqrt();
                Tensor::from_fn(&s.shape(&net), |_| S::lit(rng.random_range(-bound..bound)))
            })
            .collect();
        Ok(ModelParams { net, tensors })
    }

    pub fn get(&self, s: Slot) -> &Tensor<S> {
        &self.tensors[s as usize]
    }

    pub fn get_mut(&mut self, s: Slot) -> &mut Tensor<S> {
        &mut self.tensors[s as usize]
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn cast<T: Scalar>(&self) -> ModelParams<T> {
        ModelParams { net: self.net, tensors: self.tensors.iter().map(Tensor::cast).collect() }
    }
}

/// Hex SHA-256 over the network dimensions and the parameter layout.
pub fn architecture_hash(net: &NetConfig) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(net).expect("config serializes"));
    for s in Slot::ALL {
        h.update(s.name().as_bytes());
        for d in s.shape(net) {
            h.update((d as u64).to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Parameters placed on a tape.
struct Bound {
    vars: Vec<Option<Var>>,
}

impl Bound {
    fn new<S: Scalar>(
        tape: &mut Tape<S>,
        p: &ModelParams<S>,
        include: impl Fn(Slot) -> bool,
        trainable: bool,
    ) -> Result<Self, AdError> {
        let mut vars = Vec::with_capacity(Slot::ALL.len());
        for s in Slot::ALL {
            vars.push(if include(s) { Some(tape.leaf(p.get(s).clone(), trainable)?) } else { None });
        }
        Ok(Bound { vars })
    }

    fn get(&self, s: Slot) -> Var {
        self.vars[s as usize].unwrap_or_else(|| panic!("{} not bound", s.name()))
    }
}

fn trunk<S: Scalar>(tape: &mut Tape<S>, b: &Bound, x: Var, first: Slot, n: usize, flat: usize) -> Result<Var, AdError> {
    let [w1, b1, w2, b2] = if first == Slot::ClsConv1W {
        [Slot::ClsConv1W, Slot::ClsConv1B, Slot::ClsConv2W, Slot::ClsConv2B]
    } else {
        [Slot::InfConv1W, Slot::InfConv1B, Slot::InfConv2W, Slot::InfConv2B]
    };
    let h = tape.conv2d(x, b.get(w1), b.get(b1), 1)?;
    let h = tape.relu(h)?;
    let h = tape.max_pool2d(h)?;
    let h = tape.conv2d(h, b.get(w2), b.get(b2), 1)?;
    let h = tape.relu(h)?;
    let h = tape.max_pool2d(h)?;
    tape.reshape(h, &[n, flat])
}

fn classifier_logits<S: Scalar>(tape: &mut Tape<S>, b: &Bound, net: &NetConfig, x: Var, n: usize) -> Result<Var, AdError> {
    let f = trunk(tape, b, x, Slot::ClsConv1W, n, net.flat())?;
    let h = tape.dense(f, b.get(Slot::ClsFc1W), Some(b.get(Slot::ClsFc1B)))?;
    let h = tape.relu(h)?;
    tape.dense(h, b.get(Slot::ClsOutW), Some(b.get(Slot::ClsOutB)))
}

/// Label-independent part of the inference network's hidden layer.
fn inference_features<S: Scalar>(tape: &mut Tape<S>, b: &Bound, net: &NetConfig, x: Var, n: usize) -> Result<Var, AdError> {
    let f = trunk(tape, b, x, Slot::InfConv1W, n, net.flat())?;
    tape.dense(f, b.get(Slot::InfFc1W), Some(b.get(Slot::InfFc1B)))
}

fn inference_heads<S: Scalar>(
    tape: &mut Tape<S>,
    b: &Bound,
    net: &NetConfig,
    features: Var,
    y: Var,
) -> Result<(Var, Var), AdError> {
    let label = tape.dense(y, b.get(Slot::InfFc1Y), None)?;
    let h = tape.add(features, label)?;
    let h = tape.relu(h)?;
    let out = tape.dense(h, b.get(Slot::InfHeadW), Some(b.get(Slot::InfHeadB)))?;
    let mu = tape.slice_last(out, 0, net.latent)?;
    let log_var = tape.slice_last(out, net.latent, 2 * net.latent)?;
    let var = tape.exp(log_var)?;
    Ok((mu, var))
}

fn generative_mean<S: Scalar>(
    tape: &mut Tape<S>,
    b: &Bound,
    net: &NetConfig,
    y: Var,
    z: Var,
    n: usize,
) -> Result<Var, AdError> {
    let yz = tape.concat_last(&[y, z])?;
    let h = tape.dense(yz, b.get(Slot::GenFc1W), Some(b.get(Slot::GenFc1B)))?;
    let h = tape.relu(h)?;
    let h = tape.dense(h, b.get(Slot::GenFc2W), Some(b.get(Slot::GenFc2B)))?;
    let h = tape.relu(h)?;
    let h = tape.reshape(h, &[n, net.channels, net.rows / 4, net.cols / 4])?;
    let h = tape.unpool_transpose_conv2d(h, b.get(Slot::GenTconv1W), b.get(Slot::GenTconv1B), 1)?;
    let h = tape.relu(h)?;
    let h = tape.unpool_transpose_conv2d(h, b.get(Slot::GenTconv2W), b.get(Slot::GenTconv2B), 1)?;
    tape.reshape(h, &[n, net.input_len()])
}

fn one_hot<S: Scalar>(labels: &[usize], classes: usize) -> Tensor<S> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (r, &y) in labels.iter().enumerate() {
        t.data_mut()[r * classes + y] = S::one();
    }
    t
}

fn input_tensor<S: Scalar>(xs: &[&[S]], net: &NetConfig) -> Result<Tensor<S>, AdError> {
    let mut data = Vec::with_capacity(xs.len() * net.input_len());
    for x in xs {
        if x.len() != net.input_len() {
            return Err(AdError::Dimension { op: "input", lhs: vec![x.len()], rhs: vec![net.rows, net.cols] });
        }
        data.extend_from_slice(x);
    }
    Tensor::new(&[xs.len(), 1, net.rows, net.cols], data)
}

/// `C(x, y)` per row, averaged over the Monte-Carlo draws in `eps`
/// (`[draws][rows][M]` flattened).
#[allow(clippy::too_many_arguments)]
fn elbo_cost<S: Scalar>(
    tape: &mut Tape<S>,
    b: &Bound,
    net: &NetConfig,
    x_flat: Var,
    features: Var,
    y: Var,
    eps: &[S],
    rows: usize,
) -> Result<Var, AdError> {
    let m = net.latent;
    let draws = eps.len() / (rows * m);
    let (mu, var) = inference_heads(tape, b, net, features, y)?;
    let zero = tape.constant(Tensor::zeros(&[rows, m]))?;
    let mut total: Option<Var> = None;
    for d in 0..draws {
        let e = tape.constant(Tensor::new(&[rows, m], eps[d * rows * m..(d + 1) * rows * m].to_vec())?)?;
        let z = tape.reparameterize(mu, var, e)?;
        let mean = generative_mean(tape, b, net, y, z, rows)?;
        let lpx = tape.unit_gaussian_log_prob(x_flat, mean)?;
        let lpz = tape.unit_gaussian_log_prob(z, zero)?;
        let lqz = tape.gaussian_log_prob(z, mu, var)?;
        let kl = tape.sub(lpz, lqz)?;
        let neg_c = tape.add(lpx, kl)?;
        total = Some(match total {
            Some(t) => tape.add(t, neg_c)?,
            None => neg_c,
        });
    }
    let neg_c = total.ok_or_else(|| AdError::Contract("no Monte-Carlo draws".into()))?;
    let neg_c = tape.scale(neg_c, S::lit(-1.0 / draws as f64))?;
    tape.add_scalar(neg_c, S::lit((net.classes as f64).ln()))
}

/// Per-row labeled terms: `(C, -ln q(y|x))`.
fn labeled_terms<S: Scalar>(
    tape: &mut Tape<S>,
    b: &Bound,
    net: &NetConfig,
    xs: &[&[S]],
    ys: &[usize],
    eps: &[S],
) -> Result<(Var, Var), AdError> {
    let n = xs.len();
    let x = tape.constant(input_tensor(xs, net)?)?;
    let x_flat = tape.reshape(x, &[n, net.input_len()])?;
    let logits = classifier_logits(tape, b, net, x, n)?;
    let log_q = tape.log_softmax(logits)?;
    let picked = tape.gather(log_q, ys)?;
    let aux = tape.scale(picked, S::lit(-1.0))?;
    let features = inference_features(tape, b, net, x, n)?;
    let y = tape.constant(one_hot(ys, net.classes))?;
    let c = elbo_cost(tape, b, net, x_flat, features, y, eps, n)?;
    Ok((c, aux))
}

/// Per-row unlabeled term `D`, enumerating every label with one shared
/// noise draw per sample (`eps` is `[draws][n][M]`).
fn unlabeled_terms<S: Scalar>(
    tape: &mut Tape<S>,
    b: &Bound,
    net: &NetConfig,
    xs: &[&[S]],
    eps: &[S],
) -> Result<Var, AdError> {
    let (n, t, m) = (xs.len(), net.classes, net.latent);
    let x = tape.constant(input_tensor(xs, net)?)?;
    let logits = classifier_logits(tape, b, net, x, n)?;
    let log_q = tape.log_softmax(logits)?;
    let q = tape.exp(log_q)?;
    let features = inference_features(tape, b, net, x, n)?;
    let features = tape.repeat_rows(features, t)?;
    let x_flat = tape.reshape(x, &[n, net.input_len()])?;
    let x_flat = tape.repeat_rows(x_flat, t)?;
    let labels: Vec<usize> = (0..n * t).map(|r| r % t).collect();
    let y = tape.constant(one_hot(&labels, t))?;
    let draws = eps.len() / (n * m);
    let mut eps_rep = Vec::with_capacity(eps.len() * t);
    for d in 0..draws {
        for i in 0..n {
            let e = &eps[(d * n + i) * m..(d * n + i + 1) * m];
            for _ in 0..t {
                eps_rep.extend_from_slice(e);
            }
        }
    }
    let c = elbo_cost(tape, b, net, x_flat, features, y, &eps_rep, n * t)?;
    let c = tape.reshape(c, &[n, t])?;
    let inner = tape.add(c, log_q)?;
    let weighted = tape.mul(q, inner)?;
    tape.sum_last(weighted)
}

fn values<S: Scalar>(tape: &Tape<S>, v: Var) -> Vec<S> {
    tape.value(v).data().to_vec()
}

/// Class probabilities for each input.
pub fn classifier_forward<S: Scalar>(p: &ModelParams<S>, xs: &[&[S]]) -> Result<Tensor<S>, VaeError> {
    let mut tape = Tape::new();
    let b = Bound::new(&mut tape, p, Slot::is_classifier, false)?;
    let x = tape.constant(input_tensor(xs, &p.net)?)?;
    let logits = classifier_logits(&mut tape, &b, &p.net, x, xs.len())?;
    let pi = tape.softmax(logits)?;
    Ok(tape.value(pi).clone())
}

/// Latent mean and variance for one input and label.
pub fn inference_forward<S: Scalar>(p: &ModelParams<S>, x: &[S], y: usize) -> Result<(Vec<S>, Vec<S>), VaeError> {
    check_label(y, &p.net)?;
    let mut tape = Tape::new();
    let b = Bound::new(&mut tape, p, |s| !s.is_classifier(), false)?;
    let xv = tape.constant(input_tensor(&[x], &p.net)?)?;
    let f = inference_features(&mut tape, &b, &p.net, xv, 1)?;
    let yv = tape.constant(one_hot(&[y], p.net.classes))?;
    let (mu, var) = inference_heads(&mut tape, &b, &p.net, f, yv)?;
    Ok((values(&tape, mu), values(&tape, var)))
}

/// Generative mean `mu_x(y, z)` as a flat `P x K` grid.
pub fn generative_forward<S: Scalar>(p: &ModelParams<S>, y: usize, z: &[S]) -> Result<Vec<S>, VaeError> {
    check_label(y, &p.net)?;
    if z.len() != p.net.latent {
        return Err(VaeError::Config(format!("latent code of length {} for M = {}", z.len(), p.net.latent)));
    }
    let mut tape = Tape::new();
    let b = Bound::new(&mut tape, p, |s| (s as usize) >= Slot::GenFc1W as usize, false)?;
    let yv = tape.constant(one_hot(&[y], p.net.classes))?;
    let zv = tape.constant(Tensor::new(&[1, z.len()], z.to_vec())?)?;
    let mean = generative_mean(&mut tape, &b, &p.net, yv, zv, 1)?;
    Ok(values(&tape, mean))
}

fn check_label(y: usize, net: &NetConfig) -> Result<(), VaeError> {
    if y >= net.classes {
        return Err(VaeError::Config(format!("label {y} outside 0..{}", net.classes)));
    }
    Ok(())
}

/// `(C, -ln q(y|x))` for one labeled sample and one noise draw.
pub fn labeled_objective<S: Scalar>(p: &ModelParams<S>, x: &[S], y: usize, eps: &[S]) -> Result<(S, S), VaeError> {
    check_label(y, &p.net)?;
    let mut tape = Tape::new();
    let b = Bound::new(&mut tape, p, |_| true, false)?;
    let (c, aux) = labeled_terms(&mut tape, &b, &p.net, &[x], &[y], eps)?;
    Ok((tape.value(c).data()[0], tape.value(aux).data()[0]))
}

/// `D` for one unlabeled sample, sharing `eps` across labels.
pub fn unlabeled_objective<S: Scalar>(p: &ModelParams<S>, x: &[S], eps: &[S]) -> Result<S, VaeError> {
    let mut tape = Tape::new();
    let b = Bound::new(&mut tape, p, |_| true, false)?;
    let d = unlabeled_terms(&mut tape, &b, &p.net, &[x], eps)?;
    Ok(tape.value(d).data()[0])
}

/// A mixed minibatch. Noise arrays hold `mc` draws of `[rows][M]` each.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveBatch<'a, S> {
    pub labeled: &'a [&'a [S]],
    pub labels: &'a [usize],
    pub labeled_eps: &'a [S],
    pub unlabeled: &'a [&'a [S]],
    pub unlabeled_eps: &'a [S],
}

/// Summed objective terms of a batch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ObjectiveValue {
    pub sum_c: f64,
    pub sum_d: f64,
    pub sum_aux: f64,
}

impl ObjectiveValue {
    pub fn j(&self) -> f64 {
        self.sum_c + self.sum_d
    }

    pub fn j_alpha(&self, alpha: f64) -> f64 {
        self.j() + alpha * self.sum_aux
    }

    fn add(&mut self, o: &ObjectiveValue) {
        self.sum_c += o.sum_c;
        self.sum_d += o.sum_d;
        self.sum_aux += o.sum_aux;
    }
}

/// `J^alpha` of a batch and its gradient for every parameter tensor
/// (zeros where a tensor does not take part).
pub fn objective_gradients<S: Scalar>(
    p: &ModelParams<S>,
    batch: ObjectiveBatch<'_, S>,
    alpha: S,
    checked: bool,
) -> Result<(ObjectiveValue, Vec<Tensor<S>>), VaeError> {
    let mut tape = if checked { Tape::checked() } else { Tape::new() };
    let b = Bound::new(&mut tape, p, |_| true, true)?;
    let net = &p.net;
    let mut value = ObjectiveValue::default();
    let mut parts = Vec::new();
    if !batch.labeled.is_empty() {
        for &y in batch.labels {
            check_label(y, net)?;
        }
        let (c, aux) = labeled_terms(&mut tape, &b, net, batch.labeled, batch.labels, batch.labeled_eps)?;
        let c = tape.sum(c)?;
        let aux = tape.sum(aux)?;
        value.sum_c = tape.value(c).item().as_f64();
        value.sum_aux = tape.value(aux).item().as_f64();
        let weighted = tape.scale(aux, alpha)?;
        parts.push(tape.add(c, weighted)?);
    }
    if !batch.unlabeled.is_empty() {
        let d = unlabeled_terms(&mut tape, &b, net, batch.unlabeled, batch.unlabeled_eps)?;
        let d = tape.sum(d)?;
        value.sum_d = tape.value(d).item().as_f64();
        parts.push(d);
    }
    let Some(mut loss) = parts.first().copied() else {
        return Ok((value, p.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect()));
    };
    if let Some(&d) = parts.get(1) {
        loss = tape.add(loss, d)?;
    }
    let grads = collect_grads(&tape, &b, p, loss)?;
    Ok((value, grads))
}

/// Supervised-only loss `sum -ln q(y|x)` and its gradient.
pub fn supervised_gradients<S: Scalar>(
    p: &ModelParams<S>,
    xs: &[&[S]],
    ys: &[usize],
    checked: bool,
) -> Result<(f64, Vec<Tensor<S>>), VaeError> {
    let mut tape = if checked { Tape::checked() } else { Tape::new() };
    let b = Bound::new(&mut tape, p, Slot::is_classifier, true)?;
    let x = tape.constant(input_tensor(xs, &p.net)?)?;
    let logits = classifier_logits(&mut tape, &b, &p.net, x, xs.len())?;
    let log_q = tape.log_softmax(logits)?;
    let picked = tape.gather(log_q, ys)?;
    let total = tape.sum(picked)?;
    let loss = tape.scale(total, S::lit(-1.0))?;
    let value = tape.value(loss).item().as_f64();
    Ok((value, collect_grads(&tape, &b, p, loss)?))
}

fn collect_grads<S: Scalar>(tape: &Tape<S>, b: &Bound, p: &ModelParams<S>, loss: Var) -> Result<Vec<Tensor<S>>, VaeError> {
    let mut g = tape.backward(loss)?;
    Ok(b.vars
        .iter()
        .zip(&p.tensors)
        .map(|(v, t)| v.and_then(|v| g.take(v)).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect())
}

/// Index of the most probable class; ties go to the lower index.
pub fn argmax(row: &[impl PartialOrd + Copy]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Predicted class index per input, evaluated in chunks of 64.
pub fn predict_indices<S: Scalar>(p: &ModelParams<S>, xs: &[&[S]]) -> Result<Vec<usize>, VaeError> {
    let chunks: Vec<&[&[S]]> = xs.chunks(64).collect();
    let out: Vec<Vec<usize>> = chunks
        .par_iter()
        .map(|c| {
            let pi = classifier_forward(p, c)?;
            Ok(pi.data().chunks(p.net.classes).map(argmax).collect())
        })
        .collect::<Result<_, VaeError>>()?;
    Ok(out.into_iter().flatten().collect())
}

/// DOA (degrees) of the most probable class.
pub fn predict_doa<S: Scalar>(p: &ModelParams<S>, x: &[S], grid: &[f64]) -> Result<f64, VaeError> {
    if grid.len() != p.net.classes {
        return Err(VaeError::Config("grid size differs from class count".into()));
    }
    Ok(grid[predict_indices(p, &[x])?[0]])
}

/// `mu_x(y, z)` with `z ~ N(0, I)` drawn from `seed`, or `z = 0` without one.
pub fn generate_rtf_phase<S: Scalar>(p: &ModelParams<S>, y: usize, seed: Option<u64>) -> Result<Vec<S>, VaeError> {
    let z: Vec<S> = match seed {
        Some(s) => {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            (0..p.net.latent).map(|_| S::lit(StandardNormal.sample(&mut rng))).collect()
        }
        None => vec![S::zero(); p.net.latent],
    };
    generative_forward(p, y, &z)
}

/// Optimizer and schedule settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Number of labeled samples `J`; must be a multiple of the class count.
    pub labeled_count: usize,
    pub alpha: f64,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub mc_samples: usize,
    /// Rows per tape; bounds peak memory, not the result.
    pub chunk_rows: usize,
}

impl TrainConfig {
    /// Learning rate 5e-5, batches of 256.
    pub fn standard(labeled_count: usize, alpha: f64, seed: u64) -> Self {
        TrainConfig { labeled_count, alpha, lr: 5e-5, batch: 256, epochs: 300, seed, mc_samples: 1, chunk_rows: 64 }
    }

    pub fn validate(&self, classes: usize) -> Result<(), VaeError> {
        if self.labeled_count == 0 || self.labeled_count % classes != 0 {
            return Err(VaeError::Config(format!(
                "labeled count {} is not a positive multiple of {classes} directions",
                self.labeled_count
            )));
        }
        if !(self.alpha > 0.0) || !(self.lr > 0.0) || self.batch == 0 || self.mc_samples == 0 || self.chunk_rows == 0 {
            return Err(VaeError::Config(format!("alpha, lr, batch, mc_samples and chunk_rows must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Epoch-level training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub sum_c: f64,
    pub sum_d: f64,
    pub sum_aux: f64,
    pub j: f64,
    pub j_alpha: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub method: String,
    pub epochs: Vec<EpochStats>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_acc: f64,
}

impl LossReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,sum_c,sum_d,sum_aux,j,j_alpha,train_acc,val_acc\n");
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                e.epoch, e.sum_c, e.sum_d, e.sum_aux, e.j, e.j_alpha, e.train_acc, e.val_acc
            ));
        }
        s
    }
}

/// Inputs converted to the training scalar, with labels.
struct Prepared<S> {
    xs: Vec<Vec<S>>,
    ys: Vec<usize>,
}

impl<S: Scalar> Prepared<S> {
    fn new(samples: &[InputSample], net: &NetConfig, need_labels: bool) -> Result<Self, VaeError> {
        let mut xs = Vec::with_capacity(samples.len());
        let mut ys = Vec::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            if !s.normalized || s.phase.len() != net.input_len() {
                return Err(VaeError::BadInput { index: i });
            }
            match s.label {
                Some(y) if y < net.classes => ys.push(y),
                _ if need_labels => return Err(VaeError::Config(format!("sample {i} lacks a valid label"))),
                _ => {}
            }
            xs.push(s.phase.iter().map(|&v| S::lit(v)).collect());
        }
        Ok(Prepared { xs, ys })
    }

    fn refs(&self, idx: &[usize]) -> Vec<&[S]> {
        idx.iter().map(|&i| self.xs[i].as_slice()).collect()
    }

    fn accuracy(&self, p: &ModelParams<S>) -> Result<f64, VaeError> {
        if self.xs.is_empty() {
            return Ok(0.0);
        }
        let all: Vec<&[S]> = self.xs.iter().map(Vec::as_slice).collect();
        let pred = predict_indices(p, &all)?;
        let hits = pred.iter().zip(&self.ys).filter(|(a, b)| a == b).count();
        Ok(100.0 * hits as f64 / self.xs.len() as f64)
    }
}

/// Positions of `labeled` batches among `labeled + unlabeled`, spread evenly.
pub fn interleave_schedule(labeled: usize, unlabeled: usize) -> Vec<bool> {
    let total = labeled + unlabeled;
    (0..total).map(|i| (i + 1) * labeled / total > i * labeled / total).collect()
}

fn normal_draws<S: Scalar>(rng: &mut ChaCha8Rng, n: usize) -> Vec<S> {
    (0..n).map(|_| S::lit(StandardNormal.sample(rng))).collect()
}

fn add_grads<S: Scalar>(acc: &mut Option<Vec<Tensor<S>>>, g: Vec<Tensor<S>>) {
    match acc {
        Some(a) => {
            for (x, y) in a.iter_mut().zip(&g) {
                for (u, v) in x.data_mut().iter_mut().zip(y.data()) {
                    *u += *v;
                }
            }
        }
        None => *acc = Some(g),
    }
}

fn check_finite(v: &ObjectiveValue, epoch: usize) -> Result<(), VaeError> {
    if v.sum_c.is_finite() && v.sum_d.is_finite() && v.sum_aux.is_finite() {
        Ok(())
    } else {
        Err(VaeError::Numerical(format!("non-finite objective in epoch {epoch}")))
    }
}

fn map_numeric(e: VaeError) -> VaeError {
    match e {
        VaeError::Autodiff(AdError::NonFinite { op }) => VaeError::Numerical(format!("non-finite value in {op}")),
        other => other,
    }
}

struct Selection<S> {
    best: Option<(usize, f64, ModelParams<S>)>,
}

impl<S: Scalar> Selection<S> {
    fn offer(&mut self, epoch: usize, val: f64, p: &ModelParams<S>) {
        if self.best.as_ref().is_none_or(|b| val > b.1) {
            self.best = Some((epoch, val, p.clone()));
        }
    }
}

/// Trains the M2 model on `J` labeled and any number of unlabeled samples.
///
/// Every epoch visits the unlabeled set once in shuffled batches; labeled
/// batches (cycling through the labeled set) are interleaved so they make up
/// a `J / (J + U)` share of all updates, with at least one per epoch. The
/// parameters of the epoch with the best validation accuracy are returned
/// (ties keep the earlier epoch).
pub fn train_vae_ssl<S: Scalar>(
    net: NetConfig,
    labeled: &[InputSample],
    unlabeled: &[InputSample],
    val: &[InputSample],
    cfg: &TrainConfig,
) -> Result<(ModelParams<S>, LossReport), VaeError> {
    cfg.validate(net.classes)?;
    if labeled.len() != cfg.labeled_count {
        return Err(VaeError::Config(format!("{} labeled samples for J = {}", labeled.len(), cfg.labeled_count)));
    }
    let lab = Prepared::<S>::new(labeled, &net, true)?;
    let unl = Prepared::<S>::new(unlabeled, &net, false)?;
    let valp = Prepared::<S>::new(val, &net, true)?;
    let mut params = ModelParams::<S>::init(net, cfg.seed)?;
    let mut adam = AdamState::new(&params.tensors, S::lit(cfg.lr));
    let (j, u, m, mc) = (lab.xs.len(), unl.xs.len(), net.latent, cfg.mc_samples);
    let n_unl = u.div_ceil(cfg.batch);
    let n_lab = if u == 0 { j.div_ceil(cfg.batch) } else { ((n_unl * j) as f64 / u as f64).round().max(1.0) as usize };
    let schedule = interleave_schedule(n_lab, n_unl);
    let lab_batch = cfg.batch.min(j);
    let alpha = S::lit(cfg.alpha);
    let mut report = LossReport { method: "vae-ssl".into(), epochs: Vec::new(), best_epoch: 0, best_val_acc: 0.0 };
    let mut sel = Selection { best: None };

    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed ^ mix_seed(epoch as u64)));
        let mut perm_u: Vec<usize> = (0..u).collect();
        perm_u.shuffle(&mut rng);
        let mut perm_l: Vec<usize> = (0..j).collect();
        perm_l.shuffle(&mut rng);
        let (mut ucur, mut lcur) = (0, 0);
        let mut totals = ObjectiveValue::default();
        for &is_lab in &schedule {
            let mut grads = None;
            if is_lab {
                let idx: Vec<usize> = (0..lab_batch).map(|k| perm_l[(lcur + k) % j]).collect();
                lcur = (lcur + lab_batch) % j;
                let eps = normal_draws::<S>(&mut rng, mc * idx.len() * m);
                let chunk = cfg.chunk_rows.max(1);
                let starts: Vec<usize> = (0..idx.len()).step_by(chunk).collect();
                let results: Vec<_> = starts
                    .par_iter()
                    .map(|&s| {
                        let e = (s + chunk).min(idx.len());
                        let xs = lab.refs(&idx[s..e]);
                        let ys: Vec<usize> = idx[s..e].iter().map(|&i| lab.ys[i]).collect();
                        let eps_c = slice_draws(&eps, mc, idx.len(), m, s, e);
                        let b = ObjectiveBatch { labeled: &xs, labels: &ys, labeled_eps: &eps_c, unlabeled: &[], unlabeled_eps: &[] };
                        objective_gradients(&params, b, alpha, true)
                    })
                    .collect();
                for r in results {
                    let (v, g) = r.map_err(map_numeric)?;
                    totals.add(&v);
                    add_grads(&mut grads, g);
                }
            } else {
                let idx: Vec<usize> = perm_u[ucur..(ucur + cfg.batch).min(u)].to_vec();
                ucur += idx.len();
                let eps = normal_draws::<S>(&mut rng, mc * idx.len() * m);
                let chunk = (cfg.chunk_rows / net.classes).max(1);
                let starts: Vec<usize> = (0..idx.len()).step_by(chunk).collect();
                let results: Vec<_> = starts
                    .par_iter()
                    .map(|&s| {
                        let e = (s + chunk).min(idx.len());
                        let xs = unl.refs(&idx[s..e]);
                        let eps_c = slice_draws(&eps, mc, idx.len(), m, s, e);
                        let b = ObjectiveBatch { labeled: &[], labels: &[], labeled_eps: &[], unlabeled: &xs, unlabeled_eps: &eps_c };
                        objective_gradients(&params, b, alpha, true)
                    })
                    .collect();
                for r in results {
                    let (v, g) = r.map_err(map_numeric)?;
                    totals.add(&v);
                    add_grads(&mut grads, g);
                }
            }
            check_finite(&totals, epoch)?;
            if let Some(g) = grads {
                adam.step(&mut params.tensors, &g)?;
            }
        }
        if !params.is_finite() {
            return Err(VaeError::Numerical(format!("parameters diverged in epoch {epoch}")));
        }
        let train_acc = lab.accuracy(&params)?;
        let val_acc = valp.accuracy(&params)?;
        sel.offer(epoch, val_acc, &params);
        report.epochs.push(EpochStats {
            epoch,
            sum_c: totals.sum_c,
            sum_d: totals.sum_d,
            sum_aux: totals.sum_aux,
            j: totals.j(),
            j_alpha: totals.j_alpha(cfg.alpha),
            train_acc,
            val_acc,
        });
    }
    finish(sel, params, report)
}

/// Noise for rows `s..e` of a batch of `n`, for every draw.
fn slice_draws<S: Scalar>(eps: &[S], draws: usize, n: usize, m: usize, s: usize, e: usize) -> Vec<S> {
    (0..draws).flat_map(|d| eps[(d * n + s) * m..(d * n + e) * m].iter().copied()).collect()
}

fn finish<S: Scalar>(
    sel: Selection<S>,
    last: ModelParams<S>,
    mut report: LossReport,
) -> Result<(ModelParams<S>, LossReport), VaeError> {
    match sel.best {
        Some((epoch, acc, p)) => {
            report.best_epoch = epoch;
            report.best_val_acc = acc;
            Ok((p, report))
        }
        None => Ok((last, report)),
    }
}

/// Trains only the classifier on the labeled samples (`-ln q(y|x)` loss),
/// with the same optimizer, batch size and model selection as
/// [`train_vae_ssl`].
pub fn train_supervised_cnn<S: Scalar>(
    net: NetConfig,
    labeled: &[InputSample],
    val: &[InputSample],
    cfg: &TrainConfig,
) -> Result<(ModelParams<S>, LossReport), VaeError> {
    cfg.validate(net.classes)?;
    if labeled.len() != cfg.labeled_count {
        return Err(VaeError::Config(format!("{} labeled samples for J = {}", labeled.len(), cfg.labeled_count)));
    }
    let lab = Prepared::<S>::new(labeled, &net, true)?;
    let valp = Prepared::<S>::new(val, &net, true)?;
    let mut params = ModelParams::<S>::init(net, cfg.seed)?;
    let mut adam = AdamState::new(&params.tensors, S::lit(cfg.lr));
    let j = lab.xs.len();
    let mut report = LossReport { method: "cnn".into(), epochs: Vec::new(), best_epoch: 0, best_val_acc: 0.0 };
    let mut sel = Selection { best: None };
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed ^ mix_seed(epoch as u64)));
        let mut perm: Vec<usize> = (0..j).collect();
        perm.shuffle(&mut rng);
        let mut sum_aux = 0.0;
        for batch in perm.chunks(cfg.batch) {
            let mut grads = None;
            let results: Vec<_> = batch
                .chunks(cfg.chunk_rows)
                .collect::<Vec<_>>()
                .par_iter()
                .map(|idx| {
                    let xs = lab.refs(idx);
                    let ys: Vec<usize> = idx.iter().map(|&i| lab.ys[i]).collect();
                    supervised_gradients(&params, &xs, &ys, true)
                })
                .collect();
            for r in results {
                let (v, g) = r.map_err(map_numeric)?;
                sum_aux += v;
                add_grads(&mut grads, g);
            }
            if !sum_aux.is_finite() {
                return Err(VaeError::Numerical(format!("non-finite loss in epoch {epoch}")));
            }
            if let Some(g) = grads {
                adam.step(&mut params.tensors, &g)?;
            }
        }
        let train_acc = lab.accuracy(&params)?;
        let val_acc = valp.accuracy(&params)?;
        sel.offer(epoch, val_acc, &params);
        report.epochs.push(EpochStats {
            epoch,
            sum_c: 0.0,
            sum_d: 0.0,
            sum_aux,
            j: 0.0,
            j_alpha: cfg.alpha * sum_aux,
            train_acc,
            val_acc,
        });
    }
    finish(sel, params, report)
}

/// JSON manifest stored next to a checkpoint's raw weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub method: String,
    pub architecture_hash: String,
    pub net: NetConfig,
    pub tensors: Vec<(String, Vec<usize>)>,
    pub dtype: String,
    pub epoch: usize,
    pub val_acc: f64,
    pub norm: Option<NormStats>,
    pub alpha: f64,
    pub labeled_count: usize,
    pub seed: u64,
    pub grid: Vec<f64>,
}

impl CheckpointManifest {
    pub fn describe(method: &str, net: &NetConfig) -> Self {
        CheckpointManifest {
            method: method.into(),
            architecture_hash: architecture_hash(net),
            net: *net,
            tensors: Slot::ALL.iter().map(|s| (s.name().to_string(), s.shape(net))).collect(),
            dtype: "f64le".into(),
            epoch: 0,
            val_acc: 0.0,
            norm: None,
            alpha: 0.0,
            labeled_count: 0,
            seed: 0,
            grid: Vec::new(),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> VaeError + '_ {
    move |source| VaeError::Io { path: path.to_path_buf(), source }
}

/// Writes `<stem>.ckpt` (all tensors in slot order, little-endian f64) and
/// `<stem>.json`.
pub fn save_checkpoint<S: Scalar>(
    dir: &Path,
    stem: &str,
    params: &ModelParams<S>,
    manifest: &CheckpointManifest,
) -> Result<(PathBuf, PathBuf), VaeError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let raw = dir.join(format!("{stem}.ckpt"));
    let json = dir.join(format!("{stem}.json"));
    let mut bytes = Vec::with_capacity(params.count() * 8);
    for t in &params.tensors {
        for v in t.data() {
            bytes.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    fs::write(&raw, bytes).map_err(io_err(&raw))?;
    fs::write(&json, serde_json::to_string_pretty(manifest).expect("manifest serializes")).map_err(io_err(&json))?;
    Ok((raw, json))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams<f64>, CheckpointManifest), VaeError> {
    let raw = path.with_extension("ckpt");
    let json = path.with_extension("json");
    let text = fs::read_to_string(&json).map_err(io_err(&json))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| VaeError::Format { path: json.clone(), msg: e.to_string() })?;
    if manifest.architecture_hash != architecture_hash(&manifest.net) {
        return Err(VaeError::Format { path: json, msg: "architecture hash does not match".into() });
    }
    let bytes = fs::read(&raw).map_err(io_err(&raw))?;
    let mut params = ModelParams::<f64>::zeros(manifest.net)?;
    if bytes.len() != params.count() * 8 {
        return Err(VaeError::Format { path: raw, msg: "weight file size does not match the architecture".into() });
    }
    let mut vals = bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")));
    for t in params.tensors.iter_mut() {
        for v in t.data_mut() {
            *v = vals.next().expect("size checked");
        }
    }
    Ok((params, manifest))
}

/// `ln 2 pi`, exposed for analytic checks of the objective.
pub fn ln_two_pi() -> f64 {
    (2.0 * PI).ln()
}
