use crate::scalar::Scalar;

use super::{AdError, Tensor};

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct AdamState<S> {
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
    pub t: u64,
    pub lr: S,
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
}

impl<S: Scalar> AdamState<S> {
    /// Zeroed moments shaped like `params`, decay rates (0.9, 0.999), eps 1e-8.
    pub fn new(params: &[Tensor<S>], lr: S) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
            lr,
            beta1: S::lit(0.9),
            beta2: S::lit(0.999),
            eps: S::lit(1e-8),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor<S>], grads: &[Tensor<S>]) -> Result<(), AdError> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(AdError::Dimension {
                op: "adam_step",
                lhs: vec![params.len()],
                rhs: vec![grads.len(), self.m.len()],
            });
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(AdError::Dimension { op: "adam_step", lhs: p.shape().to_vec(), rhs: g.shape().to_vec() });
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = S::one() - self.beta1.powi(t);
        let c2 = S::one() - self.beta2.powi(t);
        let (b1, b2) = (self.beta1, self.beta2);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (i, &gi) in g.data().iter().enumerate() {
                md[i] = b1 * md[i] + (S::one() - b1) * gi;
                vd[i] = b2 * vd[i] + (S::one() - b2) * gi * gi;
                let m_hat = md[i] / c1;
                let v_hat = vd[i] / c2;
                pd[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
