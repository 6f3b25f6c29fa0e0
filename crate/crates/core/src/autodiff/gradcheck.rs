//! Central finite-difference checks for tape gradients.

use super::{AdError, Tape, Tensor, Var};

/// Largest per-input relative error `|g - g_fd| / max(|g|, |g_fd|)` (L2
/// norms) between reverse-mode gradients and central differences with step
/// `h`. `build` must record the same graph for every call and return a
/// scalar loss; each entry of `inputs` becomes a gradient-tracking leaf.
pub fn max_relative_error(
    inputs: &[Tensor<f64>],
    h: f64,
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var, AdError>,
) -> Result<f64, AdError> {
    let eval = |xs: &[Tensor<f64>]| -> Result<f64, AdError> {
        let mut tape = Tape::new();
        let vars = xs.iter().map(|x| tape.param(x.clone())).collect::<Result<Vec<_>, _>>()?;
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };
    let mut tape = Tape::new();
    let vars = inputs.iter().map(|x| tape.param(x.clone())).collect::<Result<Vec<_>, _>>()?;
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (i, (x, v)) in inputs.iter().zip(&vars).enumerate() {
        let analytic = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        let mut num = vec![0.0; x.numel()];
        let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
        for (k, slot) in num.iter_mut().enumerate() {
            let orig = x.data()[k];
            probe[i].data_mut()[k] = orig + h;
            let up = eval(&probe)?;
            probe[i].data_mut()[k] = orig - h;
            let down = eval(&probe)?;
            probe[i].data_mut()[k] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        let diff: f64 = analytic.data().iter().zip(&num).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let na = analytic.data().iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = num.iter().map(|a| a * a).sum::<f64>().sqrt();
        let scale = na.max(nn);
        if scale > 0.0 {
            worst = worst.max(diff / scale);
        }
    }
    Ok(worst)
}
