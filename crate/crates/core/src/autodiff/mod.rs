//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs for the backward pass. Nodes are only ever appended, so inputs always
//! precede their consumers and a single reverse sweep is a valid topological
//! traversal.

mod adam;
pub mod gradcheck;
mod kernels;
mod ops;
mod tensor;

pub use adam::AdamState;
pub use tensor::Tensor;

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdError {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Domain { op: &'static str, msg: String },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Softmax,
    Identity,
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var },
    TransposeConv2d { x: Var, w: Var, b: Var },
    UnpoolTransposeConv2d { x: Var, w: Var, b: Var },
    MaxPool { x: Var, argmax: Vec<usize> },
    Unpool { x: Var },
    Dense { x: Var, w: Var, b: Option<Var> },
    Relu { x: Var },
    Softmax { x: Var },
    LogSoftmax { x: Var },
    Exp { x: Var },
    Ln { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: S },
    AddScalar { x: Var },
    Sum { x: Var },
    SumLast { x: Var },
    Reshape { x: Var },
    ConcatLast { parts: Vec<Var> },
    SliceLast { x: Var, start: usize },
    RepeatRows { x: Var, times: usize },
    Gather { x: Var, index: Vec<usize> },
    GaussianLogProb { x: Var, mu: Var, var: Option<Var> },
    Reparameterize { mu: Var, var: Var, eps: Var },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    checked: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by leaf [`Var`].
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), checked: false }
    }

    /// A tape that rejects non-finite values at node creation.
    pub fn checked() -> Self {
        Tape { nodes: Vec::new(), checked: true }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Result<Var, AdError> {
        if self.checked && !value.is_finite() {
            return Err(AdError::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Result<Var, AdError> {
        if self.checked && !value.is_finite() {
            return Err(AdError::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<S>) -> Result<Var, AdError> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Result<Var, AdError> {
        self.leaf(value, false)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var, AdError> {
        let y = ops::conv2d(self.value(x), self.value(w), self.value(b), pad)?;
        self.push("conv2d", y, Op::Conv2d { x, w, b }, &[x, w, b])
    }

    pub fn transpose_conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var, AdError> {
        let y = ops::transpose_conv2d(self.value(x), self.value(w), self.value(b), pad)?;
        self.push("transpose_conv2d", y, Op::TransposeConv2d { x, w, b }, &[x, w, b])
    }

    /// Same value as `transpose_conv2d(max_unpool2d(x), w, b, pad)`, computed
    /// on the pooled grid.
    pub fn unpool_transpose_conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var, AdError> {
        let y = ops::unpool_transpose_conv2d(self.value(x), self.value(w), self.value(b), pad)?;
        self.push("unpool_transpose_conv2d", y, Op::UnpoolTransposeConv2d { x, w, b }, &[x, w, b])
    }

    pub fn max_pool2d(&mut self, x: Var) -> Result<Var, AdError> {
        let (y, argmax) = ops::max_pool2d(self.value(x))?;
        self.push("max_pool2d", y, Op::MaxPool { x, argmax }, &[x])
    }

    /// Flat input index of each pooled value, if `v` is a pooling node.
    pub fn pool_indices(&self, v: Var) -> Option<&[usize]> {
        match &self.nodes[v.0].op {
            Op::MaxPool { argmax, .. } => Some(argmax),
            _ => None,
        }
    }

    pub fn max_unpool2d(&mut self, x: Var) -> Result<Var, AdError> {
        let y = ops::max_unpool2d(self.value(x))?;
        self.push("max_unpool2d", y, Op::Unpool { x }, &[x])
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, AdError> {
        let y = ops::dense(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("dense", y, Op::Dense { x, w, b }, &inputs)
    }

    pub fn activation(&mut self, kind: Activation, x: Var) -> Result<Var, AdError> {
        match kind {
            Activation::Relu => self.relu(x),
            Activation::Softmax => self.softmax(x),
            Activation::Identity => Ok(x),
        }
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, AdError> {
        let y = self.value(x).map(|v| v.max(S::zero()));
        self.push("relu", y, Op::Relu { x }, &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var, AdError> {
        if self.value(x).rank() == 0 {
            return Err(AdError::Contract("softmax needs at least one axis".into()));
        }
        let y = ops::softmax_rows(self.value(x));
        self.push("softmax", y, Op::Softmax { x }, &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var, AdError> {
        if self.value(x).rank() == 0 {
            return Err(AdError::Contract("log_softmax needs at least one axis".into()));
        }
        let y = ops::log_softmax_rows(self.value(x));
        self.push("log_softmax", y, Op::LogSoftmax { x }, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, AdError> {
        let y = self.value(x).map(|v| v.exp());
        self.push("exp", y, Op::Exp { x }, &[x])
    }

    pub fn ln(&mut self, x: Var) -> Result<Var, AdError> {
        let y = self.value(x).map(|v| v.ln());
        self.push("ln", y, Op::Ln { x }, &[x])
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Result<Tensor<S>, AdError> {
        let (ta, tb) = (self.value(a), self.value(b));
        ops::check_same(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        let y = self.binary("add", a, b, |p, q| p + q)?;
        self.push("add", y, Op::Add { a, b }, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        let y = self.binary("sub", a, b, |p, q| p - q)?;
        self.push("sub", y, Op::Sub { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        let y = self.binary("mul", a, b, |p, q| p * q)?;
        self.push("mul", y, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: S) -> Result<Var, AdError> {
        let y = self.value(x).map(|v| v * c);
        self.push("scale", y, Op::Scale { x, c }, &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: S) -> Result<Var, AdError> {
        let y = self.value(x).map(|v| v + c);
        self.push("add_scalar", y, Op::AddScalar { x }, &[x])
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var, AdError> {
        let y = Tensor::scalar(self.value(x).sum());
        self.push("sum", y, Op::Sum { x }, &[x])
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, x: Var) -> Result<Var, AdError> {
        let t = self.value(x);
        let (_, d, lead) = ops::rows_of(t.shape());
        let data = t.data().chunks(d).map(|r| r.iter().copied().sum()).collect();
        let y = Tensor::new(&lead, data)?;
        self.push("sum_last", y, Op::SumLast { x }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, AdError> {
        let y = self.value(x).clone().reshape(shape)?;
        self.push("reshape", y, Op::Reshape { x }, &[x])
    }

    /// Concatenate along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var, AdError> {
        let first = self.value(parts[0]).shape().to_vec();
        let (n, _, lead) = ops::rows_of(&first);
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pn, d, pl) = ops::rows_of(self.value(p).shape());
            if pn != n || pl != lead {
                return Err(AdError::Dimension {
                    op: "concat_last",
                    lhs: first,
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            widths.push(d);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for r in 0..n {
            for (&p, &d) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * d..(r + 1) * d]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let y = Tensor::new(&shape, data)?;
        self.push("concat_last", y, Op::ConcatLast { parts: parts.to_vec() }, parts)
    }

    /// Columns `start..end` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, end: usize) -> Result<Var, AdError> {
        let t = self.value(x);
        let (_, d, lead) = ops::rows_of(t.shape());
        if start > end || end > d {
            return Err(AdError::Dimension { op: "slice_last", lhs: t.shape().to_vec(), rhs: vec![start, end] });
        }
        let data = t.data().chunks(d).flat_map(|r| r[start..end].iter().copied()).collect();
        let mut shape = lead;
        shape.push(end - start);
        let y = Tensor::new(&shape, data)?;
        self.push("slice_last", y, Op::SliceLast { x, start }, &[x])
    }

    /// `[N, ..] -> [N * times, ..]`, each row repeated `times` times in place.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var, AdError> {
        let t = self.value(x);
        if t.rank() == 0 {
            return Err(AdError::Contract("repeat_rows needs a leading axis".into()));
        }
        let row: usize = t.shape()[1..].iter().product();
        let mut data = Vec::with_capacity(t.numel() * times);
        for r in t.data().chunks(row.max(1)) {
            for _ in 0..times {
                data.extend_from_slice(r);
            }
        }
        let mut shape = t.shape().to_vec();
        shape[0] *= times;
        let y = Tensor::new(&shape, data)?;
        self.push("repeat_rows", y, Op::RepeatRows { x, times }, &[x])
    }

    /// Pick one feature per row: `y[r] = x[r, index[r]]`.
    pub fn gather(&mut self, x: Var, index: &[usize]) -> Result<Var, AdError> {
        let t = self.value(x);
        let (n, d, lead) = ops::rows_of(t.shape());
        if index.len() != n || index.iter().any(|&i| i >= d) {
            return Err(AdError::Dimension { op: "gather", lhs: t.shape().to_vec(), rhs: vec![index.len()] });
        }
        let data = index.iter().enumerate().map(|(r, &i)| t.data()[r * d + i]).collect();
        let y = Tensor::new(&lead, data)?;
        self.push("gather", y, Op::Gather { x, index: index.to_vec() }, &[x])
    }

    /// Row-wise `log N(x | mu, diag(var))`, summed over the last axis.
    pub fn gaussian_log_prob(&mut self, x: Var, mu: Var, var: Var) -> Result<Var, AdError> {
        let y = ops::gaussian_log_prob(self.value(x), self.value(mu), Some(self.value(var)))?;
        self.push("gaussian_log_prob", y, Op::GaussianLogProb { x, mu, var: Some(var) }, &[x, mu, var])
    }

    /// Row-wise `log N(x | mu, I)`.
    pub fn unit_gaussian_log_prob(&mut self, x: Var, mu: Var) -> Result<Var, AdError> {
        let y = ops::gaussian_log_prob(self.value(x), self.value(mu), None)?;
        self.push("gaussian_log_prob", y, Op::GaussianLogProb { x, mu, var: None }, &[x, mu])
    }

    /// Row-wise `ln pi[index]` for probability rows `pi`.
    ///
    /// A zero probability at the selected class yields `-inf`, which a
    /// checked tape rejects.
    pub fn categorical_log_prob(&mut self, pi: Var, index: &[usize]) -> Result<Var, AdError> {
        let p = self.value(pi);
        let (_, d, _) = ops::rows_of(p.shape());
        let tol = S::lit(1e-9);
        for row in p.data().chunks(d) {
            let total: S = row.iter().copied().sum();
            if row.iter().any(|&v| v < S::zero()) || (total - S::one()).abs() > tol {
                return Err(AdError::Domain {
                    op: "categorical_log_prob",
                    msg: "probabilities must be nonnegative and sum to one".into(),
                });
            }
        }
        let picked = self.gather(pi, index)?;
        self.ln(picked).map_err(|e| match e {
            AdError::NonFinite { .. } => AdError::Domain {
                op: "categorical_log_prob",
                msg: "zero probability at the selected class".into(),
            },
            other => other,
        })
    }

    /// `z = mu + sqrt(var) * eps`; `eps` is treated as a constant.
    pub fn reparameterize(&mut self, mu: Var, var: Var, eps: Var) -> Result<Var, AdError> {
        let (m, v, e) = (self.value(mu), self.value(var), self.value(eps));
        ops::check_same("reparameterize", m, v)?;
        ops::check_same("reparameterize", m, e)?;
        if v.data().iter().any(|&s| s < S::zero()) {
            return Err(AdError::Domain { op: "reparameterize", msg: "variance must be nonnegative".into() });
        }
        let data = (0..m.numel())
            .map(|i| m.data()[i] + v.data()[i].sqrt() * e.data()[i])
            .collect();
        let y = Tensor::new(m.shape(), data)?;
        self.push("reparameterize", y, Op::Reparameterize { mu, var, eps }, &[mu, var])
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>, AdError> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(AdError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node<S>, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b } | Op::TransposeConv2d { x, w, b } | Op::UnpoolTransposeConv2d { x, w, b } => {
                let need = [self.needs(*x), self.needs(*w), self.needs(*b)];
                let (xv, wv) = (self.value(*x), self.value(*w));
                let kg = match node.op {
                    Op::Conv2d { .. } => ops::conv2d_backward(xv, wv, g, need),
                    Op::TransposeConv2d { .. } => ops::transpose_conv2d_backward(xv, wv, g, need),
                    _ => ops::unpool_transpose_conv2d_backward(xv, wv, g, need),
                };
                for (v, t) in [(*x, kg.x), (*w, kg.w), (*b, kg.b)] {
                    if let Some(t) = t {
                        self.accumulate(grads, v, t);
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut gx = Tensor::zeros(self.value(*x).shape());
                for (&k, &gv) in argmax.iter().zip(g.data()) {
                    gx.data_mut()[k] += gv;
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Unpool { x } => {
                let gx = ops::max_unpool2d_backward(self.value(*x).shape(), g);
                self.accumulate(grads, *x, gx);
            }
            Op::Dense { x, w, b } => {
                let need = [self.needs(*x), self.needs(*w), b.is_some_and(|b| self.needs(b))];
                let kg = ops::dense_backward(self.value(*x), self.value(*w), g, need);
                if let Some(t) = kg.x {
                    self.accumulate(grads, *x, t);
                }
                if let Some(t) = kg.w {
                    self.accumulate(grads, *w, t);
                }
                if let (Some(b), Some(t)) = (b, kg.b) {
                    self.accumulate(grads, *b, t);
                }
            }
            Op::Relu { x } => {
                let xv = self.value(*x);
                let data = xv.data().iter().zip(g.data()).map(|(&a, &gv)| if a > S::zero() { gv } else { S::zero() });
                self.accumulate(grads, *x, Tensor::new(xv.shape(), data.collect()).expect("shape"));
            }
            Op::Softmax { x } => {
                let (_, d, _) = ops::rows_of(y.shape());
                let mut gx = Vec::with_capacity(y.numel());
                for (yr, gr) in y.data().chunks(d).zip(g.data().chunks(d)) {
                    let dot: S = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    gx.extend(yr.iter().zip(gr).map(|(&a, &b)| a * (b - dot)));
                }
                self.accumulate(grads, *x, Tensor::new(y.shape(), gx).expect("shape"));
            }
            Op::LogSoftmax { x } => {
                let (_, d, _) = ops::rows_of(y.shape());
                let mut gx = Vec::with_capacity(y.numel());
                for (yr, gr) in y.data().chunks(d).zip(g.data().chunks(d)) {
                    let total: S = gr.iter().copied().sum();
                    gx.extend(yr.iter().zip(gr).map(|(&a, &b)| b - a.exp() * total));
                }
                self.accumulate(grads, *x, Tensor::new(y.shape(), gx).expect("shape"));
            }
            Op::Exp { x } => {
                let data = y.data().iter().zip(g.data()).map(|(&a, &b)| a * b).collect();
                self.accumulate(grads, *x, Tensor::new(y.shape(), data).expect("shape"));
            }
            Op::Ln { x } => {
                let xv = self.value(*x);
                let data = xv.data().iter().zip(g.data()).map(|(&a, &b)| b / a).collect();
                self.accumulate(grads, *x, Tensor::new(y.shape(), data).expect("shape"));
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let d = bv.data().iter().zip(g.data()).map(|(&p, &q)| p * q).collect();
                    self.accumulate(grads, *a, Tensor::new(av.shape(), d).expect("shape"));
                }
                if self.needs(*b) {
                    let d = av.data().iter().zip(g.data()).map(|(&p, &q)| p * q).collect();
                    self.accumulate(grads, *b, Tensor::new(bv.shape(), d).expect("shape"));
                }
            }
            Op::Scale { x, c } => self.accumulate(grads, *x, g.map(|v| v * *c)),
            Op::AddScalar { x } => self.accumulate(grads, *x, g.clone()),
            Op::Sum { x } => {
                let gv = g.item();
                self.accumulate(grads, *x, Tensor::full(self.value(*x).shape(), gv));
            }
            Op::SumLast { x } => {
                let xv = self.value(*x);
                let (_, d, _) = ops::rows_of(xv.shape());
                let gx = Tensor::from_fn(xv.shape(), |k| g.data()[k / d]);
                self.accumulate(grads, *x, gx);
            }
            Op::Reshape { x } => {
                let gx = g.clone().reshape(self.value(*x).shape()).expect("same numel");
                self.accumulate(grads, *x, gx);
            }
            Op::ConcatLast { parts } => {
                let (n, total, _) = ops::rows_of(y.shape());
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let (_, d, _) = ops::rows_of(pv.shape());
                    if self.needs(p) {
                        let mut data = Vec::with_capacity(n * d);
                        for r in 0..n {
                            data.extend_from_slice(&g.data()[r * total + offset..r * total + offset + d]);
                        }
                        self.accumulate(grads, p, Tensor::new(pv.shape(), data).expect("shape"));
                    }
                    offset += d;
                }
            }
            Op::SliceLast { x, start } => {
                let xv = self.value(*x);
                let (_, d, _) = ops::rows_of(xv.shape());
                let (_, w, _) = ops::rows_of(y.shape());
                let mut gx = Tensor::zeros(xv.shape());
                for (r, gr) in g.data().chunks(w).enumerate() {
                    gx.data_mut()[r * d + start..r * d + start + w].copy_from_slice(gr);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::RepeatRows { x, times } => {
                let xv = self.value(*x);
                let row: usize = xv.shape()[1..].iter().product::<usize>().max(1);
                let mut gx = Tensor::zeros(xv.shape());
                for (k, chunk) in g.data().chunks(row).enumerate() {
                    let dst = &mut gx.data_mut()[(k / times) * row..(k / times + 1) * row];
                    for (a, &b) in dst.iter_mut().zip(chunk) {
                        *a += b;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Gather { x, index } => {
                let xv = self.value(*x);
                let (_, d, _) = ops::rows_of(xv.shape());
                let mut gx = Tensor::zeros(xv.shape());
                for (r, (&i, &gv)) in index.iter().zip(g.data()).enumerate() {
                    gx.data_mut()[r * d + i] += gv;
                }
                self.accumulate(grads, *x, gx);
            }
            Op::GaussianLogProb { x, mu, var } => {
                let (gx, gmu, gvar) = ops::gaussian_log_prob_backward(
                    self.value(*x),
                    self.value(*mu),
                    var.map(|v| self.value(v)),
                    g,
                );
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *mu, gmu);
                if let (Some(v), Some(t)) = (var, gvar) {
                    self.accumulate(grads, *v, t);
                }
            }
            Op::Reparameterize { mu, var, eps } => {
                self.accumulate(grads, *mu, g.clone());
                if self.needs(*var) {
                    let (vv, ev) = (self.value(*var), self.value(*eps));
                    let half = S::lit(0.5);
                    // d sqrt(v)/dv is unbounded at v = 0; that point gets zero gradient
                    let data = (0..vv.numel())
                        .map(|i| {
                            let s = vv.data()[i].sqrt();
                            if s > S::zero() {
                                g.data()[i] * ev.data()[i] * half / s
                            } else {
                                S::zero()
                            }
                        })
                        .collect();
                    self.accumulate(grads, *var, Tensor::new(vv.shape(), data).expect("shape"));
                }
            }
        }
    }
}
