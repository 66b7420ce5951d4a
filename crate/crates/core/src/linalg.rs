//! Dense tensors, multilayer perceptrons with hand-written backward passes,
//! a central-difference gradient oracle, and the Adam optimizer.
//!
//! There is no general computation graph: every objective in the crate
//! computes its own gradients and reuses [`Mlp::backward`] for the network
//! parts.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix of finite `f64` values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTensor2")]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawTensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawTensor2> for Tensor2 {
    type Error = Error;

    fn try_from(raw: RawTensor2) -> Result<Self> {
        Tensor2::new(raw.rows, raw.cols, raw.data)
    }
}

impl Tensor2 {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim("tensor data", rows * cols, data.len()));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "tensor entry ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `out = self · x`
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// `out = selfᵀ · y`
    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            if yr != 0.0 {
                axpy(&mut out, yr, self.row(r));
            }
        }
        out
    }

    /// `self += a · u vᵀ`
    pub fn add_outer(&mut self, a: f64, u: &[f64], v: &[f64]) {
        for (r, &ur) in u.iter().enumerate() {
            let s = a * ur;
            if s != 0.0 {
                let cols = self.cols;
                axpy(&mut self.data[r * cols..(r + 1) * cols], s, v);
            }
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += a · x`
pub fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`] for positive arguments.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
    Softplus,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
            Activation::Softplus => softplus(x),
        }
    }

    /// Derivative at pre-activation `pre`, given `post = apply(pre)`.
    fn derivative(self, pre: f64, post: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - post * post,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
            Activation::Softplus => sigmoid(pre),
        }
    }
}

/// One affine layer followed by an elementwise activation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `out × in`
    pub weight: Tensor2,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// Multilayer perceptron parameters. Also used as the container for their
/// gradients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Layer>", into = "Vec<Layer>")]
pub struct Mlp {
    layers: Vec<Layer>,
}

impl TryFrom<Vec<Layer>> for Mlp {
    type Error = Error;

    fn try_from(layers: Vec<Layer>) -> Result<Self> {
        Mlp::from_layers(layers)
    }
}

impl From<Mlp> for Vec<Layer> {
    fn from(mlp: Mlp) -> Self {
        mlp.layers
    }
}

/// Per-layer values recorded by [`Mlp::forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        &self.output
    }

    pub fn input(&self) -> &[f64] {
        &self.inputs[0]
    }
}

impl Mlp {
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("an MLP needs at least one layer".into()));
        }
        for (k, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.output_dim() {
                return Err(Error::dim(
                    format!("layer {k} bias"),
                    layer.output_dim(),
                    layer.bias.len(),
                ));
            }
            if layer.bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::NonFinite(format!("layer {k} bias")));
            }
            if k + 1 < layers.len() && layers[k + 1].input_dim() != layer.output_dim() {
                return Err(Error::dim(
                    format!("layer {} input", k + 1),
                    layer.output_dim(),
                    layers[k + 1].input_dim(),
                ));
            }
        }
        Ok(Self { layers })
    }

    /// Random network with symmetric uniform weights in `±1/√fan_in` and
    /// zero biases. `dims` lists every width from input to output.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], hidden: Activation, output: Activation, rng: &mut R) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidArgument(
                "an MLP needs an input and an output width".into(),
            ));
        }
        let n_layers = dims.len() - 1;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(k, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = 1.0 / (fan_in.max(1) as f64).sqrt();
                Layer {
                    weight: Tensor2::from_fn(fan_out, fan_in, |_, _| rng.random_range(-limit..=limit)),
                    bias: vec![0.0; fan_out],
                    activation: if k + 1 == n_layers { output } else { hidden },
                }
            })
            .collect();
        Self::from_layers(layers)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: Tensor2::zeros(l.weight.rows(), l.weight.cols()),
                    bias: vec![0.0; l.bias.len()],
                    activation: l.activation,
                })
                .collect(),
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn forward(&self, input: &[f64]) -> Result<Trace> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut current = input.to_vec();
        for (k, layer) in self.layers.iter().enumerate() {
            if current.len() != layer.input_dim() {
                return Err(Error::dim(format!("layer {k} input"), layer.input_dim(), current.len()));
            }
            let mut a = layer.weight.matvec(&current);
            for (ai, bi) in a.iter_mut().zip(&layer.bias) {
                *ai += bi;
            }
            let post: Vec<f64> = a.iter().map(|&v| layer.activation.apply(v)).collect();
            inputs.push(current);
            pre.push(a);
            current = post;
        }
        Ok(Trace {
            inputs,
            pre,
            output: current,
        })
    }

    /// Output only; skips building a trace.
    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>> {
        let mut current = input.to_vec();
        for (k, layer) in self.layers.iter().enumerate() {
            if current.len() != layer.input_dim() {
                return Err(Error::dim(format!("layer {k} input"), layer.input_dim(), current.len()));
            }
            let mut a = layer.weight.matvec(&current);
            for (ai, bi) in a.iter_mut().zip(&layer.bias) {
                *ai = layer.activation.apply(*ai + bi);
            }
            current = a;
        }
        Ok(current)
    }

    /// Gradients of a scalar loss whose gradient at the network output is
    /// `output_grad`. Returns parameter gradients and the input gradient.
    pub fn backward(&self, trace: &Trace, output_grad: &[f64]) -> Result<(Mlp, Vec<f64>)> {
        let mut grads = self.zeros_like();
        let input_grad = self.backward_into(trace, output_grad, 1.0, Some(&mut grads))?;
        Ok((grads, input_grad))
    }

    /// Like [`Mlp::backward`] but accumulates `scale ·` parameter gradients
    /// into `acc` (when given) instead of allocating.
    pub fn backward_into(
        &self,
        trace: &Trace,
        output_grad: &[f64],
        scale: f64,
        mut acc: Option<&mut Mlp>,
    ) -> Result<Vec<f64>> {
        if trace.pre.len() != self.layers.len() {
            return Err(Error::dim("trace layers", self.layers.len(), trace.pre.len()));
        }
        if output_grad.len() != self.output_dim() {
            return Err(Error::dim("output gradient", self.output_dim(), output_grad.len()));
        }
        if let Some(acc) = acc.as_deref() {
            if acc.layers.len() != self.layers.len() {
                return Err(Error::dim("gradient layers", self.layers.len(), acc.layers.len()));
            }
        }
        let mut upstream = output_grad.to_vec();
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let pre = &trace.pre[k];
            if pre.len() != layer.output_dim() || trace.inputs[k].len() != layer.input_dim() {
                return Err(Error::dim(format!("trace of layer {k}"), layer.output_dim(), pre.len()));
            }
            let post_of = |i: usize| {
                if k + 1 < self.layers.len() {
                    trace.inputs[k + 1][i]
                } else {
                    trace.output[i]
                }
            };
            let delta: Vec<f64> = upstream
                .iter()
                .enumerate()
                .map(|(i, g)| g * layer.activation.derivative(pre[i], post_of(i)))
                .collect();
            if let Some(acc) = acc.as_deref_mut() {
                let g = &mut acc.layers[k];
                g.weight.add_outer(scale, &delta, &trace.inputs[k]);
                axpy(&mut g.bias, scale, &delta);
            }
            upstream = layer.weight.matvec_t(&delta);
        }
        Ok(upstream)
    }

    /// `self += a · other` (shapes must match).
    pub fn add_scaled(&mut self, a: f64, other: &Mlp) {
        for (l, o) in self.layers.iter_mut().zip(&other.layers) {
            axpy(l.weight.data_mut(), a, o.weight.data());
            axpy(&mut l.bias, a, &o.bias);
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| dot(l.weight.data(), l.weight.data()) + dot(&l.bias, &l.bias))
            .sum()
    }
}

/// Flat parameter access, used by the optimizer and finite differences.
pub trait Parameterized {
    fn num_params(&self) -> usize;
    fn write_params(&self, out: &mut Vec<f64>);
    /// Reads `num_params()` values from the front of `src` and advances it.
    fn read_params(&mut self, src: &mut &[f64]);

    fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.write_params(&mut out);
        out
    }

    fn set_flat_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::dim("flat parameters", self.num_params(), values.len()));
        }
        let mut src = values;
        self.read_params(&mut src);
        Ok(())
    }
}

pub(crate) fn take<'a>(src: &mut &'a [f64], n: usize) -> &'a [f64] {
    let (head, tail) = src.split_at(n);
    *src = tail;
    head
}

impl Parameterized for Mlp {
    fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.data().len() + l.bias.len()).sum()
    }

    fn write_params(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(&l.bias);
        }
    }

    fn read_params(&mut self, src: &mut &[f64]) {
        for l in &mut self.layers {
            let n = l.weight.data().len();
            l.weight.data_mut().copy_from_slice(take(src, n));
            let n = l.bias.len();
            l.bias.copy_from_slice(take(src, n));
        }
    }
}

impl Parameterized for Vec<f64> {
    fn num_params(&self) -> usize {
        self.len()
    }

    fn write_params(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self);
    }

    fn read_params(&mut self, src: &mut &[f64]) {
        let n = self.len();
        self.copy_from_slice(take(src, n));
    }
}

/// Central-difference gradient of `loss` at `params`.
pub fn finite_diff_gradient<F>(mut loss: F, params: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step {step} must be > 0"
        )));
    }
    let mut probe = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let up = loss(&probe);
        probe[i] = orig - step;
        let down = loss(&probe);
        probe[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("loss evaluation at coordinate {i}")));
        }
        grad.push((up - down) / (2.0 * step));
    }
    Ok(grad)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    let denom = na.max(nb);
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam moment accumulators for one flat parameter group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<f64>,
    second: Vec<f64>,
}

impl OptimizerState {
    pub fn new(num_params: usize, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: vec![0.0; num_params],
            second: vec![0.0; num_params],
        }
    }

    pub fn len(&self) -> usize {
        self.first.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first.is_empty()
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.first
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.second
    }
}

/// One bias-corrected Adam update. On a non-finite gradient nothing is
/// modified.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut OptimizerState) -> Result<()> {
    if params.len() != state.len() {
        return Err(Error::dim("optimizer state", state.len(), params.len()));
    }
    if grads.len() != params.len() {
        return Err(Error::dim("gradient", params.len(), grads.len()));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient entry {i}")));
    }
    let AdamConfig {
        learning_rate,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.first[i] = beta1 * state.first[i] + (1.0 - beta1) * g;
        state.second[i] = beta2 * state.second[i] + (1.0 - beta2) * g * g;
        let m_hat = state.first[i] / c1;
        let v_hat = state.second[i] / c2;
        params[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
    }
    Ok(())
}

/// Splits an encoder output `[μ, raw]` into the mean and `σ = softplus(raw) + floor`.
pub fn gaussian_head(output: &[f64], floor: f64) -> (Vec<f64>, Vec<f64>) {
    let half = output.len() / 2;
    let mu = output[..half].to_vec();
    let sigma = output[half..].iter().map(|&r| softplus(r) + floor).collect();
    (mu, sigma)
}

/// Maps gradients w.r.t. `(μ, σ)` back to the raw encoder output.
pub fn gaussian_head_backward(output: &[f64], grad_mu: &[f64], grad_sigma: &[f64]) -> Vec<f64> {
    let half = output.len() / 2;
    let mut g = Vec::with_capacity(output.len());
    g.extend_from_slice(grad_mu);
    g.extend(output[half..].iter().zip(grad_sigma).map(|(&r, &gs)| gs * sigmoid(r)));
    g
}
