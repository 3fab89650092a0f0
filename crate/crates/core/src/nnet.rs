//! Dense feed-forward network over `(x, t)` with hand-written reverse mode.
//!
//! The input row is `x` with the scalar time appended, so the first layer
//! has width `d + 1` and the last has width `d`. Hidden layers use a smooth
//! activation: the divergence `∇_x · f` must be continuous for the weight
//! evolution to be well defined.
//!
//! All batch kernels go through `matrixmultiply::dgemm`. Parameters live in
//! one flat buffer (per layer: row-major `out × in` weights, then biases) so
//! the optimizer and the checkpoint format work on a single slice.

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2};
use rand::Rng;

use crate::error::{Error, Result};

/// Largest dimension for which [`VelocityNet::jacobian_trace`] is allowed.
pub const MAX_TRACE_DIM: usize = 32;

const CHECKPOINT_MAGIC: &str = "iwflow-net v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// `z · sigmoid(z)`.
    Silu,
    Tanh,
}

impl Activation {
    fn name(self) -> &'static str {
        match self {
            Activation::Silu => "silu",
            Activation::Tanh => "tanh",
        }
    }

    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Silu => z / (1.0 + (-z).exp()),
            Activation::Tanh => z.tanh(),
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
            Activation::Tanh => {
                let th = z.tanh();
                1.0 - th * th
            }
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "silu" => Ok(Activation::Silu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::InvalidArgument(format!(
                "unknown activation `{other}` (expected silu|tanh)"
            ))),
        }
    }
}

/// Feed-forward velocity network `(x, t) ↦ R^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityNet {
    widths: Vec<usize>,
    activation: Activation,
    params: Vec<f64>,
}

/// Cached activations of one batched forward pass.
struct Tape {
    batch: usize,
    /// `pre[l]`: pre-activation of layer `l`, `batch × widths[l+1]`.
    pre: Vec<Vec<f64>>,
    /// `post[0]` is the input; `post[l+1]` the activated output of layer `l`.
    post: Vec<Vec<f64>>,
}

impl VelocityNet {
    /// Network for points in `R^dim` with the given hidden widths, all parameters zero.
    pub fn zeros(dim: usize, hidden: &[usize], activation: Activation) -> Self {
        assert!(dim >= 1, "dimension must be at least 1");
        assert!(hidden.iter().all(|&h| h > 0), "hidden widths must be positive");
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(dim + 1);
        widths.extend_from_slice(hidden);
        widths.push(dim);
        let n = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Self {
            widths,
            activation,
            params: vec![0.0; n],
        }
    }

    /// Uniform fan-in initialization: every weight and bias of a layer with
    /// fan-in `m` is drawn from `U(-1/√m, 1/√m)`.
    pub fn new<R: Rng + ?Sized>(dim: usize, hidden: &[usize], activation: Activation, rng: &mut R) -> Self {
        let mut net = Self::zeros(dim, hidden, activation);
        let mut off = 0;
        for w in net.widths.clone().windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            for p in &mut net.params[off..off + fan_in * fan_out + fan_out] {
                *p = rng.random_range(-bound..bound);
            }
            off += fan_in * fan_out + fan_out;
        }
        net
    }

    pub fn dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    /// `(weight offset, bias offset)` of layer `l`.
    fn offsets(&self, l: usize) -> (usize, usize) {
        let mut off = 0;
        for w in self.widths.windows(2).take(l) {
            off += w[0] * w[1] + w[1];
        }
        (off, off + self.widths[l] * self.widths[l + 1])
    }

    fn input_matrix(&self, xs: ArrayView2<f64>, ts: &[f64]) -> Vec<f64> {
        let d = self.dim();
        assert_eq!(xs.ncols(), d, "input dimension mismatch");
        assert_eq!(xs.nrows(), ts.len(), "one time per row required");
        let mut input = Vec::with_capacity(xs.nrows() * (d + 1));
        for (row, &t) in xs.rows().into_iter().zip(ts) {
            input.extend(row.iter().copied());
            input.push(t);
        }
        input
    }

    fn forward_tape(&self, input: Vec<f64>, batch: usize) -> Tape {
        let layers = self.n_layers();
        let mut pre = Vec::with_capacity(layers);
        let mut post = Vec::with_capacity(layers + 1);
        post.push(input);
        for l in 0..layers {
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            let (w_off, b_off) = self.offsets(l);
            let bias = &self.params[b_off..b_off + n_out];
            let mut z = Vec::with_capacity(batch * n_out);
            for _ in 0..batch {
                z.extend_from_slice(bias);
            }
            // z (batch × out) += post (batch × in) · Wᵀ (in × out)
            unsafe {
                matrixmultiply::dgemm(
                    batch,
                    n_in,
                    n_out,
                    1.0,
                    post[l].as_ptr(),
                    n_in as isize,
                    1,
                    self.params[w_off..].as_ptr(),
                    1,
                    n_in as isize,
                    1.0,
                    z.as_mut_ptr(),
                    n_out as isize,
                    1,
                );
            }
            let a = if l + 1 < layers {
                z.iter().map(|&v| self.activation.apply(v)).collect()
            } else {
                z.clone()
            };
            pre.push(z);
            post.push(a);
        }
        Tape { batch, pre, post }
    }

    /// Backpropagate `d_out` (batch × d). Accumulates parameter gradients into
    /// `grad` when given and returns the gradient with respect to the input rows.
    fn backward(&self, tape: &Tape, d_out: Vec<f64>, mut grad: Option<&mut [f64]>) -> Vec<f64> {
        let batch = tape.batch;
        let layers = self.n_layers();
        let mut delta = d_out;
        for l in (0..layers).rev() {
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            if l + 1 < layers {
                for (dv, &z) in delta.iter_mut().zip(&tape.pre[l]) {
                    *dv *= self.activation.derivative(z);
                }
            }
            let (w_off, b_off) = self.offsets(l);
            if let Some(g) = grad.as_deref_mut() {
                // dW (out × in) += deltaᵀ (out × batch) · post (batch × in)
                unsafe {
                    matrixmultiply::dgemm(
                        n_out,
                        batch,
                        n_in,
                        1.0,
                        delta.as_ptr(),
                        1,
                        n_out as isize,
                        tape.post[l].as_ptr(),
                        n_in as isize,
                        1,
                        1.0,
                        g[w_off..].as_mut_ptr(),
                        n_in as isize,
                        1,
                    );
                }
                let gb = &mut g[b_off..b_off + n_out];
                for row in delta.chunks_exact(n_out) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
            }
            // d_prev (batch × in) = delta (batch × out) · W (out × in)
            let mut prev = vec![0.0; batch * n_in];
            unsafe {
                matrixmultiply::dgemm(
                    batch,
                    n_out,
                    n_in,
                    1.0,
                    delta.as_ptr(),
                    n_out as isize,
                    1,
                    self.params[w_off..].as_ptr(),
                    n_in as isize,
                    1,
                    0.0,
                    prev.as_mut_ptr(),
                    n_in as isize,
                    1,
                );
            }
            delta = prev;
        }
        delta
    }

    /// Network output for one point.
    pub fn forward(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        let view = ArrayView2::from_shape((1, x.len()), x).unwrap();
        Ok(self.forward_rows(view, &[t]).into_raw_vec_and_offset().0)
    }

    /// Outputs for every row of `xs`, row `i` evaluated at time `ts[i]`.
    pub fn forward_rows(&self, xs: ArrayView2<f64>, ts: &[f64]) -> Array2<f64> {
        let batch = xs.nrows();
        let tape = self.forward_tape(self.input_matrix(xs, ts), batch);
        let out = tape.post.into_iter().last().unwrap();
        Array2::from_shape_vec((batch, self.dim()), out).unwrap()
    }

    /// Outputs for every row of `xs` at a shared time `t`.
    pub fn forward_batch(&self, xs: ArrayView2<f64>, t: f64) -> Array2<f64> {
        self.forward_rows(xs, &vec![t; xs.nrows()])
    }

    /// Mean squared residual `(1/B) Σ ‖target_i − f(x_i, t_i)‖²` and its
    /// gradient with respect to all parameters.
    pub fn loss_and_grad(&self, xs: ArrayView2<f64>, ts: &[f64], targets: ArrayView2<f64>) -> (f64, Vec<f64>) {
        let batch = xs.nrows();
        assert!(batch > 0, "empty batch");
        assert_eq!(targets.dim(), xs.dim(), "target shape mismatch");
        let tape = self.forward_tape(self.input_matrix(xs, ts), batch);
        let out = tape.post.last().unwrap();
        let scale = 2.0 / batch as f64;
        let mut loss = 0.0;
        let mut d_out = Vec::with_capacity(out.len());
        for (o, y) in out.iter().zip(targets.iter()) {
            let r = y - o;
            loss += r * r;
            d_out.push(-scale * r);
        }
        let mut grad = vec![0.0; self.n_params()];
        self.backward(&tape, d_out, Some(&mut grad));
        (loss / batch as f64, grad)
    }

    /// Mean squared residual only.
    pub fn loss(&self, xs: ArrayView2<f64>, ts: &[f64], targets: ArrayView2<f64>) -> f64 {
        let out = self.forward_rows(xs, ts);
        (&out - &targets).mapv(|v| v * v).sum() / xs.nrows() as f64
    }

    /// Gradient of the mean squared residual with respect to the parameters.
    pub fn grad_params(&self, xs: ArrayView2<f64>, ts: &[f64], targets: ArrayView2<f64>) -> Vec<f64> {
        self.loss_and_grad(xs, ts, targets).1
    }

    /// `∂/∂x (cotangent · f(x, t))` for one point.
    pub fn vjp_input(&self, x: &[f64], t: f64, cotangent: &[f64]) -> Vec<f64> {
        let view = ArrayView2::from_shape((1, x.len()), x).unwrap();
        let cot = ArrayView2::from_shape((1, cotangent.len()), cotangent).unwrap();
        self.vjp_batch(view, t, cot).into_raw_vec_and_offset().0
    }

    /// Row-wise input vector–Jacobian products at a shared time.
    pub fn vjp_batch(&self, xs: ArrayView2<f64>, t: f64, cotangents: ArrayView2<f64>) -> Array2<f64> {
        let batch = xs.nrows();
        let d = self.dim();
        assert_eq!(cotangents.dim(), (batch, d), "cotangent shape mismatch");
        let tape = self.forward_tape(self.input_matrix(xs, &vec![t; batch]), batch);
        let d_in = self.backward(&tape, cotangents.iter().copied().collect(), None);
        let mut out = Array2::zeros((batch, d));
        for (i, row) in d_in.chunks_exact(d + 1).enumerate() {
            for l in 0..d {
                out[[i, l]] = row[l];
            }
        }
        out
    }

    /// Exact divergence `Σ_i ∂f_i/∂x_i` for every row, by `d` basis-cotangent
    /// reverse passes over one shared forward pass.
    pub fn jacobian_trace_batch(&self, xs: ArrayView2<f64>, ts: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim();
        if d > MAX_TRACE_DIM {
            return Err(Error::InvalidArgument(format!(
                "jacobian trace limited to d <= {MAX_TRACE_DIM}, got {d}"
            )));
        }
        let batch = xs.nrows();
        let tape = self.forward_tape(self.input_matrix(xs, ts), batch);
        let mut trace = vec![0.0; batch];
        for axis in 0..d {
            let mut cot = vec![0.0; batch * d];
            for i in 0..batch {
                cot[i * d + axis] = 1.0;
            }
            let d_in = self.backward(&tape, cot, None);
            for i in 0..batch {
                trace[i] += d_in[i * (d + 1) + axis];
            }
        }
        Ok(trace)
    }

    pub fn jacobian_trace(&self, x: &[f64], t: f64) -> Result<f64> {
        let view = ArrayView2::from_shape((1, x.len()), x).unwrap();
        Ok(self.jacobian_trace_batch(view, &[t])?[0])
    }

    /// Plain-text checkpoint: header, activation, widths, then one parameter per line.
    pub fn to_checkpoint(&self) -> String {
        let mut s = String::with_capacity(self.params.len() * 24 + 64);
        writeln!(s, "{CHECKPOINT_MAGIC}").unwrap();
        writeln!(s, "activation {}", self.activation.name()).unwrap();
        let widths: Vec<String> = self.widths.iter().map(|w| w.to_string()).collect();
        writeln!(s, "widths {}", widths.join(" ")).unwrap();
        writeln!(s, "params {}", self.params.len()).unwrap();
        for p in &self.params {
            writeln!(s, "{p:?}").unwrap();
        }
        s
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        let mut lines = text.lines();
        if lines.next() != Some(CHECKPOINT_MAGIC) {
            return Err(bad(format!("missing `{CHECKPOINT_MAGIC}` header")));
        }
        let field = |line: Option<&str>, key: &str| -> Result<String> {
            let line = line.ok_or_else(|| bad(format!("truncated before `{key}`")))?;
            line.strip_prefix(key)
                .map(|v| v.trim().to_string())
                .ok_or_else(|| bad(format!("expected `{key}`, got `{line}`")))
        };
        let activation: Activation = field(lines.next(), "activation")?.parse()?;
        let widths: Vec<usize> = field(lines.next(), "widths")?
            .split_whitespace()
            .map(|w| w.parse().map_err(|e| bad(format!("bad width `{w}`: {e}"))))
            .collect::<Result<_>>()?;
        if widths.len() < 2 || widths[0] != widths[widths.len() - 1] + 1 || widths.contains(&0) {
            return Err(bad(format!("inconsistent widths {widths:?}")));
        }
        let count: usize = field(lines.next(), "params")?
            .parse()
            .map_err(|e| bad(format!("bad parameter count: {e}")))?;
        let mut net = Self::zeros(widths[widths.len() - 1], &widths[1..widths.len() - 1], activation);
        if count != net.n_params() {
            return Err(bad(format!(
                "widths {widths:?} need {} parameters, header says {count}",
                net.n_params()
            )));
        }
        for (i, p) in net.params.iter_mut().enumerate() {
            let line = lines
                .next()
                .ok_or_else(|| bad(format!("truncated at parameter {i}")))?;
            *p = line
                .trim()
                .parse()
                .map_err(|e| bad(format!("bad parameter {i}: {e}")))?;
            if !p.is_finite() {
                return Err(bad(format!("parameter {i} is not finite")));
            }
        }
        Ok(net)
    }

    /// Load a checkpoint and require the stated layer widths.
    pub fn from_checkpoint_expecting(text: &str, widths: &[usize]) -> Result<Self> {
        let net = Self::from_checkpoint(text)?;
        if net.widths != widths {
            return Err(Error::Checkpoint(format!(
                "width mismatch: checkpoint has {:?}, expected {widths:?}",
                net.widths
            )));
        }
        Ok(net)
    }
}

/// Hyperparameters of the decoupled-weight-decay Adam update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    first: Vec<f64>,
    second: Vec<f64>,
    step: u64,
}

impl OptimizerState {
    pub fn new(n_params: usize, config: AdamWConfig) -> Self {
        Self {
            config,
            first: vec![0.0; n_params],
            second: vec![0.0; n_params],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One AdamW update with bias correction, in place.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.first.len(), "parameter count mismatch");
        assert_eq!(grad.len(), self.first.len(), "gradient length mismatch");
        self.step += 1;
        let AdamWConfig {
            lr,
            weight_decay,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.first[i] = beta1 * self.first[i] + (1.0 - beta1) * g;
            self.second[i] = beta2 * self.second[i] + (1.0 - beta2) * g * g;
            let m_hat = self.first[i] / bc1;
            let v_hat = self.second[i] / bc2;
            params[i] *= 1.0 - lr * weight_decay;
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}
