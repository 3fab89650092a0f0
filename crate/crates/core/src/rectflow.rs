//! Rectified-flow training, Euler integration and the score–velocity identity.
//!
//! A rectified flow is trained on linear interpolants
//! `X_t = (1-t) X_0 + t X_1` with `X_0 ~ N(0, I)`, regressing `X_1 - X_0`.
//! The minimizer is `v(x, t) = E[X_1 - X_0 | X_t = x]`, and for this path the
//! score of `X_t` follows from the velocity in closed form:
//!
//! ```text
//! s(x, t) = (t v(x, t) - x) / (1 - t)
//! ```
//!
//! The same trainer fits a residual `r` on top of a frozen base `v`; the
//! regression target then becomes `X_1 - X_0 - v(X_t, t)`.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::gmm::{log_sum_exp, GmmSpec};
use crate::nnet::{AdamWConfig, OptimizerState, VelocityNet};

/// Scores and weight rates are only evaluated for `t < 1 - T_EPS`.
pub const T_EPS: f64 = 1e-6;

/// Uniform knots `0 = t_0 < … < t_n = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    knots: Vec<f64>,
}

impl TimeGrid {
    pub fn uniform(n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::InvalidArgument("time grid needs at least one step".into()));
        }
        let knots = (0..=n_steps).map(|i| i as f64 / n_steps as f64).collect();
        Ok(Self { knots })
    }

    pub fn n_steps(&self) -> usize {
        self.knots.len() - 1
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// `(t_i, t_{i+1})` for step `i`.
    pub fn step(&self, i: usize) -> (f64, f64) {
        (self.knots[i], self.knots[i + 1])
    }
}

/// A time-dependent vector field on `R^d`.
pub trait VelocityField: Send + Sync {
    fn dim(&self) -> usize;

    /// Velocity of every row of `xs` at a shared time.
    fn velocity_batch(&self, xs: ArrayView2<f64>, t: f64) -> Array2<f64>;

    /// Velocity of row `i` at time `ts[i]`.
    fn velocity_rows(&self, xs: ArrayView2<f64>, ts: &[f64]) -> Array2<f64> {
        let mut out = Array2::zeros(xs.dim());
        for (i, (row, &t)) in xs.rows().into_iter().zip(ts).enumerate() {
            let v = self.velocity_batch(row.insert_axis(Axis(0)), t);
            out.row_mut(i).assign(&v.row(0));
        }
        out
    }

    /// Row-wise `cᵢᵀ ∂v(xᵢ, t)/∂x`.
    fn vjp_batch(&self, xs: ArrayView2<f64>, t: f64, cotangents: ArrayView2<f64>) -> Array2<f64>;

    fn velocity(&self, x: &[f64], t: f64) -> Vec<f64> {
        let view = ArrayView2::from_shape((1, x.len()), x).expect("row view");
        self.velocity_batch(view, t).into_raw_vec_and_offset().0
    }
}

impl VelocityField for VelocityNet {
    fn dim(&self) -> usize {
        VelocityNet::dim(self)
    }

    fn velocity_batch(&self, xs: ArrayView2<f64>, t: f64) -> Array2<f64> {
        self.forward_batch(xs, t)
    }

    fn velocity_rows(&self, xs: ArrayView2<f64>, ts: &[f64]) -> Array2<f64> {
        self.forward_rows(xs, ts)
    }

    fn vjp_batch(&self, xs: ArrayView2<f64>, t: f64, cotangents: ArrayView2<f64>) -> Array2<f64> {
        VelocityNet::vjp_batch(self, xs, t, cotangents)
    }
}

/// The exact rectified-flow velocity `E[X_1 - X_0 | X_t = x]` of a mixture target.
///
/// Given component `j`, each coordinate of `(X_1, X_t)` is jointly Gaussian,
/// so with `s² = (1-t)² + t²σ²`
///
/// ```text
/// v_j(x, t) = μ_j + (tσ² - (1-t)) / s² · (x - tμ_j)
/// ```
///
/// and the field is the responsibility-weighted average of the `v_j` under
/// the time-`t` marginal.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmVelocity {
    target: GmmSpec,
}

impl GmmVelocity {
    pub fn new(target: GmmSpec) -> Self {
        Self { target }
    }

    pub fn target(&self) -> &GmmSpec {
        &self.target
    }

    /// Per-component velocities, slopes `a_j` and scores `g_j = -(x - tμ_j)/s_j²`,
    /// together with the responsibilities.
    fn parts(&self, x: &[f64], t: f64) -> (Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let g = &self.target;
        let d = g.dim();
        let mut log_r = Vec::with_capacity(g.n_components());
        let mut vels = Vec::with_capacity(g.n_components());
        let mut slopes = Vec::with_capacity(g.n_components());
        let mut scores = Vec::with_capacity(g.n_components());
        for ((w, m), s) in g.weights().iter().zip(g.means()).zip(g.stds()) {
            let mut lr = w.ln();
            let mut vj = vec![0.0; d];
            let mut aj = vec![0.0; d];
            let mut gj = vec![0.0; d];
            for l in 0..d {
                let var = (1.0 - t) * (1.0 - t) + t * t * s[l] * s[l];
                let dev = x[l] - t * m[l];
                lr -= 0.5 * (dev * dev / var + var.ln());
                aj[l] = (t * s[l] * s[l] - (1.0 - t)) / var;
                vj[l] = m[l] + aj[l] * dev;
                gj[l] = -dev / var;
            }
            log_r.push(lr);
            vels.push(vj);
            slopes.push(aj);
            scores.push(gj);
        }
        let lse = log_sum_exp(&log_r);
        let resp = log_r.iter().map(|v| (v - lse).exp()).collect();
        (resp, vels, slopes, scores)
    }
}

impl VelocityField for GmmVelocity {
    fn dim(&self) -> usize {
        self.target.dim()
    }

    fn velocity_batch(&self, xs: ArrayView2<f64>, t: f64) -> Array2<f64> {
        let d = self.dim();
        let mut out = Array2::zeros(xs.dim());
        for (i, row) in xs.rows().into_iter().enumerate() {
            let x = row.to_vec();
            let (resp, vels, _, _) = self.parts(&x, t);
            for (r, v) in resp.iter().zip(&vels) {
                for l in 0..d {
                    out[[i, l]] += r * v[l];
                }
            }
        }
        out
    }

    fn vjp_batch(&self, xs: ArrayView2<f64>, t: f64, cotangents: ArrayView2<f64>) -> Array2<f64> {
        let d = self.dim();
        let mut out = Array2::zeros(xs.dim());
        for (i, row) in xs.rows().into_iter().enumerate() {
            let x = row.to_vec();
            let c = cotangents.row(i);
            let (resp, vels, slopes, scores) = self.parts(&x, t);
            let mut mean_score = vec![0.0; d];
            for (r, g) in resp.iter().zip(&scores) {
                for l in 0..d {
                    mean_score[l] += r * g[l];
                }
            }
            for j in 0..resp.len() {
                let cv: f64 = (0..d).map(|l| c[l] * vels[j][l]).sum();
                for l in 0..d {
                    out[[i, l]] += resp[j] * (c[l] * slopes[j][l] + cv * (scores[j][l] - mean_score[l]));
                }
            }
        }
        out
    }
}

/// The pretrained base velocity: a learned network or the exact mixture field.
#[derive(Debug, Clone, PartialEq)]
pub enum BaseVelocity {
    Net(VelocityNet),
    Exact(GmmVelocity),
}

impl VelocityField for BaseVelocity {
    fn dim(&self) -> usize {
        match self {
            BaseVelocity::Net(n) => VelocityField::dim(n),
            BaseVelocity::Exact(g) => g.dim(),
        }
    }

    fn velocity_batch(&self, xs: ArrayView2<f64>, t: f64) -> Array2<f64> {
        match self {
            BaseVelocity::Net(n) => n.velocity_batch(xs, t),
            BaseVelocity::Exact(g) => g.velocity_batch(xs, t),
        }
    }

    fn velocity_rows(&self, xs: ArrayView2<f64>, ts: &[f64]) -> Array2<f64> {
        match self {
            BaseVelocity::Net(n) => n.velocity_rows(xs, ts),
            BaseVelocity::Exact(g) => g.velocity_rows(xs, ts),
        }
    }

    fn vjp_batch(&self, xs: ArrayView2<f64>, t: f64, cotangents: ArrayView2<f64>) -> Array2<f64> {
        match self {
            BaseVelocity::Net(n) => VelocityField::vjp_batch(n, xs, t, cotangents),
            BaseVelocity::Exact(g) => g.vjp_batch(xs, t, cotangents),
        }
    }
}

/// Base velocity `v` with an optional residual `r` (the marginal flow `v + r`).
#[derive(Debug, Clone)]
pub struct FlowModel {
    pub base: BaseVelocity,
    pub residual: Option<VelocityNet>,
}

impl FlowModel {
    pub fn new(base: BaseVelocity) -> Self {
        Self { base, residual: None }
    }

    pub fn with_residual(mut self, residual: VelocityNet) -> Result<Self> {
        if VelocityField::dim(&residual) != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: VelocityField::dim(&residual),
            });
        }
        self.residual = Some(residual);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    /// `v(x, t)` and, when present, `r(x, t)` for every row.
    pub fn evaluate(&self, xs: ArrayView2<f64>, t: f64) -> (Array2<f64>, Option<Array2<f64>>) {
        let v = self.base.velocity_batch(xs, t);
        let r = self.residual.as_ref().map(|r| r.forward_batch(xs, t));
        (v, r)
    }
}

/// `x + Δt · velocity`, the single arithmetic form every sampler uses.
#[inline]
pub fn euler_advance(x: &[f64], dt: f64, velocity: &[f64]) -> Vec<f64> {
    x.iter().zip(velocity).map(|(xi, vi)| xi + dt * vi).collect()
}

/// One Euler step of `v (+ r) + extra` from `t0` to `t1`.
pub fn euler_step(model: &FlowModel, x: &[f64], t0: f64, t1: f64, extra_velocity: &[f64]) -> Result<Vec<f64>> {
    if !(t0 < t1) {
        return Err(Error::InvalidArgument(format!("euler step needs t0 < t1, got {t0} >= {t1}")));
    }
    let d = model.dim();
    for len in [x.len(), extra_velocity.len()] {
        if len != d {
            return Err(Error::DimensionMismatch { expected: d, got: len });
        }
    }
    let mut vel = model.base.velocity(x, t0);
    if let Some(r) = &model.residual {
        for (v, rv) in vel.iter_mut().zip(r.forward(x, t0)?) {
            *v += rv;
        }
    }
    for (v, e) in vel.iter_mut().zip(extra_velocity) {
        *v += e;
    }
    Ok(euler_advance(x, t1 - t0, &vel))
}

/// `s(x, t) = (t v - x) / (1 - t)` for a rectified-flow velocity output `v`.
pub fn score_from_velocity(v_out: &[f64], x: &[f64], t: f64) -> Result<Vec<f64>> {
    if t >= 1.0 - T_EPS {
        return Err(Error::TimeNearOne { t, limit: 1.0 - T_EPS });
    }
    if v_out.len() != x.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: v_out.len(),
        });
    }
    let inv = 1.0 / (1.0 - t);
    Ok(v_out
        .iter()
        .zip(x)
        .map(|(v, xi)| (t * v - xi) * inv)
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Learning rate decays along a cosine from `lr` to `lr * final_lr_fraction`;
    /// `1.0` keeps it constant.
    pub final_lr_fraction: f64,
    /// Share of the targets held out for the per-epoch validation loss.
    pub holdout_fraction: f64,
    /// Abort when the held-out loss has not dropped below its initial value
    /// after this many epochs.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 1000,
            optimizer: AdamWConfig::default(),
            final_lr_fraction: 1.0,
            holdout_fraction: 0.05,
            patience: 20,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    /// Mean minibatch loss per epoch.
    pub train_loss: Vec<f64>,
    /// Held-out loss before training (index 0) and after every epoch.
    pub holdout_loss: Vec<f64>,
}

/// Interpolants and regression targets for a set of endpoint rows.
struct PathBatch {
    xt: Array2<f64>,
    ts: Vec<f64>,
    target: Array2<f64>,
}

fn draw_path_batch<R: Rng + ?Sized>(
    x1: ArrayView2<f64>,
    frozen_base: Option<&dyn VelocityField>,
    rng: &mut R,
) -> PathBatch {
    let (n, d) = x1.dim();
    let mut xt = Array2::zeros((n, d));
    let mut target = Array2::zeros((n, d));
    let mut ts = Vec::with_capacity(n);
    for i in 0..n {
        let t: f64 = rng.random();
        ts.push(t);
        for l in 0..d {
            let x0: f64 = StandardNormal.sample(rng);
            xt[[i, l]] = (1.0 - t) * x0 + t * x1[[i, l]];
            target[[i, l]] = x1[[i, l]] - x0;
        }
    }
    if let Some(base) = frozen_base {
        target -= &base.velocity_rows(xt.view(), &ts);
    }
    PathBatch { xt, ts, target }
}

/// Fit `net` by the rectified-flow regression on `targets` (rows are `X_1` draws).
///
/// With `frozen_base`, `net` is a residual and regresses
/// `X_1 - X_0 - base(X_t, t)`. Every minibatch draws fresh `X_0 ~ N(0, I)` and
/// an independent `t ~ U[0, 1]` per example.
pub fn train_rectified<R: Rng + ?Sized>(
    targets: ArrayView2<f64>,
    net: &mut VelocityNet,
    frozen_base: Option<&dyn VelocityField>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<TrainReport> {
    let (n, d) = targets.dim();
    if n == 0 {
        return Err(Error::InvalidArgument("no training targets".into()));
    }
    if d != net.dim() {
        return Err(Error::DimensionMismatch { expected: net.dim(), got: d });
    }
    if let Some(b) = frozen_base {
        if b.dim() != d {
            return Err(Error::DimensionMismatch { expected: d, got: b.dim() });
        }
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let n_hold = if n >= 20 {
        ((n as f64 * cfg.holdout_fraction).round() as usize).min(n - 1)
    } else {
        0
    };
    let (hold_idx, train_idx) = order.split_at(n_hold);
    let holdout = (n_hold > 0).then(|| {
        let x1 = targets.select(Axis(0), hold_idx);
        draw_path_batch(x1.view(), frozen_base, rng)
    });
    let mut train_idx = train_idx.to_vec();

    let mut opt = OptimizerState::new(net.n_params(), cfg.optimizer);
    let steps_per_epoch = train_idx.len().div_ceil(cfg.batch_size);
    let total_steps = (steps_per_epoch * cfg.epochs).max(1);
    let mut report = TrainReport::default();
    let eval = |net: &VelocityNet| {
        holdout
            .as_ref()
            .map(|h| net.loss(h.xt.view(), &h.ts, h.target.view()))
    };
    if let Some(l) = eval(net) {
        report.holdout_loss.push(l);
    }

    for epoch in 0..cfg.epochs {
        train_idx.shuffle(rng);
        let mut epoch_loss = 0.0;
        for chunk in train_idx.chunks(cfg.batch_size) {
            let progress = opt.step_count() as f64 / total_steps as f64;
            let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
            opt.config.lr = cfg.optimizer.lr * (cfg.final_lr_fraction + (1.0 - cfg.final_lr_fraction) * cos);

            let x1 = targets.select(Axis(0), chunk);
            let batch = draw_path_batch(x1.view(), frozen_base, rng);
            let (loss, grad) = net.loss_and_grad(batch.xt.view(), &batch.ts, batch.target.view());
            if !loss.is_finite() {
                return Err(Error::Training(format!("non-finite minibatch loss in epoch {epoch}")));
            }
            opt.step(net.params_mut(), &grad);
            epoch_loss += loss * chunk.len() as f64;
        }
        report.train_loss.push(epoch_loss / train_idx.len() as f64);

        if let Some(l) = eval(net) {
            if !l.is_finite() {
                return Err(Error::Training(format!("non-finite held-out loss after epoch {epoch}")));
            }
            report.holdout_loss.push(l);
            if epoch + 1 == cfg.patience {
                let initial = report.holdout_loss[0];
                let best = report.holdout_loss[1..].iter().copied().fold(f64::INFINITY, f64::min);
                if best >= initial {
                    return Err(Error::Training(format!(
                        "held-out loss did not decrease in {} epochs (initial {initial:.6}, best {best:.6})",
                        cfg.patience
                    )));
                }
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::{circle_mixture, WeightMode};
    use crate::nnet::Activation;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_model(d: usize) -> FlowModel {
        FlowModel::new(BaseVelocity::Net(VelocityNet::zeros(d, &[4], Activation::Silu)))
    }

    #[test]
    fn grid_is_uniform_and_closed() {
        let g = TimeGrid::uniform(100).unwrap();
        assert_eq!(g.knots()[0], 0.0);
        assert_eq!(*g.knots().last().unwrap(), 1.0);
        assert!(g.knots().windows(2).all(|w| w[0] < w[1]));
        assert!(TimeGrid::uniform(0).is_err());
    }

    #[test]
    fn zero_velocity_leaves_point() {
        let m = zero_model(2);
        assert_eq!(euler_step(&m, &[0.5, -0.5], 0.0, 0.1, &[0.0, 0.0]).unwrap(), vec![0.5, -0.5]);
        assert!(euler_step(&m, &[0.5, -0.5], 0.2, 0.1, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn constant_velocity_integrates_exactly() {
        let m = zero_model(2);
        let grid = TimeGrid::uniform(100).unwrap();
        let c = [0.3, -1.2];
        let mut x = vec![1.0, 2.0];
        for i in 0..grid.n_steps() {
            let (a, b) = grid.step(i);
            x = euler_step(&m, &x, a, b, &c).unwrap();
        }
        assert!((x[0] - 1.3).abs() < 1e-12 && (x[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn euler_error_is_first_order() {
        // dx/dt = t², x(1) - x(0) = 1/3.
        let m = zero_model(1);
        let err = |n: usize| {
            let grid = TimeGrid::uniform(n).unwrap();
            let mut x = vec![0.0];
            for i in 0..n {
                let (a, b) = grid.step(i);
                x = euler_step(&m, &x, a, b, &[a * a]).unwrap();
            }
            (x[0] - 1.0 / 3.0).abs()
        };
        let ratios: Vec<f64> = [25, 50, 100, 200].windows(2).map(|w| err(w[0]) / err(w[1])).collect();
        for r in ratios {
            assert!((r - 2.0).abs() < 0.05, "ratio {r}");
        }
    }

    #[test]
    fn euler_step_is_affine_in_extra_velocity() {
        let net = VelocityNet::new(2, &[6], Activation::Silu, &mut ChaCha8Rng::seed_from_u64(1));
        let m = FlowModel::new(BaseVelocity::Net(net));
        let x = [0.2, -0.1];
        let a = euler_step(&m, &x, 0.3, 0.4, &[1.0, 0.0]).unwrap();
        let b = euler_step(&m, &x, 0.3, 0.4, &[0.0, 2.0]).unwrap();
        let mid = euler_step(&m, &x, 0.3, 0.4, &[0.5, 1.0]).unwrap();
        for l in 0..2 {
            assert!((mid[l] - 0.5 * (a[l] + b[l])).abs() < 1e-15);
        }
    }

    #[test]
    fn score_identity_cases() {
        let s = score_from_velocity(&[5.0, -3.0], &[0.4, 0.2], 0.0).unwrap();
        assert_eq!(s, vec![-0.4, -0.2]);
        let s = score_from_velocity(&[2.0, 4.0], &[1.0, 2.0], 0.5).unwrap();
        assert_eq!(s, vec![0.0, 0.0]);
        assert!(matches!(
            score_from_velocity(&[0.0], &[0.0], 1.0 - 1e-7),
            Err(Error::TimeNearOne { .. })
        ));
    }

    #[test]
    fn exact_mixture_velocity_reproduces_path_score() {
        let g = circle_mixture(4, 2, 1.0, 0.1, 0.1, WeightMode::Geometric).unwrap();
        let field = GmmVelocity::new(g.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &t in &[0.0, 0.1, 0.5, 0.9, 0.99] {
            let marginal = g.path_marginal(t);
            for _ in 0..20 {
                let x = [rng.random_range(-1.0..3.0), rng.random_range(-1.5..1.5)];
                let v = field.velocity(&x, t);
                let s = score_from_velocity(&v, &x, t).unwrap();
                let truth = marginal.score(&x);
                for l in 0..2 {
                    assert!((s[l] - truth[l]).abs() < 1e-8 * (1.0 + truth[l].abs()), "t={t}");
                }
            }
        }
    }

    #[test]
    fn exact_mixture_vjp_matches_finite_differences() {
        let g = circle_mixture(3, 3, 0.5, 0.3, 0.2, WeightMode::Uniform).unwrap();
        let field = GmmVelocity::new(g);
        let x = array![[0.7, 0.4, -0.1]];
        let c = array![[0.3, -1.0, 0.5]];
        let t = 0.6;
        let vjp = field.vjp_batch(x.view(), t, c.view());
        let h = 1e-6;
        for l in 0..3 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[[0, l]] += h;
            xm[[0, l]] -= h;
            let fp = field.velocity_batch(xp.view(), t);
            let fm = field.velocity_batch(xm.view(), t);
            let fd: f64 = (0..3).map(|k| c[[0, k]] * (fp[[0, k]] - fm[[0, k]]) / (2.0 * h)).sum();
            assert!((vjp[[0, l]] - fd).abs() < 1e-6 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn training_rejects_empty_targets() {
        let mut net = VelocityNet::zeros(2, &[4], Activation::Silu);
        let empty = Array2::<f64>::zeros((0, 2));
        let r = train_rectified(empty.view(), &mut net, None, &TrainConfig::default(), &mut ChaCha8Rng::seed_from_u64(0));
        assert!(r.is_err());
    }
}
