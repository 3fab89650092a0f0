//! Log importance weights `log w = log p - log p''` for samples of the
//! diversity-coupled sampler, where `p''` is the marginal of `v + r`.
//!
//! The weight starts at `log w = 0` at `t = 0` and is integrated with
//! left-endpoint Euler quadrature on the sampling grid, either along each
//! realized trajectory (default) or holding the final sample fixed.
//!
//! For rectified flows both scores follow from velocities, so the rates need
//! only `v`, `r`, `∇·r`, and for trajectories the diversity velocity `u`:
//!
//! ```text
//! along: ∇·r + (t v - x)/(1-t) · r + t/(1-t) (r - u) · r
//! fixed: ∇·r + r · (2t v + t r - x)/(1-t)
//! ```

use std::fmt;
use std::str::FromStr;

use ndarray::{ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::nnet::VelocityNet;
use crate::rectflow::{TimeGrid, VelocityField, T_EPS};
use crate::sampler::JointSampleSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WeightMethod {
    AlongTrajectory,
    FixedPosition,
    BaselineRatio,
}

impl WeightMethod {
    pub fn name(self) -> &'static str {
        match self {
            WeightMethod::AlongTrajectory => "along_trajectory",
            WeightMethod::FixedPosition => "fixed_position",
            WeightMethod::BaselineRatio => "baseline_ratio",
        }
    }
}

impl fmt::Display for WeightMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WeightMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [WeightMethod::AlongTrajectory, WeightMethod::FixedPosition, WeightMethod::BaselineRatio]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown weight method `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightEstimate {
    pub log_w: f64,
    pub method: WeightMethod,
    /// Integrand value at each grid step (empty for baselines).
    pub rates: Vec<f64>,
}

fn check_time(t: f64) -> Result<()> {
    if t >= 1.0 - T_EPS {
        return Err(Error::TimeNearOne { t, limit: 1.0 - T_EPS });
    }
    Ok(())
}

fn check_dims(lens: &[usize]) -> Result<()> {
    for &l in &lens[1..] {
        if l != lens[0] {
            return Err(Error::DimensionMismatch { expected: lens[0], got: l });
        }
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Rate of `log w` along a trajectory at its own state `x`.
pub fn rate_along_rf(x: &[f64], v: &[f64], r: &[f64], u: &[f64], div_r: f64, t: f64) -> Result<f64> {
    check_time(t)?;
    check_dims(&[x.len(), v.len(), r.len(), u.len()])?;
    let c = 1.0 / (1.0 - t);
    let mut score_term = 0.0;
    let mut push_term = 0.0;
    for l in 0..x.len() {
        score_term += (t * v[l] - x[l]) * r[l];
        push_term += (r[l] - u[l]) * r[l];
    }
    Ok(div_r + c * score_term + t * c * push_term)
}

/// Rate of `log w` at a fixed position `x`.
pub fn rate_fixed_rf(x: &[f64], v: &[f64], r: &[f64], div_r: f64, t: f64) -> Result<f64> {
    check_time(t)?;
    check_dims(&[x.len(), v.len(), r.len()])?;
    let inner: f64 = (0..x.len()).map(|l| r[l] * (2.0 * t * v[l] + t * r[l] - x[l])).sum();
    Ok(div_r + inner / (1.0 - t))
}

/// Fixed-position rate for a general flow with explicit scores `s` (of `p_t`)
/// and `s_marg` (of the residual-augmented marginal).
pub fn rate_fixed_general(v: &[f64], r: &[f64], s: &[f64], s_marg: &[f64], div_r: f64) -> Result<f64> {
    check_dims(&[v.len(), r.len(), s.len(), s_marg.len()])?;
    let diff: Vec<f64> = s_marg.iter().zip(s).map(|(a, b)| a - b).collect();
    Ok(div_r + dot(s_marg, r) + dot(v, &diff))
}

/// Along-trajectory rate for a general flow with explicit scores.
pub fn rate_along_general(r: &[f64], u: &[f64], s: &[f64], s_marg: &[f64], div_r: f64) -> Result<f64> {
    check_dims(&[r.len(), u.len(), s.len(), s_marg.len()])?;
    let diff: Vec<f64> = s_marg.iter().zip(s).map(|(a, b)| a - b).collect();
    Ok(div_r + dot(s_marg, r) - dot(&diff, u))
}

fn check_grid(set: &JointSampleSet, grid: &TimeGrid) -> Result<()> {
    if set.times.as_slice() != grid.knots() {
        return Err(Error::InvalidArgument(format!(
            "sample set was drawn on a {}-step grid, weights requested on {} steps",
            set.n_steps(),
            grid.n_steps()
        )));
    }
    Ok(())
}

/// Integrate `log w` along every recorded trajectory of `set`.
pub fn integrate_logw_along(set: &JointSampleSet, residual: &VelocityNet, grid: &TimeGrid) -> Result<Vec<WeightEstimate>> {
    check_grid(set, grid)?;
    if residual.dim() != set.dim() {
        return Err(Error::DimensionMismatch {
            expected: set.dim(),
            got: residual.dim(),
        });
    }
    let n = set.n();
    let mut out: Vec<WeightEstimate> = (0..n)
        .map(|_| WeightEstimate {
            log_w: 0.0,
            method: WeightMethod::AlongTrajectory,
            rates: Vec::with_capacity(grid.n_steps()),
        })
        .collect();
    for step in 0..grid.n_steps() {
        let (t, t_next) = grid.step(step);
        let x = set.positions_at(step);
        let v = set.v.index_axis(Axis(0), step);
        let u = set.u.index_axis(Axis(0), step);
        let r = residual.forward_batch(x, t);
        let div = residual.jacobian_trace_batch(x, &vec![t; n])?;
        for (i, est) in out.iter_mut().enumerate() {
            let rate = rate_along_rf(
                x.row(i).as_slice().expect("row-major"),
                v.row(i).as_slice().expect("row-major"),
                r.row(i).as_slice().expect("row-major"),
                u.row(i).as_slice().expect("row-major"),
                div[i],
                t,
            )?;
            est.rates.push(rate);
            est.log_w += (t_next - t) * rate;
        }
    }
    Ok(out)
}

/// Integrate `log w` holding each row of `xs` fixed over the grid.
pub fn integrate_logw_fixed_batch(
    xs: ArrayView2<f64>,
    base: &dyn VelocityField,
    residual: &VelocityNet,
    grid: &TimeGrid,
) -> Result<Vec<WeightEstimate>> {
    let (n, d) = xs.dim();
    check_dims(&[d, base.dim(), residual.dim()])?;
    let xs = xs.as_standard_layout();
    let mut out: Vec<WeightEstimate> = (0..n)
        .map(|_| WeightEstimate {
            log_w: 0.0,
            method: WeightMethod::FixedPosition,
            rates: Vec::with_capacity(grid.n_steps()),
        })
        .collect();
    for step in 0..grid.n_steps() {
        let (t, t_next) = grid.step(step);
        let v = base.velocity_batch(xs.view(), t);
        let r = residual.forward_batch(xs.view(), t);
        let div = residual.jacobian_trace_batch(xs.view(), &vec![t; n])?;
        for (i, est) in out.iter_mut().enumerate() {
            let rate = rate_fixed_rf(
                xs.row(i).as_slice().expect("row-major"),
                v.row(i).as_slice().expect("row-major"),
                r.row(i).as_slice().expect("row-major"),
                div[i],
                t,
            )?;
            est.rates.push(rate);
            est.log_w += (t_next - t) * rate;
        }
    }
    Ok(out)
}

pub fn integrate_logw_fixed(
    x1: &[f64],
    base: &dyn VelocityField,
    residual: &VelocityNet,
    grid: &TimeGrid,
) -> Result<WeightEstimate> {
    let view = ArrayView2::from_shape((1, x1.len()), x1).expect("row view");
    Ok(integrate_logw_fixed_batch(view, base, residual, grid)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::{circle_mixture, WeightMode};
    use crate::nnet::Activation;
    use crate::rectflow::{score_from_velocity, BaseVelocity, FlowModel, GmmVelocity};
    use crate::sampler::{sample_joint, JointConfig, TrialSeed};
    use crate::scorereg::RegMode;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn along_hand_case() {
        let r = rate_along_rf(&[0.2], &[1.0], &[0.1], &[0.0], 0.3, 0.5).unwrap();
        assert!((r - 0.37).abs() < 1e-12);
    }

    #[test]
    fn fixed_hand_case() {
        let r = rate_fixed_rf(&[0.2], &[1.0], &[0.1], 0.3, 0.5).unwrap();
        assert!((r - 0.47).abs() < 1e-12);
    }

    #[test]
    fn rates_vanish_without_residual() {
        assert_eq!(rate_along_rf(&[0.4, 1.0], &[2.0, 1.0], &[0.0, 0.0], &[3.0, -1.0], 0.0, 0.7).unwrap(), 0.0);
        assert_eq!(rate_fixed_rf(&[0.4, 1.0], &[2.0, 1.0], &[0.0, 0.0], 0.0, 0.7).unwrap(), 0.0);
    }

    #[test]
    fn matching_push_cancels_last_term() {
        let (x, v, r) = ([0.3, -0.2], [1.0, 0.5], [0.2, 0.4]);
        let t = 0.6;
        let got = rate_along_rf(&x, &v, &r, &r, 0.1, t).unwrap();
        let s = score_from_velocity(&v, &x, t).unwrap();
        assert!((got - (0.1 + dot(&s, &r))).abs() < 1e-14);
    }

    #[test]
    fn fixed_rate_at_time_zero() {
        let got = rate_fixed_rf(&[0.5, 2.0], &[9.0, 9.0], &[0.2, -0.1], 0.25, 0.0).unwrap();
        assert!((got - (0.25 - (0.1 - 0.2))).abs() < 1e-15);
    }

    #[test]
    fn rates_reject_t_near_one() {
        assert!(rate_along_rf(&[0.0], &[0.0], &[0.0], &[0.0], 0.0, 1.0).is_err());
        assert!(rate_fixed_rf(&[0.0], &[0.0], &[0.0], 0.0, 1.0 - 1e-7).is_err());
    }

    #[test]
    fn general_forms_reduce_to_rectified_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let d = rng.random_range(1..5);
            let t = 0.93 * rng.random::<f64>();
            let mut draw = || (0..d).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<f64>>();
            let (x, v, r, u) = (draw(), draw(), draw(), draw());
            let div = 0.37;
            let s = score_from_velocity(&v, &x, t).unwrap();
            let vr: Vec<f64> = v.iter().zip(&r).map(|(a, b)| a + b).collect();
            let s_marg = score_from_velocity(&vr, &x, t).unwrap();
            let gen_f = rate_fixed_general(&v, &r, &s, &s_marg, div).unwrap();
            let rf_f = rate_fixed_rf(&x, &v, &r, div, t).unwrap();
            assert!((gen_f - rf_f).abs() <= 1e-12 * (1.0 + rf_f.abs()));
            let gen_a = rate_along_general(&r, &u, &s, &s_marg, div).unwrap();
            let rf_a = rate_along_rf(&x, &v, &r, &u, div, t).unwrap();
            assert!((gen_a - rf_a).abs() <= 1e-12 * (1.0 + rf_a.abs()));
        }
    }

    #[test]
    fn zero_residual_gives_exact_zero_weights() {
        let g = circle_mixture(4, 2, 1.0, 0.05, 0.05, WeightMode::Geometric).unwrap();
        let model = FlowModel::new(BaseVelocity::Exact(GmmVelocity::new(g)));
        let grid = TimeGrid::uniform(20).unwrap();
        let set = sample_joint(
            &model,
            5,
            &grid,
            &JointConfig {
                reg: RegMode::Soft,
                ..JointConfig::default()
            },
            TrialSeed::new(1, 1),
        )
        .unwrap();
        let zero = VelocityNet::zeros(2, &[8, 8], Activation::Silu);
        for est in integrate_logw_along(&set, &zero, &grid).unwrap() {
            assert_eq!(est.log_w, 0.0);
            assert_eq!(est.rates.len(), 20);
        }
        for est in integrate_logw_fixed_batch(set.finals(), &model.base, &zero, &grid).unwrap() {
            assert_eq!(est.log_w, 0.0);
        }
        let other = TimeGrid::uniform(10).unwrap();
        assert!(integrate_logw_along(&set, &zero, &other).is_err());
    }

    #[test]
    fn along_quadrature_is_left_endpoint_sum() {
        let g = circle_mixture(3, 2, 0.0, 0.2, 0.2, WeightMode::Uniform).unwrap();
        let model = FlowModel::new(BaseVelocity::Exact(GmmVelocity::new(g)));
        let grid = TimeGrid::uniform(8).unwrap();
        let set = sample_joint(&model, 3, &grid, &JointConfig::default(), TrialSeed::new(2, 0)).unwrap();
        let res = VelocityNet::new(2, &[6], Activation::Tanh, &mut ChaCha8Rng::seed_from_u64(4));
        let est = integrate_logw_along(&set, &res, &grid).unwrap();
        for (i, e) in est.iter().enumerate() {
            let mut acc = 0.0;
            for step in 0..8 {
                let t = grid.knots()[step];
                let x = set.positions_at(step).row(i).to_vec();
                let v = set.v.index_axis(Axis(0), step).row(i).to_vec();
                let u = set.u.index_axis(Axis(0), step).row(i).to_vec();
                let r = res.forward(&x, t).unwrap();
                let div = res.jacobian_trace(&x, t).unwrap();
                acc += 0.125 * rate_along_rf(&x, &v, &r, &u, div, t).unwrap();
            }
            assert!((e.log_w - acc).abs() < 1e-12);
        }
    }
}
