//! Euler samplers: independent trajectories of `v`, diversity-coupled joint
//! trajectories of `v + u`, and independent trajectories of `v + r`.
//!
//! Every sampler records the velocities it used at each step, so a set can be
//! replayed exactly and the weight integrators can walk the realized path.

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diversity::{diversity_grads, scale_to_velocity, DiversityConfig};
use crate::error::{Error, Result};
use crate::rectflow::{score_from_velocity, FlowModel, TimeGrid, VelocityField};
use crate::scorereg::{regularize, RegMode};
use crate::stream_rng;

/// Identifies the random stream of one trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TrialSeed {
    pub seed: u64,
    pub trial: u64,
}

impl TrialSeed {
    pub fn new(seed: u64, trial: u64) -> Self {
        Self { seed, trial }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        stream_rng(self.seed, self.trial)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RegOrder {
    /// Regularize each `g`, then normalize the regularized set jointly.
    #[default]
    BeforeScaling,
    /// Normalize first and regularize the resulting velocities.
    AfterScaling,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct JointConfig {
    pub diversity: DiversityConfig,
    pub reg: RegMode,
    pub order: RegOrder,
}

/// `n` trajectories on a shared grid with their per-step velocity records.
#[derive(Debug, Clone, PartialEq)]
pub struct JointSampleSet {
    pub seed: TrialSeed,
    pub times: Vec<f64>,
    /// `(n_steps + 1, n, d)`
    pub positions: Array3<f64>,
    /// Base velocity at the left endpoint of each step, `(n_steps, n, d)`.
    pub v: Array3<f64>,
    /// Diversity velocity after regularization and scaling.
    pub u: Array3<f64>,
    /// Residual velocity, for marginal-flow sets.
    pub r: Option<Array3<f64>>,
    /// Accumulated log importance weights, once computed.
    pub log_w: Option<Vec<f64>>,
}

impl JointSampleSet {
    pub fn n(&self) -> usize {
        self.positions.len_of(Axis(1))
    }

    pub fn dim(&self) -> usize {
        self.positions.len_of(Axis(2))
    }

    pub fn n_steps(&self) -> usize {
        self.v.len_of(Axis(0))
    }

    pub fn initial(&self) -> ArrayView2<'_, f64> {
        self.positions.index_axis(Axis(0), 0)
    }

    pub fn finals(&self) -> ArrayView2<'_, f64> {
        self.positions.index_axis(Axis(0), self.n_steps())
    }

    pub fn positions_at(&self, step: usize) -> ArrayView2<'_, f64> {
        self.positions.index_axis(Axis(0), step)
    }

    /// Total velocity `v + r + u` used at `step`, summed in that order.
    pub fn total_velocity(&self, step: usize) -> Array2<f64> {
        let mut vel = self.v.index_axis(Axis(0), step).to_owned();
        if let Some(r) = &self.r {
            vel += &r.index_axis(Axis(0), step);
        }
        vel += &self.u.index_axis(Axis(0), step);
        vel
    }

    /// Whether re-advancing from the initial positions with the recorded
    /// velocities reproduces every stored position bit for bit.
    pub fn replay_matches(&self) -> bool {
        let mut x = self.initial().to_owned();
        for step in 0..self.n_steps() {
            x = advance(x.view(), self.times[step + 1] - self.times[step], self.total_velocity(step).view());
            if x != self.positions_at(step + 1) {
                return false;
            }
        }
        true
    }
}

fn advance(x: ArrayView2<f64>, dt: f64, vel: ArrayView2<f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    out.zip_mut_with(&vel, |xi, vi| *xi += dt * vi);
    out
}

/// `n × d` standard normal draws, row by row.
pub fn initial_noise<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, d), || StandardNormal.sample(rng))
}

enum Drift<'a> {
    Base,
    Joint(&'a JointConfig),
    Marginal,
}

fn integrate(model: &FlowModel, x0: Array2<f64>, grid: &TimeGrid, drift: Drift<'_>, seed: TrialSeed) -> Result<JointSampleSet> {
    let (n, d) = x0.dim();
    if n == 0 {
        return Err(Error::TooFewPoints { needed: 1, got: 0 });
    }
    if d != model.dim() {
        return Err(Error::DimensionMismatch { expected: model.dim(), got: d });
    }
    let residual = match drift {
        Drift::Marginal => Some(
            model
                .residual
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("marginal sampling needs a residual velocity".into()))?,
        ),
        _ => None,
    };
    let steps = grid.n_steps();
    let mut positions = Array3::zeros((steps + 1, n, d));
    let mut v_rec = Array3::zeros((steps, n, d));
    let mut u_rec = Array3::zeros((steps, n, d));
    let mut r_rec = residual.map(|_| Array3::zeros((steps, n, d)));
    positions.index_axis_mut(Axis(0), 0).assign(&x0);

    let mut x = x0;
    for step in 0..steps {
        let (t, t_next) = grid.step(step);
        let v = model.base.velocity_batch(x.view(), t);
        let mut vel = v.clone();
        if let (Some(net), Some(rec)) = (residual, r_rec.as_mut()) {
            let r = net.forward_batch(x.view(), t);
            vel += &r;
            rec.index_axis_mut(Axis(0), step).assign(&r);
        }
        if let Drift::Joint(cfg) = drift {
            if !cfg.diversity.is_inactive() {
                let u = diversity_velocity(model, x.view(), v.view(), t, cfg)
                    .map_err(|e| Error::Trial {
                        seed: seed.seed,
                        trial: seed.trial,
                        source: Box::new(e),
                    })?;
                vel += &u;
                u_rec.index_axis_mut(Axis(0), step).assign(&u);
            }
        }
        x = advance(x.view(), t_next - t, vel.view());
        v_rec.index_axis_mut(Axis(0), step).assign(&v);
        positions.index_axis_mut(Axis(0), step + 1).assign(&x);
    }
    Ok(JointSampleSet {
        seed,
        times: grid.knots().to_vec(),
        positions,
        v: v_rec,
        u: u_rec,
        r: r_rec,
        log_w: None,
    })
}

/// The regularized, jointly scaled diversity velocity at one step.
pub fn diversity_velocity(
    model: &FlowModel,
    x: ArrayView2<f64>,
    v: ArrayView2<f64>,
    t: f64,
    cfg: &JointConfig,
) -> Result<Array2<f64>> {
    let g = diversity_grads(x, v, &model.base, t, &cfg.diversity)?;
    let reg_rows = |m: Array2<f64>| -> Result<Array2<f64>> {
        if cfg.reg == RegMode::Off {
            return Ok(m);
        }
        let mut out = m;
        for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            let s = score_from_velocity(&v.row(i).to_vec(), &x.row(i).to_vec(), t)?;
            let r = regularize(&row.to_vec(), &s, t, cfg.reg)?;
            row.assign(&ndarray::ArrayView1::from(&r));
        }
        Ok(out)
    };
    let lambda = cfg.diversity.lambda;
    Ok(match cfg.order {
        RegOrder::BeforeScaling => scale_to_velocity(reg_rows(g)?.view(), v, t, lambda),
        RegOrder::AfterScaling => reg_rows(scale_to_velocity(g.view(), v, t, lambda))?,
    })
}

/// Independent trajectories of the base flow.
pub fn sample_iid(model: &FlowModel, n: usize, grid: &TimeGrid, seed: TrialSeed) -> Result<JointSampleSet> {
    let x0 = initial_noise(n, model.dim(), &mut seed.rng());
    integrate(model, x0, grid, Drift::Base, seed)
}

pub fn sample_iid_from(model: &FlowModel, x0: Array2<f64>, grid: &TimeGrid, seed: TrialSeed) -> Result<JointSampleSet> {
    integrate(model, x0, grid, Drift::Base, seed)
}

/// `n` coupled trajectories of `v + u`.
pub fn sample_joint(
    model: &FlowModel,
    n: usize,
    grid: &TimeGrid,
    cfg: &JointConfig,
    seed: TrialSeed,
) -> Result<JointSampleSet> {
    let x0 = initial_noise(n, model.dim(), &mut seed.rng());
    sample_joint_from(model, x0, grid, cfg, seed)
}

pub fn sample_joint_from(
    model: &FlowModel,
    x0: Array2<f64>,
    grid: &TimeGrid,
    cfg: &JointConfig,
    seed: TrialSeed,
) -> Result<JointSampleSet> {
    cfg.diversity.validate()?;
    if !cfg.diversity.is_inactive() && x0.nrows() < 2 {
        return Err(Error::TooFewPoints {
            needed: 2,
            got: x0.nrows(),
        });
    }
    integrate(model, x0, grid, Drift::Joint(cfg), seed)
}

/// Independent trajectories of `v + r`.
pub fn sample_marginal(model: &FlowModel, n: usize, grid: &TimeGrid, seed: TrialSeed) -> Result<JointSampleSet> {
    let x0 = initial_noise(n, model.dim(), &mut seed.rng());
    integrate(model, x0, grid, Drift::Marginal, seed)
}

/// Shuffle a pool of samples and cut it into disjoint groups of `group_size`;
/// leftover rows are dropped.
pub fn regroup_marginal<R: Rng + ?Sized>(
    pool: ArrayView2<f64>,
    group_size: usize,
    rng: &mut R,
) -> Result<Vec<Array2<f64>>> {
    if group_size == 0 {
        return Err(Error::InvalidArgument("group size must be positive".into()));
    }
    if pool.nrows() < group_size {
        return Err(Error::TooFewPoints {
            needed: group_size,
            got: pool.nrows(),
        });
    }
    let mut idx: Vec<usize> = (0..pool.nrows()).collect();
    idx.shuffle(rng);
    Ok(idx
        .chunks_exact(group_size)
        .map(|c| pool.select(Axis(0), c))
        .collect())
}

/// Stack the final samples of several sets into one pool.
pub fn pool_finals<'a>(sets: impl IntoIterator<Item = &'a JointSampleSet>) -> Array2<f64> {
    let views: Vec<ArrayView2<f64>> = sets.into_iter().map(|s| s.finals()).collect();
    if views.is_empty() {
        return Array2::zeros((0, 0));
    }
    ndarray::concatenate(Axis(0), &views).expect("sets share a dimension")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diversity::Objective;
    use crate::gmm::{circle_mixture, WeightMode};
    use crate::nnet::{Activation, VelocityNet};
    use crate::rectflow::{BaseVelocity, GmmVelocity};
    use rand::SeedableRng;

    fn exact_model() -> FlowModel {
        let g = circle_mixture(10, 2, 1.0, 0.05, 0.05, WeightMode::Uniform).unwrap();
        FlowModel::new(BaseVelocity::Exact(GmmVelocity::new(g)))
    }

    fn dpp(reg: RegMode) -> JointConfig {
        JointConfig {
            diversity: DiversityConfig {
                objective: Objective::Dpp,
                ..DiversityConfig::default()
            },
            reg,
            order: RegOrder::BeforeScaling,
        }
    }

    #[test]
    fn zero_net_keeps_noise() {
        let m = FlowModel::new(BaseVelocity::Net(VelocityNet::zeros(3, &[4], Activation::Silu)));
        let grid = TimeGrid::uniform(10).unwrap();
        let set = sample_iid(&m, 4, &grid, TrialSeed::new(1, 0)).unwrap();
        assert_eq!(set.finals(), set.initial());
        assert!(set.u.iter().all(|&u| u == 0.0));
    }

    #[test]
    fn iid_is_reproducible_and_replays() {
        let m = exact_model();
        let grid = TimeGrid::uniform(20).unwrap();
        let a = sample_iid(&m, 5, &grid, TrialSeed::new(9, 3)).unwrap();
        let b = sample_iid(&m, 5, &grid, TrialSeed::new(9, 3)).unwrap();
        assert_eq!(a, b);
        assert!(a.replay_matches());
        let c = sample_iid(&m, 5, &grid, TrialSeed::new(9, 4)).unwrap();
        assert_ne!(a.finals(), c.finals());
    }

    #[test]
    fn inactive_diversity_equals_iid_bitwise() {
        let m = exact_model();
        let grid = TimeGrid::uniform(20).unwrap();
        let seed = TrialSeed::new(2, 7);
        let iid = sample_iid(&m, 6, &grid, seed).unwrap();
        for (objective, lambda) in [(Objective::None, 1.0), (Objective::Dpp, 0.0)] {
            let cfg = JointConfig {
                diversity: DiversityConfig {
                    objective,
                    lambda,
                    ..DiversityConfig::default()
                },
                reg: RegMode::Hard,
                order: RegOrder::BeforeScaling,
            };
            assert_eq!(sample_joint(&m, 6, &grid, &cfg, seed).unwrap(), iid);
        }
    }

    #[test]
    fn joint_set_replays_and_spreads() {
        let m = exact_model();
        let grid = TimeGrid::uniform(50).unwrap();
        let seed = TrialSeed::new(4, 0);
        let set = sample_joint(&m, 10, &grid, &dpp(RegMode::Hard), seed).unwrap();
        assert!(set.replay_matches());
        assert!(set.u.iter().any(|&u| u != 0.0));
        let iid = sample_iid(&m, 10, &grid, seed).unwrap();
        let spread = |x: ArrayView2<f64>| {
            let mut s = 0.0;
            for i in 0..x.nrows() {
                for j in 0..x.nrows() {
                    s += (&x.row(i) - &x.row(j)).mapv(|v| v * v).sum();
                }
            }
            s
        };
        assert!(spread(set.finals()) > spread(iid.finals()));
    }

    #[test]
    fn joint_is_exchangeable() {
        let m = exact_model();
        let grid = TimeGrid::uniform(20).unwrap();
        let x0 = initial_noise(5, 2, &mut ChaCha8Rng::seed_from_u64(0));
        let perm = [3, 0, 4, 1, 2];
        let xp = x0.select(Axis(0), &perm);
        let cfg = dpp(RegMode::Soft);
        let a = sample_joint_from(&m, x0, &grid, &cfg, TrialSeed::new(0, 0)).unwrap();
        let b = sample_joint_from(&m, xp, &grid, &cfg, TrialSeed::new(0, 0)).unwrap();
        let fa = a.finals().select(Axis(0), &perm);
        for (x, y) in fa.iter().zip(b.finals()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn marginal_with_zero_residual_matches_iid() {
        let m = exact_model().with_residual(VelocityNet::zeros(2, &[4], Activation::Silu)).unwrap();
        let grid = TimeGrid::uniform(20).unwrap();
        let seed = TrialSeed::new(5, 1);
        let marg = sample_marginal(&m, 4, &grid, seed).unwrap();
        let iid = sample_iid(&m, 4, &grid, seed).unwrap();
        assert_eq!(marg.positions, iid.positions);
        assert!(marg.replay_matches());
        assert!(sample_marginal(&exact_model(), 4, &grid, seed).is_err());
    }

    #[test]
    fn regroup_partitions_pool() {
        let pool = Array2::from_shape_fn((23, 1), |(i, _)| i as f64);
        let groups = regroup_marginal(pool.view(), 5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(groups.len(), 4);
        let mut seen: Vec<f64> = groups.iter().flat_map(|g| g.iter().copied()).collect();
        seen.sort_by(f64::total_cmp);
        seen.dedup();
        assert_eq!(seen.len(), 20);
        let single = Array2::from_shape_fn((5, 1), |(i, _)| i as f64);
        let g = regroup_marginal(single.view(), 5, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mut back: Vec<f64> = g[0].iter().copied().collect();
        back.sort_by(f64::total_cmp);
        assert_eq!(back, vec![0.0, 1.0, 2.0, 3.0, 4.0]);
        assert!(regroup_marginal(single.view(), 6, &mut ChaCha8Rng::seed_from_u64(2)).is_err());
    }
}
