//! Density estimators: kNN, Gaussian KDE with Silverman's bandwidth, a
//! maximum-likelihood Gaussian fit, and a multi-scale local-likelihood
//! estimator used as ground truth for sampler marginals.
//!
//! All functions work in log space and take the pool as a `B × d` array.

use nalgebra::{DMatrix, DVector};
use ndarray::ArrayView2;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::gmm::log_sum_exp;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensityEstimate {
    pub log_density: f64,
    /// Total local-likelihood information; zero for the baselines.
    pub information: f64,
}

/// `log V_d` for the unit `d`-ball.
pub fn log_unit_ball_volume(d: usize) -> f64 {
    let h = d as f64 / 2.0;
    h * std::f64::consts::PI.ln() - ln_gamma(h + 1.0)
}

fn sq_dist(a: &[f64], b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the first pool row equal to `x`.
fn self_index(pool: ArrayView2<f64>, x: &[f64]) -> Option<usize> {
    pool.rows()
        .into_iter()
        .position(|row| row.iter().zip(x).all(|(a, b)| a == b))
}

/// The `m` nearest pool rows to `x` as `(squared distance, index)`, ascending,
/// skipping row `exclude`.
pub fn nearest_neighbors(pool: ArrayView2<f64>, x: &[f64], exclude: Option<usize>, m: usize) -> Vec<(f64, usize)> {
    let mut all: Vec<(f64, usize)> = pool
        .rows()
        .into_iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != exclude)
        .map(|(i, row)| (sq_dist(x, row), i))
        .collect();
    let m = m.min(all.len());
    if m == 0 {
        return Vec::new();
    }
    if m < all.len() {
        all.select_nth_unstable_by(m - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        all.truncate(m);
    }
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all
}

fn check_dim(pool: ArrayView2<f64>, x: &[f64]) -> Result<()> {
    if pool.ncols() != x.len() {
        return Err(Error::DimensionMismatch {
            expected: pool.ncols(),
            got: x.len(),
        });
    }
    Ok(())
}

/// `log(k / (B V_d r_k^d))`, leaving `x` out of the pool when it is a member.
pub fn knn_log_density(pool: ArrayView2<f64>, x: &[f64], k: usize) -> Result<f64> {
    check_dim(pool, x)?;
    let exclude = self_index(pool, x);
    let b = pool.nrows() - usize::from(exclude.is_some());
    if k == 0 || b <= k {
        return Err(Error::TooFewPoints { needed: k + 1, got: b });
    }
    let nn = nearest_neighbors(pool, x, exclude, k);
    let (r2, idx) = nn[k - 1];
    if r2 == 0.0 {
        return Err(Error::DuplicatePoint { index: idx });
    }
    let d = x.len() as f64;
    Ok((k as f64).ln() - (b as f64).ln() - log_unit_ball_volume(x.len()) - 0.5 * d * r2.ln())
}

pub fn knn_density(pool: ArrayView2<f64>, x: &[f64], k: usize) -> Result<f64> {
    knn_log_density(pool, x, k).map(f64::exp)
}

/// Silverman bandwidth with the mean per-axis standard deviation.
pub fn silverman_bandwidth(pool: ArrayView2<f64>) -> Result<f64> {
    let (b, d) = pool.dim();
    if b < 2 {
        return Err(Error::TooFewPoints { needed: 2, got: b });
    }
    let sigma = pool
        .columns()
        .into_iter()
        .map(|c| c.std(0.0))
        .sum::<f64>()
        / d as f64;
    if !(sigma > 0.0) {
        return Err(Error::Degenerate("pool has zero spread; KDE bandwidth is zero".into()));
    }
    let df = d as f64;
    Ok(sigma * (4.0 / (df + 2.0)).powf(1.0 / (df + 4.0)) * (b as f64).powf(-1.0 / (df + 4.0)))
}

pub fn kde_log_density(pool: ArrayView2<f64>, x: &[f64]) -> Result<f64> {
    check_dim(pool, x)?;
    let h = silverman_bandwidth(pool)?;
    Ok(kde_log_density_with(pool, x, h))
}

/// Isotropic Gaussian KDE at bandwidth `h`.
pub fn kde_log_density_with(pool: ArrayView2<f64>, x: &[f64], h: f64) -> f64 {
    let d = x.len() as f64;
    let terms: Vec<f64> = pool
        .rows()
        .into_iter()
        .map(|row| -sq_dist(x, row) / (2.0 * h * h))
        .collect();
    log_sum_exp(&terms) - (pool.nrows() as f64).ln() - 0.5 * d * LN_2PI - d * h.ln()
}

pub fn kde_silverman(pool: ArrayView2<f64>, x: &[f64]) -> Result<f64> {
    kde_log_density(pool, x).map(f64::exp)
}

/// Maximum-likelihood Gaussian fitted to a pool, with a `1e-10` ridge.
#[derive(Debug, Clone)]
pub struct GaussianFit {
    mean: DVector<f64>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    log_det: f64,
}

impl GaussianFit {
    pub fn fit(pool: ArrayView2<f64>) -> Result<Self> {
        let (b, d) = pool.dim();
        if b <= d {
            return Err(Error::TooFewPoints { needed: d + 1, got: b });
        }
        let mut mean = DVector::zeros(d);
        for row in pool.rows() {
            for l in 0..d {
                mean[l] += row[l];
            }
        }
        mean /= b as f64;
        let mut cov = DMatrix::zeros(d, d);
        for row in pool.rows() {
            let c = DVector::from_iterator(d, row.iter().copied()) - &mean;
            cov += &c * c.transpose();
        }
        cov /= b as f64;
        for l in 0..d {
            cov[(l, l)] += 1e-10;
        }
        let chol = cov
            .cholesky()
            .ok_or_else(|| Error::Degenerate("ML covariance is singular after ridge".into()))?;
        let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(Self { mean, chol, log_det })
    }

    pub fn mean(&self) -> &[f64] {
        self.mean.as_slice()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let d = self.mean.len();
        let c = DVector::from_column_slice(x) - &self.mean;
        let z = self.chol.solve(&c);
        -0.5 * (d as f64 * LN_2PI + self.log_det) - 0.5 * c.dot(&z)
    }
}

pub fn mgf_log_density(pool: ArrayView2<f64>, x: &[f64]) -> Result<f64> {
    check_dim(pool, x)?;
    Ok(GaussianFit::fit(pool)?.log_density(x))
}

pub fn mgf(pool: ArrayView2<f64>, x: &[f64]) -> Result<f64> {
    mgf_log_density(pool, x).map(f64::exp)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LldeConfig {
    /// Candidate neighbor counts; values above `n` are skipped.
    pub neighbor_grid: Vec<usize>,
    pub h_min: f64,
    /// Ridge on `S`, relative to `tr(S)/d`.
    pub ridge: f64,
    /// Scales with total kernel mass below this are rejected.
    pub min_mass: f64,
}

impl Default for LldeConfig {
    fn default() -> Self {
        Self {
            neighbor_grid: vec![10, 15, 25, 35, 50],
            h_min: 1e-12,
            ridge: 1e-10,
            min_mass: 10.0 * f64::EPSILON,
        }
    }
}

impl LldeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.neighbor_grid.is_empty() || self.neighbor_grid.windows(2).any(|w| w[0] >= w[1]) || self.neighbor_grid[0] == 0 {
            return Err(Error::InvalidArgument("LLDE neighbor grid must be nonempty, positive and ascending".into()));
        }
        if !(self.h_min > 0.0) {
            return Err(Error::InvalidArgument("LLDE h_min must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleEstimate {
    pub k: usize,
    pub h: f64,
    pub log_density: f64,
    pub information: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LldeDetail {
    pub estimate: DensityEstimate,
    pub scales: Vec<ScaleEstimate>,
    pub rejected: Vec<String>,
}

/// One bandwidth of the local-likelihood fit; `Err` carries the rejection reason.
fn llde_scale(x: &[f64], pool: ArrayView2<f64>, nn: &[(f64, usize)], k: usize, n: usize, cfg: &LldeConfig) -> std::result::Result<ScaleEstimate, String> {
    let d = x.len();
    let df = d as f64;
    let h = nn[k - 1].0.sqrt().max(cfg.h_min);
    let k_use = n.min((3 * k).max(k + 8));
    let norm = -0.5 * df * LN_2PI - df * h.ln();
    let mut m0 = 0.0;
    let mut w2 = 0.0;
    let mut m1 = DVector::<f64>::zeros(d);
    let mut m2 = DMatrix::<f64>::zeros(d, d);
    for &(r2, idx) in &nn[..k_use] {
        let w = (norm - r2 / (2.0 * h * h)).exp();
        let u = DVector::from_iterator(d, pool.row(idx).iter().zip(x).map(|(y, xi)| y - xi));
        m0 += w;
        w2 += w * w;
        m1 += w * &u;
        m2 += w * &u * u.transpose();
    }
    if !m0.is_finite() || m1.iter().any(|v| !v.is_finite()) || m2.iter().any(|v| !v.is_finite()) {
        return Err(format!("k={k}: non-finite kernel moments"));
    }
    if m0 < cfg.min_mass {
        return Err(format!("k={k}: kernel mass {m0:e} below {:e}", cfg.min_mass));
    }
    let mu = &m1 / m0;
    let mut s = &m2 / m0 - &mu * mu.transpose();
    s = 0.5 * (&s + s.transpose());
    let ridge = cfg.ridge * s.trace() / df;
    for l in 0..d {
        s[(l, l)] += ridge;
    }
    let chol = s.cholesky().ok_or_else(|| format!("k={k}: local covariance not positive definite"))?;
    let log_det_s = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let quad = mu.dot(&chol.solve(&mu));
    let a_h = (m0 / n as f64).ln() + df * h.ln() - 0.5 * log_det_s - 0.5 * quad;
    let n_eff = m0 * m0 / w2;
    // I_h = n_eff h^d exp(a_h) / (4π)^{-d/2}
    let log_info = n_eff.ln() + df * h.ln() + a_h + 0.5 * df * (4.0 * std::f64::consts::PI).ln();
    let information = log_info.exp();
    if !a_h.is_finite() || !information.is_finite() || information <= 0.0 {
        return Err(format!("k={k}: non-finite local estimate"));
    }
    Ok(ScaleEstimate {
        k,
        h,
        log_density: a_h,
        information,
    })
}

/// Leave-one-out local-likelihood log density at pool row `index`, with every
/// accepted scale and the reasons for rejected ones.
pub fn llde_detailed(pool: ArrayView2<f64>, index: usize, cfg: &LldeConfig) -> Result<LldeDetail> {
    cfg.validate()?;
    let b = pool.nrows();
    if index >= b {
        return Err(Error::InvalidArgument(format!("query index {index} outside pool of {b}")));
    }
    let n = b - 1;
    let ks: Vec<usize> = cfg.neighbor_grid.iter().copied().filter(|&k| k <= n).collect();
    if ks.is_empty() {
        return Err(Error::TooFewPoints {
            needed: cfg.neighbor_grid[0] + 1,
            got: b,
        });
    }
    let x = pool.row(index).to_vec();
    let max_use = ks.iter().map(|&k| n.min((3 * k).max(k + 8))).max().unwrap_or(0);
    let nn = nearest_neighbors(pool, &x, Some(index), max_use);
    let mut scales = Vec::new();
    let mut rejected = Vec::new();
    for k in ks {
        match llde_scale(&x, pool, &nn, k, n, cfg) {
            Ok(s) => scales.push(s),
            Err(reason) => rejected.push(reason),
        }
    }
    if scales.is_empty() {
        return Err(Error::AllScalesRejected(rejected));
    }
    let total: f64 = scales.iter().map(|s| s.information).sum();
    let log_density = scales.iter().map(|s| s.information * s.log_density).sum::<f64>() / total;
    Ok(LldeDetail {
        estimate: DensityEstimate {
            log_density,
            information: total,
        },
        scales,
        rejected,
    })
}

pub fn llde_log_density(pool: ArrayView2<f64>, index: usize, cfg: &LldeConfig) -> Result<DensityEstimate> {
    llde_detailed(pool, index, cfg).map(|d| d.estimate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normal_pool(b: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((b, d), || StandardNormal.sample(&mut rng))
    }

    #[test]
    fn ball_volumes() {
        assert!((log_unit_ball_volume(1) - 2f64.ln()).abs() < 1e-12);
        assert!((log_unit_ball_volume(2) - std::f64::consts::PI.ln()).abs() < 1e-12);
        let v3 = 4.0 / 3.0 * std::f64::consts::PI;
        assert!((log_unit_ball_volume(3) - v3.ln()).abs() < 1e-12);
    }

    #[test]
    fn knn_hand_case() {
        let pool = array![[0.0], [1.0], [2.0], [3.0], [4.0], [5.0]];
        let p = knn_density(pool.view(), &[0.0], 2).unwrap();
        assert!((p - 0.1).abs() < 1e-12);
    }

    #[test]
    fn knn_duplicate_is_named() {
        let pool = array![[0.0], [1.0], [1.0], [3.0]];
        match knn_log_density(pool.view(), &[1.0], 1) {
            Err(Error::DuplicatePoint { index }) => assert_eq!(index, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn knn_scaling_law() {
        let pool = normal_pool(200, 3, 1);
        let x = [0.1, 0.2, -0.1];
        let a = knn_log_density(pool.view(), &x, 5).unwrap();
        let scaled = pool.mapv(|v| 2.0 * v);
        let b = knn_log_density(scaled.view(), &[0.2, 0.4, -0.2], 5).unwrap();
        assert!((a - b - 3.0 * 2f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn knn_uniform_disc_center() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut rows = Vec::new();
        while rows.len() < 20_000 {
            let (a, b): (f64, f64) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            if a * a + b * b <= 1.0 {
                rows.extend([a, b]);
            }
        }
        let pool = Array2::from_shape_vec((10_000, 2), rows).unwrap();
        // single k=5 estimates scatter by ~45%; take the median over queries
        // in the flat central region
        let mut est: Vec<f64> = (0..101)
            .map(|i| {
                let a = i as f64 * 0.37;
                let q = [0.2 * a.cos() * (i as f64 / 101.0), 0.2 * a.sin() * (i as f64 / 101.0)];
                knn_density(pool.view(), &q, 5).unwrap()
            })
            .collect();
        est.sort_by(f64::total_cmp);
        let p = est[50];
        let truth = 1.0 / std::f64::consts::PI;
        assert!((p - truth).abs() < 0.3 * truth, "{p}");
    }

    #[test]
    fn kde_two_point_hand_case() {
        let pool = array![[-1.0], [1.0]];
        let h = silverman_bandwidth(pool.view()).unwrap();
        // σ = 1, d = 1: h = (4/3)^{1/5} 2^{-1/5}
        assert!((h - (4.0f64 / 3.0).powf(0.2) * 2f64.powf(-0.2)).abs() < 1e-14);
        let want = (-1.0 / (2.0 * h * h)).exp() / ((2.0 * std::f64::consts::PI).sqrt() * h);
        assert!((kde_silverman(pool.view(), &[0.0]).unwrap() - want).abs() < 1e-14);
        assert!(kde_silverman(array![[2.0], [2.0]].view(), &[0.0]).is_err());
    }

    #[test]
    fn kde_normal_center_and_translation() {
        let pool = normal_pool(10_000, 2, 3);
        let p = kde_silverman(pool.view(), &[0.0, 0.0]).unwrap();
        let truth = 1.0 / (2.0 * std::f64::consts::PI);
        assert!((p - truth).abs() < 0.1 * truth, "{p}");
        let small = normal_pool(50, 2, 4);
        let shifted = small.mapv(|v| v + 3.0);
        let a = kde_log_density(small.view(), &[0.3, -0.2]).unwrap();
        let b = kde_log_density(shifted.view(), &[3.3, 2.8]).unwrap();
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn mgf_properties() {
        let pool = normal_pool(20_000, 3, 5);
        let lp = mgf_log_density(pool.view(), &[0.0; 3]).unwrap();
        assert!((lp + 1.5 * LN_2PI).abs() < 0.02, "{lp}");

        let fit = GaussianFit::fit(pool.view()).unwrap();
        let at_mean = fit.log_density(fit.mean());
        assert!(at_mean >= fit.log_density(&[0.01, 0.0, 0.0]));

        // y = A x with det A = 6: log density drops by log 6.
        let a = array![[2.0, 0.0, 0.0], [0.5, 3.0, 0.0], [0.0, 0.0, 1.0]];
        let mapped = pool.dot(&a.t());
        let x = [0.4, -0.3, 0.2];
        let y: Vec<f64> = a.dot(&ndarray::arr1(&x)).to_vec();
        let before = mgf_log_density(pool.view(), &x).unwrap();
        let after = mgf_log_density(mapped.view(), &y).unwrap();
        assert!((before - after - 6f64.ln()).abs() < 1e-6);
        assert!(mgf_log_density(pool.slice(ndarray::s![..3, ..]), &x).is_err());
    }

    #[test]
    fn llde_standard_normal_shows_truncated_kernel_bias() {
        // Each scale keeps only the 3k nearest neighbors, i.e. the Gaussian
        // kernel is cut at r² ≈ 3h². For a locally flat 2-D density that
        // biases the estimate by ln(1 - e^{-3/2}) - ln(E[r²/2 | r² < 3]).
        let mass = 1.0 - (-1.5f64).exp();
        let var = (2.0 - 3.0 * (-1.5f64).exp() / mass) / 2.0;
        let bias = mass.ln() - var.ln();
        assert!((bias - 0.311).abs() < 1e-3);

        let pool = normal_pool(5000, 2, 6);
        let mut order: Vec<usize> = (0..5000).collect();
        order.sort_by(|&a, &b| pool.row(a).dot(&pool.row(a)).total_cmp(&pool.row(b).dot(&pool.row(b))));
        let mut errs = Vec::new();
        for &i in &order[..200] {
            let est = llde_log_density(pool.view(), i, &LldeConfig::default()).unwrap();
            assert!(est.information > 0.0);
            errs.push(est.log_density - (-LN_2PI - 0.5 * pool.row(i).dot(&pool.row(i))));
        }
        let mean = errs.iter().sum::<f64>() / errs.len() as f64;
        assert!((mean - bias).abs() < 0.1, "mean error {mean}, truncation bias {bias}");
    }

    #[test]
    fn llde_aggregate_is_convex_combination() {
        let pool = normal_pool(800, 2, 7);
        for idx in [0, 10, 200] {
            let det = llde_detailed(pool.view(), idx, &LldeConfig::default()).unwrap();
            let lo = det.scales.iter().map(|s| s.log_density).fold(f64::INFINITY, f64::min);
            let hi = det.scales.iter().map(|s| s.log_density).fold(f64::NEG_INFINITY, f64::max);
            let a = det.estimate.log_density;
            assert!(a >= lo - 1e-12 && a <= hi + 1e-12);
        }
    }

    #[test]
    fn llde_scaling_shift() {
        let pool = normal_pool(600, 2, 8);
        let c: f64 = 3.0;
        let scaled = pool.mapv(|v| c * v);
        let cfg = LldeConfig::default();
        for idx in [1, 50] {
            let a = llde_log_density(pool.view(), idx, &cfg).unwrap().log_density;
            let b = llde_log_density(scaled.view(), idx, &cfg).unwrap().log_density;
            assert!((b - (a - 2.0 * c.ln())).abs() < 1e-8);
        }
    }

    #[test]
    fn llde_rejects_degenerate_pool() {
        let pool = Array2::<f64>::zeros((30, 2));
        match llde_log_density(pool.view(), 0, &LldeConfig::default()) {
            Err(Error::AllScalesRejected(reasons)) => assert!(!reasons.is_empty()),
            other => panic!("{other:?}"),
        }
        let small = normal_pool(5, 2, 9);
        assert!(llde_log_density(small.view(), 0, &LldeConfig::default()).is_err());
    }
}
