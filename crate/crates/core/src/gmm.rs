//! Diagonal-covariance Gaussian mixtures.
//!
//! The target distribution of every experiment is a mixture
//!
//! ```text
//! p(x) = Σ_j w_j N(x; μ_j, diag(σ_j²))
//! ```
//!
//! with closed-form density, score, exact ancestral sampling and
//! nearest-mean mode assignment. Component densities at σ = 1e-4 underflow
//! doubles far from the mean, so everything goes through a max-shifted
//! log-sum-exp.
//!
//! The rectified-flow interpolant `X_t = (1-t) X_0 + t X_1` with
//! `X_0 ~ N(0, I)` keeps a mixture a mixture: [`GmmSpec::path_marginal`]
//! returns the law of `X_t`, which the tests use as an analytic oracle for
//! learned scores.

use std::f64::consts::PI;
use std::fmt::Write as _;

use ndarray::Array2;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// How mixture weights are assigned by [`circle_mixture`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightMode {
    /// `w_j = 1/k`.
    Uniform,
    /// `w_j ∝ 2^j`.
    Geometric,
}

impl std::str::FromStr for WeightMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "geometric" => Ok(Self::Geometric),
            other => Err(Error::InvalidArgument(format!(
                "unknown weight mode `{other}` (expected uniform|geometric)"
            ))),
        }
    }
}

/// A Gaussian mixture with diagonal covariances.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmSpec {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    stds: Vec<Vec<f64>>,
    /// `log w_j - Σ_l log σ_jl - (d/2) log 2π`, cached per component.
    log_norm: Vec<f64>,
}

impl GmmSpec {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, stds: Vec<Vec<f64>>) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(Error::InvalidMixture("need at least one component".into()));
        }
        if means.len() != k || stds.len() != k {
            return Err(Error::InvalidMixture(format!(
                "{k} weights but {} means and {} std vectors",
                means.len(),
                stds.len()
            )));
        }
        let d = means[0].len();
        if d == 0 {
            return Err(Error::InvalidMixture("dimension must be at least 1".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidMixture("weights must be finite and nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidMixture(format!("weights sum to {total}, not 1")));
        }
        for (j, (m, s)) in means.iter().zip(&stds).enumerate() {
            if m.len() != d || s.len() != d {
                return Err(Error::InvalidMixture(format!(
                    "component {j} has inconsistent dimension"
                )));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidMixture(format!("component {j} has a non-finite mean")));
            }
            if s.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::InvalidMixture(format!(
                    "component {j} has a nonpositive standard deviation"
                )));
            }
        }
        let log_norm = weights
            .iter()
            .zip(&stds)
            .map(|(w, s)| w.ln() - s.iter().map(|v| v.ln()).sum::<f64>() - 0.5 * d as f64 * LN_2PI)
            .collect();
        Ok(Self {
            weights,
            means,
            stds,
            log_norm,
        })
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn stds(&self) -> &[Vec<f64>] {
        &self.stds
    }

    fn check_dim(&self, x: &[f64]) {
        assert_eq!(x.len(), self.dim(), "point dimension does not match mixture");
    }

    /// `log(w_j N(x; μ_j, σ_j²))` for every component.
    pub fn component_log_densities(&self, x: &[f64]) -> Vec<f64> {
        self.check_dim(x);
        self.means
            .iter()
            .zip(&self.stds)
            .zip(&self.log_norm)
            .map(|((m, s), c)| {
                let q: f64 = x
                    .iter()
                    .zip(m)
                    .zip(s)
                    .map(|((xi, mi), si)| {
                        let z = (xi - mi) / si;
                        z * z
                    })
                    .sum();
                c - 0.5 * q
            })
            .collect()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        log_sum_exp(&self.component_log_densities(x))
    }

    /// Posterior component probabilities at `x`.
    pub fn responsibilities(&self, x: &[f64]) -> Vec<f64> {
        let mut lp = self.component_log_densities(x);
        let lse = log_sum_exp(&lp);
        for v in lp.iter_mut() {
            *v = (*v - lse).exp();
        }
        lp
    }

    /// `∇_x log p(x)`.
    pub fn score(&self, x: &[f64]) -> Vec<f64> {
        let resp = self.responsibilities(x);
        let mut out = vec![0.0; self.dim()];
        for ((r, m), s) in resp.iter().zip(&self.means).zip(&self.stds) {
            if *r == 0.0 {
                continue;
            }
            for l in 0..out.len() {
                out[l] -= r * (x[l] - m[l]) / (s[l] * s[l]);
            }
        }
        out
    }

    /// Exact ancestral sampling: component index, then a diagonal Gaussian.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Array2<f64> {
        let d = self.dim();
        let pick = WeightedIndex::new(&self.weights).expect("weights validated at construction");
        let mut out = Array2::zeros((n, d));
        for mut row in out.rows_mut() {
            let j = pick.sample(rng);
            for l in 0..d {
                let z: f64 = StandardNormal.sample(rng);
                row[l] = self.means[j][l] + self.stds[j][l] * z;
            }
        }
        out
    }

    /// Index of the closest mean in Euclidean distance; ties go to the lowest index.
    pub fn nearest_mode(&self, x: &[f64]) -> usize {
        self.check_dim(x);
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (j, m) in self.means.iter().enumerate() {
            let dist: f64 = x.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum();
            if dist < best_d {
                best_d = dist;
                best = j;
            }
        }
        best
    }

    /// Law of `(1-t) X_0 + t X_1` with `X_0 ~ N(0, I)` and `X_1` drawn from this mixture.
    pub fn path_marginal(&self, t: f64) -> GmmSpec {
        assert!((0.0..=1.0).contains(&t), "t must lie in [0, 1]");
        let means = self
            .means
            .iter()
            .map(|m| m.iter().map(|v| t * v).collect())
            .collect();
        let stds = self
            .stds
            .iter()
            .map(|s| {
                s.iter()
                    .map(|v| ((1.0 - t) * (1.0 - t) + t * t * v * v).sqrt())
                    .collect()
            })
            .collect();
        GmmSpec::new(self.weights.clone(), means, stds).expect("path marginal stays valid")
    }

    /// Serialize as a `key = value` block. Floats use shortest round-trip formatting.
    pub fn to_config_block(&self) -> String {
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(", ");
        let rows = |m: &[Vec<f64>]| m.iter().map(|r| join(r)).collect::<Vec<_>>().join("; ");
        let mut s = String::new();
        writeln!(s, "weights = {}", join(&self.weights)).unwrap();
        writeln!(s, "means = {}", rows(&self.means)).unwrap();
        writeln!(s, "stds = {}", rows(&self.stds)).unwrap();
        s
    }

    /// Parse the block written by [`GmmSpec::to_config_block`].
    ///
    /// Blank lines and `#` comments are skipped. Line numbers in errors are
    /// 1-based within `text`.
    pub fn from_config_block(text: &str) -> Result<Self> {
        let mut weights = None;
        let mut means = None;
        let mut stds = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let lineno = i + 1;
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: lineno,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            let value = value.trim();
            match key.trim() {
                "weights" => weights = Some(parse_list(value, lineno)?),
                "means" => means = Some(parse_rows(value, lineno)?),
                "stds" => stds = Some(parse_rows(value, lineno)?),
                other => {
                    return Err(Error::Parse {
                        line: lineno,
                        message: format!("unknown mixture key `{other}`"),
                    })
                }
            }
        }
        let missing = |k: &str| Error::Parse {
            line: 0,
            message: format!("mixture block is missing `{k}`"),
        };
        GmmSpec::new(
            weights.ok_or_else(|| missing("weights"))?,
            means.ok_or_else(|| missing("means"))?,
            stds.ok_or_else(|| missing("stds"))?,
        )
    }
}

fn parse_list(value: &str, line: usize) -> Result<Vec<f64>> {
    value
        .split(',')
        .map(|s| {
            s.trim().parse::<f64>().map_err(|e| Error::Parse {
                line,
                message: format!("bad number `{}`: {e}", s.trim()),
            })
        })
        .collect()
}

fn parse_rows(value: &str, line: usize) -> Result<Vec<Vec<f64>>> {
    value.split(';').map(|row| parse_list(row, line)).collect()
}

/// Numerically stable `log Σ exp(v_i)`; `-inf` for an empty slice.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Mixture of `k` components centred on the unit circle in the first two
/// coordinates (angle `2πj/k`), translated by `shift` along the first axis.
///
/// Coordinates 1–2 get `std_major`; the remaining `d - 2` get `std_minor`.
pub fn circle_mixture(
    k: usize,
    d: usize,
    shift: f64,
    std_major: f64,
    std_minor: f64,
    mode: WeightMode,
) -> Result<GmmSpec> {
    if k == 0 {
        return Err(Error::InvalidMixture("k must be at least 1".into()));
    }
    if d < 2 {
        return Err(Error::InvalidMixture(format!("circle mixture needs d >= 2, got {d}")));
    }
    if !(std_major > 0.0 && std_minor > 0.0) {
        return Err(Error::InvalidMixture("standard deviations must be positive".into()));
    }
    let weights = match mode {
        WeightMode::Uniform => vec![1.0 / k as f64; k],
        WeightMode::Geometric => {
            let raw: Vec<f64> = (0..k).map(|j| 2f64.powi(j as i32)).collect();
            let total: f64 = raw.iter().sum();
            raw.into_iter().map(|w| w / total).collect()
        }
    };
    let means = (0..k)
        .map(|j| {
            let a = 2.0 * PI * j as f64 / k as f64;
            let mut m = vec![0.0; d];
            m[0] = a.cos() + shift;
            m[1] = a.sin();
            m
        })
        .collect();
    let stds = (0..k)
        .map(|_| {
            let mut s = vec![std_minor; d];
            s[0] = std_major;
            s[1] = std_major;
            s
        })
        .collect();
    GmmSpec::new(weights, means, stds)
}
