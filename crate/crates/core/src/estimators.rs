//! Expectation estimators from a set of samples and optional log weights.

use std::fmt;

use ndarray::ArrayView2;

use crate::error::{Error, Result};
use crate::gmm::GmmSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EstimatorKind {
    Iid,
    Weighted,
    Equal,
}

impl EstimatorKind {
    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Iid => "iid",
            EstimatorKind::Weighted => "weighted",
            EstimatorKind::Equal => "equal",
        }
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorReport {
    pub estimate: Vec<f64>,
    pub kind: EstimatorKind,
    pub n: usize,
    /// `(f(x_i), w_i)` per sample.
    pub samples: Vec<(Vec<f64>, f64)>,
}

impl EstimatorReport {
    /// Plain average; used for both IID draws and unweighted non-IID draws.
    pub fn unweighted(f_values: ArrayView2<f64>, kind: EstimatorKind) -> Result<Self> {
        let zeros = vec![0.0; f_values.nrows()];
        let mut r = Self::weighted(f_values, &zeros)?;
        r.kind = kind;
        Ok(r)
    }

    pub fn weighted(f_values: ArrayView2<f64>, log_weights: &[f64]) -> Result<Self> {
        let estimate = weighted_mean(f_values, log_weights)?;
        let samples = f_values
            .rows()
            .into_iter()
            .zip(log_weights)
            .map(|(row, lw)| (row.to_vec(), lw.exp()))
            .collect();
        Ok(Self {
            estimate,
            kind: EstimatorKind::Weighted,
            n: f_values.nrows(),
            samples,
        })
    }
}

/// `(1/n) Σ exp(log w_i) f_i`.
pub fn weighted_mean(f_values: ArrayView2<f64>, log_weights: &[f64]) -> Result<Vec<f64>> {
    let (n, m) = f_values.dim();
    if log_weights.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: log_weights.len(),
        });
    }
    if n == 0 {
        return Err(Error::TooFewPoints { needed: 1, got: 0 });
    }
    let mut out = vec![0.0; m];
    for (row, lw) in f_values.rows().into_iter().zip(log_weights) {
        let w = lw.exp();
        if !w.is_finite() {
            return Err(Error::InvalidArgument(format!("non-finite weight exp({lw})")));
        }
        for (o, f) in out.iter_mut().zip(row) {
            *o += w * f;
        }
    }
    for o in &mut out {
        *o /= n as f64;
    }
    Ok(out)
}

/// Variance of the two-sample IID mean on a two-outcome space.
pub fn two_outcome_variance(p_a: f64, f_a: f64, f_b: f64) -> f64 {
    0.5 * p_a * (1.0 - p_a) * (f_a - f_b).powi(2)
}

/// The same variance by enumerating the four ordered outcome pairs.
pub fn two_outcome_variance_enumerated(p_a: f64, f_a: f64, f_b: f64) -> f64 {
    let outcomes = [(p_a, f_a), (1.0 - p_a, f_b)];
    let mu = p_a * f_a + (1.0 - p_a) * f_b;
    let mut var = 0.0;
    for (p1, f1) in outcomes {
        for (p2, f2) in outcomes {
            let est = 0.5 * (f1 + f2);
            var += p1 * p2 * (est - mu).powi(2);
        }
    }
    var
}

/// One-hot indicator of the nearest mixture mean.
pub fn mode_one_hot(spec: &GmmSpec, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; spec.n_components()];
    out[spec.nearest_mode(x)] = 1.0;
    out
}

pub fn mode_probability_f(spec: &GmmSpec) -> impl Fn(&[f64]) -> Vec<f64> + '_ {
    move |x| mode_one_hot(spec, x)
}

/// One-hot rows for every sample.
pub fn mode_one_hot_rows(spec: &GmmSpec, xs: ArrayView2<f64>) -> ndarray::Array2<f64> {
    let mut out = ndarray::Array2::zeros((xs.nrows(), spec.n_components()));
    for (i, row) in xs.rows().into_iter().enumerate() {
        out[[i, spec.nearest_mode(&row.to_vec())]] = 1.0;
    }
    out
}

/// Clip negative entries to zero and rescale to sum one.
pub fn clip_renormalize(p: &[f64]) -> Result<Vec<f64>> {
    let clipped: Vec<f64> = p.iter().map(|v| v.max(0.0)).collect();
    let total: f64 = clipped.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::Degenerate(format!("cannot renormalize vector with mass {total}")));
    }
    Ok(clipped.into_iter().map(|v| v / total).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::{circle_mixture, WeightMode};
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_log_weights_give_plain_mean() {
        let f = array![[1.0, 2.0], [3.0, 6.0]];
        assert_eq!(weighted_mean(f.view(), &[0.0, 0.0]).unwrap(), vec![2.0, 4.0]);
        let r = EstimatorReport::unweighted(f.view(), EstimatorKind::Iid).unwrap();
        assert!(r.samples.iter().all(|(_, w)| *w == 1.0));
        assert!(weighted_mean(f.view(), &[0.0]).is_err());
        assert!(weighted_mean(f.view(), &[0.0, 1e4]).is_err());
    }

    #[test]
    fn forced_diverse_pair_is_exact() {
        let (p_a, p_b) = (0.9, 0.1);
        let w = [p_a / 0.5, p_b / 0.5];
        assert!((w[0] - 1.8f64).abs() < 1e-15 && (w[1] - 0.2f64).abs() < 1e-15);
        for (fa, fb) in [(1.0, 0.0), (3.0, -2.0), (0.25, 7.5)] {
            let f = array![[fa], [fb]];
            let est = weighted_mean(f.view(), &[w[0].ln(), w[1].ln()]).unwrap()[0];
            assert!((est - (p_a * fa + p_b * fb)).abs() < 1e-12);
        }
    }

    #[test]
    fn weighted_mean_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = Array2::from_shape_fn((7, 3), |_| rng.random_range(-1.0..1.0));
        let lw: Vec<f64> = (0..7).map(|_| rng.random_range(-2.0..2.0)).collect();
        let got = weighted_mean(f.view(), &lw).unwrap();
        for c in 0..3 {
            let mut s = 0.0;
            for i in 0..7 {
                s += lw[i].exp() * f[[i, c]];
            }
            assert!((got[c] - s / 7.0).abs() < 1e-14);
        }
    }

    #[test]
    fn two_outcome_cases() {
        assert_eq!(two_outcome_variance(0.3, 2.0, 2.0), 0.0);
        assert!((two_outcome_variance(0.5, 1.0, 0.0) - 0.125).abs() < 1e-15);
        assert!((two_outcome_variance_enumerated(0.5, 1.0, 0.0) - 0.125).abs() < 1e-15);
        assert!((two_outcome_variance(0.9, 1.0, 0.0) - 0.045).abs() < 1e-15);
        for p in [0.1, 0.37, 0.8] {
            let a = two_outcome_variance(p, 1.5, -0.5);
            let b = two_outcome_variance_enumerated(p, 1.5, -0.5);
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn one_hot_modes() {
        let g = circle_mixture(5, 2, 1.0, 0.01, 0.01, WeightMode::Uniform).unwrap();
        let f = mode_probability_f(&g);
        assert_eq!(f(&g.means()[2]), vec![0.0, 0.0, 1.0, 0.0, 0.0]);
        let xs = g.sample(50, &mut ChaCha8Rng::seed_from_u64(0));
        let rows = mode_one_hot_rows(&g, xs.view());
        let mean = weighted_mean(rows.view(), &[0.0; 50]).unwrap();
        assert!((mean.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn clip_and_renormalize() {
        assert_eq!(clip_renormalize(&[0.5, -0.25, 1.5]).unwrap(), vec![0.25, 0.0, 0.75]);
        assert!(clip_renormalize(&[-1.0, 0.0]).is_err());
    }
}
