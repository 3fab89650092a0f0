//! Evaluation metrics for sample sets and weight estimates.

use std::collections::BTreeSet;

use ndarray::ArrayView2;

use crate::error::{Error, Result};
use crate::gmm::GmmSpec;

/// Number of distinct nearest modes hit by the rows of `finals`.
pub fn mode_coverage(finals: ArrayView2<f64>, spec: &GmmSpec) -> usize {
    finals
        .rows()
        .into_iter()
        .map(|row| spec.nearest_mode(&row.to_vec()))
        .collect::<BTreeSet<_>>()
        .len()
}

/// Mean target log density and RMSE to the assigned mode center.
pub fn quality_stats(finals: ArrayView2<f64>, spec: &GmmSpec) -> Result<(f64, f64)> {
    let n = finals.nrows();
    if n == 0 {
        return Err(Error::TooFewPoints { needed: 1, got: 0 });
    }
    let mut log_p = 0.0;
    let mut sq = 0.0;
    for row in finals.rows() {
        let x = row.to_vec();
        log_p += spec.log_density(&x);
        let mu = &spec.means()[spec.nearest_mode(&x)];
        sq += x.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok((log_p / n as f64, (sq / n as f64).sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RankedPairOutcome {
    pub concordant: u64,
    pub discordant: u64,
    /// Pairs tied in the prediction only.
    pub ties_pred: u64,
    /// Pairs tied in the truth only.
    pub ties_truth: u64,
}

fn check_lengths(a: &[f64], b: &[f64], min: usize) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    if a.len() < min {
        return Err(Error::TooFewPoints { needed: min, got: a.len() });
    }
    Ok(())
}

pub fn rank_pairs(pred: &[f64], truth: &[f64]) -> Result<RankedPairOutcome> {
    check_lengths(pred, truth, 2)?;
    let mut out = RankedPairOutcome::default();
    for i in 0..pred.len() {
        for j in (i + 1)..pred.len() {
            let sp = (pred[i] - pred[j]).partial_cmp(&0.0).map(|o| o as i8).unwrap_or(0);
            let sg = (truth[i] - truth[j]).partial_cmp(&0.0).map(|o| o as i8).unwrap_or(0);
            match (sp, sg) {
                (0, 0) => {}
                (0, _) => out.ties_pred += 1,
                (_, 0) => out.ties_truth += 1,
                (a, b) if a == b => out.concordant += 1,
                _ => out.discordant += 1,
            }
        }
    }
    Ok(out)
}

/// Kendall's τ_b; zero when either ranking is constant.
pub fn kendall_tau_b(pred: &[f64], truth: &[f64]) -> Result<f64> {
    let o = rank_pairs(pred, truth)?;
    let (c, d) = (o.concordant as f64, o.discordant as f64);
    let denom = ((c + d + o.ties_pred as f64) * (c + d + o.ties_truth as f64)).sqrt();
    Ok(if denom == 0.0 { 0.0 } else { (c - d) / denom })
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && values[idx[end]] == values[idx[start]] {
            end += 1;
        }
        let avg = (start + end + 1) as f64 / 2.0;
        for &i in &idx[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    (saa > 0.0 && sbb > 0.0).then(|| (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spearman {
    pub rho: f64,
    /// Set when one side has constant ranks; `rho` is then 0.
    pub zero_variance: bool,
}

pub fn spearman_rho(pred: &[f64], truth: &[f64]) -> Result<Spearman> {
    check_lengths(pred, truth, 2)?;
    Ok(match pearson(&average_ranks(pred), &average_ranks(truth)) {
        Some(rho) => Spearman { rho, zero_variance: false },
        None => Spearman {
            rho: 0.0,
            zero_variance: true,
        },
    })
}

/// Graded average precision of the ranking by `pred` (descending).
pub fn graded_ap(pred: &[f64], grades: &[f64]) -> Result<f64> {
    check_lengths(pred, grades, 1)?;
    let mut g = grades.to_vec();
    let min = g.iter().copied().fold(f64::INFINITY, f64::min);
    if min < 0.0 {
        g.iter_mut().for_each(|v| *v -= min);
    }
    let max = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max > 1.0 {
        g.iter_mut().for_each(|v| *v /= max);
    }
    let total: f64 = g.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate("graded AP needs a positive grade".into()));
    }
    let mut order: Vec<usize> = (0..pred.len()).collect();
    // stable: equal predictions keep index order
    order.sort_by(|&a, &b| pred[b].total_cmp(&pred[a]));
    let mut cum = 0.0;
    let mut acc = 0.0;
    for (pos, &i) in order.iter().enumerate() {
        cum += g[i];
        acc += g[i] * cum / (pos + 1) as f64;
    }
    Ok(acc / total)
}

fn check_simplex(p: &[f64]) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if p.iter().any(|v| !(*v >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("not a probability vector (sum {sum})")));
    }
    Ok(())
}

/// Jensen–Shannon divergence in nats.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch {
            expected: p.len(),
            got: q.len(),
        });
    }
    check_simplex(p)?;
    check_simplex(q)?;
    let kl = |a: &[f64], m: &[f64]| -> f64 {
        a.iter()
            .zip(m)
            .filter(|(x, _)| **x > 0.0)
            .map(|(x, y)| x * (x / y).ln())
            .sum()
    };
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    Ok((0.5 * kl(p, &m) + 0.5 * kl(q, &m)).max(0.0))
}

/// `max_{a ∈ S_iid} min_{b ∈ S_rep} ‖φ(a) - φ(b)‖²`.
pub fn representation_error<F>(s_iid: ArrayView2<f64>, s_rep: ArrayView2<f64>, feature: F) -> Result<f64>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    if s_iid.nrows() == 0 || s_rep.nrows() == 0 {
        return Err(Error::TooFewPoints { needed: 1, got: 0 });
    }
    let rep: Vec<Vec<f64>> = s_rep.rows().into_iter().map(|r| feature(&r.to_vec())).collect();
    let mut worst = 0.0f64;
    for a in s_iid.rows() {
        let fa = feature(&a.to_vec());
        let best = rep
            .iter()
            .map(|fb| fa.iter().zip(fb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        worst = worst.max(best);
    }
    Ok(worst)
}

/// Mean and 95% normal half-width `1.96 s / √N`.
pub fn ci95(values: &[f64]) -> Result<(f64, f64)> {
    let n = values.len();
    if n < 2 {
        return Err(Error::TooFewPoints { needed: 2, got: n });
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    Ok((mean, 1.96 * var.sqrt() / (n as f64).sqrt()))
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}
