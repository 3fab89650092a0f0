//! Diversity objectives over a set of predicted final samples.
//!
//! Every objective except the harmonic DPP is a function of the normalized
//! squared-distance matrix `K = D / med(D)`, where the median runs over the
//! off-diagonal entries and is held constant when differentiating. Gradients
//! flow back to the current positions through the one-step prediction
//! `x̂ = x + (1 - t) v(x, t)`.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::rectflow::VelocityField;

/// Added to the kernel before log-determinants; near-degenerate samples in
/// low-variance coordinates make `exp(-K)` almost singular.
const LOGDET_RIDGE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Objective {
    Dpp,
    HarmonicDpp,
    Pg,
    Chebyshev,
    LogBarrier,
    Reciprocal,
    None,
}

impl Objective {
    pub const ALL: [Objective; 7] = [
        Objective::Dpp,
        Objective::HarmonicDpp,
        Objective::Pg,
        Objective::Chebyshev,
        Objective::LogBarrier,
        Objective::Reciprocal,
        Objective::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Objective::Dpp => "dpp",
            Objective::HarmonicDpp => "harmonic_dpp",
            Objective::Pg => "pg",
            Objective::Chebyshev => "chebyshev",
            Objective::LogBarrier => "log_barrier",
            Objective::Reciprocal => "reciprocal",
            Objective::None => "none",
        }
    }

    /// Whether `h` depends on the samples only through pairwise distances.
    pub fn is_distance_based(self) -> bool {
        !matches!(self, Objective::HarmonicDpp)
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Objective::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown diversity objective `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GradMode {
    /// Treat `∂x̂/∂x` as the identity.
    #[default]
    StopGrad,
    /// Also backpropagate through `v` in the prediction `x̂`.
    FullVjp,
}

impl FromStr for GradMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stop_grad" => Ok(GradMode::StopGrad),
            "full_vjp" => Ok(GradMode::FullVjp),
            other => Err(Error::InvalidArgument(format!("unknown grad mode `{other}`"))),
        }
    }
}

impl fmt::Display for GradMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GradMode::StopGrad => "stop_grad",
            GradMode::FullVjp => "full_vjp",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiversityConfig {
    pub objective: Objective,
    pub lambda: f64,
    pub chebyshev_order: usize,
    pub grad_mode: GradMode,
    pub clamp_eps: f64,
}

impl Default for DiversityConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Dpp,
            lambda: 1.0,
            chebyshev_order: 4,
            grad_mode: GradMode::StopGrad,
            clamp_eps: 1e-8,
        }
    }
}

impl DiversityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.chebyshev_order == 0 {
            return Err(Error::InvalidArgument("chebyshev order must be >= 1".into()));
        }
        if !(self.clamp_eps > 0.0 && self.clamp_eps <= 1e-3) {
            return Err(Error::InvalidArgument(format!(
                "clamp_eps must lie in (0, 1e-3], got {}",
                self.clamp_eps
            )));
        }
        Ok(())
    }

    /// True when the sampler should skip the diversity term entirely.
    pub fn is_inactive(&self) -> bool {
        self.objective == Objective::None || self.lambda == 0.0
    }
}

/// Squared distances `D`, the clamped median used for normalization, and `K`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseK {
    pub k: Array2<f64>,
    pub d: Array2<f64>,
    pub median: f64,
}

impl PairwiseK {
    pub fn n(&self) -> usize {
        self.k.nrows()
    }
}

/// Row-wise `x + (1 - t) v`.
pub fn predicted_finals(positions: ArrayView2<f64>, v_outputs: ArrayView2<f64>, t: f64) -> Array2<f64> {
    let mut out = positions.to_owned();
    out.scaled_add(1.0 - t, &v_outputs);
    out
}

fn median_of(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

pub fn pairwise_k(finals: ArrayView2<f64>, clamp_eps: f64) -> Result<PairwiseK> {
    let n = finals.nrows();
    if n < 2 {
        return Err(Error::TooFewPoints { needed: 2, got: n });
    }
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let dist: f64 = finals
                .row(i)
                .iter()
                .zip(finals.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d[[i, j]] = dist;
            d[[j, i]] = dist;
        }
    }
    let mut off: Vec<f64> = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| d[[i, j]])
        .collect();
    let median = median_of(&mut off).max(clamp_eps);
    let k = &d / median;
    Ok(PairwiseK { k, d, median })
}

fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    DMatrix::from_fn(n, n, |i, j| a[[i, j]])
}

/// `log det(A (A + I)^{-1})` and its gradient `A^{-1} - (A + I)^{-1}` for a
/// symmetric kernel `A` (ridge added).
fn dpp_logdet(a: &Array2<f64>, objective: &'static str) -> Result<(f64, Array2<f64>)> {
    let n = a.nrows();
    let mut l = to_dmatrix(a);
    for i in 0..n {
        l[(i, i)] += LOGDET_RIDGE;
    }
    let mut l_plus = l.clone();
    for i in 0..n {
        l_plus[(i, i)] += 1.0;
    }
    let (ld_l, inv_l) = logdet_and_inverse(l, objective)?;
    let (ld_p, inv_p) = logdet_and_inverse(l_plus, objective)?;
    let grad = Array2::from_shape_fn((n, n), |(i, j)| inv_l[(i, j)] - inv_p[(i, j)]);
    Ok((ld_l - ld_p, grad))
}

fn logdet_and_inverse(m: DMatrix<f64>, objective: &'static str) -> Result<(f64, DMatrix<f64>)> {
    let n = m.nrows();
    let lu = m.lu();
    let u = lu.u();
    let mut sign = lu.p().determinant::<f64>();
    let mut logdet = 0.0;
    for i in 0..n {
        let uii = u[(i, i)];
        if uii < 0.0 {
            sign = -sign;
        }
        logdet += uii.abs().ln();
    }
    if !(sign > 0.0) || !logdet.is_finite() {
        return Err(Error::Objective {
            objective,
            message: format!("kernel determinant is not positive (sign {sign}, log|det| {logdet})"),
        });
    }
    let inv = lu.solve(&DMatrix::identity(n, n)).ok_or_else(|| Error::Objective {
        objective,
        message: "kernel factorization is singular".into(),
    })?;
    if inv.iter().any(|v| !v.is_finite()) {
        return Err(Error::Objective {
            objective,
            message: "non-finite kernel inverse".into(),
        });
    }
    Ok((logdet, inv))
}

/// Chebyshev polynomials `T_0..=T_r` and derivatives at `x`.
fn chebyshev_with_derivs(x: f64, r: usize) -> (Vec<f64>, Vec<f64>) {
    let mut t = vec![1.0, x];
    let mut u = vec![1.0, 2.0 * x];
    for k in 2..=r {
        t.push(2.0 * x * t[k - 1] - t[k - 2]);
        u.push(2.0 * x * u[k - 1] - u[k - 2]);
    }
    // T_k' = k U_{k-1}
    let dt = (0..=r).map(|k| if k == 0 { 0.0 } else { k as f64 * u[k - 1] }).collect();
    t.truncate(r + 1);
    (t, dt)
}

/// Value of `h` and `∂h/∂x̂` (n×d).
fn value_and_grad(pk: &PairwiseK, finals: ArrayView2<f64>, cfg: &DiversityConfig) -> Result<(f64, Array2<f64>)> {
    let n = pk.n();
    let eps = cfg.clamp_eps;
    let e = pk.k.mapv(|k| (-k).exp());
    // dh/dK, read as G_ij + G_ji below
    let mut g_k = Array2::<f64>::zeros((n, n));
    let value = match cfg.objective {
        Objective::None => return Ok((0.0, Array2::zeros(finals.dim()))),
        Objective::HarmonicDpp => return harmonic_dpp(finals, cfg),
        Objective::Dpp => {
            let (val, g_l) = dpp_logdet(&e, "dpp")?;
            g_k = -(&e * &g_l);
            val
        }
        Objective::Pg => {
            let mut val = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        val -= e[[i, j]];
                        g_k[[i, j]] = e[[i, j]];
                    }
                }
            }
            val
        }
        Objective::Chebyshev => {
            let r = cfg.chebyshev_order;
            let scale = 2.0 / n as f64;
            let mut sums = vec![1.0; r + 1];
            let mut derivs = Vec::new();
            for i in 0..n {
                for j in (i + 1)..n {
                    let (t, dt) = chebyshev_with_derivs(e[[i, j]], r);
                    for q in 1..=r {
                        sums[q] += scale * t[q];
                    }
                    derivs.push((i, j, dt));
                }
            }
            for (i, j, dt) in derivs {
                let dh_de: f64 = (1..=r).map(|q| -2.0 * sums[q] * scale * dt[q]).sum();
                g_k[[i, j]] = -e[[i, j]] * dh_de;
            }
            -sums[1..].iter().map(|s| s * s).sum::<f64>()
        }
        Objective::LogBarrier => {
            let cap = 1.0 - eps;
            let mut val = 0.0;
            for i in 0..n {
                for j in (i + 1)..n {
                    let eij = e[[i, j]];
                    if eij >= cap {
                        val += (1.0 - cap).ln();
                    } else {
                        val += (1.0 - eij).ln();
                        g_k[[i, j]] = eij / (1.0 - eij);
                    }
                }
            }
            val
        }
        Objective::Reciprocal => {
            let mut val = 0.0;
            for i in 0..n {
                for j in (i + 1)..n {
                    let k = pk.k[[i, j]];
                    if k <= eps {
                        val -= 1.0 / eps;
                    } else {
                        val -= 1.0 / k;
                        g_k[[i, j]] = 1.0 / (k * k);
                    }
                }
            }
            val
        }
    };
    if !value.is_finite() {
        return Err(Error::Objective {
            objective: cfg.objective.name(),
            message: format!("non-finite value {value}"),
        });
    }
    let d = finals.ncols();
    let mut grad = Array2::zeros((n, d));
    let inv_m = 2.0 / pk.median;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let c = (g_k[[i, j]] + g_k[[j, i]]) * inv_m;
            if c == 0.0 {
                continue;
            }
            for l in 0..d {
                grad[[i, l]] += c * (finals[[i, l]] - finals[[j, l]]);
            }
        }
    }
    Ok((value, grad))
}

/// Harmonic DPP on the cosine Gram matrix of the normalized rows, smoothed
/// elementwise with Fejér weights over Chebyshev polynomials.
fn harmonic_dpp(finals: ArrayView2<f64>, _cfg: &DiversityConfig) -> Result<(f64, Array2<f64>)> {
    let (n, d) = finals.dim();
    let mut y = finals.to_owned();
    let mut norms = Vec::with_capacity(n);
    for (i, mut row) in y.axis_iter_mut(Axis(0)).enumerate() {
        let norm = row.dot(&row).sqrt();
        if !(norm > 1e-12) {
            return Err(Error::Objective {
                objective: "harmonic_dpp",
                message: format!("row {i} has zero norm"),
            });
        }
        row /= norm;
        norms.push(norm);
    }
    let cos = y.dot(&y.t()).mapv(|c: f64| c.clamp(-1.0, 1.0));
    let order = n - 1;
    let a: Vec<f64> = (0..=order)
        .map(|r| if r == 0 { 1.0 } else { 2.0 * (1.0 - r as f64 / n as f64) })
        .collect();
    let a_sum: f64 = a.iter().sum();
    let mut kh = Array2::zeros((n, n));
    let mut dkh = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let (t, dt) = chebyshev_with_derivs(cos[[i, j]], order.max(1));
            kh[[i, j]] = (0..=order).map(|r| a[r] * t[r]).sum::<f64>() / a_sum;
            dkh[[i, j]] = (0..=order).map(|r| a[r] * dt[r]).sum::<f64>() / a_sum;
        }
    }
    let (value, g_kh) = dpp_logdet(&kh, "harmonic_dpp")?;
    let g_cos = &g_kh * &dkh;
    // C = Y Yᵀ  ⇒  dh/dY = (G + Gᵀ) Y
    let g_y = (&g_cos + &g_cos.t()).dot(&y);
    let mut grad = Array2::zeros((n, d));
    for i in 0..n {
        let yi = y.row(i);
        let gy = g_y.row(i);
        let proj = yi.dot(&gy);
        for l in 0..d {
            grad[[i, l]] = (gy[l] - proj * yi[l]) / norms[i];
        }
    }
    Ok((value, grad))
}

/// `h` evaluated on a precomputed `K` (the harmonic DPP reads `finals` directly).
pub fn objective_value(pk: &PairwiseK, finals: ArrayView2<f64>, cfg: &DiversityConfig) -> Result<f64> {
    value_and_grad(pk, finals, cfg).map(|(v, _)| v)
}

/// `h(x̂)` and `∂h/∂x̂` with the median frozen at its value for `finals`.
pub fn objective_grad_finals(finals: ArrayView2<f64>, cfg: &DiversityConfig) -> Result<(f64, Array2<f64>)> {
    let pk = pairwise_k(finals, cfg.clamp_eps)?;
    value_and_grad(&pk, finals, cfg)
}

/// Per-sample gradient of `h` with respect to the current positions.
///
/// `v_outputs` are the base velocities at `positions`; `field` is only used
/// for the vector-Jacobian product in [`GradMode::FullVjp`].
pub fn diversity_grads(
    positions: ArrayView2<f64>,
    v_outputs: ArrayView2<f64>,
    field: &dyn VelocityField,
    t: f64,
    cfg: &DiversityConfig,
) -> Result<Array2<f64>> {
    if positions.nrows() < 2 {
        return Err(Error::TooFewPoints {
            needed: 2,
            got: positions.nrows(),
        });
    }
    if !(t < 1.0) {
        return Err(Error::InvalidArgument(format!("diversity gradient needs t < 1, got {t}")));
    }
    let finals = predicted_finals(positions, v_outputs, t);
    let (_, g) = objective_grad_finals(finals.view(), cfg)?;
    Ok(match cfg.grad_mode {
        GradMode::StopGrad => g,
        GradMode::FullVjp => {
            let back = field.vjp_batch(positions, t, g.view());
            g + back * (1.0 - t)
        }
    })
}

/// `u = λ √(1-t) (‖v‖ / ‖g‖) g` with norms over all samples jointly.
pub fn scale_to_velocity(g_all: ArrayView2<f64>, v_all: ArrayView2<f64>, t: f64, lambda: f64) -> Array2<f64> {
    let g_norm = g_all.iter().map(|x| x * x).sum::<f64>().sqrt();
    if g_norm < 1e-12 || lambda == 0.0 {
        return Array2::zeros(g_all.dim());
    }
    let v_norm = v_all.iter().map(|x| x * x).sum::<f64>().sqrt();
    let gamma = lambda * (1.0 - t).max(0.0).sqrt() * v_norm / g_norm;
    g_all.mapv(|x| gamma * x)
}
