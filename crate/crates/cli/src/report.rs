//! Human-readable tables and the acceptance checks over metric CSVs.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Result};

use crate::checks::{check_derivatives, check_null_case, check_two_outcome, CheckResult};
use crate::io::{self, MetricRow};
use crate::pipeline::{files, JS_METHODS, WEIGHT_METHODS};

/// Metric tables found in a run directory.
#[derive(Debug, Default)]
pub struct Metrics {
    pub diversity: Option<Vec<MetricRow>>,
    pub weights: Option<Vec<MetricRow>>,
    /// `(method, coordinate, z)` from the expectation file.
    pub expectation: Option<Vec<(String, usize, f64)>>,
}

impl Metrics {
    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| -> Result<Option<Vec<MetricRow>>> {
            let p = dir.join(name);
            if p.exists() {
                io::read_metrics(&p).map(Some)
            } else {
                Ok(None)
            }
        };
        let expectation = {
            let p = dir.join(files::EXPECTATION);
            if p.exists() {
                let t = io::read_csv(&p)?;
                let (m, c, z) = (t.column("method")?, t.column("coordinate")?, t.column("z")?);
                let mut rows = Vec::new();
                for (i, r) in t.rows.iter().enumerate() {
                    let parse = |k: usize| -> Result<f64> {
                        r[k].parse()
                            .map_err(|e| anyhow::anyhow!("{}: line {}: {e}", p.display(), i + 2))
                    };
                    rows.push((r[m].clone(), parse(c)? as usize, parse(z)?));
                }
                Some(rows)
            } else {
                None
            }
        };
        let m = Self {
            diversity: read(files::DIVERSITY)?,
            weights: read(files::WEIGHTS)?,
            expectation,
        };
        if m.diversity.is_none() && m.weights.is_none() {
            bail!(
                "no metric files in {} (expected {} or {}; run `eval` first)",
                dir.display(),
                files::DIVERSITY,
                files::WEIGHTS
            );
        }
        Ok(m)
    }
}

fn find<'a>(rows: &'a [MetricRow], metric: &str, method: &str, objective: &str, reg: &str) -> Option<&'a MetricRow> {
    rows.iter()
        .find(|r| r.metric == metric && r.method == method && r.objective == objective && r.reg_mode == reg)
}

fn value(rows: &[MetricRow], metric: &str, method: &str, objective: &str, reg: &str) -> Result<f64> {
    find(rows, metric, method, objective, reg)
        .map(|r| r.mean)
        .ok_or_else(|| anyhow::anyhow!("no `{metric}` row for {method}/{objective}/{reg}"))
}

fn fmt_ci(r: Option<&MetricRow>) -> String {
    match r {
        Some(r) if r.ci95.is_finite() => format!("{:.4} ± {:.4}", r.mean, r.ci95),
        Some(r) => format!("{:.4}", r.mean),
        None => "-".into(),
    }
}

fn aligned(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let mut out = String::new();
    let line = |cells: Vec<&str>, out: &mut String| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}", w = *w))
            .collect();
        let _ = writeln!(out, "{}", padded.join("  ").trim_end());
    };
    line(header.to_vec(), &mut out);
    line(widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().iter().map(String::as_str).collect(), &mut out);
    for r in rows {
        line(r.iter().map(String::as_str).collect(), &mut out);
    }
    out
}

/// Objective/regularization pairs present in the diversity table, IID first.
fn diversity_runs(rows: &[MetricRow]) -> Vec<(String, String)> {
    let mut runs: Vec<(String, String)> = Vec::new();
    for r in rows.iter().filter(|r| r.metric == "coverage" && r.method != "marginal_flow") {
        let key = (r.objective.clone(), r.reg_mode.clone());
        if !runs.contains(&key) {
            runs.push(key);
        }
    }
    runs
}

pub fn render(m: &Metrics) -> String {
    let mut out = String::new();
    if let Some(rows) = &m.diversity {
        let mut table = Vec::new();
        for (obj, reg) in diversity_runs(rows) {
            let method = if obj == "none" { "iid" } else { "joint" };
            table.push(vec![
                obj.clone(),
                reg.clone(),
                fmt_ci(find(rows, "coverage", method, &obj, &reg)),
                fmt_ci(find(rows, "coverage", "marginal", &obj, &reg)),
                fmt_ci(find(rows, "log_p", method, &obj, &reg)),
                fmt_ci(find(rows, "rmse", method, &obj, &reg)),
                fmt_ci(find(rows, "repr_error", method, &obj, &reg)),
            ]);
        }
        let _ = writeln!(out, "Diversity and quality (mean ± 95% CI)\n");
        out += &aligned(
            &["objective", "sr", "coverage", "marginal coverage", "log p", "rmse", "repr error"],
            &table,
        );
        if let Some(r) = find(rows, "coverage", "marginal_flow", "none", "off") {
            let _ = writeln!(out, "\nmarginal flow (v + r) coverage: {}", fmt_ci(Some(r)));
        }
        out.push('\n');
    }
    if let Some(rows) = &m.weights {
        let (obj, reg) = rows
            .first()
            .map(|r| (r.objective.clone(), r.reg_mode.clone()))
            .unwrap_or_default();
        let table: Vec<Vec<String>> = WEIGHT_METHODS
            .iter()
            .map(|method| {
                let mut row = vec![method.to_string()];
                for metric in ["se", "se_median", "tau_b", "spearman", "gap"] {
                    row.push(fmt_ci(find(rows, metric, method, &obj, &reg)));
                }
                row
            })
            .collect();
        let _ = writeln!(out, "Weight accuracy against local-likelihood truth ({obj}, sr {reg})\n");
        out += &aligned(&["method", "se", "median se", "tau_b", "spearman", "gap"], &table);
        let table: Vec<Vec<String>> = JS_METHODS
            .iter()
            .map(|method| vec![method.to_string(), fmt_ci(find(rows, "js", method, &obj, &reg))])
            .collect();
        let _ = writeln!(out, "\nMode-frequency estimation, JS divergence (nats)\n");
        out += &aligned(&["method", "js"], &table);
        if let Some(r) = find(rows, "llde_failures", "llde", &obj, &reg) {
            let _ = writeln!(out, "\nlocal-likelihood fits rejected: {} of {}", r.mean, r.trials);
        }
        out.push('\n');
    }
    if let Some(exp) = &m.expectation {
        let mut table = Vec::new();
        for method in JS_METHODS {
            let zs: Vec<f64> = exp.iter().filter(|e| e.0 == method).map(|e| e.2).collect();
            if zs.is_empty() {
                continue;
            }
            let worst = zs.iter().fold(0.0f64, |a, z| a.max(z.abs()));
            table.push(vec![method.to_string(), format!("{worst:.2}")]);
        }
        let _ = writeln!(out, "Bias of mode-frequency estimates, max |z| over coordinates\n");
        out += &aligned(&["method", "max |z|"], &table);
    }
    out
}

fn criterion(id: u32, name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    match f() {
        Ok((pass, detail)) => CheckResult::new(id, name, pass, detail),
        Err(e) => CheckResult::error(id, name, e),
    }
}

fn need<'a>(rows: &'a Option<Vec<MetricRow>>, file: &str) -> Result<&'a [MetricRow]> {
    rows.as_deref()
        .ok_or_else(|| anyhow::anyhow!("{file} not found"))
}

/// Objectives with a joint row in the diversity table.
fn objectives(rows: &[MetricRow]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for (obj, _) in diversity_runs(rows) {
        if obj != "none" && !out.contains(&obj) {
            out.push(obj);
        }
    }
    out
}

/// Criteria 1 to 10; those backed by files absent from `m` fail with a note.
pub fn acceptance(m: &Metrics) -> Vec<CheckResult> {
    let div = &m.diversity;
    let w = &m.weights;
    let weights_key = || -> Result<(String, String)> {
        let rows = need(w, files::WEIGHTS)?;
        Ok(rows
            .first()
            .map(|r| (r.objective.clone(), r.reg_mode.clone()))
            .unwrap_or_default())
    };
    let mut out = vec![
        criterion(1, "diversity gain", || {
            let rows = need(div, files::DIVERSITY)?;
            let iid = value(rows, "coverage", "iid", "none", "off")?;
            let joint = value(rows, "coverage", "joint", "dpp", "off")?;
            let pass = joint - iid >= 1.5 && (iid - 6.5).abs() <= 0.5;
            Ok((pass, format!("dpp joint {joint:.3} vs iid {iid:.3} (gap {:.3}, need >= 1.5; iid within 6.5 ± 0.5)", joint - iid)))
        }),
        criterion(2, "score-regularization quality", || {
            let rows = need(div, files::DIVERSITY)?;
            let lp_off = value(rows, "log_p", "joint", "dpp", "off")?;
            let lp_hard = value(rows, "log_p", "joint", "dpp", "hard")?;
            let cov_off = value(rows, "coverage", "joint", "dpp", "off")?;
            let cov_hard = value(rows, "coverage", "joint", "dpp", "hard")?;
            let e_off = value(rows, "rmse", "joint", "dpp", "off")?;
            let e_hard = value(rows, "rmse", "joint", "dpp", "hard")?;
            let drop = 1.0 - e_hard / e_off;
            let pass = lp_hard - lp_off >= 8.0 && (cov_hard - cov_off).abs() <= 0.3 && drop >= 0.4;
            Ok((
                pass,
                format!(
                    "log p {lp_off:.2} -> {lp_hard:.2} (need +8); coverage {cov_off:.3} -> {cov_hard:.3} (need |change| <= 0.3); rmse {e_off:.4} -> {e_hard:.4} (drop {:.1}%, need >= 40%)",
                    100.0 * drop
                ),
            ))
        }),
        criterion(3, "marginal differs from joint", || {
            let rows = need(div, files::DIVERSITY)?;
            let iid = value(rows, "coverage", "iid", "none", "off")?;
            let objs = objectives(rows);
            if objs.is_empty() {
                bail!("no diversity objectives in {}", files::DIVERSITY);
            }
            let mut pass = true;
            let mut parts = Vec::new();
            for obj in objs {
                let marg = value(rows, "coverage", "marginal", &obj, "off")?;
                let joint = value(rows, "coverage", "joint", &obj, "off")?;
                pass &= (marg - iid).abs() <= 0.4 && joint - iid >= 1.5;
                parts.push(format!("{obj}: marginal {marg:.3}, joint {joint:.3}"));
            }
            Ok((pass, format!("iid {iid:.3}; {}", parts.join("; "))))
        }),
        criterion(4, "weight accuracy ordering", || {
            let rows = need(w, files::WEIGHTS)?;
            let (obj, reg) = weights_key()?;
            let se = |m: &str| value(rows, "se_median", m, &obj, &reg);
            let tau = |m: &str| value(rows, "tau_b", m, &obj, &reg);
            let (along, fixed) = (se("along")?, se("fixed")?);
            let baselines = ["knn", "kde", "mgf"];
            let min_base = baselines
                .iter()
                .map(|m| se(m))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .fold(f64::INFINITY, f64::min);
            let taus = baselines.iter().map(|m| tau(m)).collect::<Result<Vec<_>>>()?;
            let tau_along = tau("along")?;
            let pass = along < fixed && fixed < min_base && tau_along > 0.3 && taus.iter().all(|&t| t < 0.0);
            Ok((
                pass,
                format!(
                    "median se: along {along:.3} < fixed {fixed:.3} < baselines min {min_base:.3}; tau_b along {tau_along:.3} (need > 0.3), knn/kde/mgf {:.3}/{:.3}/{:.3} (need < 0)",
                    taus[0], taus[1], taus[2]
                ),
            ))
        }),
        criterion(5, "expectation estimation ordering", || {
            let rows = need(w, files::WEIGHTS)?;
            let (obj, reg) = weights_key()?;
            let js = |m: &str| value(rows, "js", m, &obj, &reg);
            let (along, equal, iid) = (js("along")?, js("equal")?, js("iid")?);
            let base = [js("knn")?, js("kde")?, js("mgf")?];
            let pass = along < equal && along <= iid + 0.01 && base.iter().all(|&b| b > 0.3);
            Ok((
                pass,
                format!(
                    "js along {along:.4} vs equal {equal:.4} and iid {iid:.4} (+0.01); knn/kde/mgf {:.3}/{:.3}/{:.3} (need > 0.3)",
                    base[0], base[1], base[2]
                ),
            ))
        }),
        check_null_case(),
        check_derivatives(),
        criterion(8, "unbiasedness", || {
            let exp = m
                .expectation
                .as_ref()
                .ok_or_else(|| anyhow::anyhow!("{} not found", files::EXPECTATION))?;
            let worst = |method: &str| -> Result<f64> {
                let zs: Vec<f64> = exp.iter().filter(|e| e.0 == method).map(|e| e.2.abs()).collect();
                if zs.is_empty() {
                    bail!("no `{method}` rows in {}", files::EXPECTATION);
                }
                Ok(zs.into_iter().fold(0.0, f64::max))
            };
            let (along, equal) = (worst("along")?, worst("equal")?);
            let trials = need(w, files::WEIGHTS)
                .ok()
                .and_then(|rows| rows.iter().find(|r| r.metric == "js" && r.method == "along"))
                .map_or(0, |r| r.trials);
            Ok((
                along <= 3.0 && equal > 3.0,
                format!("{trials} sets; max |z| weighted {along:.2} (need <= 3), equal-weight {equal:.2} (need > 3)"),
            ))
        }),
        check_two_outcome(),
        criterion(10, "representation-error ordering", || {
            let rows = need(div, files::DIVERSITY)?;
            let iid = value(rows, "repr_error", "iid", "none", "off")?;
            let objs = objectives(rows);
            if objs.is_empty() {
                bail!("no diversity objectives in {}", files::DIVERSITY);
            }
            let mut pass = true;
            let mut parts = Vec::new();
            for obj in objs {
                let off = value(rows, "repr_error", "joint", &obj, "off")?;
                pass &= off < iid;
                let mut part = format!("{obj} {off:.4}");
                if let Some(hard) = find(rows, "repr_error", "joint", &obj, "hard") {
                    pass &= hard.mean <= off;
                    let _ = write!(part, ", hard {:.4}", hard.mean);
                }
                parts.push(part);
            }
            Ok((pass, format!("iid {iid:.4}; {}", parts.join("; "))))
        }),
    ];
    out.sort_by_key(|c| c.id);
    out
}

pub fn render_checks(checks: &[CheckResult]) -> String {
    let mut out = String::new();
    for c in checks {
        let _ = writeln!(
            out,
            "{} {:>2} {}: {}",
            if c.pass { "PASS" } else { "FAIL" },
            c.id,
            c.name,
            c.detail
        );
    }
    out
}

/// Merge the metrics of several run directories (for example one per experiment).
pub fn load_many(dirs: &[&Path]) -> Result<Metrics> {
    let mut merged = Metrics::default();
    let mut found = false;
    let mut errors = Vec::new();
    for dir in dirs {
        match Metrics::load(dir) {
            Ok(m) => {
                found = true;
                merged.diversity = merged.diversity.or(m.diversity);
                merged.weights = merged.weights.or(m.weights);
                merged.expectation = merged.expectation.or(m.expectation);
            }
            Err(e) => errors.push(e.to_string()),
        }
    }
    if !found {
        bail!("{}", errors.join("; "));
    }
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(metric: &str, method: &str, obj: &str, reg: &str, mean: f64) -> MetricRow {
        MetricRow {
            metric: metric.into(),
            method: method.into(),
            objective: obj.into(),
            reg_mode: reg.into(),
            mean,
            ci95: 0.01,
            trials: 100,
        }
    }

    #[test]
    fn empty_dir_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let e = Metrics::load(dir.path()).unwrap_err().to_string();
        assert!(e.contains("no metric files"), "{e}");
    }

    #[test]
    fn diversity_criteria_read_the_table() {
        let rows = vec![
            row("coverage", "iid", "none", "off", 6.5),
            row("coverage", "marginal", "none", "off", 6.5),
            row("repr_error", "iid", "none", "off", 0.5),
            row("coverage", "joint", "dpp", "off", 8.5),
            row("coverage", "marginal", "dpp", "off", 6.6),
            row("log_p", "joint", "dpp", "off", 7.0),
            row("rmse", "joint", "dpp", "off", 0.5),
            row("repr_error", "joint", "dpp", "off", 0.3),
            row("coverage", "joint", "dpp", "hard", 8.4),
            row("coverage", "marginal", "dpp", "hard", 6.6),
            row("log_p", "joint", "dpp", "hard", 19.0),
            row("rmse", "joint", "dpp", "hard", 0.25),
            row("repr_error", "joint", "dpp", "hard", 0.29),
        ];
        let m = Metrics {
            diversity: Some(rows),
            ..Metrics::default()
        };
        let checks = acceptance(&m);
        let pass: Vec<u32> = checks.iter().filter(|c| c.pass).map(|c| c.id).collect();
        assert_eq!(pass, vec![1, 2, 3, 6, 7, 9, 10]);
        assert!(checks[3].detail.contains("not found"));
        assert!(render(&m).contains("marginal coverage"));
    }
}
