//! CSV files written and read by the pipelines.
//!
//! Floats are written with Rust's shortest round-trip formatting, so every
//! value read back is bit-identical to the value written.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use iwflow::sampler::{JointSampleSet, TrialSeed};
use ndarray::{Array2, Array3, Axis};

/// Version tag of the column schemas below; bump on any layout change.
pub const SCHEMA_VERSION: u32 = 1;

pub fn fmt_f(x: f64) -> String {
    format!("{x:?}")
}

pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn column(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| anyhow!("missing column `{name}`"))
    }
}

pub fn write_csv<I>(path: &Path, header: &[String], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<String>>,
{
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record(header)
        .with_context(|| format!("writing {}", path.display()))?;
    for row in rows {
        w.write_record(&row)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    w.flush().with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Table> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let header: Vec<String> = r
        .headers()
        .with_context(|| format!("reading header of {}", path.display()))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.with_context(|| format!("{}: malformed row {}", path.display(), i + 2))?;
        rows.push(rec.iter().map(str::to_string).collect());
    }
    Ok(Table { header, rows })
}

fn parse_cell<T: std::str::FromStr>(path: &Path, row: usize, col: &str, s: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    s.parse()
        .map_err(|e| anyhow!("{}: line {}: column `{col}`: cannot parse `{s}`: {e}", path.display(), row + 2))
}

fn coord_header(prefix: &str, d: usize) -> impl Iterator<Item = String> + '_ {
    (0..d).map(move |l| format!("{prefix}{l}"))
}

/// Final samples of many sets: `trial, sample, x0 .. x{d-1}`.
pub fn write_finals(path: &Path, sets: &[Array2<f64>]) -> Result<()> {
    let d = sets.first().map_or(0, |s| s.ncols());
    let mut header = vec!["trial".to_string(), "sample".to_string()];
    header.extend(coord_header("x", d));
    let rows = sets.iter().enumerate().flat_map(|(trial, set)| {
        set.rows().into_iter().enumerate().map(move |(i, row)| {
            let mut r = vec![trial.to_string(), i.to_string()];
            r.extend(row.iter().map(|&v| fmt_f(v)));
            r
        })
    });
    write_csv(path, &header, rows)
}

/// Inverse of [`write_finals`]; trials must be numbered `0, 1, …` in order.
pub fn read_finals(path: &Path) -> Result<Vec<Array2<f64>>> {
    let table = read_csv(path)?;
    let d = table.header.len().saturating_sub(2);
    if table.header.first().map(String::as_str) != Some("trial") || d == 0 {
        bail!("{}: not a sample-set file (header {:?})", path.display(), table.header);
    }
    let mut groups: Vec<Vec<f64>> = Vec::new();
    for (i, row) in table.rows.iter().enumerate() {
        let trial: usize = parse_cell(path, i, "trial", &row[0])?;
        if trial == groups.len() {
            groups.push(Vec::new());
        } else if trial + 1 != groups.len() {
            bail!("{}: line {}: trial {trial} out of order", path.display(), i + 2);
        }
        let g = groups.last_mut().expect("group exists");
        for (l, cell) in row[2..].iter().enumerate() {
            g.push(parse_cell(path, i, &table.header[l + 2], cell)?);
        }
    }
    if groups.is_empty() {
        bail!("{}: no samples", path.display());
    }
    groups
        .into_iter()
        .map(|g| {
            let n = g.len() / d;
            Array2::from_shape_vec((n, d), g).map_err(|e| anyhow!("{}: {e}", path.display()))
        })
        .collect()
}

/// Full per-step record of one set:
/// `trial, sample, step, t, x*, v*, u*[, r*]`. The row of the final step
/// carries positions only; its velocity cells are empty.
pub fn write_trajectory(path: &Path, set: &JointSampleSet) -> Result<()> {
    let d = set.dim();
    let mut header: Vec<String> = ["trial", "sample", "step", "t"].iter().map(|s| s.to_string()).collect();
    header.extend(coord_header("x", d));
    header.extend(coord_header("v", d));
    header.extend(coord_header("u", d));
    if set.r.is_some() {
        header.extend(coord_header("r", d));
    }
    let n_vel = if set.r.is_some() { 3 } else { 2 };
    let mut rows = Vec::with_capacity((set.n_steps() + 1) * set.n());
    for step in 0..=set.n_steps() {
        for i in 0..set.n() {
            let mut r = vec![
                set.seed.trial.to_string(),
                i.to_string(),
                step.to_string(),
                fmt_f(set.times[step]),
            ];
            r.extend(set.positions_at(step).row(i).iter().map(|&v| fmt_f(v)));
            if step < set.n_steps() {
                let mut push = |a: &Array3<f64>| r.extend(a.index_axis(Axis(0), step).row(i).iter().map(|&v| fmt_f(v)));
                push(&set.v);
                push(&set.u);
                if let Some(rr) = &set.r {
                    push(rr);
                }
            } else {
                r.extend(std::iter::repeat_n(String::new(), n_vel * d));
            }
            rows.push(r);
        }
    }
    write_csv(path, &header, rows)
}

/// Inverse of [`write_trajectory`]. `seed` is not stored in the file.
pub fn read_trajectory(path: &Path, seed: u64) -> Result<JointSampleSet> {
    let table = read_csv(path)?;
    let d = table.header.iter().filter(|h| h.starts_with('x')).count();
    let has_r = table.header.iter().any(|h| h.starts_with('r'));
    if d == 0 || table.rows.is_empty() {
        bail!("{}: not a trajectory file", path.display());
    }
    let mut max_step = 0usize;
    let mut max_sample = 0usize;
    for (i, row) in table.rows.iter().enumerate() {
        max_sample = max_sample.max(parse_cell(path, i, "sample", &row[1])?);
        max_step = max_step.max(parse_cell(path, i, "step", &row[2])?);
    }
    let (steps, n) = (max_step, max_sample + 1);
    if table.rows.len() != (steps + 1) * n {
        bail!("{}: expected {} rows, found {}", path.display(), (steps + 1) * n, table.rows.len());
    }
    let mut positions = Array3::zeros((steps + 1, n, d));
    let mut v = Array3::zeros((steps, n, d));
    let mut u = Array3::zeros((steps, n, d));
    let mut r = has_r.then(|| Array3::zeros((steps, n, d)));
    let mut times = vec![0.0; steps + 1];
    let mut trial = 0u64;
    for (row_i, row) in table.rows.iter().enumerate() {
        trial = parse_cell(path, row_i, "trial", &row[0])?;
        let i: usize = parse_cell(path, row_i, "sample", &row[1])?;
        let step: usize = parse_cell(path, row_i, "step", &row[2])?;
        times[step] = parse_cell(path, row_i, "t", &row[3])?;
        let cell = |k: usize| -> Result<f64> { parse_cell(path, row_i, &table.header[k], &row[k]) };
        for l in 0..d {
            positions[[step, i, l]] = cell(4 + l)?;
            if step < steps {
                v[[step, i, l]] = cell(4 + d + l)?;
                u[[step, i, l]] = cell(4 + 2 * d + l)?;
                if let Some(rr) = r.as_mut() {
                    rr[[step, i, l]] = cell(4 + 3 * d + l)?;
                }
            }
        }
    }
    Ok(JointSampleSet {
        seed: TrialSeed::new(seed, trial),
        times,
        positions,
        v,
        u,
        r,
        log_w: None,
    })
}

/// One row of a metric table.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub method: String,
    pub objective: String,
    pub reg_mode: String,
    pub mean: f64,
    pub ci95: f64,
    pub trials: usize,
}

pub const METRIC_HEADER: [&str; 7] = ["metric", "method", "objective", "reg_mode", "mean", "ci95", "trials"];

pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let header: Vec<String> = METRIC_HEADER.iter().map(|s| s.to_string()).collect();
    write_csv(
        path,
        &header,
        rows.iter().map(|m| {
            vec![
                m.metric.clone(),
                m.method.clone(),
                m.objective.clone(),
                m.reg_mode.clone(),
                fmt_f(m.mean),
                fmt_f(m.ci95),
                m.trials.to_string(),
            ]
        }),
    )
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let table = read_csv(path)?;
    let cols: Vec<usize> = METRIC_HEADER
        .iter()
        .map(|c| table.column(c).with_context(|| format!("{}", path.display())))
        .collect::<Result<_>>()?;
    table
        .rows
        .iter()
        .enumerate()
        .map(|(i, row)| {
            Ok(MetricRow {
                metric: row[cols[0]].clone(),
                method: row[cols[1]].clone(),
                objective: row[cols[2]].clone(),
                reg_mode: row[cols[3]].clone(),
                mean: parse_cell(path, i, "mean", &row[cols[4]])?,
                ci95: parse_cell(path, i, "ci95", &row[cols[5]])?,
                trials: parse_cell(path, i, "trials", &row[cols[6]])?,
            })
        })
        .collect()
}
