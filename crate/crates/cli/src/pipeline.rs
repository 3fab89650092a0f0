//! The experiment pipelines behind the subcommands.
//!
//! Every random draw comes from a [`TrialSeed`] built by [`stream`], so a
//! result depends only on the config seed, the purpose of the draw and the
//! trial index, never on the worker count.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use iwflow::density::{kde_log_density, knn_log_density, llde_detailed, mgf_log_density};
use iwflow::diversity::{DiversityConfig, Objective};
use iwflow::estimators::{clip_renormalize, mode_one_hot_rows, weighted_mean};
use iwflow::metrics::{
    ci95, graded_ap, js_divergence, kendall_tau_b, median, mode_coverage, quality_stats, representation_error,
    spearman_rho,
};
use iwflow::nnet::VelocityNet;
use iwflow::rectflow::{
    score_from_velocity, train_rectified, BaseVelocity, FlowModel, GmmVelocity, TimeGrid, TrainReport,
    VelocityField,
};
use iwflow::sampler::{
    initial_noise, regroup_marginal, sample_iid, sample_joint, sample_marginal, JointConfig,
    JointSampleSet, TrialSeed,
};
use iwflow::scorereg::RegMode;
use iwflow::weights::{integrate_logw_along, integrate_logw_fixed_batch};
use ndarray::{concatenate, Array2, Axis};
use rayon::prelude::*;

use crate::config::{BaseKind, Experiment, ExperimentConfig, WeightSettings};
use crate::io::{self, fmt_f, MetricRow};

/// Output file names inside the run directory.
pub mod files {
    pub const FLOW_CKPT: &str = "flow.ckpt";
    pub const FLOW_LOSS: &str = "flow_loss.csv";
    pub const FLOW_GATE: &str = "flow_score_gate.csv";
    pub const RESIDUAL_CKPT: &str = "residual.ckpt";
    pub const RESIDUAL_LOSS: &str = "residual_loss.csv";
    pub const RESIDUAL_POOL: &str = "residual_pool.csv";
    pub const POOL: &str = "pool.csv";
    pub const REFERENCE: &str = "reference.csv";
    pub const SETS_DIR: &str = "sets";
    pub const TRAJECTORY_DIR: &str = "trajectories";
    pub const DIVERSITY: &str = "diversity.csv";
    pub const WEIGHTS: &str = "weights.csv";
    pub const EXPECTATION: &str = "expectation.csv";
    pub const GROUND_TRUTH: &str = "ground_truth.csv";
    pub const SAMPLE_WEIGHTS: &str = "sample_weights.csv";
}

/// Purposes of random streams; see [`stream`].
pub mod purpose {
    pub const INIT: u64 = 1;
    pub const FLOW: u64 = 2;
    pub const RESIDUAL: u64 = 3;
    pub const SETS: u64 = 4;
    pub const RESIDUAL_SETS: u64 = 5;
    pub const REFERENCE: u64 = 6;
    pub const REGROUP: u64 = 7;
    pub const TRUTH: u64 = 8;
    pub const MARGINAL: u64 = 9;
    pub const GATE: u64 = 10;
}

/// Stream `index` of a purpose; indices stay below `2^48`.
pub fn stream(seed: u64, purpose: u64, index: u64) -> TrialSeed {
    debug_assert!(index < 1 << 48);
    TrialSeed::new(seed, (purpose << 48) | index)
}

pub fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| anyhow!("cannot start {workers} workers: {e}"))
}

/// Run `f` for every trial index on `pool`, keeping trial order.
pub fn par_trials<T, F>(pool: &rayon::ThreadPool, n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync + Send,
{
    pool.install(|| (0..n as u64).into_par_iter().map(f).collect())
}

fn grid(cfg: &ExperimentConfig) -> Result<TimeGrid> {
    Ok(TimeGrid::uniform(cfg.sampling.steps)?)
}

fn widths(d: usize, hidden: &[usize]) -> Vec<usize> {
    let mut w = vec![d + 1];
    w.extend_from_slice(hidden);
    w.push(d);
    w
}

fn require(path: &Path, hint: &str) -> Result<()> {
    if !path.exists() {
        bail!("missing input {}; {hint}", path.display());
    }
    Ok(())
}

fn summary(metric: &str, method: &str, objective: &str, reg: &str, values: &[f64]) -> MetricRow {
    let (mean, ci) = match ci95(values) {
        Ok(v) => v,
        Err(_) => (values.first().copied().unwrap_or(f64::NAN), f64::NAN),
    };
    MetricRow {
        metric: metric.into(),
        method: method.into(),
        objective: objective.into(),
        reg_mode: reg.into(),
        mean,
        ci95: ci,
        trials: values.len(),
    }
}

// ---------------------------------------------------------------- training

/// Train `v` on exact mixture draws.
pub fn train_flow(cfg: &ExperimentConfig) -> Result<(VelocityNet, TrainReport)> {
    let d = cfg.target.dim();
    let mut init = stream(cfg.seed, purpose::INIT, 0).rng();
    let mut net = VelocityNet::new(d, &cfg.flow.net.hidden, cfg.flow.net.activation, &mut init);
    let mut rng = stream(cfg.seed, purpose::FLOW, 0).rng();
    let data = cfg.target.sample(cfg.flow.samples, &mut rng);
    let report = train_rectified(data.view(), &mut net, None, &cfg.flow.train, &mut rng)
        .context("training the base velocity")?;
    Ok((net, report))
}

/// Cosine agreement between the velocity-implied score and the exact
/// mixture-path score, per time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreAgreement {
    pub t: f64,
    pub mean_cosine: f64,
    pub min_cosine: f64,
}

pub fn score_agreement(cfg: &ExperimentConfig, field: &dyn VelocityField, points: usize) -> Result<Vec<ScoreAgreement>> {
    let d = cfg.target.dim();
    let mut out = Vec::new();
    for (k, t) in (1..=9).map(|k| (k, k as f64 / 10.0)) {
        let mut rng = stream(cfg.seed, purpose::GATE, k).rng();
        let x1 = cfg.target.sample(points, &mut rng);
        let x0 = initial_noise(points, d, &mut rng);
        let xt = x0 * (1.0 - t) + x1 * t;
        let v = field.velocity_batch(xt.view(), t);
        let marginal = cfg.target.path_marginal(t);
        let mut cos = Vec::with_capacity(points);
        for i in 0..points {
            let x = xt.row(i).to_vec();
            let s_model = score_from_velocity(&v.row(i).to_vec(), &x, t)?;
            let s_true = marginal.score(&x);
            let dot: f64 = s_model.iter().zip(&s_true).map(|(a, b)| a * b).sum();
            let na = s_model.iter().map(|a| a * a).sum::<f64>().sqrt();
            let nb = s_true.iter().map(|a| a * a).sum::<f64>().sqrt();
            cos.push(dot / (na * nb).max(1e-300));
        }
        out.push(ScoreAgreement {
            t,
            mean_cosine: cos.iter().sum::<f64>() / points as f64,
            min_cosine: cos.iter().copied().fold(f64::INFINITY, f64::min),
        });
    }
    Ok(out)
}

fn write_loss(path: &Path, report: &TrainReport) -> Result<()> {
    let header = vec!["epoch".to_string(), "train_loss".into(), "holdout_loss".into()];
    let rows = (0..=report.train_loss.len()).map(|e| {
        vec![
            e.to_string(),
            if e == 0 { String::new() } else { fmt_f(report.train_loss[e - 1]) },
            report.holdout_loss.get(e).map(|&l| fmt_f(l)).unwrap_or_default(),
        ]
    });
    io::write_csv(path, &header, rows)
}

pub fn cmd_train_flow(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    if cfg.flow.base == BaseKind::Exact {
        eprintln!("flow.base = exact: the closed-form velocity needs no training");
        return Ok(());
    }
    let (net, report) = train_flow(cfg)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let ckpt = out.join(files::FLOW_CKPT);
    std::fs::write(&ckpt, net.to_checkpoint()).with_context(|| format!("writing {}", ckpt.display()))?;
    write_loss(&out.join(files::FLOW_LOSS), &report)?;
    let gate = score_agreement(cfg, &net, 100)?;
    io::write_csv(
        &out.join(files::FLOW_GATE),
        &["t".into(), "mean_cosine".into(), "min_cosine".into()],
        gate.iter()
            .map(|g| vec![fmt_f(g.t), fmt_f(g.mean_cosine), fmt_f(g.min_cosine)]),
    )?;
    eprintln!(
        "trained v: held-out loss {:.4} -> {:.4}",
        report.holdout_loss.first().copied().unwrap_or(f64::NAN),
        report.holdout_loss.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

/// The base velocity named by the config: closed form, or the trained checkpoint in `dir`.
pub fn load_base(cfg: &ExperimentConfig, dir: &Path) -> Result<BaseVelocity> {
    Ok(match cfg.flow.base {
        BaseKind::Exact => BaseVelocity::Exact(GmmVelocity::new(cfg.target.clone())),
        BaseKind::Trained => {
            let path = dir.join(files::FLOW_CKPT);
            require(&path, "run `train-flow` first")?;
            let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            let net = VelocityNet::from_checkpoint_expecting(&text, &widths(cfg.target.dim(), &cfg.flow.net.hidden))
                .with_context(|| format!("loading {}", path.display()))?;
            BaseVelocity::Net(net)
        }
    })
}

pub fn load_residual(cfg: &ExperimentConfig, dir: &Path) -> Result<VelocityNet> {
    let path = dir.join(files::RESIDUAL_CKPT);
    require(&path, "run `train-residual` first")?;
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    VelocityNet::from_checkpoint_expecting(&text, &widths(cfg.target.dim(), &cfg.residual.net.hidden))
        .with_context(|| format!("loading {}", path.display()))
}

/// Train `r_φ` on `targets` with the base frozen.
pub fn train_residual(cfg: &ExperimentConfig, base: &BaseVelocity, targets: &Array2<f64>) -> Result<(VelocityNet, TrainReport)> {
    if targets.nrows() == 0 {
        bail!("residual training pool is empty");
    }
    let d = cfg.target.dim();
    let mut init = stream(cfg.seed, purpose::INIT, 1).rng();
    let mut net = VelocityNet::new(d, &cfg.residual.net.hidden, cfg.residual.net.activation, &mut init);
    let mut rng = stream(cfg.seed, purpose::RESIDUAL, 0).rng();
    let report = train_rectified(targets.view(), &mut net, Some(base), &cfg.residual.train, &mut rng)
        .context("training the residual velocity")?;
    Ok((net, report))
}

pub fn cmd_train_residual(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    let pool_path = dir.join(files::RESIDUAL_POOL);
    require(&pool_path, "run `sample` first")?;
    let sets = io::read_finals(&pool_path)?;
    let targets = concatenate(Axis(0), &sets.iter().map(|s| s.view()).collect::<Vec<_>>())
        .map_err(|e| anyhow!("{}: {e}", pool_path.display()))?;
    if targets.ncols() != cfg.target.dim() {
        bail!(
            "{}: samples have dimension {}, target has {}",
            pool_path.display(),
            targets.ncols(),
            cfg.target.dim()
        );
    }
    let base = load_base(cfg, dir)?;
    let (net, report) = train_residual(cfg, &base, &targets)?;
    let ckpt = dir.join(files::RESIDUAL_CKPT);
    std::fs::write(&ckpt, net.to_checkpoint()).with_context(|| format!("writing {}", ckpt.display()))?;
    write_loss(&dir.join(files::RESIDUAL_LOSS), &report)?;
    eprintln!(
        "trained r: held-out loss {:.4} -> {:.4}",
        report.holdout_loss.first().copied().unwrap_or(f64::NAN),
        report.holdout_loss.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

// ---------------------------------------------------------------- sampling

/// One cell of the objective × regularization grid; `Objective::None` is IID.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunKey {
    pub objective: Objective,
    pub reg: RegMode,
}

impl RunKey {
    pub fn iid() -> Self {
        Self {
            objective: Objective::None,
            reg: RegMode::Off,
        }
    }

    pub fn is_iid(&self) -> bool {
        self.objective == Objective::None
    }

    pub fn name(&self) -> String {
        format!("{}_{}", self.objective.name(), self.reg.name())
    }

    pub fn joint_config(&self, cfg: &ExperimentConfig) -> JointConfig {
        JointConfig {
            diversity: DiversityConfig {
                objective: self.objective,
                ..cfg.sampling.diversity
            },
            reg: self.reg,
            order: cfg.sampling.reg_order,
        }
    }
}

/// IID first, then every objective × regularization pair of the config.
pub fn diversity_runs(cfg: &ExperimentConfig) -> Vec<RunKey> {
    let mut runs = vec![RunKey::iid()];
    for &objective in &cfg.sampling.objectives {
        if objective == Objective::None {
            continue;
        }
        for &reg in &cfg.sampling.reg_modes {
            runs.push(RunKey { objective, reg });
        }
    }
    runs
}

pub fn sets_path(dir: &Path, key: &RunKey) -> PathBuf {
    dir.join(files::SETS_DIR).join(format!("{}.csv", key.name()))
}

fn trajectory_path(dir: &Path, name: &str, trial: u64) -> PathBuf {
    dir.join(files::TRAJECTORY_DIR).join(format!("{name}_trial{trial}.csv"))
}

/// Sample `trials` sets of one run; returns finals, and full records for the
/// first `keep_full` trials.
pub fn sample_run(
    cfg: &ExperimentConfig,
    model: &FlowModel,
    key: &RunKey,
    seed_purpose: u64,
    trials: usize,
    keep_full: usize,
    pool: &rayon::ThreadPool,
) -> Result<(Vec<Array2<f64>>, Vec<JointSampleSet>)> {
    let grid = grid(cfg)?;
    let jc = key.joint_config(cfg);
    let n = cfg.sampling.set_size;
    let sets = par_trials(pool, trials, |trial| {
        let seed = stream(cfg.seed, seed_purpose, trial);
        let set = if key.is_iid() {
            sample_iid(model, n, &grid, seed)?
        } else {
            sample_joint(model, n, &grid, &jc, seed)?
        };
        let full = ((trial as usize) < keep_full).then(|| set.clone());
        Ok((set.finals().to_owned(), full))
    })?;
    let mut finals = Vec::with_capacity(trials);
    let mut full = Vec::new();
    for (f, s) in sets {
        finals.push(f);
        full.extend(s);
    }
    Ok((finals, full))
}

/// Sample every set the experiment needs, or with `marginal` only IID sets
/// of the marginal flow `v + r`.
pub fn cmd_sample(cfg: &ExperimentConfig, dir: &Path, marginal: bool) -> Result<()> {
    let pool = thread_pool(cfg.workers)?;
    if marginal {
        let residual = load_residual(cfg, dir).context("marginal sampling needs a trained residual")?;
        let model = FlowModel::new(load_base(cfg, dir)?).with_residual(residual)?;
        let grid = grid(cfg)?;
        let n = cfg.sampling.set_size;
        let sets = par_trials(&pool, cfg.sampling.trials, |trial| {
            let s = sample_marginal(&model, n, &grid, stream(cfg.seed, purpose::MARGINAL, trial))?;
            Ok(s.finals().to_owned())
        })?;
        return io::write_finals(&dir.join(files::SETS_DIR).join("marginal_flow.csv"), &sets);
    }
    let model = FlowModel::new(load_base(cfg, dir)?);
    match cfg.experiment {
        Experiment::Diversity => sample_diversity(cfg, &model, dir, &pool),
        Experiment::Weights => sample_weights(cfg, &model, dir, &pool),
    }
}

fn sample_diversity(cfg: &ExperimentConfig, model: &FlowModel, dir: &Path, pool: &rayon::ThreadPool) -> Result<()> {
    let s = &cfg.sampling;
    for key in diversity_runs(cfg) {
        let (finals, full) = sample_run(cfg, model, &key, purpose::SETS, s.trials, s.dump_trials, pool)?;
        io::write_finals(&sets_path(dir, &key), &finals)?;
        for set in &full {
            io::write_trajectory(&trajectory_path(dir, &key.name(), set.seed.trial & 0xFFFF_FFFF_FFFF), set)?;
        }
        eprintln!("sampled {} x {} ({})", s.trials, s.set_size, key.name());
    }
    let grid = grid(cfg)?;
    let reference = par_trials(pool, s.trials, |trial| {
        let set = sample_iid(model, s.reference_size, &grid, stream(cfg.seed, purpose::REFERENCE, trial))?;
        Ok(set.finals().to_owned())
    })?;
    io::write_finals(&dir.join(files::REFERENCE), &reference)
}

fn weight_settings(cfg: &ExperimentConfig) -> Result<&WeightSettings> {
    cfg.weights
        .as_ref()
        .ok_or_else(|| anyhow!("config has no [weights] section"))
}

fn weights_run(cfg: &ExperimentConfig) -> Result<RunKey> {
    let w = weight_settings(cfg)?;
    Ok(RunKey {
        objective: w.objective,
        reg: w.reg_mode,
    })
}

fn sample_weights(cfg: &ExperimentConfig, model: &FlowModel, dir: &Path, pool: &rayon::ThreadPool) -> Result<()> {
    let w = weight_settings(cfg)?;
    let key = weights_run(cfg)?;
    let (train, _) = sample_run(cfg, model, &key, purpose::RESIDUAL_SETS, cfg.residual.train_sets, 0, pool)?;
    io::write_finals(&dir.join(files::RESIDUAL_POOL), &train)?;
    eprintln!("sampled {} residual-training sets", train.len());
    let (sets, full) = sample_run(cfg, model, &key, purpose::SETS, w.pool_sets, cfg.sampling.dump_trials, pool)?;
    io::write_finals(&dir.join(files::POOL), &sets)?;
    for set in &full {
        io::write_trajectory(&trajectory_path(dir, &key.name(), set.seed.trial & 0xFFFF_FFFF_FFFF), set)?;
    }
    eprintln!("sampled {} pool sets", sets.len());
    Ok(())
}

// ---------------------------------------------------------------- evaluation

pub fn cmd_eval(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    let pool = thread_pool(cfg.workers)?;
    match cfg.experiment {
        Experiment::Diversity => {
            let rows = eval_diversity(cfg, dir)?;
            io::write_metrics(&dir.join(files::DIVERSITY), &rows)
        }
        Experiment::Weights => {
            let out = eval_weights(cfg, dir, &pool)?;
            out.write(dir)
        }
    }
}

/// Coverage, quality and representation error for every run on disk.
pub fn eval_diversity(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<MetricRow>> {
    let runs = diversity_runs(cfg);
    let mut missing: Vec<String> = runs
        .iter()
        .map(|k| sets_path(dir, k))
        .chain(std::iter::once(dir.join(files::REFERENCE)))
        .filter(|p| !p.exists())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        missing.sort();
        bail!("missing inputs (run `sample` first): {}", missing.join(", "));
    }
    let spec = &cfg.target;
    let reference = io::read_finals(&dir.join(files::REFERENCE))?;
    let n = cfg.sampling.set_size;
    let mut rows = Vec::new();
    for (run_index, key) in runs.iter().enumerate() {
        let path = sets_path(dir, key);
        let sets = io::read_finals(&path)?;
        if sets.len() > reference.len() {
            bail!("{} has {} trials but the reference has {}", path.display(), sets.len(), reference.len());
        }
        let (obj, reg) = (key.objective.name(), key.reg.name());
        let method = if key.is_iid() { "iid" } else { "joint" };
        let coverage: Vec<f64> = sets.iter().map(|s| mode_coverage(s.view(), spec) as f64).collect();
        let mut log_p = Vec::new();
        let mut rmse = Vec::new();
        for s in &sets {
            let (lp, e) = quality_stats(s.view(), spec)?;
            log_p.push(lp);
            rmse.push(e);
        }
        let repr: Vec<f64> = sets
            .iter()
            .zip(&reference)
            .map(|(s, r)| representation_error(r.view(), s.view(), |x| x.to_vec()))
            .collect::<iwflow::Result<_>>()?;
        let pooled = concatenate(Axis(0), &sets.iter().map(|s| s.view()).collect::<Vec<_>>())?;
        let mut rng = stream(cfg.seed, purpose::REGROUP, run_index as u64).rng();
        let groups = regroup_marginal(pooled.view(), n, &mut rng)?;
        let marginal: Vec<f64> = groups.iter().map(|g| mode_coverage(g.view(), spec) as f64).collect();

        rows.push(summary("coverage", method, obj, reg, &coverage));
        rows.push(summary("coverage", "marginal", obj, reg, &marginal));
        rows.push(summary("log_p", method, obj, reg, &log_p));
        rows.push(summary("rmse", method, obj, reg, &rmse));
        rows.push(summary("repr_error", method, obj, reg, &repr));
    }
    let marginal_flow = dir.join(files::SETS_DIR).join("marginal_flow.csv");
    if marginal_flow.exists() {
        let sets = io::read_finals(&marginal_flow)?;
        let coverage: Vec<f64> = sets.iter().map(|s| mode_coverage(s.view(), spec) as f64).collect();
        rows.push(summary("coverage", "marginal_flow", "none", "off", &coverage));
    }
    Ok(rows)
}

/// Log-weight estimators compared against the density-estimate truth.
pub const WEIGHT_METHODS: [&str; 5] = ["along", "fixed", "knn", "kde", "mgf"];
/// Expectation estimators scored by JS divergence.
pub const JS_METHODS: [&str; 7] = ["along", "fixed", "knn", "kde", "mgf", "equal", "iid"];

/// Everything computed for one evaluation set.
#[derive(Debug, Clone)]
pub struct SetEvaluation {
    pub trial: u64,
    /// Estimated log weights per method, in [`WEIGHT_METHODS`] order.
    pub log_w: Vec<Vec<f64>>,
    /// `log p(x) - log p̂'(x)` with the local-likelihood estimate; `None`
    /// where every scale was rejected.
    pub truth: Vec<Option<f64>>,
    pub information: Vec<f64>,
    /// Raw (unclipped) expectation estimates per method, in [`JS_METHODS`] order.
    pub estimates: Vec<Vec<f64>>,
}

pub struct WeightsEvaluation {
    pub key: RunKey,
    pub sets: Vec<SetEvaluation>,
    pub mu: Vec<f64>,
    pub mu_se: Vec<f64>,
    pub metrics: Vec<MetricRow>,
    /// `(method, coordinate, mean, se, z)` with `se` including the error of `mu`.
    pub expectation: Vec<(String, usize, f64, f64, f64)>,
}

impl WeightsEvaluation {
    pub fn write(&self, dir: &Path) -> Result<()> {
        io::write_metrics(&dir.join(files::WEIGHTS), &self.metrics)?;
        io::write_csv(
            &dir.join(files::GROUND_TRUTH),
            &["coordinate".into(), "mu".into(), "se".into()],
            self.mu
                .iter()
                .zip(&self.mu_se)
                .enumerate()
                .map(|(c, (m, s))| vec![c.to_string(), fmt_f(*m), fmt_f(*s)]),
        )?;
        io::write_csv(
            &dir.join(files::EXPECTATION),
            &["method", "coordinate", "mean", "se", "mu", "z"].map(String::from),
            self.expectation.iter().map(|(m, c, mean, se, z)| {
                vec![m.clone(), c.to_string(), fmt_f(*mean), fmt_f(*se), fmt_f(self.mu[*c]), fmt_f(*z)]
            }),
        )?;
        let mut rows = Vec::new();
        for s in &self.sets {
            for i in 0..s.truth.len() {
                for (m, lw) in WEIGHT_METHODS.iter().zip(&s.log_w) {
                    rows.push(vec![s.trial.to_string(), i.to_string(), m.to_string(), fmt_f(lw[i]), String::new()]);
                }
                rows.push(vec![
                    s.trial.to_string(),
                    i.to_string(),
                    "llde".into(),
                    s.truth[i].map(fmt_f).unwrap_or_default(),
                    fmt_f(s.information[i]),
                ]);
            }
        }
        io::write_csv(
            &dir.join(files::SAMPLE_WEIGHTS),
            &["trial", "sample", "method", "log_w", "information"].map(String::from),
            rows,
        )
    }
}

/// Mode frequencies of `samples` exact mixture draws, and their standard errors.
pub fn reference_expectation(cfg: &ExperimentConfig, samples: usize) -> (Vec<f64>, Vec<f64>) {
    let spec = &cfg.target;
    let k = spec.n_components();
    let mut counts = vec![0u64; k];
    let chunk = 100_000;
    let mut done = 0;
    let mut index = 0;
    while done < samples {
        let m = chunk.min(samples - done);
        let mut rng = stream(cfg.seed, purpose::TRUTH, index).rng();
        let xs = spec.sample(m, &mut rng);
        for row in xs.rows() {
            counts[spec.nearest_mode(row.as_slice().expect("row-major"))] += 1;
        }
        done += m;
        index += 1;
    }
    let n = samples as f64;
    let mu: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
    let se = mu.iter().map(|p| (p * (1.0 - p) / n).sqrt()).collect();
    (mu, se)
}

/// Indices of the `fraction` most informative valid items, best first.
pub fn top_by_information(information: &[f64], valid: &[bool], fraction: f64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..information.len()).filter(|&i| valid[i]).collect();
    idx.sort_by(|&a, &b| information[b].total_cmp(&information[a]).then(a.cmp(&b)));
    let keep = (fraction * idx.len() as f64).ceil() as usize;
    idx.truncate(keep.min(idx.len()));
    idx
}

/// Log weights of every item of `finals` under the density baselines, each
/// fitted to `finals` itself.
fn baseline_log_weights(spec: &iwflow::gmm::GmmSpec, finals: &Array2<f64>, k: usize) -> Result<[Vec<f64>; 3]> {
    let mut out = [Vec::new(), Vec::new(), Vec::new()];
    for row in finals.rows() {
        let x = row.to_vec();
        let lp = spec.log_density(&x);
        out[0].push(lp - knn_log_density(finals.view(), &x, k)?);
        out[1].push(lp - kde_log_density(finals.view(), &x)?);
        out[2].push(lp - mgf_log_density(finals.view(), &x)?);
    }
    Ok(out)
}

/// Weighted one-hot mean; `None` when a weight overflows.
fn weighted_modes(onehot: &Array2<f64>, log_w: &[f64]) -> Option<Vec<f64>> {
    weighted_mean(onehot.view(), log_w).ok()
}

pub fn eval_weights(cfg: &ExperimentConfig, dir: &Path, pool: &rayon::ThreadPool) -> Result<WeightsEvaluation> {
    let w = weight_settings(cfg)?;
    let key = weights_run(cfg)?;
    let pool_path = dir.join(files::POOL);
    let mut missing = Vec::new();
    for (p, hint) in [
        (pool_path.clone(), "run `sample`"),
        (dir.join(files::RESIDUAL_CKPT), "run `train-residual`"),
    ] {
        if !p.exists() {
            missing.push(format!("{} ({hint})", p.display()));
        }
    }
    if cfg.flow.base == BaseKind::Trained && !dir.join(files::FLOW_CKPT).exists() {
        missing.push(format!("{} (run `train-flow`)", dir.join(files::FLOW_CKPT).display()));
    }
    if !missing.is_empty() {
        bail!("missing inputs: {}", missing.join(", "));
    }
    let model = FlowModel::new(load_base(cfg, dir)?);
    let residual = load_residual(cfg, dir)?;
    let pool_sets = io::read_finals(&pool_path)?;
    if pool_sets.len() < w.eval_sets {
        bail!("{} holds {} sets, fewer than eval_sets = {}", pool_path.display(), pool_sets.len(), w.eval_sets);
    }
    let pooled = concatenate(Axis(0), &pool_sets.iter().map(|s| s.view()).collect::<Vec<_>>())?;
    let (mu, mu_se) = reference_expectation(cfg, w.truth_samples);
    let spec = &cfg.target;
    let grid = grid(cfg)?;
    let jc = key.joint_config(cfg);
    let n = cfg.sampling.set_size;

    let sets = par_trials(pool, w.eval_sets, |trial| {
        let seed = stream(cfg.seed, purpose::SETS, trial);
        let set = sample_joint(&model, n, &grid, &jc, seed)?;
        if set.finals() != pool_sets[trial as usize] {
            bail!("{}: set {trial} does not match its replay; was it sampled with this config?", pool_path.display());
        }
        let finals = set.finals().to_owned();
        let along: Vec<f64> = integrate_logw_along(&set, &residual, &grid)?
            .into_iter()
            .map(|e| e.log_w)
            .collect();
        let fixed: Vec<f64> = integrate_logw_fixed_batch(finals.view(), &model.base, &residual, &grid)?
            .into_iter()
            .map(|e| e.log_w)
            .collect();
        let [knn, kde, mgf] = baseline_log_weights(spec, &finals, w.knn_k)?;
        let mut truth = Vec::with_capacity(n);
        let mut information = Vec::with_capacity(n);
        for i in 0..n {
            let x = finals.row(i).to_vec();
            match llde_detailed(pooled.view(), trial as usize * n + i, &w.llde) {
                Ok(detail) => {
                    truth.push(Some(spec.log_density(&x) - detail.estimate.log_density));
                    information.push(detail.estimate.information);
                }
                Err(_) => {
                    truth.push(None);
                    information.push(0.0);
                }
            }
        }
        let iid = sample_iid(&model, n, &grid, stream(cfg.seed, purpose::REFERENCE, trial))?;
        let onehot = mode_one_hot_rows(spec, finals.view());
        let iid_onehot = mode_one_hot_rows(spec, iid.finals());
        let zeros = vec![0.0; n];
        let log_w = vec![along, fixed, knn, kde, mgf];
        let mut estimates: Vec<Vec<f64>> = log_w
            .iter()
            .map(|lw| weighted_modes(&onehot, lw).unwrap_or_else(|| vec![f64::NAN; spec.n_components()]))
            .collect();
        estimates.push(weighted_mean(onehot.view(), &zeros)?);
        estimates.push(weighted_mean(iid_onehot.view(), &zeros)?);
        Ok(SetEvaluation {
            trial,
            log_w,
            truth,
            information,
            estimates,
        })
    })?;

    let (obj, reg) = (key.objective.name(), key.reg.name());
    let mut metrics = Vec::new();
    for (m, method) in WEIGHT_METHODS.iter().enumerate() {
        let (mut se, mut tau, mut rho, mut gap) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for s in &sets {
            let valid: Vec<bool> = s.truth.iter().map(Option::is_some).collect();
            let keep = top_by_information(&s.information, &valid, w.top_fraction);
            if keep.is_empty() {
                continue;
            }
            let pred: Vec<f64> = keep.iter().map(|&i| s.log_w[m][i]).collect();
            let truth: Vec<f64> = keep.iter().map(|&i| s.truth[i].expect("filtered")).collect();
            se.push(pred.iter().zip(&truth).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64);
            if keep.len() >= 2 {
                tau.push(kendall_tau_b(&pred, &truth)?);
                rho.push(spearman_rho(&pred, &truth)?.rho);
                let grades: Vec<f64> = truth.iter().map(|t| t.exp()).collect();
                if let Ok(g) = graded_ap(&pred, &grades) {
                    gap.push(g);
                }
            }
        }
        metrics.push(summary("se", method, obj, reg, &se));
        let mut med = summary("se_median", method, obj, reg, &se);
        med.mean = median(&se).unwrap_or(f64::NAN);
        med.ci95 = f64::NAN;
        metrics.push(med);
        metrics.push(summary("tau_b", method, obj, reg, &tau));
        metrics.push(summary("spearman", method, obj, reg, &rho));
        metrics.push(summary("gap", method, obj, reg, &gap));
    }
    let mut expectation = Vec::new();
    for (m, method) in JS_METHODS.iter().enumerate() {
        let mut js = Vec::new();
        for s in &sets {
            if let Ok(p) = clip_renormalize(&s.estimates[m]) {
                js.push(js_divergence(&p, &mu)?);
            }
        }
        metrics.push(summary("js", method, obj, reg, &js));
        let ests: Vec<&Vec<f64>> = sets
            .iter()
            .map(|s| &s.estimates[m])
            .filter(|e| e.iter().all(|v| v.is_finite()))
            .collect();
        if ests.len() < 2 {
            continue;
        }
        for c in 0..mu.len() {
            let col: Vec<f64> = ests.iter().map(|e| e[c]).collect();
            let (mean, half) = ci95(&col)?;
            let se = ((half / 1.96).powi(2) + mu_se[c].powi(2)).sqrt();
            let z = if se > 0.0 { (mean - mu[c]) / se } else { 0.0 };
            expectation.push((method.to_string(), c, mean, se, z));
        }
    }
    let failures = sets.iter().flat_map(|s| &s.truth).filter(|t| t.is_none()).count();
    let mut f = summary("llde_failures", "llde", obj, reg, &[failures as f64]);
    f.trials = sets.len() * n;
    metrics.push(f);
    Ok(WeightsEvaluation {
        key,
        sets,
        mu,
        mu_se,
        metrics,
        expectation,
    })
}
