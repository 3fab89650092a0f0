//! Experiment configuration: a sectioned `key = value` text format.
//!
//! ```text
//! # comment
//! [section]
//! key = value
//! ```
//!
//! Every key is optional unless noted in [`ExperimentConfig`]; unknown sections
//! and keys are rejected with their line number.

use std::cell::Cell;
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use iwflow::density::LldeConfig;
use iwflow::diversity::{DiversityConfig, GradMode, Objective};
use iwflow::gmm::{circle_mixture, GmmSpec, WeightMode};
use iwflow::nnet::{Activation, AdamWConfig};
use iwflow::rectflow::TrainConfig;
use iwflow::sampler::RegOrder;
use iwflow::scorereg::RegMode;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub line: Option<usize>,
    /// `section.key` when the error concerns one entry.
    pub key: Option<String>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.line, &self.key) {
            (Some(l), Some(k)) => write!(f, "line {l}: `{k}`: {}", self.message),
            (Some(l), None) => write!(f, "line {l}: {}", self.message),
            (None, Some(k)) => write!(f, "`{k}`: {}", self.message),
            (None, None) => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

type CResult<T> = std::result::Result<T, ConfigError>;

#[derive(Debug)]
struct Entry {
    value: String,
    line: usize,
    used: Cell<bool>,
}

#[derive(Debug)]
struct RawSection {
    line: usize,
    entries: BTreeMap<String, Entry>,
}

/// Parsed but untyped config text.
#[derive(Debug, Default)]
pub struct RawConfig {
    sections: BTreeMap<String, RawSection>,
}

impl RawConfig {
    pub fn parse(text: &str) -> CResult<Self> {
        let mut sections: BTreeMap<String, RawSection> = BTreeMap::new();
        let mut current: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let err = |message: String| ConfigError { line: Some(line), key: None, message };
            if let Some(rest) = content.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| err(format!("unterminated section header `{content}`")))?
                    .trim()
                    .to_string();
                if name.is_empty() {
                    return Err(err("empty section name".into()));
                }
                if sections.contains_key(&name) {
                    return Err(err(format!("section [{name}] appears twice")));
                }
                sections.insert(name.clone(), RawSection { line, entries: BTreeMap::new() });
                current = Some(name);
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{content}`")))?;
            let key = key.trim().to_string();
            let section = current
                .as_ref()
                .ok_or_else(|| err(format!("key `{key}` appears before any [section]")))?;
            let entries = &mut sections.get_mut(section).expect("section exists").entries;
            if key.is_empty() {
                return Err(err("empty key".into()));
            }
            if entries.contains_key(&key) {
                return Err(ConfigError {
                    line: Some(line),
                    key: Some(format!("{section}.{key}")),
                    message: "duplicate key".into(),
                });
            }
            entries.insert(
                key,
                Entry {
                    value: value.trim().to_string(),
                    line,
                    used: Cell::new(false),
                },
            );
        }
        Ok(Self { sections })
    }

    fn section(&self, name: &'static str) -> Section<'_> {
        Section {
            name,
            raw: self.sections.get(name),
        }
    }

    fn check_known(&self, known: &[&str]) -> CResult<()> {
        for (name, sec) in &self.sections {
            if !known.contains(&name.as_str()) {
                return Err(ConfigError {
                    line: Some(sec.line),
                    key: None,
                    message: format!("unknown section [{name}]"),
                });
            }
        }
        Ok(())
    }

    fn check_all_used(&self) -> CResult<()> {
        for (name, sec) in &self.sections {
            for (key, e) in &sec.entries {
                if !e.used.get() {
                    return Err(ConfigError {
                        line: Some(e.line),
                        key: Some(format!("{name}.{key}")),
                        message: "unknown key".into(),
                    });
                }
            }
        }
        Ok(())
    }
}

struct Section<'a> {
    name: &'static str,
    raw: Option<&'a RawSection>,
}

impl Section<'_> {
    fn present(&self) -> bool {
        self.raw.is_some()
    }

    fn has(&self, key: &str) -> bool {
        self.raw.is_some_and(|s| s.entries.contains_key(key))
    }

    fn error(&self, key: &str, message: String) -> ConfigError {
        ConfigError {
            line: self.raw.and_then(|s| s.entries.get(key)).map(|e| e.line),
            key: Some(format!("{}.{key}", self.name)),
            message,
        }
    }

    fn raw_value(&self, key: &str) -> Option<(&str, usize)> {
        let e = self.raw?.entries.get(key)?;
        e.used.set(true);
        Some((e.value.as_str(), e.line))
    }

    fn get<T>(&self, key: &str) -> CResult<Option<T>>
    where
        T: FromStr,
        T::Err: fmt::Display,
    {
        match self.raw_value(key) {
            None => Ok(None),
            Some((v, _)) => v
                .parse()
                .map(Some)
                .map_err(|e| self.error(key, format!("cannot parse `{v}`: {e}"))),
        }
    }

    fn or<T>(&self, key: &str, default: T) -> CResult<T>
    where
        T: FromStr,
        T::Err: fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    fn list<T>(&self, key: &str) -> CResult<Option<Vec<T>>>
    where
        T: FromStr,
        T::Err: fmt::Display,
    {
        let Some((v, _)) = self.raw_value(key) else {
            return Ok(None);
        };
        v.split(',')
            .map(|s| {
                let s = s.trim();
                s.parse()
                    .map_err(|e| self.error(key, format!("cannot parse list item `{s}`: {e}")))
            })
            .collect::<CResult<Vec<T>>>()
            .map(Some)
    }

    fn ensure(&self, key: &str, ok: bool, message: &str) -> CResult<()> {
        if ok {
            Ok(())
        } else {
            Err(self.error(key, message.to_string()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    /// Coverage and quality per objective and regularization mode.
    Diversity,
    /// Residual training, importance weights and expectation estimates.
    Weights,
}

impl FromStr for Experiment {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "diversity" => Ok(Self::Diversity),
            "weights" => Ok(Self::Weights),
            _ => Err(format!("expected `diversity` or `weights`, got `{s}`")),
        }
    }
}

/// Source of the base velocity `v`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaseKind {
    /// A network trained by `train-flow`.
    Trained,
    /// The closed-form velocity of the mixture path.
    Exact,
}

impl FromStr for BaseKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "trained" => Ok(Self::Trained),
            "exact" => Ok(Self::Exact),
            _ => Err(format!("expected `trained` or `exact`, got `{s}`")),
        }
    }
}

fn parse_reg_order(s: &str) -> Result<RegOrder, String> {
    match s {
        "before_scaling" => Ok(RegOrder::BeforeScaling),
        "after_scaling" => Ok(RegOrder::AfterScaling),
        _ => Err(format!("expected `before_scaling` or `after_scaling`, got `{s}`")),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetSettings {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowSettings {
    pub base: BaseKind,
    pub net: NetSettings,
    pub train: TrainConfig,
    /// Exact mixture draws used as training targets.
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSettings {
    pub net: NetSettings,
    pub train: TrainConfig,
    /// Joint sets sampled to build the residual's training pool.
    pub train_sets: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingSettings {
    pub steps: usize,
    pub set_size: usize,
    pub trials: usize,
    pub objectives: Vec<Objective>,
    pub reg_modes: Vec<RegMode>,
    /// Shared by every objective; `objective` is overwritten per run.
    pub diversity: DiversityConfig,
    pub reg_order: RegOrder,
    /// IID reference draws per trial for representation error.
    pub reference_size: usize,
    /// Trials whose full trajectories are written out.
    pub dump_trials: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightSettings {
    pub objective: Objective,
    pub reg_mode: RegMode,
    /// Joint sets whose finals form the density-estimation pool.
    pub pool_sets: usize,
    /// Leading pool sets that are also scored.
    pub eval_sets: usize,
    /// Exact mixture draws for the reference expectation.
    pub truth_samples: usize,
    pub top_fraction: f64,
    pub knn_k: usize,
    pub llde: LldeConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub seed: u64,
    pub workers: usize,
    pub target: GmmSpec,
    pub flow: FlowSettings,
    pub residual: ResidualSettings,
    pub sampling: SamplingSettings,
    /// Required when `experiment = weights`.
    pub weights: Option<WeightSettings>,
}

const SECTIONS: [&str; 6] = ["run", "target", "flow", "residual", "sampling", "weights"];

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", path.display()))?;
        Self::parse(&text).map_err(|e| anyhow::anyhow!("config {}: {e}", path.display()))
    }

    pub fn parse(text: &str) -> CResult<Self> {
        let raw = RawConfig::parse(text)?;
        raw.check_known(&SECTIONS)?;

        let run = raw.section("run");
        let experiment: Experiment = run
            .get("experiment")?
            .ok_or_else(|| run.error("experiment", "required".into()))?;
        let seed: u64 = run
            .get("seed")?
            .ok_or_else(|| run.error("seed", "required; seeds are never implicit".into()))?;
        let workers: usize = run.or("workers", 1)?;
        run.ensure("workers", workers >= 1, "must be at least 1")?;

        let target = parse_target(&raw.section("target"))?;
        let flow = parse_flow(&raw.section("flow"))?;
        let residual = parse_residual(&raw.section("residual"))?;
        let sampling = parse_sampling(&raw.section("sampling"))?;
        let wsec = raw.section("weights");
        let weights = if wsec.present() {
            Some(parse_weights(&wsec)?)
        } else {
            None
        };
        if experiment == Experiment::Weights && weights.is_none() {
            return Err(ConfigError {
                line: None,
                key: Some("weights".into()),
                message: "`experiment = weights` needs a [weights] section".into(),
            });
        }
        raw.check_all_used()?;
        Ok(Self {
            experiment,
            seed,
            workers,
            target,
            flow,
            residual,
            sampling,
            weights,
        })
    }
}

fn parse_target(sec: &Section<'_>) -> CResult<GmmSpec> {
    if !sec.present() {
        return Err(ConfigError {
            line: None,
            key: Some("target".into()),
            message: "missing [target] section".into(),
        });
    }
    if sec.has("means") || sec.has("stds") {
        let mut block = String::new();
        for key in ["weights", "means", "stds"] {
            let (v, _) = sec
                .raw_value(key)
                .ok_or_else(|| sec.error(key, "explicit mixtures need weights, means and stds".into()))?;
            block.push_str(&format!("{key} = {v}\n"));
        }
        for key in ["components", "dim", "shift", "std_major", "std_minor"] {
            if sec.has(key) {
                return Err(sec.error(key, "cannot be combined with explicit `means`".into()));
            }
        }
        return GmmSpec::from_config_block(&block).map_err(|e| sec.error("means", e.to_string()));
    }
    let components: usize = sec.or("components", 10)?;
    let dim: usize = sec.or("dim", 2)?;
    let shift: f64 = sec.or("shift", 1.0)?;
    let std_major: f64 = sec.or("std_major", 0.01)?;
    let std_minor: f64 = sec.or("std_minor", std_major)?;
    let weighting: WeightMode = sec.or("weights", WeightMode::Uniform)?;
    circle_mixture(components, dim, shift, std_major, std_minor, weighting)
        .map_err(|e| sec.error("components", e.to_string()))
}

fn parse_net(sec: &Section<'_>, default_hidden: &[usize]) -> CResult<NetSettings> {
    let hidden = sec.list("hidden")?.unwrap_or_else(|| default_hidden.to_vec());
    sec.ensure(
        "hidden",
        !hidden.is_empty() && !hidden.contains(&0),
        "needs at least one positive width",
    )?;
    let activation = sec.or("activation", Activation::Silu)?;
    Ok(NetSettings { hidden, activation })
}

fn parse_train(sec: &Section<'_>, defaults: TrainConfig) -> CResult<TrainConfig> {
    let cfg = TrainConfig {
        epochs: sec.or("epochs", defaults.epochs)?,
        batch_size: sec.or("batch_size", defaults.batch_size)?,
        optimizer: AdamWConfig {
            lr: sec.or("lr", defaults.optimizer.lr)?,
            weight_decay: sec.or("weight_decay", defaults.optimizer.weight_decay)?,
            ..defaults.optimizer
        },
        final_lr_fraction: sec.or("final_lr_fraction", defaults.final_lr_fraction)?,
        holdout_fraction: sec.or("holdout_fraction", defaults.holdout_fraction)?,
        patience: sec.or("patience", defaults.patience)?,
    };
    sec.ensure("epochs", cfg.epochs >= 1, "must be at least 1")?;
    sec.ensure("batch_size", cfg.batch_size >= 1, "must be at least 1")?;
    sec.ensure("lr", cfg.optimizer.lr > 0.0, "must be positive")?;
    sec.ensure("weight_decay", cfg.optimizer.weight_decay >= 0.0, "must be non-negative")?;
    sec.ensure(
        "final_lr_fraction",
        (0.0..=1.0).contains(&cfg.final_lr_fraction),
        "must lie in [0, 1]",
    )?;
    sec.ensure(
        "holdout_fraction",
        (0.0..0.5).contains(&cfg.holdout_fraction),
        "must lie in [0, 0.5)",
    )?;
    Ok(cfg)
}

fn parse_flow(sec: &Section<'_>) -> CResult<FlowSettings> {
    let base = sec.or("base", BaseKind::Trained)?;
    let net = parse_net(sec, &[128, 128, 128])?;
    let train = parse_train(
        sec,
        TrainConfig {
            optimizer: AdamWConfig {
                lr: 1e-3,
                ..AdamWConfig::default()
            },
            final_lr_fraction: 0.01,
            ..TrainConfig::default()
        },
    )?;
    let samples: usize = sec.or("samples", 100_000)?;
    sec.ensure("samples", samples >= 1, "must be at least 1")?;
    Ok(FlowSettings { base, net, train, samples })
}

fn parse_residual(sec: &Section<'_>) -> CResult<ResidualSettings> {
    let net = parse_net(sec, &[64, 64, 64])?;
    let train = parse_train(sec, TrainConfig::default())?;
    let train_sets: usize = sec.or("train_sets", 1000)?;
    sec.ensure("train_sets", train_sets >= 1, "must be at least 1")?;
    Ok(ResidualSettings { net, train, train_sets })
}

fn parse_sampling(sec: &Section<'_>) -> CResult<SamplingSettings> {
    let steps: usize = sec.or("steps", 100)?;
    sec.ensure("steps", steps >= 1, "must be at least 1")?;
    let set_size: usize = sec.or("set_size", 10)?;
    sec.ensure("set_size", set_size >= 2, "must be at least 2")?;
    let trials: usize = sec.or("trials", 1000)?;
    sec.ensure("trials", trials >= 2, "must be at least 2")?;
    let objectives = sec.list("objectives")?.unwrap_or_else(|| vec![Objective::Dpp]);
    sec.ensure("objectives", !objectives.is_empty(), "must not be empty")?;
    let reg_modes = sec
        .list("reg_modes")?
        .unwrap_or_else(|| vec![RegMode::Off, RegMode::Soft, RegMode::Hard]);
    sec.ensure("reg_modes", !reg_modes.is_empty(), "must not be empty")?;
    let d = DiversityConfig::default();
    let diversity = DiversityConfig {
        objective: d.objective,
        lambda: sec.or("lambda", d.lambda)?,
        chebyshev_order: sec.or("chebyshev_order", d.chebyshev_order)?,
        grad_mode: sec.or("grad_mode", GradMode::StopGrad)?,
        clamp_eps: sec.or("clamp_eps", d.clamp_eps)?,
    };
    diversity
        .validate()
        .map_err(|e| sec.error("lambda", e.to_string()))?;
    let reg_order = match sec.raw_value("reg_order") {
        None => RegOrder::default(),
        Some((v, _)) => parse_reg_order(v).map_err(|m| sec.error("reg_order", m))?,
    };
    let reference_size: usize = sec.or("reference_size", 100)?;
    sec.ensure("reference_size", reference_size >= 1, "must be at least 1")?;
    Ok(SamplingSettings {
        steps,
        set_size,
        trials,
        objectives,
        reg_modes,
        diversity,
        reg_order,
        reference_size,
        dump_trials: sec.or("dump_trials", 2)?,
    })
}

fn parse_weights(sec: &Section<'_>) -> CResult<WeightSettings> {
    let d = LldeConfig::default();
    let llde = LldeConfig {
        neighbor_grid: sec.list("llde_neighbors")?.unwrap_or(d.neighbor_grid.clone()),
        h_min: sec.or("llde_h_min", d.h_min)?,
        ridge: sec.or("llde_ridge", d.ridge)?,
        min_mass: d.min_mass,
    };
    llde.validate()
        .map_err(|e| sec.error("llde_neighbors", e.to_string()))?;
    let w = WeightSettings {
        objective: sec.or("objective", Objective::HarmonicDpp)?,
        reg_mode: sec.or("reg_mode", RegMode::Soft)?,
        pool_sets: sec.or("pool_sets", 10_000)?,
        eval_sets: sec.or("eval_sets", 2000)?,
        truth_samples: sec.or("truth_samples", 1_000_000)?,
        top_fraction: sec.or("top_fraction", 0.5)?,
        knn_k: sec.or("knn_k", 5)?,
        llde,
    };
    sec.ensure("eval_sets", w.eval_sets >= 2, "must be at least 2")?;
    sec.ensure("pool_sets", w.pool_sets >= w.eval_sets, "must be at least `eval_sets`")?;
    sec.ensure("truth_samples", w.truth_samples >= 1, "must be at least 1")?;
    sec.ensure(
        "top_fraction",
        w.top_fraction > 0.0 && w.top_fraction <= 1.0,
        "must lie in (0, 1]",
    )?;
    sec.ensure("knn_k", w.knn_k >= 1, "must be at least 1")?;
    Ok(w)
}
