use std::path::Path;
use std::process::{Command, Output};

use iwflow::rectflow::{BaseVelocity, GmmVelocity, VelocityField};
use iwflow::sampler::initial_noise;
use iwflow_cli::config::ExperimentConfig;
use iwflow_cli::io;
use iwflow_cli::pipeline::{self, files, stream};

const SMALL: &str = "
[run]
experiment = diversity
seed = 3

[target]
components = 4
dim = 2
std_major = 0.05
weights = geometric

[flow]
hidden = 16, 16
samples = 2000
epochs = 3
batch_size = 200

[sampling]
steps = 10
set_size = 4
trials = 6
objectives = dpp, pg
reg_modes = off, hard
reference_size = 8
dump_trials = 1
";

fn iwflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iwflow"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = iwflow(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn run_all(config: &Path, dir: &Path, workers: &str) {
    let c = config.to_str().unwrap();
    let o = dir.to_str().unwrap();
    for cmd in ["train-flow", "sample", "eval"] {
        ok(&[cmd, "-c", c, "-o", o, "--workers", workers]);
    }
}

#[test]
fn pipeline_is_deterministic_across_reruns_and_workers() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("small.conf");
    std::fs::write(&config, SMALL).unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_all(&config, &a, "1");
    run_all(&config, &b, "3");
    for name in [files::FLOW_CKPT, files::FLOW_LOSS, files::DIVERSITY, files::REFERENCE] {
        let x = std::fs::read(a.join(name)).unwrap();
        let y = std::fs::read(b.join(name)).unwrap();
        assert!(x == y, "{name} differs between runs");
    }
    let out = iwflow(&["report", "-o", a.to_str().unwrap()]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("coverage") && text.contains("pg"), "{text}");
}

#[test]
fn dumped_trajectories_replay() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("small.conf");
    std::fs::write(&config, SMALL).unwrap();
    let dir = tmp.path().join("run");
    run_all(&config, &dir, "1");
    let dumps: Vec<_> = std::fs::read_dir(dir.join(files::TRAJECTORY_DIR))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    // One dump per run: iid plus two objectives times two regularizations.
    assert_eq!(dumps.len(), 5);
    for path in dumps {
        let set = io::read_trajectory(&path, 3).unwrap();
        assert!(set.replay_matches(), "{}", path.display());
    }
    let sets = io::read_finals(&dir.join(files::SETS_DIR).join("dpp_hard.csv")).unwrap();
    assert_eq!(sets.len(), 6);
    assert_eq!(sets[0].dim(), (4, 2));
}

#[test]
fn zero_steps_is_a_config_error_naming_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("bad.conf");
    std::fs::write(&config, SMALL.replace("steps = 10", "steps = 0")).unwrap();
    let out = iwflow(&["sample", "-c", config.to_str().unwrap(), "-o", tmp.path().to_str().unwrap()]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("sampling.steps") && err.contains("bad.conf"), "{err}");
}

#[test]
fn missing_inputs_are_named() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("small.conf");
    std::fs::write(&config, SMALL).unwrap();
    let out = iwflow(&["eval", "-c", config.to_str().unwrap(), "-o", tmp.path().to_str().unwrap()]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("dpp_off.csv") && err.contains("reference.csv"), "{err}");

    let out = iwflow(&["sample", "--marginal", "-c", config.to_str().unwrap(), "-o", tmp.path().to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains(files::RESIDUAL_CKPT));
}

#[test]
fn report_on_empty_dir_fails_with_message() {
    let tmp = tempfile::tempdir().unwrap();
    let out = iwflow(&["report", "-o", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no metric files"));
}

#[test]
fn residual_trained_on_iid_samples_stays_near_zero() {
    let cfg = ExperimentConfig::parse(
        "
[run]
experiment = weights
seed = 5

[target]
components = 4
dim = 2
std_major = 0.05

[flow]
base = exact

[residual]
epochs = 100

[weights]
pool_sets = 1000
eval_sets = 100
",
    )
    .unwrap();
    let base = BaseVelocity::Exact(GmmVelocity::new(cfg.target.clone()));
    let mut rng = stream(cfg.seed, 99, 0).rng();
    let targets = cfg.target.sample(10_000, &mut rng);
    let (r, _) = pipeline::train_residual(&cfg, &base, &targets).unwrap();

    let x1 = cfg.target.sample(1000, &mut rng);
    let x0 = initial_noise(1000, 2, &mut rng);
    let mut ratios = Vec::new();
    for k in 1..10 {
        let t = k as f64 / 10.0;
        let xt = &x0 * (1.0 - t) + &x1 * t;
        let v = base.velocity_batch(xt.view(), t);
        let rv = r.forward_batch(xt.view(), t);
        for (a, b) in rv.rows().into_iter().zip(v.rows()) {
            let na = a.dot(&a).sqrt();
            let nb = b.dot(&b).sqrt();
            ratios.push(na / nb.max(1e-12));
        }
    }
    let med = iwflow::metrics::median(&ratios).unwrap();
    assert!(med <= 0.1, "median |r|/|v| = {med}");
}
