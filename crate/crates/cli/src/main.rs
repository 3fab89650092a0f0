use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use iwflow_cli::config::ExperimentConfig;
use iwflow_cli::{pipeline, report};

#[derive(Parser)]
#[command(name = "iwflow", version, about = "Importance-weighted non-IID sampling experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config file.
    #[arg(long, short)]
    config: PathBuf,
    /// Run directory for all artifacts.
    #[arg(long, short)]
    out: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's worker count.
    #[arg(long)]
    workers: Option<usize>,
}

impl RunArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::from_file(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the base velocity on exact target draws.
    TrainFlow(RunArgs),
    /// Train the residual velocity on pooled non-IID samples.
    TrainResidual(RunArgs),
    /// Draw the IID and joint sample sets of the experiment.
    Sample {
        #[command(flatten)]
        run: RunArgs,
        /// Instead sample IID sets from the marginal flow v + r; needs a trained residual.
        #[arg(long)]
        marginal: bool,
    },
    /// Compute metric tables from sampled sets.
    Eval(RunArgs),
    /// Print metric tables from one or more run directories.
    Report {
        /// Run directories holding metric CSVs.
        #[arg(long, short, required = true, num_args = 1..)]
        out: Vec<PathBuf>,
        /// Evaluate the acceptance criteria; exit nonzero if any fails.
        #[arg(long)]
        check: bool,
    },
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::TrainFlow(a) => pipeline::cmd_train_flow(&a.load()?, &a.out)?,
        Command::TrainResidual(a) => pipeline::cmd_train_residual(&a.load()?, &a.out)?,
        Command::Sample { run, marginal } => pipeline::cmd_sample(&run.load()?, &run.out, marginal)?,
        Command::Eval(a) => pipeline::cmd_eval(&a.load()?, &a.out)?,
        Command::Report { out, check } => {
            let dirs: Vec<&std::path::Path> = out.iter().map(PathBuf::as_path).collect();
            let metrics = report::load_many(&dirs)?;
            print!("{}", report::render(&metrics));
            if check {
                let checks = report::acceptance(&metrics);
                println!();
                print!("{}", report::render_checks(&checks));
                return Ok(checks.iter().all(|c| c.pass));
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
