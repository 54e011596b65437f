use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cpe::config::{ExperimentConfig, Overrides};
use cpe::harness::{compare_discretizations, resolve_output, run_experiment, RunOptions};

#[derive(Parser)]
#[command(name = "cpe", version, about = "Constrained consensus-based optimization and ensemble Kalman inversion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a configuration without sweep axes.
    Run(Invocation),
    /// Run every point of the configured parameter sweep.
    Sweep(Invocation),
    /// Run the explicit and semi-implicit EKI schemes from shared initial ensembles.
    CompareEki(Invocation),
    /// Check a configuration and print it with all defaults resolved.
    Validate(Invocation),
}

#[derive(Args)]
struct Invocation {
    /// Experiment configuration (TOML).
    config: PathBuf,
    /// Gibbs weight parameter.
    #[arg(long)]
    alpha: Option<f64>,
    /// Penalty parameter ("inf" disables the penalty).
    #[arg(long)]
    nu: Option<f64>,
    /// Relaxation parameter ("inf" disables the relaxation drift).
    #[arg(long)]
    epsilon: Option<f64>,
    /// Noise strength.
    #[arg(long)]
    sigma: Option<f64>,
    /// Time step (base time step for EKI).
    #[arg(long)]
    dt: Option<f64>,
    /// Ensemble size.
    #[arg(long)]
    particles: Option<usize>,
    /// Independent runs per sweep point.
    #[arg(long)]
    runs: Option<usize>,
    /// Base seed; run `m` uses seed + m.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Worker threads for independent runs (default: all logical cores).
    #[arg(long)]
    workers: Option<usize>,
}

impl Invocation {
    fn load(&self) -> cpe::Result<ExperimentConfig> {
        let overrides = Overrides {
            alpha: self.alpha,
            nu: self.nu,
            epsilon: self.epsilon,
            sigma: self.sigma,
            dt: self.dt,
            particles: self.particles,
            runs: self.runs,
            seed: self.seed,
            output: self.output.clone(),
        };
        let config = ExperimentConfig::from_path(&self.config)?.with_overrides(&overrides)?;
        config.validate()?;
        Ok(config)
    }

    fn options(&self) -> RunOptions {
        RunOptions {
            workers: self.workers,
            dry_run: false,
        }
    }
}

enum Failure {
    Fatal(String),
    Partial(usize),
}

impl From<cpe::Error> for Failure {
    fn from(e: cpe::Error) -> Self {
        Failure::Fatal(e.to_string())
    }
}

fn execute(command: Command) -> Result<(), Failure> {
    match command {
        Command::Validate(inv) => {
            let config = inv.load()?;
            let points = config.sweep_points()?.len();
            print!("{}", config.to_toml_string()?);
            eprintln!("valid: {points} sweep point(s) x {} run(s)", config.runs);
            Ok(())
        }
        Command::Run(inv) => {
            let config = inv.load()?;
            if !config.sweep.is_empty() {
                return Err(Failure::Fatal(
                    "configuration defines sweep axes; use the sweep subcommand".into(),
                ));
            }
            experiment(&config, inv.options())
        }
        Command::Sweep(inv) => {
            let config = inv.load()?;
            experiment(&config, inv.options())
        }
        Command::CompareEki(inv) => {
            let config = inv.load()?;
            let results = compare_discretizations(&config, &inv.options())?;
            let failed = results
                .iter()
                .flatten()
                .map(|c| usize::from(c.explicit.failed()) + usize::from(c.semi_implicit.failed()))
                .sum();
            let runs: usize = results.iter().map(Vec::len).sum();
            println!(
                "{} comparison run(s) written to {}",
                runs,
                resolve_output(&config.output).display()
            );
            if failed > 0 {
                return Err(Failure::Partial(failed));
            }
            Ok(())
        }
    }
}

fn experiment(config: &ExperimentConfig, options: RunOptions) -> Result<(), Failure> {
    let report = run_experiment(config, &options)?;
    let runs: usize = report.points.iter().map(|p| p.runs.len()).sum();
    println!(
        "{} point(s), {} run(s) written to {}",
        report.points.len(),
        runs,
        report.output.display()
    );
    for point in &report.points {
        for outcome in &point.runs {
            if let Some(reason) = outcome.failure() {
                eprintln!("point {} run {} (seed {}) failed: {reason}", point.point.index, outcome.run, outcome.seed);
            }
        }
    }
    match report.failures() {
        0 => Ok(()),
        n => Err(Failure::Partial(n)),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Partial(n)) => {
            eprintln!("{n} run(s) failed; see manifest.json");
            ExitCode::from(2)
        }
        Err(Failure::Fatal(message)) => {
            eprintln!("error: {message}");
            ExitCode::from(1)
        }
    }
}
