use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use qmf_cli::commands::{run_convergence, run_eta, run_simulate};
use qmf_cli::config::{ConfigError, RunConfig};
use qmf_cli::manifest::Artifacts;
use qmf_cli::verify::{run_verify, Suite};
use qmf_cli::{CliError, Outcome};

#[derive(Parser)]
#[command(name = "qmf", version, about = "Quantum filtering of interacting particles and its mean-field limit")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long, global = true, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration: diffusive, counting or qubit.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Replaces every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory, overriding output.directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// One-particle and N-particle filtering trajectories.
    Simulate,
    /// Paired N-particle vs mean-field experiment with the convergence bound.
    Convergence {
        /// Multiplies the theoretical bound (negative controls only).
        #[arg(long, hide = true, default_value_t = 1.0)]
        bound_scale: f64,
    },
    /// Solve for the mean-field curve only.
    Eta,
    /// Run a randomized check suite.
    Verify {
        #[arg(value_enum)]
        suite: Suite,
    },
}

fn load(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match (&common.config, &common.preset) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(name)) => RunConfig::preset(name)?,
        (None, None) => return Err(ConfigError::new("--config", "pass --config PATH or --preset NAME").into()),
    };
    if let Some(seed) = common.seed {
        cfg.override_seed(seed);
    }
    if let Some(dir) = &common.out {
        cfg.output.directory = dir.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<Outcome, CliError> {
    if let Some(n) = cli.common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| ConfigError::new("--threads", e))?;
    }
    let cfg = load(&cli.common)?;
    match cli.command {
        Command::Simulate => run_simulate(&cfg),
        Command::Eta => run_eta(&cfg),
        Command::Convergence { bound_scale } => {
            let (outcome, summary) = run_convergence(&cfg, bound_scale)?;
            if let Some(s) = summary {
                println!("{}", serde_json::to_string_pretty(&s).expect("summary serializes"));
            }
            Ok(outcome)
        }
        Command::Verify { suite } => {
            let report = run_verify(&cfg, suite)?;
            let mut out = Artifacts::create(&cfg.output.directory)?;
            out.write_json(&format!("verify_{}.json", suite.name()), &report)?;
            out.finish(&format!("verify {}", suite.name()), &cfg.canonical_json(), cfg.verify.seed)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            Ok(if report.pass { Outcome::Pass } else { Outcome::Fail })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(outcome) => ExitCode::from(outcome.exit_code()),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
