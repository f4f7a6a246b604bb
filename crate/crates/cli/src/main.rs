use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use funnel_forge::{cmd_compare, cmd_oracle, cmd_synthesize, cmd_trajgen, CliError, ExperimentConfig, Overrides};

#[derive(Parser)]
#[command(name = "funnel-forge", version, about = "Funnel synthesis around reference trajectories")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; falls back to `output_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    no_derivative_check: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Backward funnel synthesis with NLP falsifiers.
    Synthesize(Common),
    /// Exact levels for a linear closed loop.
    Oracle(Common),
    /// Falsifier against the exact oracle.
    Compare(Common),
    /// Reference trajectory only.
    Trajgen(Common),
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (args, cmd): (Common, fn(&ExperimentConfig, &std::path::Path) -> Result<funnel_forge::Report, CliError>) =
        match cli.command {
            Command::Synthesize(a) => (a, cmd_synthesize),
            Command::Oracle(a) => (a, cmd_oracle),
            Command::Compare(a) => (a, cmd_compare),
            Command::Trajgen(a) => (a, cmd_trajgen),
        };
    let overrides = Overrides {
        seed: args.seed,
        threads: args.threads,
        no_derivative_check: args.no_derivative_check,
    };
    let cfg = ExperimentConfig::load(&args.config, overrides)?;
    let out = args
        .out
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| CliError::Config("no output directory: pass --out or set output_dir".into()))?;
    let report = cmd(&cfg, &out)?;
    if let Some(r0) = report.summary.get("rho0") {
        println!("rho(0) = {r0}");
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("funnel-forge: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
