use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tpsim_cli::{
    cmd_commvol, cmd_memscan, cmd_scaling, cmd_verify, cmd_zero, parse_scheduler, CliError,
    ExperimentConfig,
};

#[derive(Parser)]
#[command(name = "tpsim-cli", about = "Tensor-parallelism simulator experiment driver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Flat key=value config file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Write output here instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Fabric scheduler: threads or roundrobin (outputs are identical).
    #[arg(long, global = true, default_value = "threads")]
    scheduler: String,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Oracle-equivalence checks for the configured mode.
    Verify,
    /// Measured vs derived vs published communication volumes.
    Commvol,
    /// Per-rank memory element counts across batch and hidden sweeps.
    Memscan,
    /// ZeRO trajectory equivalence, byte footprints, reuse, placement.
    Zero,
    /// Published-formula volumes across a processor sweep.
    Scaling,
}

fn run(cli: &Cli) -> Result<String, CliError> {
    let text = match &cli.config {
        Some(path) => std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?,
        None => String::new(),
    };
    let mut cfg = ExperimentConfig::parse(&text)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let sched = parse_scheduler(&cli.scheduler)?;
    match cli.command {
        Command::Verify => cmd_verify(&cfg, sched),
        Command::Commvol => cmd_commvol(&cfg, sched),
        Command::Memscan => cmd_memscan(&cfg),
        Command::Zero => cmd_zero(&cfg, sched),
        Command::Scaling => cmd_scaling(&cfg),
    }
}

fn emit(cli: &Cli, text: &str) {
    match &cli.out {
        Some(path) => {
            if let Err(e) = std::fs::write(path, text) {
                eprintln!("failed to write {}: {e}", path.display());
            }
        }
        None => print!("{text}"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(text) => {
            emit(&cli, &text);
            ExitCode::SUCCESS
        }
        Err(CliError::Tolerance(report)) => {
            emit(&cli, &report);
            eprintln!("tolerance violation");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
