use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;

use commands::CliError;

#[derive(Parser, Debug)]
#[command(name = "wellctl", version, about = "Simulation, synthesis and obstruction certificates for particles in a driven square well")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration; defaults are used for missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Overrides the seed from the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel scans.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Numerical check of the coupling hypotheses for the configured dipole.
    CheckHypotheses,
    /// Propagate the eigenstates under the configured control.
    Simulate,
    /// Coercivity scan and reachability experiment.
    Obstruction,
    /// Local control towards the configured targets.
    Control,
    /// Build and store a reference trajectory bundle.
    BuildReference,
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str::<config::RunConfig>(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => config::RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(CliError::Config)?;
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(CliError::Config("--threads must be positive".into()));
        }
        wellctl_core::exec::set_threads(t);
    }
    std::fs::create_dir_all(&cli.out).map_err(|e| CliError::Config(format!("{}: {e}", cli.out.display())))?;
    match cli.command {
        Command::CheckHypotheses => commands::check_hypotheses(&cfg, &cli.out),
        Command::Simulate => commands::simulate(&cfg, &cli.out),
        Command::Obstruction => commands::obstruction(&cfg, &cli.out),
        Command::Control => commands::control(&cfg, &cli.out),
        Command::BuildReference => commands::build_reference(&cfg, &cli.out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("wellctl: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
