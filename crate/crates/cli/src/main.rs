use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lorenz_tower_cli::commands::{cmd_check_map, cmd_correlations, cmd_escape, cmd_returns, cmd_tower, Outcome};
use lorenz_tower_cli::config::RunConfig;

#[derive(Parser)]
#[command(name = "lzt", version, about = "Quenched towers for random Lorenz-like maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Configuration file of `section.key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `run.output`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Base seed (overrides `run.seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of independent ω to run.
    #[arg(long, global = true)]
    ensemble: Option<usize>,
    /// Do not print the summary.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Check the family hypotheses and uniform expansion.
    CheckMap,
    /// Escape partition of Δ0 and its tail.
    Escape,
    /// Full-return partition of Δ* and its tail.
    Returns,
    /// Tower construction and its conditions.
    Tower,
    /// Sample measures and quenched correlations.
    Correlations,
}

fn run(cli: &Cli) -> lorenz_tower::Result<Outcome> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(e) = cli.ensemble {
        cfg.ensemble = e;
    }
    if let Some(o) = &cli.out {
        cfg.output = o.clone();
    }
    cfg.validate()?;
    let out = cfg.output.clone();
    match cli.command {
        Command::CheckMap => cmd_check_map(&cfg, &out),
        Command::Escape => cmd_escape(&cfg, &out),
        Command::Returns => cmd_returns(&cfg, &out),
        Command::Tower => cmd_tower(&cfg, &out),
        Command::Correlations => cmd_correlations(&cfg, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(o) => {
            if !cli.quiet {
                print!("{}", o.summary);
            }
            ExitCode::from(o.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("lzt: {e}");
            ExitCode::from(2)
        }
    }
}
