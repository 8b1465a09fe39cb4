use clap::{ArgGroup, Parser};
use convldp_cli::config::{preset, ExperimentConfig};
use convldp_cli::{run, Command, RunOptions};
use std::path::PathBuf;
use std::process::ExitCode;

/// Large-deviation experiments for wide convolutional networks.
#[derive(Parser, Debug)]
#[command(name = "convldp", version)]
#[command(group(ArgGroup::new("source").required(true).args(["config", "preset"])))]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use a shipped configuration instead.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output root; artifacts go to `<out>/<command>/`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Cap on worker threads.
    #[arg(long)]
    workers: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match (&cli.config, &cli.preset) {
        (Some(path), _) => ExperimentConfig::load(path),
        (None, Some(name)) => preset(name),
        (None, None) => unreachable!("clap enforces one source"),
    };
    let cfg = match cfg {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let opts = RunOptions {
        seed: cli.seed,
        out: cli.out,
        workers: cli.workers,
    };
    let outcome = run(cli.command, &cfg, &opts);
    println!("{}", outcome.summary);
    println!("artifacts: {}", outcome.dir.display());
    ExitCode::from(outcome.code as u8)
}
