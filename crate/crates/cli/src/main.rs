use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sfedhifi_core::experiment::{
    parse_config, render_energy, run_experiment_with, Experiment, ExperimentConfig, RunOptions,
};
use sfedhifi_core::Error;

/// Heterogeneous spiking federated learning simulator.
#[derive(Parser)]
#[command(name = "sfedhifi", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a federation and write metrics, manifest and checkpoints.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's global seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: config `output_dir`, else runs/<mode>-seed<seed>).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a checkpoint written with the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Parse and check a config without running it.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print per-scale inference energy of the initialized models.
    Energy {
        #[arg(long)]
        config: PathBuf,
    },
}

fn load(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig, Error> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config {
        key: "--config".into(),
        message: format!("cannot read {}: {e}", path.display()),
    })?;
    let mut config = parse_config(&text)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Validate { config } => {
            let c = load(&config, None)?;
            println!(
                "ok: mode {}, {} clients, scales {:?}, {} rounds",
                c.mode, c.partition.clients, c.federation.scales, c.rounds
            );
        }
        Command::Energy { config } => {
            let c = load(&config, None)?;
            let exp = Experiment::prepare(&c)?;
            print!("{}", render_energy(&exp.initial_energy()?)?);
        }
        Command::Run {
            config,
            seed,
            out,
            resume,
        } => {
            let c = load(&config, seed)?;
            let out_dir = out
                .or_else(|| c.output_dir.clone())
                .unwrap_or_else(|| PathBuf::from(format!("runs/{}-seed{}", c.mode, c.seed)));
            let options = RunOptions { out_dir, resume };
            let summary = run_experiment_with(&c, &options, |m| {
                let accs: Vec<String> = m
                    .scales
                    .iter()
                    .map(|s| format!("{}x {:.4}", s.scale, s.accuracy))
                    .collect();
                eprintln!("round {:>4}  avg {:.4}  [{}]", m.round, m.mean_accuracy(), accs.join(", "));
            })?;
            println!("wrote {}", summary.out_dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config { .. } => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}
