//! `redlab`: generate data, train the toy enhancer and run the redundancy
//! probes from the command line.

mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use error::{CliError, EXIT_USAGE};

#[derive(Debug, Parser)]
#[command(name = "redlab", version, about = "Parameter redundancy lab for a toy low-light enhancer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic paired corpus.
    GenData {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Number of training pairs.
        #[arg(long)]
        count: usize,
        /// Number of validation pairs.
        #[arg(long, default_value_t = redlab::datagen::DEFAULT_VAL)]
        val: usize,
        /// Image size as HxW.
        #[arg(long, default_value = "32x32")]
        size: String,
    },
    /// Train from a config on a corpus and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reset each selector under each seed and report PSNR changes.
    Probe {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated `path[:kind]` list, or `all` for every decoder group.
        #[arg(long)]
        selectors: String,
        #[arg(long, default_value = "0,1,2")]
        seeds: String,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Redundancy metric of a set of selectors.
    Dmr {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        selectors: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "i-max", default_value_t = redlab::redundancy::DEFAULT_I_MAX)]
        i_max: f64,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Input sensitivity of generated and candidate-weighted kernels.
    DegradeScore {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one reallocating model per grid point.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// `KEY=v1,v2,...` for KEY in D_m, D_e, D_k.
        #[arg(long, num_args = 1.., required = true)]
        grid: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of the training loss gradients.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        samples: usize,
        #[arg(long, default_value_t = redlab::numerics::gradcheck::DEFAULT_EPS)]
        eps: f64,
    },
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::GenData {
            seed,
            out,
            count,
            val,
            size,
        } => commands::gen_data(seed, &out, count, val, &size),
        Command::Train { config, data, out } => commands::train(&config, &data, &out),
        Command::Probe {
            ckpt,
            data,
            selectors,
            seeds,
            split,
            out,
        } => commands::probe(&ckpt, &data, &selectors, &seeds, &split, &out),
        Command::Dmr {
            ckpt,
            data,
            selectors,
            seed,
            i_max,
            split,
            out,
        } => commands::dmr(&ckpt, &data, &selectors, seed, i_max, &split, &out),
        Command::DegradeScore { ckpt, data, split, out } => commands::degrade_score(&ckpt, &data, &split, &out),
        Command::Ablate { config, grid, out } => commands::ablate(&config, &grid, &out),
        Command::Gradcheck { config, samples, eps } => commands::gradcheck(&config, samples, eps),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.to_string();
            let first = rendered.lines().next().unwrap_or("invalid arguments");
            eprintln!("{first}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
