use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dnpgam::cli_io::{cmd_diagnose, cmd_fit, cmd_simulate, SimulateArgs, EXIT_INPUT};

#[derive(Parser)]
#[command(name = "dnpgam", version, about = "Doubly-nonparametric generalized additive models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model described by a TOML config to a CSV data set.
    Fit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a coverage study for one simulation setting.
    Simulate {
        #[arg(long)]
        setting: u8,
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 200)]
        reps: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Comma-separated list such as `dnp,gam:mu`, or `all`.
        #[arg(long, default_value = "all")]
        methods: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// PIT, QQ and KS diagnostics for a saved fit.
    Diagnose {
        #[arg(long)]
        fit: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let code = match cli.command {
        Command::Fit { config, data, out } => cmd_fit(&config, &data, &out),
        Command::Simulate {
            setting,
            n,
            reps,
            seed,
            methods,
            out,
        } => cmd_simulate(&SimulateArgs {
            setting,
            n,
            reps,
            seed,
            methods,
            out,
        }),
        Command::Diagnose { fit, data, out } => cmd_diagnose(&fit, &data, &out),
    };
    ExitCode::from(code as u8)
}
