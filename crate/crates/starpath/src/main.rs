use clap::{Parser, Subcommand};
use starpath::cli;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "starpath",
    about = "Train finite-sum models with reshuffled SGD and diagnose the path"
)]
struct Args {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run SGD per the config and write a trace file
    Train {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Derive the CSV report tables from a trace
    Analyze {
        #[arg(short, long)]
        trace: PathBuf,
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Render SVG figures from a report directory
    Plot {
        #[arg(short, long)]
        dir: PathBuf,
    },
}

fn main() {
    let args = Args::parse();
    let result = match args.cmd {
        Cmd::Train { config } => cli::cmd_train(&config),
        Cmd::Analyze { trace, config } => cli::cmd_analyze(&trace, &config),
        Cmd::Plot { dir } => cli::cmd_plot(&dir),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
