use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use uncproxy_core::pipeline::{self, Mode, RunConfig};

#[derive(Parser)]
#[command(
    name = "uncproxy",
    version,
    about = "MC-dropout uncertainty vs annotator disagreement"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic soft-labeled dataset.
    Synth(Common),
    /// Train the network on the train split.
    Train(Common),
    /// Write per-sample prediction logs.
    Predict(Common),
    /// Build report.json and the CSV mirrors.
    Analyze(Common),
}

#[derive(Clone, Copy)]
enum Step {
    Synth,
    Train,
    Predict,
    Analyze,
}

#[derive(clap::Args)]
struct Common {
    /// TOML run config.
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
    /// Output directory; overrides `paths.out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replaces both the synth and the training seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: uncproxy_core::Error| e.to_string())
}

fn run(step: Step, common: Common) -> uncproxy_core::Result<()> {
    let mut config = RunConfig::load(&common.config)?;
    if let Some(mode) = common.mode {
        config.mode = mode;
    }
    if let Some(out) = common.out {
        config.paths.out_dir = out;
    }
    if let Some(seed) = common.seed {
        config.set_seed(seed);
    }
    config.validate()?;
    match step {
        Step::Synth => print!("{}", pipeline::cmd_synth(&config)?),
        Step::Train => print!("{}", pipeline::cmd_train(&config)?),
        Step::Predict => print!("{}", pipeline::cmd_predict(&config)?),
        Step::Analyze => {
            let report = pipeline::cmd_analyze(&config)?;
            println!(
                "analyze: {} samples, {} pairs on the {:?} split",
                report.n_samples, report.n_pairs, report.eval_split
            );
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            println!("  wrote {}", config.paths.report().display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let (step, common) = match Cli::parse().command {
        Command::Synth(c) => (Step::Synth, c),
        Command::Train(c) => (Step::Train, c),
        Command::Predict(c) => (Step::Predict, c),
        Command::Analyze(c) => (Step::Analyze, c),
    };
    match run(step, common) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
