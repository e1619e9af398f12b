use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nlpolicy::pipeline::{PhaseStatus, PipelineConfig, Run, Variant};
use nlpolicy::Error;

/// Backward-induction policy learning over text stages.
#[derive(Parser)]
#[command(name = "nlpolicy", version)]
struct Cli {
    /// TOML configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// base, tts or one-stage.
    #[arg(long, global = true)]
    variant: Option<Variant>,
    /// Redo phases that already completed under the same configuration.
    #[arg(long, global = true)]
    force: bool,
    /// Run directory.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate training and test trajectories.
    GenData,
    /// Train the Repeat encoder-decoder.
    TrainRepeat,
    /// Train the fluency language model.
    TrainFluency,
    /// Fit stage classifiers by backward induction.
    TrainQ,
    /// Apply the learned policy to the test trajectories.
    Refine,
    /// Score refined test trajectories.
    Eval,
    /// Print a summary of the reports in the run directory.
    Report,
    /// Every phase from gen-data to eval.
    Run,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Format { .. }
        | Error::Validation(_)
        | Error::Oov(_)
        | Error::Io { .. }
        | Error::Json(_)
        | Error::Checkpoint(_) => 3,
        Error::Divergence(_) => 4,
        _ => 1,
    }
}

fn announce(name: &str, status: PhaseStatus) {
    if status == PhaseStatus::Skipped {
        println!("{name}: up to date, skipped (pass --force to rerun)");
    }
}

fn execute(cli: Cli) -> nlpolicy::Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(v) = cli.variant {
        cfg.variant = v;
    }
    let run = Run::new(&cli.out, cfg, cli.force)?;
    match cli.command {
        Command::GenData => announce("gen-data", run.gen_data()?),
        Command::TrainRepeat => announce("train-repeat", run.train_repeat()?),
        Command::TrainFluency => announce("train-fluency", run.train_fluency()?),
        Command::TrainQ => announce("train-q", run.train_q()?),
        Command::Refine => announce("refine", run.refine()?),
        Command::Eval => announce("eval", run.eval()?),
        Command::Report => print!("{}", run.report()?),
        Command::Run => run.run_all()?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
