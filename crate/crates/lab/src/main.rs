use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sdpt_lab::commands::{cmd_eval, cmd_pretrain, cmd_report, cmd_self_train, cmd_sweep, cmd_tune};
use sdpt_lab::{ExperimentConfig, Result};

#[derive(Parser)]
#[command(
    name = "sdpt-lab",
    version,
    about = "Fusion-space prompt tuning experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory, overriding `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run this single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train a backbone per seed on the source task.
    Pretrain(Common),
    /// Tune the configured method on the target task.
    Tune(Common),
    /// Evaluate an artifact, or the frozen model, without writing files.
    Eval(Common),
    /// Tune over the grid of token counts and insertion layers.
    Sweep(Common),
    /// Tune prototype tokens on pseudo-labels of the unlabeled target pool.
    SelfTrain(Common),
    /// Aggregate result records into a table and CSV.
    Report(Common),
}

type Runner = fn(&ExperimentConfig, &mut dyn Write) -> Result<()>;

fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let (common, run): (&Common, Runner) = match &cli.command {
        Command::Pretrain(c) => (c, |cfg, out| cmd_pretrain(cfg, out).map(drop)),
        Command::Tune(c) => (c, |cfg, out| cmd_tune(cfg, out).map(drop)),
        Command::Eval(c) => (c, |cfg, out| cmd_eval(cfg, out).map(drop)),
        Command::Sweep(c) => (c, |cfg, out| cmd_sweep(cfg, out).map(drop)),
        Command::SelfTrain(c) => (c, |cfg, out| cmd_self_train(cfg, out).map(drop)),
        Command::Report(c) => (c, |cfg, out| cmd_report(cfg, out).map(drop)),
    };
    let cfg =
        ExperimentConfig::load(&common.config)?.with_overrides(common.out.clone(), common.seed);
    run(&cfg, out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let stdout = std::io::stdout();
    match run(cli, &mut stdout.lock()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
