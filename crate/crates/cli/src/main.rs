use std::path::PathBuf;
use std::process::ExitCode;

use addrop_cli::config::Settings;
use addrop_cli::{run, CliError, Command, Invocation};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "addrop", version, about = "Attribution-driven attention dropout experiments")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Train one model and write reports, the best checkpoint and a manifest.
    Train(Common),
    /// Sweep the (p, q) grid plus a plain fine-tuning baseline.
    Grid {
        #[command(flatten)]
        common: Common,
        /// Cells trained in parallel.
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Drop-mode training curves and inference-time rate sweeps.
    Prior(Common),
    /// Evaluate a checkpoint on the dev or test split.
    Eval(Common),
}

#[derive(Args)]
struct Common {
    /// key=value config file, or a run manifest to repeat.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one setting; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory [default: $ADDROP_OUT_DIR/<command> or runs/<command>].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training seed; shorthand for --set train.seed=N.
    #[arg(long)]
    seed: Option<u64>,
}

fn invocation(command: Command, common: Common, workers: usize) -> Result<Invocation, CliError> {
    let mut settings = match &common.config {
        Some(path) => Settings::from_file(path)?,
        None => Settings::default(),
    };
    for pair in &common.set {
        settings.apply_override(pair)?;
    }
    if let Some(seed) = common.seed {
        settings.set("train.seed", &seed.to_string(), "--seed")?;
    }
    let out = common.out.unwrap_or_else(|| {
        let root = std::env::var_os("ADDROP_OUT_DIR").map_or_else(|| PathBuf::from("runs"), PathBuf::from);
        root.join(command.name())
    });
    Ok(Invocation {
        command,
        settings,
        out,
        workers,
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (command, common, workers) = match cli.command {
        Sub::Train(c) => (Command::Train, c, 1),
        Sub::Grid { common, workers } => (Command::Grid, common, workers),
        Sub::Prior(c) => (Command::Prior, c, 1),
        Sub::Eval(c) => (Command::Eval, c, 1),
    };
    let result = invocation(command, common, workers).and_then(|inv| run(&inv));
    match result {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
