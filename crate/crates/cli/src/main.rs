use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use mtlb_cli::{
    bind_ingest, cmd_eval, cmd_generate, cmd_ingest, cmd_run, cmd_study, init_threads, load_config, CliError, Options,
    Result,
};
use mtlb_core::runconfig::Command;
use mtlb_core::scene::SplitName;

/// Trajectory prediction transfer-learning study.
#[derive(Debug, Parser)]
#[command(name = "mtlb", version)]
struct Cli {
    /// key=value config file with section prefixes (data., generate., model., train., ingest.).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides train.seed and generate.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    /// Extra config entry, applied after the file; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset file.
    Generate {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate one method.
    Run {
        #[arg(long)]
        source_checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "run_out")]
        out: PathBuf,
    },
    /// Run all seven methods and write the study table.
    Study {
        #[arg(long, default_value = "study_out")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one dataset split.
    Eval {
        checkpoint: PathBuf,
        dataset: PathBuf,
        #[arg(default_value = "test")]
        split: SplitName,
        /// Report file; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Collect simulator datagrams into a dataset file.
    Ingest { port: u16, output: PathBuf },
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    let opts = Options {
        config: cli.config,
        seed: cli.seed,
        force: cli.force,
        overrides: cli.overrides,
    };
    match cli.command {
        Cmd::Generate { out } => {
            let cfg = load_config(Command::Generate, &opts)?;
            println!("{}", cmd_generate(&cfg, &out, opts.force)?);
        }
        Cmd::Run { source_checkpoint, out } => {
            let cfg = load_config(Command::Run, &opts)?;
            println!("{}", cmd_run(&cfg, source_checkpoint.as_deref(), &out, opts.force)?);
        }
        Cmd::Study { out } => {
            let cfg = load_config(Command::Study, &opts)?;
            println!("{}", cmd_study(&cfg, &out, opts.force)?);
        }
        Cmd::Eval {
            checkpoint,
            dataset,
            split,
            out,
        } => {
            let cfg = load_config(Command::Eval, &opts)?;
            let report = cmd_eval(&cfg, &checkpoint, &dataset, split, out.as_deref(), opts.force)?;
            if out.is_none() {
                println!("{}", report.to_json());
            }
        }
        Cmd::Ingest { port, output } => {
            let cfg = load_config(Command::Ingest, &opts)?;
            if output.exists() && !opts.force {
                return Err(CliError::Exists(output));
            }
            let listener = bind_ingest(port)?;
            let stop = Arc::new(AtomicBool::new(false));
            let flag = stop.clone();
            ctrlc::set_handler(move || flag.store(true, Ordering::Relaxed))
                .map_err(|e| CliError::Startup(format!("cannot install signal handler: {e}")))?;
            eprintln!("listening on {}", listener.local_addr()?);
            println!("{}", cmd_ingest(&cfg, &listener, &output, opts.force, Some(stop))?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mtlb: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
