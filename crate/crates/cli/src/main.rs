//! `qlrcl`: runs continual-learning experiments and memory-hierarchy studies
//! from a single TOML config.
//!
//! Exit codes: 0 success, 2 usage, 3 config or schema error, 4 missing input
//! or upstream artifact, 5 infeasible tile plan, 6 missing efficiency entry,
//! 7 corrupt artifact, 8 I/O or runtime failure.

mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::Ctx;
use config::Loaded;
use error::CliError;
use manifest::Outputs;

#[derive(Parser, Debug)]
#[command(
    name = "qlrcl",
    version,
    about = "Quantized latent replay experiments and tiling cost simulation"
)]
struct Cli {
    /// Experiment config (TOML).
    #[arg(short, long, global = true, default_value = "experiment.toml")]
    config: PathBuf,
    /// Override a config field, e.g. `--set protocol.lr=0.01`. Repeatable; applied in order.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Override the experiment seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Kernel worker threads. Results do not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    /// Write elapsed seconds into traces (breaks byte-identical reruns).
    #[arg(long, global = true)]
    wallclock: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the FP32 model from the seed and record value ranges on the initial set.
    Calibrate,
    /// Quantize the frozen stage at q_bits with latents at q_lr.
    Freeze,
    /// Encode n_lr initial samples into the latent replay buffer.
    BuildReplays,
    /// Run the initial phase and the learning-event stream.
    RunProtocol,
    /// Write L1 tile plans for every adaptive training step.
    Plan,
    /// Cost one learning event on the configured hierarchy.
    Simulate {
        /// Also sweep DMA bandwidth, L1 size and core count.
        #[arg(long)]
        sweep: bool,
    },
    /// Memory, lifetime, platform comparison and replay-size/accuracy tables.
    Report,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Calibrate => "calibrate",
            Command::Freeze => "freeze",
            Command::BuildReplays => "build-replays",
            Command::RunProtocol => "run-protocol",
            Command::Plan => "plan",
            Command::Simulate { sweep: false } => "simulate",
            Command::Simulate { sweep: true } => "simulate-sweep",
            Command::Report => "report",
        }
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let mut overrides = cli.set.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(out) = &cli.out {
        let abs = std::path::absolute(out)?;
        overrides.push(format!(
            "output_dir={}",
            toml::Value::String(abs.display().to_string())
        ));
    }
    let loaded = Loaded::from_file(&cli.config, &overrides)?;
    let ctx = Ctx {
        loaded: &loaded,
        workers: cli.workers.max(1),
        wallclock: cli.wallclock,
    };
    let mut out = Outputs::new(&loaded.out_dir())?;
    match &cli.command {
        Command::Calibrate => commands::calibrate_cmd(&ctx, &mut out)?,
        Command::Freeze => commands::freeze_cmd(&ctx, &mut out)?,
        Command::BuildReplays => commands::build_replays_cmd(&ctx, &mut out)?,
        Command::RunProtocol => commands::run_protocol_cmd(&ctx, &mut out)?,
        Command::Plan => commands::plan_cmd(&ctx, &mut out)?,
        Command::Simulate { sweep } => commands::simulate_cmd(&ctx, &mut out, *sweep)?,
        Command::Report => commands::report_cmd(&ctx, &mut out)?,
    }
    let root = out.root().to_path_buf();
    for f in out.finish(&loaded, cli.command.name(), cli.wallclock)? {
        println!("{}", root.join(f).display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("qlrcl: {e}");
            e.exit()
        }
    }
}
