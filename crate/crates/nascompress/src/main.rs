use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use nascompress::config::RunConfig;
use nascompress::latency::LatencyTable;
use nascompress::pipeline::{self, RunDir};

#[derive(Parser)]
#[command(name = "nascompress", version, about = "Supernet-based transformer compression")]
struct Cli {
    /// JSON run configuration; the built-in desk defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Run directory holding all stage artifacts.
    #[arg(long, global = true, default_value = "runs/default")]
    run_dir: PathBuf,

    /// Override the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Emit machine-readable JSON where the subcommand supports it.
    #[arg(long, global = true)]
    json: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Count the block search space and bin populations.
    Enumerate,
    /// Train the teacher model on the toy corpus.
    TrainTeacher,
    /// Measure per-operation latency into the lookup table.
    BenchLatency {
        /// Named profile from the config (defaults to the active profile).
        #[arg(long)]
        profile: Option<String>,
    },
    /// Distill the supernet block-wise with progressive shrinking.
    TrainSupernet,
    /// Build the architecture table and pick the constrained top models.
    Select,
    /// Retrain the chosen architecture from scratch with distillation.
    Retrain,
    /// Summarize a completed run.
    Report,
    /// Run every stage in order, reusing cached artifacts.
    Pipeline {
        /// Run a single named stage instead of the whole chain.
        #[arg(long)]
        stage: Option<String>,
    },
}

fn load_config(cli: &Cli) -> nascompress::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::desk_default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> nascompress::Result<()> {
    let cfg = load_config(&cli)?;
    let run_dir = RunDir::new(&cli.run_dir)?;
    match &cli.command {
        Command::Enumerate => {
            let table = run_dir
                .has("latency.json")
                .then(|| LatencyTable::load(&run_dir.path("latency.json")))
                .transpose()?;
            let report = pipeline::cmd_enumerate(&cfg, table.as_ref())?;
            if cli.json {
                println!("{}", serde_json::to_string_pretty(&report).expect("serializable"));
            } else {
                print!("{}", report.render_text());
            }
        }
        Command::TrainTeacher => pipeline::stage_named(&cfg, &run_dir, "train-teacher")?,
        Command::BenchLatency { profile } => {
            pipeline::pin_config(&cfg, &run_dir)?;
            pipeline::stage_bench_latency(&cfg, &run_dir, profile.as_deref())?;
        }
        Command::TrainSupernet => pipeline::stage_named(&cfg, &run_dir, "train-supernet")?,
        Command::Select => pipeline::stage_named(&cfg, &run_dir, "select")?,
        Command::Retrain => pipeline::stage_named(&cfg, &run_dir, "retrain")?,
        Command::Report => {
            let text = pipeline::cmd_report(&cfg, &run_dir)?;
            print!("{text}");
        }
        Command::Pipeline { stage } => match stage {
            Some(name) => pipeline::stage_named(&cfg, &run_dir, name)?,
            None => pipeline::cmd_pipeline(&cfg, &run_dir)?,
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    nascompress::init_thread_pool_from_env();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
