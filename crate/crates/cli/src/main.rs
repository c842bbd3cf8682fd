use clap::{Parser, Subcommand};
use partgrasp_cli::commands::{self, EvalArgs, ExportArgs, GenDataArgs, OptimizeArgs, SampleArgs, TrainArgs};
use partgrasp_cli::config::RunConfig;
use std::path::PathBuf;
use std::process::ExitCode;

/// Part-level text-prompted grasp synthesis.
///
/// Exit codes: 0 success, 1 I/O or runtime failure, 2 usage or config error,
/// 3 missing checkpoint, 4 format version mismatch, 5 prompt names no part,
/// 6 invalid input or unknown category.
#[derive(Parser, Debug)]
#[command(name = "partgrasp", version)]
struct Cli {
    /// TOML run config; flags override its values
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic part-labeled grasp dataset (t2g-dataset/1 JSONL)
    GenData(GenDataArgs),
    /// Train the denoiser and the segmentation network into a checkpoint
    Train(TrainArgs),
    /// Sample grasps for objects and prompts (t2g-grasps/1 JSONL)
    Sample(SampleArgs),
    /// Refine grasps against the prompted part
    Optimize(OptimizeArgs),
    /// Score grasps and write a t2g-metrics/1 report
    Eval(EvalArgs),
    /// Export one grasp's hand surface as OBJ or PLY
    ExportMesh(ExportArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let run = || {
        let cfg = RunConfig::load(cli.config.as_deref())?;
        match cli.command {
            Command::GenData(a) => commands::gen_data(&cfg, a),
            Command::Train(a) => commands::train_cmd(&cfg, a),
            Command::Sample(a) => commands::sample_cmd(&cfg, a),
            Command::Optimize(a) => commands::optimize_cmd(&cfg, a),
            Command::Eval(a) => commands::eval_cmd(&cfg, a),
            Command::ExportMesh(a) => commands::export_cmd(&cfg, a),
        }
    };
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
