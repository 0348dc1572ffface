use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::error;

mod commands;

/// Preprocessing, inference, surface extraction and evaluation for implicit
/// single-view reconstruction.
#[derive(Parser, Debug)]
#[command(name = "list", version)]
struct Cli {
    #[command(flatten)]
    global: GlobalOpts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalOpts {
    /// RNG seed for every sampling step.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; the LIST_THREADS environment variable takes precedence.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    #[arg(long, global = true, default_value = "warn")]
    pub log_level: log::LevelFilter,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Normalize a mesh and write training queries, coarse cloud and occupancy.
    Prep(commands::PrepArgs),
    /// Run the forward pipeline and extract the reconstructed mesh.
    Infer(commands::InferArgs),
    /// Extract the zero level set of a stored signed-distance grid.
    Extract(commands::ExtractArgs),
    /// Compare two meshes and write a metric report.
    Eval(commands::EvalArgs),
    /// Metrics restricted to the parts of both meshes hidden from a camera.
    EvalOccluded(commands::EvalOccludedArgs),
    /// Voxelize a point cloud or mesh surface into an occupancy grid.
    Voxelize(commands::VoxelizeArgs),
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReductionArg {
    Sum,
    Mean,
}

impl From<ReductionArg> for list_core::metrics::Reduction {
    fn from(r: ReductionArg) -> Self {
        match r {
            ReductionArg::Sum => Self::Sum,
            ReductionArg::Mean => Self::Mean,
        }
    }
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>, String> {
    match std::env::var("LIST_THREADS") {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse::<usize>()
            .map(Some)
            .map_err(|_| format!("LIST_THREADS must be a positive integer, got `{v}`")),
        _ => Ok(flag),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(cli.global.log_level)
        .format_timestamp(None)
        .init();

    let threads = match thread_count(cli.global.threads) {
        Ok(t) => t,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(1);
        }
    };
    if let Some(n) = threads {
        if n == 0 {
            eprintln!("error: thread count must be positive");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: could not start thread pool: {e}");
            return ExitCode::from(3);
        }
    }

    let g = &cli.global;
    let result = match &cli.command {
        Command::Prep(a) => commands::prep(g, a),
        Command::Infer(a) => commands::infer(g, a),
        Command::Extract(a) => commands::extract(g, a),
        Command::Eval(a) => commands::eval(g, a),
        Command::EvalOccluded(a) => commands::eval_occluded(g, a),
        Command::Voxelize(a) => commands::voxelize(g, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.class().exit_code() as u8)
        }
    }
}
