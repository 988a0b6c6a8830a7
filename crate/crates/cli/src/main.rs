//! Single executable over the library: cost reports, allocation-plan audits,
//! training, sweeps, feature-reuse heatmaps, and gradient checks, all driven
//! by config files and emitting CSV/JSON for downstream plotting.

mod commands;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "densekit", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Config file (key=value sections or JSON). A small built-in default is
    /// used when omitted.
    #[arg(long)]
    spec: Option<std::path::PathBuf>,

    /// Override config entries, e.g. --set network.growth=16 --set train.epochs=5
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,

    /// Output directory (falls back to $DENSEKIT_OUT, then ./densekit-out).
    #[arg(long)]
    out: Option<std::path::PathBuf>,

    /// Seed override for anything stochastic.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Parameter/MAC/depth report for a network spec (JSON + per-layer CSV).
    Describe {
        #[command(flatten)]
        common: CommonArgs,
        /// Input image extent for MAC counting (square).
        #[arg(long)]
        input_shape: Option<usize>,
    },
    /// Allocation-plan audit per (strategy, block depth): CSV of byte counts.
    Memplan {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated strategies, or "all".
        #[arg(long, default_value = "all")]
        strategies: String,
        /// Synthetic single-block depths, e.g. 4,8,12. When omitted, the
        /// spec's own blocks are planned.
        #[arg(long)]
        depths: Option<String>,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        /// Spatial extent of the planned block.
        #[arg(long)]
        hw: Option<usize>,
        /// 4 (train mode) or 8 (test mode) bytes per element.
        #[arg(long, default_value_t = 4)]
        elem_bytes: usize,
        /// Also execute each plan once and record wall time.
        #[arg(long)]
        measure: bool,
    },
    /// Train per the config; writes metrics.csv and a checkpoint.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value = "shared-recompute")]
        strategy: String,
        /// Numeric mode: f32 or f64.
        #[arg(long, default_value = "f32")]
        mode: String,
    },
    /// Train every point of the config's [sweep] section; writes sweep.csv.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value = "shared-recompute")]
        strategy: String,
        #[arg(long, default_value = "f32")]
        mode: String,
    },
    /// Feature-reuse heatmap of a trained checkpoint; writes heatmap.csv.
    Heatmap {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: std::path::PathBuf,
        #[arg(long, default_value = "f32")]
        mode: String,
    },
    /// Finite-difference check of the autodiff gradients on a small spec.
    Gradcheck {
        #[command(flatten)]
        common: CommonArgs,
        /// Total sampled coordinates across all parameters.
        #[arg(long, default_value_t = 200)]
        samples: usize,
        /// Test hook: corrupt one analytic gradient to prove the check fails.
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Describe { common, input_shape } => commands::describe(common, input_shape),
        Command::Memplan { common, strategies, depths, batch, hw, elem_bytes, measure } => {
            commands::memplan(common, strategies, depths, batch, hw, elem_bytes, measure)
        }
        Command::Train { common, strategy, mode } => commands::train_cmd(common, strategy, mode),
        Command::Sweep { common, strategy, mode } => commands::sweep_cmd(common, strategy, mode),
        Command::Heatmap { common, checkpoint, mode } => {
            commands::heatmap_cmd(common, checkpoint, mode)
        }
        Command::Gradcheck { common, samples, corrupt_gradient } => {
            commands::gradcheck_cmd(common, samples, corrupt_gradient)
        }
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{} {e}", e.code_prefix());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
