//! `sgareg`: synthetic data generation, training, registration, evaluation
//! and benchmarking for the sparse-graph-attention registration network.

mod commands;
mod config;
mod data;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "sgareg", version, about = "Deformable 3-D registration with sparse graph attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone, Debug, Default)]
pub struct ConfigArgs {
    /// key=value config file
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one setting (repeatable), e.g. --set lr=0.001
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic phantom pairs with ground-truth fields
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// D,H,W or a single edge length
        #[arg(long, default_value = "32")]
        dims: String,
        #[arg(long, default_value_t = 10)]
        pairs: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        amplitude: Option<f64>,
        #[arg(long)]
        smoothness: Option<f64>,
        #[arg(long)]
        labels: Option<usize>,
    },
    /// Train on a data directory; writes a checkpoint and loss history
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Register one pair with a trained checkpoint
    Register {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        moving: PathBuf,
        #[arg(long)]
        fixed: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also warp this label map (nearest neighbour)
        #[arg(long)]
        moving_labels: Option<PathBuf>,
    },
    /// Dice and Jacobian folding report for a predicted field
    Eval {
        #[arg(long)]
        fixed_labels: PathBuf,
        #[arg(long)]
        moving_labels: PathBuf,
        #[arg(long)]
        field: PathBuf,
        #[arg(long, default_value = "pair")]
        pair_id: String,
        /// Write the CSV here instead of stdout only
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Token-mixer FLOP and timing table
    Bench {
        /// ssa, mha or both
        #[arg(long, default_value = "both")]
        kind: String,
        #[arg(long, default_value = "256,512,1024,2048,4096")]
        k_list: String,
        #[arg(long, default_value_t = 64)]
        d: usize,
        #[arg(long, default_value_t = 1)]
        heads: usize,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
    /// Train and evaluate across graph strides K
    SweepK {
        #[arg(long, default_value = "1,2,4")]
        k_list: String,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks; non-zero exit on failure
    GradCheck {
        /// all, ops, sga, ssa or network
        #[arg(long, default_value = "all")]
        module: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { seed, dims, pairs, out, amplitude, smoothness, labels } => {
            commands::gen_data(seed, &dims, pairs, &out, amplitude, smoothness, labels)
        }
        Command::Train { cfg, data, out } => commands::train(&cfg, data, out),
        Command::Register { checkpoint, moving, fixed, out, moving_labels } => {
            commands::register(&checkpoint, &moving, &fixed, &out, moving_labels.as_deref())
        }
        Command::Eval { fixed_labels, moving_labels, field, pair_id, out } => {
            commands::eval(&fixed_labels, &moving_labels, &field, &pair_id, out.as_deref())
        }
        Command::Bench { kind, k_list, d, heads, repeats } => commands::bench(&kind, &k_list, d, heads, repeats),
        Command::SweepK { k_list, cfg, data, out } => commands::sweep_k(&k_list, &cfg, data, out),
        Command::GradCheck { module } => commands::grad_check(&module),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
