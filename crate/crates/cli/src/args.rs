use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "distflash",
    version,
    about = "Sequence-parallel exact attention: verification, schedules and cost models"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Number of workers.
    #[arg(long = "P", global = true, default_value_t = 4)]
    pub p: usize,
    /// Total sequence length.
    #[arg(long = "N", global = true, default_value_t = 128)]
    pub n: usize,
    /// Head dimension.
    #[arg(long = "d", global = true, default_value_t = 16)]
    pub d: usize,
    #[arg(long, global = true, default_value_t = 1)]
    pub heads: usize,
    #[arg(long = "kv-heads", global = true, default_value_t = 1)]
    pub kv_heads: usize,
    #[arg(long, global = true, default_value_t = 2)]
    pub layers: usize,
    /// Query tile rows.
    #[arg(long, global = true, default_value_t = 16)]
    pub br: usize,
    /// Key tile columns.
    #[arg(long, global = true, default_value_t = 16)]
    pub bc: usize,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output file; standard output when absent.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    pub format: Format,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Json,
    Csv,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    Ring,
    Balanced,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Executor {
    Stepper,
    Concurrent,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run oracle, gradient, schedule and checkpoint checks.
    Verify,
    /// Emit a schedule table with its idle fraction and expected speedup.
    Schedule(ScheduleArgs),
    /// Closed-form comparison tables.
    #[command(subcommand)]
    Analyze(Analyze),
    /// Compare checkpoint plans on a toy layer stack.
    Ckpt(CkptArgs),
}

#[derive(Args, Debug)]
pub struct ScheduleArgs {
    #[arg(long, value_enum, default_value_t = Strategy::Ring)]
    pub strategy: Strategy,
    /// Also run the forward pass and emit its trace.
    #[arg(long)]
    pub execute: bool,
    #[arg(long, value_enum, default_value_t = Executor::Concurrent)]
    pub executor: Executor,
    /// Prefetch the next chunk during compute.
    #[arg(long)]
    pub overlap: bool,
    /// Virtual cost of one attention kernel call.
    #[arg(long, default_value_t = 1.0)]
    pub compute_cost: f64,
    /// Virtual cost of moving one chunk.
    #[arg(long, default_value_t = 1.0)]
    pub fetch_cost: f64,
}

#[derive(Subcommand, Debug)]
pub enum Analyze {
    /// Communication volume per strategy in units of N·d.
    Comm(CommArgs),
    /// Makespan with and without prefetch overlap.
    Overlap(OverlapArgs),
}

#[derive(Args, Debug)]
pub struct CommArgs {
    /// Key/value heads over query heads, as a decimal or `a/b`; defaults to
    /// kv-heads/heads.
    #[arg(long)]
    pub kv_ratio: Option<String>,
    /// Assume the forward is not rerun for checkpointing.
    #[arg(long)]
    pub no_recompute: bool,
    #[arg(long)]
    pub non_causal: bool,
}

#[derive(Args, Debug)]
pub struct OverlapArgs {
    #[arg(long = "T", default_value_t = 8)]
    pub t: u64,
    #[arg(long = "C", default_value_t = 1.0)]
    pub c: f64,
    #[arg(long = "M", default_value_t = 1.0)]
    pub m: f64,
    /// The first step also needs a fetch.
    #[arg(long)]
    pub remote_first: bool,
}

#[derive(Args, Debug)]
pub struct CkptArgs {
    /// MLP width; defaults to 2d.
    #[arg(long)]
    pub d_ff: Option<usize>,
    /// Add the iteration-time model for the given costs.
    #[arg(long)]
    pub model_time: bool,
    #[arg(long, default_value_t = 0.6)]
    pub f_attn: f64,
    #[arg(long, default_value_t = 0.4)]
    pub f_rest: f64,
    #[arg(long, default_value_t = 2.0)]
    pub b: f64,
}
