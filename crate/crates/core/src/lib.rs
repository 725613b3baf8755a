//! Sequence-parallel exact causal attention on a desk-sized scale.
//!
//! * [`numerics`]: deterministic dense matrices and a seeded generator.
//! * [`flashcore`]: blockwise online-softmax attention kernels, merge and
//!   backward, plus a materialized oracle.
//! * [`schedule`]: ring and load-balanced task tables with a validator.
//! * [`runtime`]: executes a schedule over logical workers, single-threaded
//!   or one thread per worker, and models communication overlap in virtual time.
//! * [`ckptplan`]: checkpoint placement on a toy transformer stack.
//! * [`analyzer`]: closed-form communication and overlap models.

pub mod analyzer;
pub mod ckptplan;
pub mod error;
pub mod flashcore;
pub mod numerics;
pub mod runtime;
pub mod schedule;

pub use analyzer::{CommScenario, CommStrategy, OverlapScenario};
pub use ckptplan::{CheckpointPlan, CheckpointStrategy, CkptCostModel, LayerPipeline};
pub use error::{Error, Result};
pub use flashcore::{
    block_attn_backward, block_attn_update, dense_oracle, dense_oracle_backward, finalize, rescale,
    AttnAccumulator, AttnConfig, AttnGrads, AttnOutput, BlockSizes, MaskMode,
};
pub use numerics::{Matrix, Rng};
pub use runtime::{
    run_backward, run_forward, shard_sequence, BackwardSchedule, CostModel, ExecutionTrace,
    ExecutorMode, RunOptions, SequenceShard,
};
pub use schedule::{Schedule, ScheduleKind, Task};
