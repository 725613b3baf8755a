//! Executes schedules over logical workers that each own one sequence shard.
//!
//! Two drivers run the same per-worker op programs: a single-threaded
//! stepper and a thread-per-worker executor over channels. Because every
//! worker performs its arithmetic in program order, both produce identical
//! bits. Timing is virtual: each op advances a per-worker clock using a
//! [`CostModel`], so overlap shows up in the trace without touching numerics.

mod exec;
mod trace;
mod worker;

use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use trace::{
    comm_counters, CommCounters, EventRow, ExecutionTrace, MessageKind, MessageRecord, Pass,
    TraceEvent, WorkerTrace,
};
pub use worker::{Message, Payload};

use crate::error::{Error, Result};
use crate::flashcore::{AttnConfig, AttnGrads, AttnOutput};
use crate::numerics::Matrix;
use crate::schedule::{validate, Schedule, WorkerId};
use worker::Worker;

/// Virtual costs per op, in arbitrary time units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    /// One attention kernel call on a chunk pair, forward or backward.
    pub compute: f64,
    /// Moving one key/value, query or gradient chunk.
    pub fetch: f64,
    /// Moving one partial accumulator back to its query owner.
    pub partial_transfer: f64,
    /// One rescale merge or gradient accumulation.
    pub merge: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            compute: 1.0,
            fetch: 1.0,
            partial_transfer: 1.0,
            merge: 0.0,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        let all = [self.compute, self.fetch, self.partial_transfer, self.merge];
        if all.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(Error::config(format!(
                "costs must be finite and non-negative: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecutorMode {
    Stepper,
    Concurrent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackwardSchedule {
    /// Ring order: worker `p` visits chunks `p, p-1, ..., 1`.
    Vanilla,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunOptions {
    pub mode: ExecutorMode,
    /// Prefetch the next step's chunk while the current step computes.
    pub overlap: bool,
    pub cost: CostModel,
    pub attn: AttnConfig,
    /// Concurrent executor gives up after this long.
    pub watchdog: Duration,
}

impl RunOptions {
    pub fn for_head_dim(d: usize) -> Self {
        RunOptions {
            mode: ExecutorMode::Stepper,
            overlap: false,
            cost: CostModel::default(),
            attn: AttnConfig::for_head_dim(d),
            watchdog: Duration::from_secs(30),
        }
    }

    pub fn mode(mut self, mode: ExecutorMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn overlap(mut self, overlap: bool) -> Self {
        self.overlap = overlap;
        self
    }

    pub fn cost(mut self, cost: CostModel) -> Self {
        self.cost = cost;
        self
    }

    pub fn attn(mut self, attn: AttnConfig) -> Self {
        self.attn = attn;
        self
    }
}

/// One worker's slice of the sequence plus state carried between passes.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceShard {
    pub worker: WorkerId,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub d_o: Option<Matrix>,
    /// Output and logsumexp stored by the forward pass.
    pub output: Option<AttnOutput>,
    pub grads: Option<AttnGrads>,
    /// Number of key/value gradient contributions summed into `grads`.
    pub grad_contributions: usize,
}

/// Splits `N × d` inputs into `p` equal shards in token order.
pub fn shard_sequence(q: &Matrix, k: &Matrix, v: &Matrix, p: usize) -> Result<Vec<SequenceShard>> {
    if p == 0 {
        return Err(Error::config("need at least one worker"));
    }
    if q.shape() != k.shape() || k.rows() != v.rows() {
        return Err(Error::shape(format!(
            "q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let n = q.rows();
    if !n.is_multiple_of(p) {
        return Err(Error::config(format!(
            "{n} tokens do not split evenly across {p} workers"
        )));
    }
    let c = n / p;
    Ok((0..p)
        .map(|i| SequenceShard {
            worker: i + 1,
            q: q.slice_rows(i * c, (i + 1) * c),
            k: k.slice_rows(i * c, (i + 1) * c),
            v: v.slice_rows(i * c, (i + 1) * c),
            d_o: None,
            output: None,
            grads: None,
            grad_contributions: 0,
        })
        .collect())
}

/// Splits the full output gradient across the shards.
pub fn attach_output_grad(shards: &mut [SequenceShard], d_o: &Matrix) -> Result<()> {
    let c = shards.first().map_or(0, |s| s.q.rows());
    let d = shards.first().map_or(0, |s| s.v.cols());
    if d_o.shape() != (c * shards.len(), d) {
        return Err(Error::shape(format!(
            "output gradient {:?} for {} shards of {c} × {d}",
            d_o.shape(),
            shards.len()
        )));
    }
    for (i, s) in shards.iter_mut().enumerate() {
        s.d_o = Some(d_o.slice_rows(i * c, (i + 1) * c));
    }
    Ok(())
}

/// Concatenates per-worker outputs in worker order.
pub fn gather_output(parts: &[AttnOutput]) -> Result<AttnOutput> {
    let o: Vec<Matrix> = parts.iter().map(|p| p.o.clone()).collect();
    Ok(AttnOutput {
        o: Matrix::vstack(&o)?,
        lse: parts.iter().flat_map(|p| p.lse.iter().copied()).collect(),
    })
}

pub fn gather_grads(parts: &[AttnGrads]) -> Result<AttnGrads> {
    let stack = |f: fn(&AttnGrads) -> &Matrix| {
        Matrix::vstack(&parts.iter().map(|g| f(g).clone()).collect::<Vec<_>>())
    };
    Ok(AttnGrads {
        dq: stack(|g| &g.dq)?,
        dk: stack(|g| &g.dk)?,
        dv: stack(|g| &g.dv)?,
    })
}

fn check_shards(shards: &[SequenceShard], p: usize) -> Result<()> {
    if shards.len() != p {
        return Err(Error::config(format!(
            "{} shards for {p} workers",
            shards.len()
        )));
    }
    let first = &shards[0];
    let (c, d) = first.q.shape();
    for (i, s) in shards.iter().enumerate() {
        if s.worker != i + 1 {
            return Err(Error::config(format!(
                "shard {i} belongs to worker {}",
                s.worker
            )));
        }
        if s.q.shape() != (c, d)
            || s.k.shape() != (c, d)
            || s.v.rows() != c
            || s.v.cols() != first.v.cols()
        {
            return Err(Error::shape(format!(
                "shard {} differs in shape from shard 1",
                s.worker
            )));
        }
    }
    Ok(())
}

fn drive(workers: &mut [Worker], opts: &RunOptions) -> Result<()> {
    match opts.mode {
        ExecutorMode::Stepper => exec::run_stepper(workers),
        ExecutorMode::Concurrent => exec::run_concurrent(workers, opts.watchdog),
    }
}

fn build_trace(workers: &[Worker], pass: Pass, overlap: bool) -> ExecutionTrace {
    let mut counters = CommCounters::default();
    for w in workers {
        counters.merge(&w.counters);
    }
    ExecutionTrace {
        pass,
        overlap,
        workers: workers
            .iter()
            .map(|w| WorkerTrace {
                worker: w.id,
                events: w.events.clone(),
                peak_remote_chunks: w.peak_remote_chunks,
                finish: w.clock(),
            })
            .collect(),
        messages: workers
            .iter()
            .flat_map(|w| w.received.iter().cloned())
            .collect(),
        counters,
        kernel_invocations: workers.iter().map(|w| w.kernel_invocations).sum(),
        merges: workers.iter().map(|w| w.merges).sum(),
    }
}

/// Runs the forward pass and stores each worker's output and logsumexp in
/// its shard for the backward pass.
pub fn run_forward(
    shards: &mut [SequenceShard],
    schedule: &Schedule,
    opts: &RunOptions,
) -> Result<(Vec<AttnOutput>, ExecutionTrace)> {
    let violations = validate(schedule);
    if !violations.is_empty() {
        return Err(Error::Schedule(violations));
    }
    opts.cost.validate()?;
    check_shards(shards, schedule.workers)?;
    let mut workers: Vec<Worker> = shards
        .iter()
        .map(|s| {
            Worker::new(
                s.worker,
                worker::forward_program(schedule, s.worker, opts.overlap),
                (s.q.clone(), s.k.clone(), s.v.clone()),
                opts.attn,
                opts.cost,
            )
        })
        .collect();
    drive(&mut workers, opts)?;
    let outputs = workers
        .iter()
        .map(Worker::forward_output)
        .collect::<Result<Vec<_>>>()?;
    for (s, out) in shards.iter_mut().zip(&outputs) {
        s.output = Some(out.clone());
        s.grads = None;
        s.grad_contributions = 0;
    }
    Ok((outputs, build_trace(&workers, Pass::Forward, opts.overlap)))
}

/// Runs the distributed backward pass for loss `⟨dO, O⟩`. Each shard must
/// carry `d_o` and the output stored by [`run_forward`].
pub fn run_backward(
    shards: &mut [SequenceShard],
    plan: BackwardSchedule,
    opts: &RunOptions,
) -> Result<(Vec<AttnGrads>, ExecutionTrace)> {
    let BackwardSchedule::Vanilla = plan;
    opts.cost.validate()?;
    if shards.is_empty() {
        return Err(Error::config("need at least one shard"));
    }
    check_shards(shards, shards.len())?;
    let p = shards.len();
    let mut workers = Vec::with_capacity(p);
    for s in shards.iter() {
        let out = s
            .output
            .as_ref()
            .ok_or_else(|| Error::State(format!("shard {} has no forward output", s.worker)))?;
        let d_o = s
            .d_o
            .as_ref()
            .ok_or_else(|| Error::State(format!("shard {} has no output gradient", s.worker)))?;
        workers.push(
            Worker::new(
                s.worker,
                worker::backward_program(p, s.worker, opts.overlap),
                (s.q.clone(), s.k.clone(), s.v.clone()),
                opts.attn,
                opts.cost,
            )
            .with_backward(out.o.clone(), out.lse.clone(), d_o.clone()),
        );
    }
    drive(&mut workers, opts)?;
    let mut grads = Vec::with_capacity(p);
    for (s, w) in shards.iter_mut().zip(workers.iter_mut()) {
        let (g, count) = w.backward_output()?;
        s.grads = Some(g.clone());
        s.grad_contributions = count;
        grads.push(g);
    }
    Ok((grads, build_trace(&workers, Pass::Backward, opts.overlap)))
}
