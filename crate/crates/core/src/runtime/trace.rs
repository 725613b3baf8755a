use serde::{Deserialize, Serialize};

use crate::schedule::WorkerId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MessageKind {
    #[serde(rename = "KV")]
    Kv,
    #[serde(rename = "Q")]
    Q,
    PartialResult,
    GradKV,
}

/// Scalars and messages moved between workers, by payload kind.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommCounters {
    pub kv_scalars: u64,
    pub q_scalars: u64,
    pub partial_scalars: u64,
    pub grad_scalars: u64,
    pub kv_messages: u64,
    pub q_messages: u64,
    pub partial_messages: u64,
    pub grad_messages: u64,
}

impl CommCounters {
    pub(crate) fn record(&mut self, kind: MessageKind, scalars: u64) {
        let (s, m) = match kind {
            MessageKind::Kv => (&mut self.kv_scalars, &mut self.kv_messages),
            MessageKind::Q => (&mut self.q_scalars, &mut self.q_messages),
            MessageKind::PartialResult => (&mut self.partial_scalars, &mut self.partial_messages),
            MessageKind::GradKV => (&mut self.grad_scalars, &mut self.grad_messages),
        };
        *s += scalars;
        *m += 1;
    }

    pub(crate) fn merge(&mut self, other: &CommCounters) {
        self.kv_scalars += other.kv_scalars;
        self.q_scalars += other.q_scalars;
        self.partial_scalars += other.partial_scalars;
        self.grad_scalars += other.grad_scalars;
        self.kv_messages += other.kv_messages;
        self.q_messages += other.q_messages;
        self.partial_messages += other.partial_messages;
        self.grad_messages += other.grad_messages;
    }

    pub fn total_scalars(&self) -> u64 {
        self.kv_scalars + self.q_scalars + self.partial_scalars + self.grad_scalars
    }

    pub fn total_messages(&self) -> u64 {
        self.kv_messages + self.q_messages + self.partial_messages + self.grad_messages
    }
}

/// A compute interval on one worker, in virtual time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub t0: f64,
    pub t1: f64,
    pub task: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MessageRecord {
    pub t_issue: f64,
    pub t_arrive: f64,
    pub kind: MessageKind,
    pub from: WorkerId,
    pub to: WorkerId,
    pub step: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkerTrace {
    pub worker: WorkerId,
    pub events: Vec<TraceEvent>,
    /// Most remote key/value or query chunks held at once.
    pub peak_remote_chunks: usize,
    pub finish: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pass {
    Forward,
    Backward,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExecutionTrace {
    pub pass: Pass,
    pub overlap: bool,
    pub workers: Vec<WorkerTrace>,
    /// Messages in receiver order, grouped by receiving worker.
    pub messages: Vec<MessageRecord>,
    pub counters: CommCounters,
    pub kernel_invocations: u64,
    pub merges: u64,
}

/// One row of the flat event export.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EventRow<'a> {
    pub worker: WorkerId,
    pub t0: f64,
    pub t1: f64,
    pub task: &'a str,
}

impl ExecutionTrace {
    pub fn makespan(&self) -> f64 {
        self.workers.iter().map(|w| w.finish).fold(0.0, f64::max)
    }

    pub fn peak_remote_chunks(&self) -> usize {
        self.workers
            .iter()
            .map(|w| w.peak_remote_chunks)
            .max()
            .unwrap_or(0)
    }

    pub fn event_rows(&self) -> impl Iterator<Item = EventRow<'_>> {
        self.workers.iter().flat_map(|w| {
            w.events.iter().map(move |e| EventRow {
                worker: w.worker,
                t0: e.t0,
                t1: e.t1,
                task: &e.task,
            })
        })
    }
}

pub fn comm_counters(trace: &ExecutionTrace) -> CommCounters {
    trace.counters
}
