//! Ring and load-balanced schedules as explicit per-timestep task tables.
//!
//! Workers are numbered `1..=P`. Chunk `p` holds tokens that come after
//! every token in chunk `p - 1`, so causal attention needs exactly the pairs
//! `(query_owner, kv_owner)` with `kv_owner <= query_owner`.
//!
//! A timestep gives every worker one [`Slot`]: a primary task (attention or
//! idle) followed by any [`Task::RescaleMerge`]s that fold helper results
//! into the worker's own accumulator at the end of that step.

use std::collections::BTreeMap;
use std::fmt;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flashcore::MaskMode;

pub type WorkerId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Task {
    /// Attention of a worker's queries against its own keys.
    LocalAttn {
        worker: WorkerId,
    },
    /// Attention of `query_owner`'s queries against `kv_owner`'s keys, run
    /// on `executor`. When `executor == kv_owner` the executor is a helper
    /// and its partial result must be merged back into `query_owner`.
    RemoteAttn {
        executor: WorkerId,
        query_owner: WorkerId,
        kv_owner: WorkerId,
    },
    RescaleMerge {
        worker: WorkerId,
        helper: WorkerId,
    },
    Idle {
        worker: WorkerId,
    },
}

impl Task {
    /// The worker that performs this task.
    pub fn actor(&self) -> WorkerId {
        match *self {
            Task::LocalAttn { worker }
            | Task::RescaleMerge { worker, .. }
            | Task::Idle { worker } => worker,
            Task::RemoteAttn { executor, .. } => executor,
        }
    }

    /// `(query_owner, kv_owner)` for attention tasks.
    pub fn pair(&self) -> Option<(WorkerId, WorkerId)> {
        match *self {
            Task::LocalAttn { worker } => Some((worker, worker)),
            Task::RemoteAttn {
                query_owner,
                kv_owner,
                ..
            } => Some((query_owner, kv_owner)),
            _ => None,
        }
    }

    pub fn is_attention(&self) -> bool {
        self.pair().is_some()
    }

    pub fn is_helper(&self) -> bool {
        matches!(*self, Task::RemoteAttn { executor, query_owner, .. } if executor != query_owner)
    }

    pub fn mask(&self) -> Option<MaskMode> {
        match self {
            Task::LocalAttn { .. } => Some(MaskMode::Diagonal),
            Task::RemoteAttn { .. } => Some(MaskMode::Full),
            _ => None,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Task::LocalAttn { worker } => write!(f, "attn(q{worker},kv{worker})"),
            Task::RemoteAttn {
                query_owner,
                kv_owner,
                ..
            } => write!(f, "attn(q{query_owner},kv{kv_owner})"),
            Task::RescaleMerge { helper, .. } => write!(f, "rescale(from {helper})"),
            Task::Idle { .. } => write!(f, "idle"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub worker: WorkerId,
    pub task: Task,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub merges: Vec<Task>,
}

impl Slot {
    pub fn new(task: Task) -> Self {
        Slot {
            worker: task.actor(),
            task,
            merges: Vec::new(),
        }
    }

    /// Primary task first, then merges, in execution order.
    pub fn tasks(&self) -> impl Iterator<Item = &Task> {
        std::iter::once(&self.task).chain(self.merges.iter())
    }

    pub fn is_idle(&self) -> bool {
        self.tasks().all(|t| matches!(t, Task::Idle { .. }))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PayloadKind {
    #[serde(rename = "KV")]
    Kv,
    #[serde(rename = "Q")]
    Q,
    PartialResult,
}

/// A transfer implied by the schedule, tagged with the step that consumes it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduledMessage {
    pub step: usize,
    pub from: WorkerId,
    pub to: WorkerId,
    pub payload: PayloadKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Ring,
    Balanced,
    Custom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    #[serde(rename = "P")]
    pub workers: usize,
    pub kind: ScheduleKind,
    pub steps: Vec<Vec<Slot>>,
    pub messages: Vec<ScheduledMessage>,
}

impl Schedule {
    /// Wraps a hand-built step table, deriving its messages.
    pub fn from_steps(workers: usize, kind: ScheduleKind, steps: Vec<Vec<Slot>>) -> Self {
        let messages = derive_messages(&steps);
        Schedule {
            workers,
            kind,
            steps,
            messages,
        }
    }

    pub fn step_count(&self) -> usize {
        self.steps.len()
    }

    pub fn slot(&self, step: usize, worker: WorkerId) -> Option<&Slot> {
        self.steps.get(step)?.iter().find(|s| s.worker == worker)
    }

    pub fn attention_task_count(&self) -> usize {
        self.all_tasks().filter(|(_, t)| t.is_attention()).count()
    }

    pub fn idle_slot_count(&self) -> usize {
        self.steps.iter().flatten().filter(|s| s.is_idle()).count()
    }

    pub fn merge_count(&self) -> usize {
        self.all_tasks()
            .filter(|(_, t)| matches!(t, Task::RescaleMerge { .. }))
            .count()
    }

    /// Every task with its step index, in step order then slot order.
    pub fn all_tasks(&self) -> impl Iterator<Item = (usize, &Task)> {
        self.steps.iter().enumerate().flat_map(|(t, slots)| {
            slots
                .iter()
                .flat_map(move |s| s.tasks().map(move |task| (t, task)))
        })
    }

    /// Idle slots over all `P × steps` slots, exactly.
    pub fn idle_fraction_exact(&self) -> Ratio<u64> {
        let slots = (self.workers * self.step_count()) as u64;
        if slots == 0 {
            return Ratio::from_integer(0);
        }
        Ratio::new(self.idle_slot_count() as u64, slots)
    }

    pub fn idle_fraction(&self) -> f64 {
        ratio_to_f64(self.idle_fraction_exact())
    }

    /// Speedup over one worker running every attention task serially,
    /// assuming unit cost per task and one step per unit.
    pub fn expected_speedup_exact(&self) -> Ratio<u64> {
        Ratio::new(
            self.attention_task_count() as u64,
            self.step_count().max(1) as u64,
        )
    }

    pub fn expected_speedup(&self) -> f64 {
        ratio_to_f64(self.expected_speedup_exact())
    }

    /// Validates and returns `self`, or a [`Error::Schedule`] listing violations.
    pub fn validated(self) -> Result<Self> {
        let violations = validate(&self);
        if violations.is_empty() {
            Ok(self)
        } else {
            Err(Error::Schedule(violations))
        }
    }
}

pub fn ratio_to_f64(r: Ratio<u64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

fn check_workers(p: usize) -> Result<()> {
    if p == 0 {
        return Err(Error::config("schedule needs at least one worker"));
    }
    Ok(())
}

/// Each worker starts with its own chunk and then walks back through earlier
/// chunks one per step; worker `p` works for `p` steps and idles afterwards.
pub fn build_ring_schedule(p: usize) -> Result<Schedule> {
    check_workers(p)?;
    let steps = (0..p)
        .map(|t| {
            (1..=p)
                .map(|w| {
                    Slot::new(if t == 0 {
                        Task::LocalAttn { worker: w }
                    } else if t < w {
                        Task::RemoteAttn {
                            executor: w,
                            query_owner: w,
                            kv_owner: w - t,
                        }
                    } else {
                        Task::Idle { worker: w }
                    })
                })
                .collect()
        })
        .collect();
    Ok(Schedule::from_steps(p, ScheduleKind::Ring, steps))
}

/// Load-balanced schedule.
///
/// At step `t` (1 ≤ t ≤ ⌊P/2⌋) every worker `w > t` handles the pair at
/// distance `t`, `(w, w - t)`. Workers `w ≤ t` have run out of their own
/// work and instead compute the pair at distance `P - t` for query owner
/// `w + P - t`, shipping the partial result back; the owner merges it at the
/// end of the same step. With even `P` the distances `t` and `P - t`
/// coincide at `t = P/2`, so the low half idles there.
pub fn build_balanced_schedule(p: usize) -> Result<Schedule> {
    check_workers(p)?;
    let half = p / 2;
    let even = p.is_multiple_of(2);
    let mut steps = vec![(1..=p)
        .map(|w| Slot::new(Task::LocalAttn { worker: w }))
        .collect()];
    for t in 1..=half {
        let shared_distance = even && t == half;
        let slots = (1..=p)
            .map(|w| {
                if w > t {
                    let mut slot = Slot::new(Task::RemoteAttn {
                        executor: w,
                        query_owner: w,
                        kv_owner: w - t,
                    });
                    if w + t > p && !shared_distance {
                        slot.merges.push(Task::RescaleMerge {
                            worker: w,
                            helper: w + t - p,
                        });
                    }
                    slot
                } else if shared_distance {
                    Slot::new(Task::Idle { worker: w })
                } else {
                    Slot::new(Task::RemoteAttn {
                        executor: w,
                        query_owner: w + p - t,
                        kv_owner: w,
                    })
                }
            })
            .collect();
        steps.push(slots);
    }
    Ok(Schedule::from_steps(p, ScheduleKind::Balanced, steps))
}

/// Builds the schedule of the given kind.
pub fn build_schedule(kind: ScheduleKind, p: usize) -> Result<Schedule> {
    match kind {
        ScheduleKind::Ring => build_ring_schedule(p),
        ScheduleKind::Balanced => build_balanced_schedule(p),
        ScheduleKind::Custom => Err(Error::config(
            "custom schedules are built with Schedule::from_steps",
        )),
    }
}

/// Ring idle fraction `(P² − P) / (2P²)` in closed form.
pub fn ring_idle_closed_form(p: u64) -> Ratio<u64> {
    Ratio::new(p * p - p, 2 * p * p)
}

/// The commonly quoted closed form for the balanced idle fraction: `0` for
/// odd `P` and `1/(2P)` for even `P`. Simulation of the balanced schedule
/// gives `1/(P+2)` for even `P`; see [`balanced_idle_simulated_form`].
pub fn balanced_idle_quoted_form(p: u64) -> Ratio<u64> {
    if p % 2 == 1 {
        Ratio::from_integer(0)
    } else {
        Ratio::new(1, 2 * p)
    }
}

/// Idle fraction of [`build_balanced_schedule`]: `P/2` idle slots over
/// `P(P/2 + 1)` for even `P`, zero for odd `P`.
pub fn balanced_idle_simulated_form(p: u64) -> Ratio<u64> {
    if p % 2 == 1 {
        Ratio::from_integer(0)
    } else {
        Ratio::new(1, p + 2)
    }
}

fn derive_messages(steps: &[Vec<Slot>]) -> Vec<ScheduledMessage> {
    let mut out = Vec::new();
    for (t, slots) in steps.iter().enumerate() {
        for slot in slots {
            for task in slot.tasks() {
                match *task {
                    Task::RemoteAttn {
                        executor,
                        query_owner,
                        kv_owner,
                    } => {
                        if executor == query_owner {
                            out.push(ScheduledMessage {
                                step: t,
                                from: kv_owner,
                                to: executor,
                                payload: PayloadKind::Kv,
                            });
                        } else if executor == kv_owner {
                            out.push(ScheduledMessage {
                                step: t,
                                from: query_owner,
                                to: executor,
                                payload: PayloadKind::Q,
                            });
                        }
                    }
                    Task::RescaleMerge { worker, helper } => out.push(ScheduledMessage {
                        step: t,
                        from: helper,
                        to: worker,
                        payload: PayloadKind::PartialResult,
                    }),
                    _ => {}
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "violation")]
pub enum Violation {
    /// A worker does not appear exactly once in a step.
    SlotCount {
        step: usize,
        worker: WorkerId,
        count: usize,
    },
    /// A slot names a worker outside `1..=P`, or holds a task whose actor
    /// is a different worker.
    WrongSlot {
        step: usize,
        worker: WorkerId,
        task: Task,
    },
    MissingPair {
        query_owner: WorkerId,
        kv_owner: WorkerId,
    },
    DuplicatePair {
        query_owner: WorkerId,
        kv_owner: WorkerId,
        count: usize,
    },
    /// Attention pair that violates causal order or uses the wrong task kind.
    NonCausalPair {
        step: usize,
        task: Task,
    },
    /// Remote attention run on a worker that owns neither operand.
    ForeignExecutor {
        step: usize,
        task: Task,
    },
    MultipleAttention {
        step: usize,
        worker: WorkerId,
    },
    UnmergedPartial {
        step: usize,
        helper: WorkerId,
        query_owner: WorkerId,
    },
    OrphanMerge {
        step: usize,
        worker: WorkerId,
        helper: WorkerId,
    },
    /// A task's operand is not delivered by or before its step.
    MissingOperand {
        step: usize,
        worker: WorkerId,
        payload: PayloadKind,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::SlotCount {
                step,
                worker,
                count,
            } => {
                write!(f, "step {step}: worker {worker} has {count} slots")
            }
            Violation::WrongSlot { step, worker, task } => {
                write!(f, "step {step}: slot of worker {worker} holds {task:?}")
            }
            Violation::MissingPair {
                query_owner,
                kv_owner,
            } => {
                write!(f, "pair ({query_owner},{kv_owner}) never computed")
            }
            Violation::DuplicatePair {
                query_owner,
                kv_owner,
                count,
            } => write!(f, "pair ({query_owner},{kv_owner}) computed {count} times"),
            Violation::NonCausalPair { step, task } => {
                write!(f, "step {step}: non-causal {task:?}")
            }
            Violation::ForeignExecutor { step, task } => {
                write!(f, "step {step}: executor owns neither operand of {task:?}")
            }
            Violation::MultipleAttention { step, worker } => {
                write!(
                    f,
                    "step {step}: worker {worker} runs more than one attention task"
                )
            }
            Violation::UnmergedPartial {
                step,
                helper,
                query_owner,
            } => write!(
                f,
                "step {step}: partial from helper {helper} never merged into {query_owner}"
            ),
            Violation::OrphanMerge {
                step,
                worker,
                helper,
            } => {
                write!(
                    f,
                    "step {step}: worker {worker} merges a partial {helper} never produced"
                )
            }
            Violation::MissingOperand {
                step,
                worker,
                payload,
            } => {
                write!(
                    f,
                    "step {step}: worker {worker} lacks a {payload:?} operand"
                )
            }
        }
    }
}

/// Checks slot structure, causal completeness, helper/merge pairing and
/// operand delivery. Returns every violation found; empty means valid.
pub fn validate(s: &Schedule) -> Vec<Violation> {
    let mut out = Vec::new();
    let p = s.workers;

    for (t, slots) in s.steps.iter().enumerate() {
        let mut seen: BTreeMap<WorkerId, usize> = (1..=p).map(|w| (w, 0)).collect();
        for slot in slots {
            match seen.get_mut(&slot.worker) {
                Some(c) => *c += 1,
                None => out.push(Violation::WrongSlot {
                    step: t,
                    worker: slot.worker,
                    task: slot.task,
                }),
            }
            for task in slot.tasks() {
                if task.actor() != slot.worker {
                    out.push(Violation::WrongSlot {
                        step: t,
                        worker: slot.worker,
                        task: *task,
                    });
                }
            }
            if slot.tasks().filter(|task| task.is_attention()).count() > 1 {
                out.push(Violation::MultipleAttention {
                    step: t,
                    worker: slot.worker,
                });
            }
        }
        for (worker, count) in seen {
            if count != 1 {
                out.push(Violation::SlotCount {
                    step: t,
                    worker,
                    count,
                });
            }
        }
    }

    let mut pairs: BTreeMap<(WorkerId, WorkerId), usize> = BTreeMap::new();
    for (t, task) in s.all_tasks() {
        let Some((qo, ko)) = task.pair() else {
            continue;
        };
        if let Task::RemoteAttn { executor, .. } = *task {
            if ko >= qo {
                out.push(Violation::NonCausalPair {
                    step: t,
                    task: *task,
                });
            }
            if executor != qo && executor != ko {
                out.push(Violation::ForeignExecutor {
                    step: t,
                    task: *task,
                });
            }
        }
        if !(1..=p).contains(&qo) || !(1..=p).contains(&ko) {
            out.push(Violation::NonCausalPair {
                step: t,
                task: *task,
            });
            continue;
        }
        *pairs.entry((qo, ko)).or_default() += 1;
    }
    for qo in 1..=p {
        for ko in 1..=qo {
            match pairs.get(&(qo, ko)).copied().unwrap_or(0) {
                0 => out.push(Violation::MissingPair {
                    query_owner: qo,
                    kv_owner: ko,
                }),
                1 => {}
                count => out.push(Violation::DuplicatePair {
                    query_owner: qo,
                    kv_owner: ko,
                    count,
                }),
            }
        }
    }

    // helper partials pair one-to-one with merges at the same or a later step
    let mut merges: Vec<(usize, WorkerId, WorkerId, bool)> = s
        .all_tasks()
        .filter_map(|(t, task)| match *task {
            Task::RescaleMerge { worker, helper } => Some((t, worker, helper, false)),
            _ => None,
        })
        .collect();
    for (t, task) in s.all_tasks() {
        if let Task::RemoteAttn {
            executor,
            query_owner,
            kv_owner,
        } = *task
        {
            if executor == query_owner || executor != kv_owner {
                continue;
            }
            let matched = merges
                .iter_mut()
                .find(|(mt, w, h, used)| !*used && *mt >= t && *w == query_owner && *h == executor);
            match matched {
                Some(m) => m.3 = true,
                None => out.push(Violation::UnmergedPartial {
                    step: t,
                    helper: executor,
                    query_owner,
                }),
            }
        }
    }
    for (t, worker, helper, used) in merges {
        if !used {
            out.push(Violation::OrphanMerge {
                step: t,
                worker,
                helper,
            });
        }
    }

    let delivered = |step: usize, from: WorkerId, to: WorkerId, payload: PayloadKind| {
        s.messages
            .iter()
            .any(|m| m.step <= step && m.from == from && m.to == to && m.payload == payload)
    };
    for (t, task) in s.all_tasks() {
        let need = match *task {
            Task::RemoteAttn {
                executor,
                query_owner,
                kv_owner,
            } if executor == query_owner => Some((kv_owner, executor, PayloadKind::Kv)),
            Task::RemoteAttn {
                executor,
                query_owner,
                kv_owner,
            } if executor == kv_owner => Some((query_owner, executor, PayloadKind::Q)),
            Task::RescaleMerge { worker, helper } => {
                Some((helper, worker, PayloadKind::PartialResult))
            }
            _ => None,
        };
        if let Some((from, to, payload)) = need {
            if !delivered(t, from, to, payload) {
                out.push(Violation::MissingOperand {
                    step: t,
                    worker: to,
                    payload,
                });
            }
        }
    }
    out
}
