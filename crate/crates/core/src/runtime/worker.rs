//! Per-worker op programs and the state machine that runs them.
//!
//! A worker runs its ops strictly in order. An op that needs a message that
//! has not arrived leaves the program counter in place, and the driver
//! either polls another worker (stepper) or blocks on the channel
//! (concurrent). Numerics therefore depend only on the op list.

use super::trace::{CommCounters, MessageKind, MessageRecord, TraceEvent};
use super::CostModel;
use crate::error::{Error, Result};
use crate::flashcore::{
    block_attn_backward, block_attn_update, finalize, rescale, AttnAccumulator, AttnConfig,
    AttnGrads, AttnOutput, MaskMode,
};
use crate::numerics::Matrix;
use crate::schedule::{PayloadKind, Schedule, Task, WorkerId};

#[derive(Clone, Debug)]
pub enum Payload {
    KvChunk { k: Matrix, v: Matrix },
    QChunk { q: Matrix },
    PartialResult(AttnAccumulator),
    GradKv { dk: Matrix, dv: Matrix },
}

impl Payload {
    pub fn kind(&self) -> MessageKind {
        match self {
            Payload::KvChunk { .. } => MessageKind::Kv,
            Payload::QChunk { .. } => MessageKind::Q,
            Payload::PartialResult(_) => MessageKind::PartialResult,
            Payload::GradKv { .. } => MessageKind::GradKV,
        }
    }

    pub fn scalar_count(&self) -> u64 {
        (match self {
            Payload::KvChunk { k, v } => k.len() + v.len(),
            Payload::QChunk { q } => q.len(),
            Payload::PartialResult(acc) => acc.scalar_count(),
            Payload::GradKv { dk, dv } => dk.len() + dv.len(),
        }) as u64
    }
}

#[derive(Clone, Debug)]
pub struct Message {
    pub from: WorkerId,
    pub to: WorkerId,
    /// Step of the op that consumes the message.
    pub step: usize,
    pub payload: Payload,
    /// Sender's virtual clock at send time.
    pub sent_at: f64,
}

pub(crate) trait Port {
    fn send(&mut self, msg: Message) -> Result<()>;
    /// Removes the matching message if it has arrived.
    fn take(&mut self, from: WorkerId, step: usize, kind: MessageKind) -> Result<Option<Message>>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Op {
    /// Ship this worker's own key/value or query chunk.
    Send {
        to: WorkerId,
        step: usize,
        kind: MessageKind,
    },
    /// Move a remote chunk into the worker's buffers.
    Take {
        from: WorkerId,
        step: usize,
        kind: MessageKind,
    },
    Attn {
        step: usize,
        task: Task,
    },
    SendPartial {
        to: WorkerId,
        step: usize,
    },
    Merge {
        helper: WorkerId,
        step: usize,
    },
    BwdAttn {
        step: usize,
        kv_owner: WorkerId,
    },
    SendGrad {
        to: WorkerId,
        step: usize,
    },
    RecvGrad {
        from: WorkerId,
        step: usize,
    },
}

struct Held {
    step: usize,
    arrive: f64,
    payload: Payload,
}

pub(crate) struct BackwardState {
    pub o: Matrix,
    pub lse: Vec<f64>,
    pub d_o: Matrix,
    pub dq: Option<Matrix>,
    pub dk: Option<Matrix>,
    pub dv: Option<Matrix>,
    pub contributions: usize,
    outgoing: Option<(Matrix, Matrix)>,
}

pub(crate) struct Worker {
    pub id: WorkerId,
    program: Vec<Op>,
    pc: usize,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    cfg: AttnConfig,
    cost: CostModel,
    held: Vec<Held>,
    acc: AttnAccumulator,
    outgoing: Option<AttnAccumulator>,
    pub bwd: Option<BackwardState>,
    clock: f64,
    /// When the inbound link finishes its current fetch.
    link_free: f64,
    pub events: Vec<TraceEvent>,
    pub received: Vec<MessageRecord>,
    pub counters: CommCounters,
    pub kernel_invocations: u64,
    pub merges: u64,
    pub peak_remote_chunks: usize,
}

pub(crate) struct Poll {
    pub ran: usize,
    pub done: bool,
}

impl Worker {
    pub fn new(
        id: WorkerId,
        program: Vec<Op>,
        (q, k, v): (Matrix, Matrix, Matrix),
        cfg: AttnConfig,
        cost: CostModel,
    ) -> Self {
        let acc = AttnAccumulator::fresh(q.rows(), v.cols());
        Worker {
            id,
            program,
            pc: 0,
            q,
            k,
            v,
            cfg,
            cost,
            held: Vec::new(),
            acc,
            outgoing: None,
            bwd: None,
            clock: 0.0,
            link_free: 0.0,
            events: Vec::new(),
            received: Vec::new(),
            counters: CommCounters::default(),
            kernel_invocations: 0,
            merges: 0,
            peak_remote_chunks: 0,
        }
    }

    pub fn with_backward(mut self, o: Matrix, lse: Vec<f64>, d_o: Matrix) -> Self {
        self.bwd = Some(BackwardState {
            o,
            lse,
            d_o,
            dq: None,
            dk: None,
            dv: None,
            contributions: 0,
            outgoing: None,
        });
        self
    }

    pub fn clock(&self) -> f64 {
        self.clock
    }

    /// Runs ops until one blocks or the program ends.
    pub fn poll(&mut self, port: &mut dyn Port) -> Result<Poll> {
        let mut ran = 0;
        while let Some(&op) = self.program.get(self.pc) {
            if !self.exec(op, port)? {
                return Ok(Poll { ran, done: false });
            }
            self.pc += 1;
            ran += 1;
        }
        Ok(Poll { ran, done: true })
    }

    pub fn forward_output(&self) -> Result<AttnOutput> {
        finalize(&self.acc)
    }

    pub fn backward_output(&mut self) -> Result<(AttnGrads, usize)> {
        let id = self.id;
        let b = self
            .bwd
            .as_mut()
            .ok_or_else(|| Error::State(format!("worker {id} has no backward state")))?;
        let missing = || Error::State(format!("worker {id} finished without gradients"));
        let grads = AttnGrads {
            dq: b.dq.take().ok_or_else(missing)?,
            dk: b.dk.take().ok_or_else(missing)?,
            dv: b.dv.take().ok_or_else(missing)?,
        };
        Ok((grads, b.contributions))
    }

    fn send(
        &mut self,
        port: &mut dyn Port,
        to: WorkerId,
        step: usize,
        payload: Payload,
    ) -> Result<()> {
        self.counters.record(payload.kind(), payload.scalar_count());
        port.send(Message {
            from: self.id,
            to,
            step,
            payload,
            sent_at: self.clock,
        })
    }

    fn take_held(&mut self, step: usize) -> Result<Held> {
        let pos = self
            .held
            .iter()
            .position(|h| h.step == step)
            .ok_or_else(|| {
                Error::State(format!("worker {} has no operand for step {step}", self.id))
            })?;
        Ok(self.held.remove(pos))
    }

    fn record(&mut self, t0: f64, t1: f64, task: String) {
        self.events.push(TraceEvent { t0, t1, task });
        self.clock = t1;
    }

    fn receive(&mut self, msg: &Message, t_issue: f64, t_arrive: f64) {
        self.received.push(MessageRecord {
            t_issue,
            t_arrive,
            kind: msg.payload.kind(),
            from: msg.from,
            to: msg.to,
            step: msg.step,
        });
    }

    fn bwd_state(&mut self) -> Result<&mut BackwardState> {
        let id = self.id;
        self.bwd
            .as_mut()
            .ok_or_else(|| Error::State(format!("worker {id} has no stored forward output")))
    }

    /// Returns false when the op is waiting on a message.
    fn exec(&mut self, op: Op, port: &mut dyn Port) -> Result<bool> {
        match op {
            Op::Send { to, step, kind } => {
                let payload = match kind {
                    MessageKind::Kv => Payload::KvChunk {
                        k: self.k.clone(),
                        v: self.v.clone(),
                    },
                    MessageKind::Q => Payload::QChunk { q: self.q.clone() },
                    other => return Err(Error::State(format!("cannot ship own {other:?}"))),
                };
                self.send(port, to, step, payload)?;
            }
            Op::Take { from, step, kind } => {
                let Some(msg) = port.take(from, step, kind)? else {
                    return Ok(false);
                };
                // one fetch in flight at a time
                let issue = self.clock.max(self.link_free);
                let arrive = issue + self.cost.fetch;
                self.link_free = arrive;
                self.receive(&msg, issue, arrive);
                self.held.push(Held {
                    step,
                    arrive,
                    payload: msg.payload,
                });
                self.peak_remote_chunks = self.peak_remote_chunks.max(self.held.len());
            }
            Op::Attn { step, task } => self.attend(step, task)?,
            Op::SendPartial { to, step } => {
                let partial = self.outgoing.take().ok_or_else(|| {
                    Error::State(format!("worker {} has no partial to send", self.id))
                })?;
                self.send(port, to, step, Payload::PartialResult(partial))?;
            }
            Op::Merge { helper, step } => {
                let Some(msg) = port.take(helper, step, MessageKind::PartialResult)? else {
                    return Ok(false);
                };
                let arrive = msg.sent_at + self.cost.partial_transfer;
                self.receive(&msg, msg.sent_at, arrive);
                let Payload::PartialResult(partial) = msg.payload else {
                    unreachable!("matched on kind")
                };
                self.acc = rescale(&self.acc, &partial)?;
                self.merges += 1;
                let t0 = self.clock.max(arrive);
                self.record(t0, t0 + self.cost.merge, format!("rescale(from {helper})"));
            }
            Op::BwdAttn { step, kv_owner } => self.attend_backward(step, kv_owner)?,
            Op::SendGrad { to, step } => {
                let (dk, dv) = self
                    .bwd_state()?
                    .outgoing
                    .take()
                    .ok_or_else(|| Error::State("no gradient to send".into()))?;
                self.send(port, to, step, Payload::GradKv { dk, dv })?;
            }
            Op::RecvGrad { from, step } => {
                let Some(msg) = port.take(from, step, MessageKind::GradKV)? else {
                    return Ok(false);
                };
                let arrive = msg.sent_at + self.cost.fetch;
                self.receive(&msg, msg.sent_at, arrive);
                let Payload::GradKv { dk, dv } = msg.payload else {
                    unreachable!("matched on kind")
                };
                let b = self.bwd_state()?;
                accumulate(&mut b.dk, dk)?;
                accumulate(&mut b.dv, dv)?;
                b.contributions += 1;
                let t0 = self.clock.max(arrive);
                self.record(t0, t0 + self.cost.merge, format!("accumulate(from {from})"));
            }
        }
        Ok(true)
    }

    fn attend(&mut self, step: usize, task: Task) -> Result<()> {
        let mut t0 = self.clock;
        match task {
            Task::LocalAttn { .. } => {
                let acc = std::mem::replace(&mut self.acc, AttnAccumulator::fresh(0, 0));
                self.acc = block_attn_update(
                    &self.q,
                    &self.k,
                    &self.v,
                    acc,
                    MaskMode::Diagonal,
                    &self.cfg,
                )?;
            }
            Task::RemoteAttn {
                executor,
                query_owner,
                ..
            } if executor == query_owner => {
                let held = self.take_held(step)?;
                t0 = t0.max(held.arrive);
                let Payload::KvChunk { k, v } = held.payload else {
                    return Err(Error::State(format!(
                        "worker {} expected a key/value chunk",
                        self.id
                    )));
                };
                let acc = std::mem::replace(&mut self.acc, AttnAccumulator::fresh(0, 0));
                self.acc = block_attn_update(&self.q, &k, &v, acc, MaskMode::Full, &self.cfg)?;
            }
            Task::RemoteAttn { .. } => {
                let held = self.take_held(step)?;
                t0 = t0.max(held.arrive);
                let Payload::QChunk { q } = held.payload else {
                    return Err(Error::State(format!(
                        "worker {} expected a query chunk",
                        self.id
                    )));
                };
                let fresh = AttnAccumulator::fresh(q.rows(), self.v.cols());
                self.outgoing = Some(block_attn_update(
                    &q,
                    &self.k,
                    &self.v,
                    fresh,
                    MaskMode::Full,
                    &self.cfg,
                )?);
            }
            Task::RescaleMerge { .. } | Task::Idle { .. } => {
                return Err(Error::State(format!("{task:?} is not an attention task")))
            }
        }
        self.kernel_invocations += 1;
        self.record(t0, t0 + self.cost.compute, task.to_string());
        Ok(())
    }

    fn attend_backward(&mut self, step: usize, kv_owner: WorkerId) -> Result<()> {
        let mut t0 = self.clock;
        let local = kv_owner == self.id;
        let remote = if local {
            None
        } else {
            let held = self.take_held(step)?;
            t0 = t0.max(held.arrive);
            let Payload::KvChunk { k, v } = held.payload else {
                return Err(Error::State(format!(
                    "worker {} expected a key/value chunk",
                    self.id
                )));
            };
            Some((k, v))
        };
        let (k, v, mask) = match &remote {
            Some((k, v)) => (k, v, MaskMode::Full),
            None => (&self.k, &self.v, MaskMode::Diagonal),
        };
        let b = self.bwd.as_ref().ok_or_else(|| {
            Error::State(format!("worker {} has no stored forward output", self.id))
        })?;
        let grads = block_attn_backward(&self.q, k, v, &b.o, &b.lse, &b.d_o, mask, &self.cfg)?;
        let b = self.bwd_state()?;
        accumulate(&mut b.dq, grads.dq)?;
        if local {
            accumulate(&mut b.dk, grads.dk)?;
            accumulate(&mut b.dv, grads.dv)?;
            b.contributions += 1;
        } else {
            b.outgoing = Some((grads.dk, grads.dv));
        }
        self.kernel_invocations += 1;
        let label = format!("bwd(q{},kv{kv_owner})", self.id);
        self.record(t0, t0 + self.cost.compute, label);
        Ok(())
    }
}

/// First contribution is moved in, later ones are added, so a single
/// contribution passes through bit for bit.
fn accumulate(slot: &mut Option<Matrix>, x: Matrix) -> Result<()> {
    match slot {
        Some(acc) => acc.add_assign(&x),
        None => {
            *slot = Some(x);
            Ok(())
        }
    }
}

fn operand(task: &Task) -> Option<(WorkerId, MessageKind)> {
    match *task {
        Task::RemoteAttn {
            executor,
            query_owner,
            kv_owner,
        } if executor == query_owner => Some((kv_owner, MessageKind::Kv)),
        Task::RemoteAttn { query_owner, .. } => Some((query_owner, MessageKind::Q)),
        _ => None,
    }
}

/// Chunk sends, then fetches (with one step of prefetch when overlapping),
/// then the step's compute and its outgoing result.
fn push_fetches(
    ops: &mut Vec<Op>,
    t: usize,
    overlap: bool,
    needs: impl Fn(usize) -> Option<(WorkerId, MessageKind)>,
) {
    let take = |s: usize| {
        needs(s).map(|(from, kind)| Op::Take {
            from,
            step: s,
            kind,
        })
    };
    if overlap {
        if t == 0 {
            ops.extend(take(0));
        }
        ops.extend(take(t + 1));
    } else {
        ops.extend(take(t));
    }
}

fn push_sends(
    ops: &mut Vec<Op>,
    t: usize,
    overlap: bool,
    sends: &[(usize, WorkerId, MessageKind)],
) {
    let lead = usize::from(overlap);
    for &(step, to, kind) in sends {
        if step == t + lead || (t == 0 && step < lead) {
            ops.push(Op::Send { to, step, kind });
        }
    }
}

pub(crate) fn forward_program(s: &Schedule, w: WorkerId, overlap: bool) -> Vec<Op> {
    let sends: Vec<_> = s
        .messages
        .iter()
        .filter(|m| m.from == w && m.payload != PayloadKind::PartialResult)
        .map(|m| {
            let kind = match m.payload {
                PayloadKind::Kv => MessageKind::Kv,
                _ => MessageKind::Q,
            };
            (m.step, m.to, kind)
        })
        .collect();
    let needs = |t: usize| s.slot(t, w).and_then(|slot| operand(&slot.task));
    let mut ops = Vec::new();
    for t in 0..s.step_count() {
        push_sends(&mut ops, t, overlap, &sends);
        push_fetches(&mut ops, t, overlap, needs);
        let Some(slot) = s.slot(t, w) else { continue };
        if slot.task.is_attention() {
            ops.push(Op::Attn {
                step: t,
                task: slot.task,
            });
        }
        if let Task::RemoteAttn {
            executor,
            query_owner,
            ..
        } = slot.task
        {
            if executor != query_owner {
                ops.push(Op::SendPartial {
                    to: query_owner,
                    step: t,
                });
            }
        }
        for merge in &slot.merges {
            if let Task::RescaleMerge { helper, .. } = *merge {
                ops.push(Op::Merge { helper, step: t });
            }
        }
    }
    ops
}

/// Ring backward: at step `t` worker `w` pairs its queries with chunk
/// `w - t`, returns that chunk's key/value gradient to its owner, and
/// collects the gradient for its own chunk from worker `w + t`.
pub(crate) fn backward_program(p: usize, w: WorkerId, overlap: bool) -> Vec<Op> {
    let sends: Vec<_> = (1..p)
        .filter(|s| w + s <= p)
        .map(|s| (s, w + s, MessageKind::Kv))
        .collect();
    let needs = |t: usize| (t >= 1 && t < w).then(|| (w - t, MessageKind::Kv));
    let mut ops = Vec::new();
    for t in 0..p {
        push_sends(&mut ops, t, overlap, &sends);
        push_fetches(&mut ops, t, overlap, needs);
        if t < w {
            ops.push(Op::BwdAttn {
                step: t,
                kv_owner: w - t,
            });
            if t >= 1 {
                ops.push(Op::SendGrad { to: w - t, step: t });
            }
        }
        if t >= 1 && w + t <= p {
            ops.push(Op::RecvGrad {
                from: w + t,
                step: t,
            });
        }
    }
    ops
}
