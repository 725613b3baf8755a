use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::thread;
use std::time::{Duration, Instant};

use super::trace::MessageKind;
use super::worker::{Message, Port, Worker};
use crate::error::{Error, Result};
use crate::schedule::WorkerId;

const ABORTED: &str = "aborted after another worker failed";
const POLL_SLICE: Duration = Duration::from_millis(10);

fn matches(m: &Message, from: WorkerId, step: usize, kind: MessageKind) -> bool {
    m.from == from && m.step == step && m.payload.kind() == kind
}

fn leftover_error(count: usize) -> Result<()> {
    if count == 0 {
        Ok(())
    } else {
        Err(Error::Transport(format!(
            "{count} message(s) were never consumed"
        )))
    }
}

struct MailboxPort<'a> {
    me: WorkerId,
    inboxes: &'a mut [VecDeque<Message>],
}

impl Port for MailboxPort<'_> {
    fn send(&mut self, msg: Message) -> Result<()> {
        let inbox = self
            .inboxes
            .get_mut(msg.to.wrapping_sub(1))
            .ok_or_else(|| Error::Transport(format!("no worker {}", msg.to)))?;
        inbox.push_back(msg);
        Ok(())
    }

    fn take(&mut self, from: WorkerId, step: usize, kind: MessageKind) -> Result<Option<Message>> {
        let inbox = &mut self.inboxes[self.me - 1];
        Ok(inbox
            .iter()
            .position(|m| matches(m, from, step, kind))
            .and_then(|i| inbox.remove(i)))
    }
}

/// Single-threaded round robin: each worker runs until it blocks.
pub(crate) fn run_stepper(workers: &mut [Worker]) -> Result<()> {
    let mut inboxes: Vec<VecDeque<Message>> = vec![VecDeque::new(); workers.len()];
    loop {
        let mut progressed = false;
        let mut all_done = true;
        for w in workers.iter_mut() {
            let mut port = MailboxPort {
                me: w.id,
                inboxes: &mut inboxes,
            };
            let poll = w.poll(&mut port)?;
            progressed |= poll.ran > 0;
            all_done &= poll.done;
        }
        if all_done {
            break;
        }
        if !progressed {
            return Err(Error::Transport(
                "stepper stalled: every worker is waiting".into(),
            ));
        }
    }
    leftover_error(inboxes.iter().map(VecDeque::len).sum())
}

struct ChannelPort<'a> {
    me: WorkerId,
    peers: Vec<Sender<Message>>,
    rx: Receiver<Message>,
    stash: Vec<Message>,
    deadline: Instant,
    abort: &'a AtomicBool,
}

impl ChannelPort<'_> {
    fn wait(&mut self) -> Result<()> {
        loop {
            if self.abort.load(Ordering::SeqCst) {
                return Err(Error::Transport(ABORTED.into()));
            }
            let now = Instant::now();
            if now >= self.deadline {
                self.abort.store(true, Ordering::SeqCst);
                return Err(Error::Transport(format!(
                    "worker {} exceeded the watchdog waiting for a message",
                    self.me
                )));
            }
            match self.rx.recv_timeout(POLL_SLICE.min(self.deadline - now)) {
                Ok(m) => {
                    self.stash.push(m);
                    return Ok(());
                }
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(Error::Transport(format!(
                        "worker {} lost its channel",
                        self.me
                    )))
                }
            }
        }
    }
}

impl Port for ChannelPort<'_> {
    fn send(&mut self, msg: Message) -> Result<()> {
        let to = msg.to;
        self.peers
            .get(to.wrapping_sub(1))
            .ok_or_else(|| Error::Transport(format!("no worker {to}")))?
            .send(msg)
            .map_err(|_| Error::Transport(format!("worker {to} hung up")))
    }

    fn take(&mut self, from: WorkerId, step: usize, kind: MessageKind) -> Result<Option<Message>> {
        self.stash.extend(self.rx.try_iter());
        Ok(self
            .stash
            .iter()
            .position(|m| matches(m, from, step, kind))
            .map(|i| self.stash.remove(i)))
    }
}

/// One thread per worker over unbounded point-to-point channels. Messages
/// that arrive ahead of the op that consumes them wait in a stash.
pub(crate) fn run_concurrent(workers: &mut [Worker], watchdog: Duration) -> Result<()> {
    let (txs, rxs): (Vec<_>, Vec<_>) = workers.iter().map(|_| mpsc::channel::<Message>()).unzip();
    let abort = &AtomicBool::new(false);
    let deadline = Instant::now() + watchdog;

    let outcomes: Vec<Result<(Receiver<Message>, Vec<Message>)>> = thread::scope(|scope| {
        let handles: Vec<_> = workers
            .iter_mut()
            .zip(rxs)
            .map(|(w, rx)| {
                let mut port = ChannelPort {
                    me: w.id,
                    peers: txs.clone(),
                    rx,
                    stash: Vec::new(),
                    deadline,
                    abort,
                };
                scope.spawn(move || {
                    let run = (|| loop {
                        if w.poll(&mut port)?.done {
                            return Ok(());
                        }
                        port.wait()?;
                    })();
                    if run.is_err() {
                        abort.store(true, Ordering::SeqCst);
                    }
                    run.map(|()| (port.rx, port.stash))
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(Error::Transport("worker thread panicked".into())))
            })
            .collect()
    });

    let mut leftover = 0;
    let mut first_err = None;
    for outcome in outcomes {
        match outcome {
            Ok((rx, stash)) => leftover += stash.len() + rx.try_iter().count(),
            Err(Error::Transport(msg)) if msg == ABORTED => {
                first_err.get_or_insert(Error::Transport(msg));
            }
            Err(e) => {
                // prefer the root cause over the abort it triggered elsewhere
                let placeholder = matches!(&first_err, Some(Error::Transport(m)) if m == ABORTED);
                if first_err.is_none() || placeholder {
                    first_err = Some(e);
                }
            }
        }
    }
    if let Some(e) = first_err {
        return Err(e);
    }
    leftover_error(leftover)
}
