use anyhow::Result;
use distflash_core::runtime::{gather_output, CostModel, ExecutorMode, RunOptions};
use distflash_core::schedule::{
    balanced_idle_quoted_form, build_schedule, ratio_to_f64, Schedule, ScheduleKind, Task,
};
use distflash_core::{run_forward, shard_sequence, AttnConfig, ExecutionTrace, Rng};
use serde::Serialize;

use super::check_common;
use crate::args::{Common, Executor, Format, ScheduleArgs, Strategy};
use crate::output::Sink;
use crate::{usage, Outcome};

#[derive(Serialize)]
struct Summary {
    strategy: ScheduleKind,
    #[serde(rename = "P")]
    p: usize,
    steps: usize,
    attention_tasks: usize,
    idle_slots: usize,
    idle_fraction: f64,
    idle_fraction_exact: String,
    expected_speedup: f64,
    expected_speedup_exact: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    note: Option<String>,
}

#[derive(Serialize)]
struct Execution {
    max_abs_err_vs_dense: f64,
    makespan: f64,
    trace: ExecutionTrace,
}

#[derive(Serialize)]
struct Report<'a> {
    seed: u64,
    summary: Summary,
    schedule: &'a Schedule,
    #[serde(skip_serializing_if = "Option::is_none")]
    execution: Option<Execution>,
}

#[derive(Serialize)]
struct SlotRow {
    step: usize,
    worker: usize,
    task: &'static str,
    query_owner: Option<usize>,
    kv_owner: Option<usize>,
    merges_from: String,
}

fn slot_rows(s: &Schedule) -> Vec<SlotRow> {
    let mut rows = Vec::new();
    for (t, slots) in s.steps.iter().enumerate() {
        for slot in slots {
            let (task, pair) = match slot.task {
                Task::LocalAttn { .. } => ("LocalAttn", slot.task.pair()),
                Task::RemoteAttn { .. } => ("RemoteAttn", slot.task.pair()),
                Task::RescaleMerge { .. } => ("RescaleMerge", None),
                Task::Idle { .. } => ("Idle", None),
            };
            let merges_from = slot
                .merges
                .iter()
                .filter_map(|m| match m {
                    Task::RescaleMerge { helper, .. } => Some(helper.to_string()),
                    _ => None,
                })
                .collect::<Vec<_>>()
                .join(" ");
            rows.push(SlotRow {
                step: t,
                worker: slot.worker,
                task,
                query_owner: pair.map(|p| p.0),
                kv_owner: pair.map(|p| p.1),
                merges_from,
            });
        }
    }
    rows
}

fn summarize(s: &Schedule) -> Summary {
    let note = (s.kind == ScheduleKind::Balanced && s.workers.is_multiple_of(2)).then(|| {
        let quoted = balanced_idle_quoted_form(s.workers as u64);
        format!(
            "simulated even-P idle fraction 1/(P+2) = {} differs from the closed form 1/(2P) = {}",
            s.idle_fraction_exact(),
            quoted
        )
    });
    Summary {
        strategy: s.kind,
        p: s.workers,
        steps: s.step_count(),
        attention_tasks: s.attention_task_count(),
        idle_slots: s.idle_slot_count(),
        idle_fraction: s.idle_fraction(),
        idle_fraction_exact: s.idle_fraction_exact().to_string(),
        expected_speedup: s.expected_speedup(),
        expected_speedup_exact: s.expected_speedup_exact().to_string(),
        note,
    }
}

fn execute(c: &Common, a: &ScheduleArgs, s: &Schedule) -> Result<Execution> {
    check_common(c)?;
    let mut rng = Rng::new(c.seed);
    let (q, k, v) = (
        rng.matrix(c.n, c.d),
        rng.matrix(c.n, c.d),
        rng.matrix(c.n, c.d),
    );
    let attn = AttnConfig::for_head_dim(c.d).with_blocks(c.br, c.bc)?;
    let cost = CostModel {
        compute: a.compute_cost,
        fetch: a.fetch_cost,
        partial_transfer: a.fetch_cost,
        merge: 0.0,
    };
    let mode = match a.executor {
        Executor::Stepper => ExecutorMode::Stepper,
        Executor::Concurrent => ExecutorMode::Concurrent,
    };
    let opts = RunOptions::for_head_dim(c.d)
        .attn(attn)
        .cost(cost)
        .mode(mode)
        .overlap(a.overlap);
    let mut shards = shard_sequence(&q, &k, &v, c.p)?;
    let (outs, trace) = run_forward(&mut shards, s, &opts)?;
    let dense = distflash_core::dense_oracle(&q, &k, &v, true, attn.scale)?;
    Ok(Execution {
        max_abs_err_vs_dense: gather_output(&outs)?.o.max_abs_diff(&dense.o)?,
        makespan: trace.makespan(),
        trace,
    })
}

pub fn run(c: &Common, a: &ScheduleArgs) -> Result<Outcome> {
    if c.p == 0 {
        return Err(usage!("--P must be positive"));
    }
    let kind = match a.strategy {
        Strategy::Ring => ScheduleKind::Ring,
        Strategy::Balanced => ScheduleKind::Balanced,
    };
    let s = build_schedule(kind, c.p)?;
    let summary = summarize(&s);
    eprintln!(
        "idle={} speedup={}",
        summary.idle_fraction, summary.expected_speedup
    );
    if let Some(note) = &summary.note {
        eprintln!(
            "note: {note} ({})",
            ratio_to_f64(balanced_idle_quoted_form(c.p as u64))
        );
    }
    let execution = a.execute.then(|| execute(c, a, &s)).transpose()?;
    let sink = Sink::new(c);
    match (sink.format, &execution) {
        (Format::Json, _) => sink.json(&Report {
            seed: c.seed,
            summary,
            schedule: &s,
            execution,
        })?,
        (Format::Csv, Some(e)) => sink.csv(e.trace.event_rows())?,
        (Format::Csv, None) => sink.csv(slot_rows(&s))?,
    }
    Ok(Outcome::Passed)
}
