use anyhow::Result;
use distflash_core::analyzer::{
    comm_row, comm_volume, overlap_row, parse_ratio, CommScenario, CommStrategy, OverlapScenario,
    TableRow,
};
use distflash_core::schedule::ratio_to_f64;
use num_rational::Ratio;
use serde::Serialize;

use crate::args::{Analyze, CommArgs, Common, Format, OverlapArgs};
use crate::output::Sink;
use crate::{usage, Outcome};

#[derive(Serialize)]
struct CommReport {
    seed: u64,
    rows: Vec<TableRow>,
    /// Megatron volume over ours.
    reduction: f64,
    reduction_exact: String,
}

#[derive(Serialize)]
struct OverlapReport {
    seed: u64,
    scenario: OverlapScenario,
    rows: Vec<TableRow>,
}

pub fn run(c: &Common, a: &Analyze) -> Result<Outcome> {
    match a {
        Analyze::Comm(args) => comm(c, args),
        Analyze::Overlap(args) => overlap(c, args),
    }
}

fn comm(c: &Common, a: &CommArgs) -> Result<Outcome> {
    if c.p == 0 || c.n == 0 || c.d == 0 {
        return Err(usage!("--P, --N and --d must be positive"));
    }
    let kv_ratio = match &a.kv_ratio {
        Some(text) => parse_ratio(text)?,
        None => {
            if c.heads == 0 || c.kv_heads == 0 {
                return Err(usage!("--heads and --kv-heads must be positive"));
            }
            Ratio::new(c.kv_heads as u64, c.heads as u64)
        }
    };
    let scenario = |strategy| CommScenario {
        causal: !a.non_causal,
        kv_ratio,
        with_checkpoint_recompute: !a.no_recompute,
        ..CommScenario::new(strategy, c.n as u64, c.d as u64, c.p as u64)
    };
    let ours = scenario(CommStrategy::DistFlashAttn);
    let theirs = scenario(CommStrategy::MegatronTP);
    let reduction = comm_volume(&theirs)?.total() / comm_volume(&ours)?.total();
    let rows = vec![comm_row(&ours)?, comm_row(&theirs)?];
    for r in &rows {
        eprintln!("{}={}Nd", r.strategy, r.volume_nd.unwrap_or(f64::NAN));
    }
    eprintln!("ratio={reduction} ({:.2})", ratio_to_f64(reduction));
    let sink = Sink::new(c);
    match sink.format {
        Format::Json => sink.json(&CommReport {
            seed: c.seed,
            rows,
            reduction: ratio_to_f64(reduction),
            reduction_exact: reduction.to_string(),
        })?,
        Format::Csv => sink.csv(rows)?,
    }
    Ok(Outcome::Passed)
}

fn overlap(c: &Common, a: &OverlapArgs) -> Result<Outcome> {
    let s = OverlapScenario {
        first_step_local: !a.remote_first,
        ..OverlapScenario::new(a.t, a.c, a.m)
    };
    let rows = vec![overlap_row(&s, false)?, overlap_row(&s, true)?];
    eprintln!(
        "sequential={} overlapped={}",
        rows[0].makespan.unwrap_or(f64::NAN),
        rows[1].makespan.unwrap_or(f64::NAN)
    );
    let sink = Sink::new(c);
    match sink.format {
        Format::Json => sink.json(&OverlapReport {
            seed: c.seed,
            scenario: s,
            rows,
        })?,
        Format::Csv => sink.csv(rows)?,
    }
    Ok(Outcome::Passed)
}
