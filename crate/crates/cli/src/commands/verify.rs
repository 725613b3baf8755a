use anyhow::Result;
use distflash_core::ckptplan::{plan, run_with_checkpointing, CheckpointStrategy, LayerPipeline};
use distflash_core::numerics::Matrix;
use distflash_core::runtime::{
    attach_output_grad, gather_grads, gather_output, CommCounters, ExecutorMode, RunOptions,
};
use distflash_core::schedule::{build_schedule, validate, ScheduleKind};
use distflash_core::{
    dense_oracle, dense_oracle_backward, run_backward, run_forward, shard_sequence, AttnConfig,
    AttnGrads, BackwardSchedule, Rng,
};
use serde::Serialize;

use super::check_common;
use crate::args::{Common, Format};
use crate::output::Sink;
use crate::{usage, Outcome};

const FWD_TOL: f64 = 1e-10;
const BWD_TOL: f64 = 1e-8;
const FD_TOL: f64 = 1e-5;
const FD_STEP: f64 = 1e-6;
const FD_SAMPLES: usize = 8;

#[derive(Serialize)]
struct Check {
    name: &'static str,
    passed: bool,
    value: f64,
    tolerance: Option<f64>,
}

#[derive(Serialize)]
struct Report {
    seed: u64,
    #[serde(rename = "P")]
    p: usize,
    #[serde(rename = "N")]
    n: usize,
    d: usize,
    heads: usize,
    kv_heads: usize,
    layers: usize,
    max_fwd_err: f64,
    max_bwd_err: f64,
    max_fd_rel_err: f64,
    checks: Vec<Check>,
    passed: bool,
}

struct Head {
    q: Matrix,
    k: Matrix,
    v: Matrix,
    d_o: Matrix,
}

fn heads(c: &Common) -> Vec<Head> {
    let mut rng = Rng::new(c.seed);
    let kv: Vec<(Matrix, Matrix)> = (0..c.kv_heads)
        .map(|_| (rng.matrix(c.n, c.d), rng.matrix(c.n, c.d)))
        .collect();
    let group = c.heads / c.kv_heads;
    (0..c.heads)
        .map(|h| {
            let (k, v) = kv[h / group].clone();
            Head {
                q: rng.matrix(c.n, c.d),
                k,
                v,
                d_o: rng.matrix(c.n, c.d),
            }
        })
        .collect()
}

fn grads_bit_eq(a: &AttnGrads, b: &AttnGrads) -> bool {
    a.dq.bit_eq(&b.dq) && a.dk.bit_eq(&b.dk) && a.dv.bit_eq(&b.dv)
}

fn max_grad_err(a: &AttnGrads, b: &AttnGrads) -> Result<f64> {
    Ok(a.dq
        .max_abs_diff(&b.dq)?
        .max(a.dk.max_abs_diff(&b.dk)?)
        .max(a.dv.max_abs_diff(&b.dv)?))
}

/// Central differences of `⟨dO, O⟩` at a few sampled entries, compared to
/// the distributed gradient at the same entries.
fn sampled_fd(h: &Head, grads: &AttnGrads, scale: f64, rng: &mut Rng) -> Result<f64> {
    let loss = |q: &Matrix, k: &Matrix, v: &Matrix| -> Result<f64> {
        let o = dense_oracle(q, k, v, true, scale)?.o;
        Ok(o.hadamard(&h.d_o)?.data().iter().sum())
    };
    let mut worst_diff = 0.0f64;
    let mut scale_ref = 1e-12f64;
    for which in 0..3 {
        let (x, g) = match which {
            0 => (&h.q, &grads.dq),
            1 => (&h.k, &grads.dk),
            _ => (&h.v, &grads.dv),
        };
        for _ in 0..FD_SAMPLES {
            let i = (rng.next_u64() % x.rows() as u64) as usize;
            let j = (rng.next_u64() % x.cols() as u64) as usize;
            let eval = |delta: f64| -> Result<f64> {
                let mut p = x.clone();
                p.set(i, j, x.get(i, j) + delta);
                match which {
                    0 => loss(&p, &h.k, &h.v),
                    1 => loss(&h.q, &p, &h.v),
                    _ => loss(&h.q, &h.k, &p),
                }
            };
            let fd = (eval(FD_STEP)? - eval(-FD_STEP)?) / (2.0 * FD_STEP);
            worst_diff = worst_diff.max((fd - g.get(i, j)).abs());
            scale_ref = scale_ref.max(fd.abs());
        }
    }
    Ok(worst_diff / scale_ref)
}

pub fn run(c: &Common) -> Result<Outcome> {
    check_common(c)?;
    if c.layers == 0 {
        return Err(usage!("--layers must be at least 1"));
    }
    let attn = AttnConfig::for_head_dim(c.d).with_blocks(c.br, c.bc)?;
    let base = RunOptions::for_head_dim(c.d).attn(attn);
    let combos = [
        (ExecutorMode::Stepper, true),
        (ExecutorMode::Concurrent, false),
        (ExecutorMode::Concurrent, true),
    ];

    let mut max_fwd = 0.0f64;
    let mut max_bwd = 0.0f64;
    let mut max_fd = 0.0f64;
    let mut fwd_agree = true;
    let mut bwd_agree = true;
    let mut counters_agree = true;
    let mut fd_rng = Rng::new(c.seed ^ 0x5eed);
    for (idx, h) in heads(c).iter().enumerate() {
        let dense = dense_oracle(&h.q, &h.k, &h.v, true, attn.scale)?;
        for kind in [ScheduleKind::Ring, ScheduleKind::Balanced] {
            let s = build_schedule(kind, c.p)?;
            let mut shards = shard_sequence(&h.q, &h.k, &h.v, c.p)?;
            let (outs, trace) = run_forward(&mut shards, &s, &base)?;
            let out = gather_output(&outs)?;
            max_fwd = max_fwd.max(out.o.max_abs_diff(&dense.o)?);
            for (mode, overlap) in combos {
                let mut other = shard_sequence(&h.q, &h.k, &h.v, c.p)?;
                let (o2, t2) = run_forward(&mut other, &s, &base.mode(mode).overlap(overlap))?;
                fwd_agree &= gather_output(&o2)?.o.bit_eq(&out.o);
                counters_agree &= t2.counters == trace.counters;
            }
            if kind != ScheduleKind::Ring {
                continue;
            }
            attach_output_grad(&mut shards, &h.d_o)?;
            let backward = |opts: &RunOptions| -> Result<(AttnGrads, CommCounters)> {
                let mut sh = shards.clone();
                let (g, t) = run_backward(&mut sh, BackwardSchedule::Vanilla, opts)?;
                Ok((gather_grads(&g)?, t.counters))
            };
            let (grads, bc) = backward(&base)?;
            for (mode, overlap) in combos {
                let (g2, c2) = backward(&base.mode(mode).overlap(overlap))?;
                bwd_agree &= grads_bit_eq(&g2, &grads);
                counters_agree &= c2 == bc;
            }
            let want = dense_oracle_backward(&h.q, &h.k, &h.v, &h.d_o, true, attn.scale)?;
            max_bwd = max_bwd.max(max_grad_err(&grads, &want)?);
            if idx == 0 {
                max_fd = sampled_fd(h, &grads, attn.scale, &mut fd_rng)?;
            }
        }
    }

    let schedules_valid = [ScheduleKind::Ring, ScheduleKind::Balanced]
        .iter()
        .all(|&k| {
            build_schedule(k, c.p)
                .map(|s| validate(&s).is_empty())
                .unwrap_or(false)
        });

    let pipeline = LayerPipeline::new(c.layers, c.n / c.p, c.d, 2 * c.d, c.seed)?;
    let mut prng = Rng::new(c.seed.wrapping_add(1));
    let (x, g) = (prng.matrix(c.n / c.p, c.d), prng.matrix(c.n / c.p, c.d));
    let mut ckpt_runs = Vec::new();
    for s in [
        CheckpointStrategy::None,
        CheckpointStrategy::LayerBoundary,
        CheckpointStrategy::AttentionOutput,
    ] {
        ckpt_runs.push(run_with_checkpointing(
            &pipeline,
            &plan(&pipeline, s)?,
            &x,
            &g,
        )?);
    }
    let ckpt_equal = ckpt_runs
        .iter()
        .all(|r| r.grads.bit_eq(&ckpt_runs[0].grads));
    let recompute_ok = ckpt_runs[1].trace.attention_recomputes() == c.layers
        && ckpt_runs[2].trace.attention_recomputes() == 0;

    let flag = |b: bool| if b { 1.0 } else { 0.0 };
    let checks = vec![
        Check {
            name: "forward_vs_dense",
            passed: max_fwd < FWD_TOL,
            value: max_fwd,
            tolerance: Some(FWD_TOL),
        },
        Check {
            name: "backward_vs_dense",
            passed: max_bwd < BWD_TOL,
            value: max_bwd,
            tolerance: Some(BWD_TOL),
        },
        Check {
            name: "backward_vs_finite_differences",
            passed: max_fd < FD_TOL,
            value: max_fd,
            tolerance: Some(FD_TOL),
        },
        Check {
            name: "forward_executors_and_overlap_bitwise",
            passed: fwd_agree,
            value: flag(fwd_agree),
            tolerance: None,
        },
        Check {
            name: "backward_executors_and_overlap_bitwise",
            passed: bwd_agree,
            value: flag(bwd_agree),
            tolerance: None,
        },
        Check {
            name: "comm_counters_agree",
            passed: counters_agree,
            value: flag(counters_agree),
            tolerance: None,
        },
        Check {
            name: "schedules_valid",
            passed: schedules_valid,
            value: flag(schedules_valid),
            tolerance: None,
        },
        Check {
            name: "checkpoint_grads_bitwise",
            passed: ckpt_equal,
            value: flag(ckpt_equal),
            tolerance: None,
        },
        Check {
            name: "attention_recompute_counts",
            passed: recompute_ok,
            value: ckpt_runs[1].trace.attention_recomputes() as f64,
            tolerance: None,
        },
    ];
    let passed = checks.iter().all(|c| c.passed);
    for ch in &checks {
        eprintln!(
            "{} {} ({:e})",
            if ch.passed { "PASS" } else { "FAIL" },
            ch.name,
            ch.value
        );
    }
    let sink = Sink::new(c);
    match sink.format {
        Format::Json => sink.json(&Report {
            seed: c.seed,
            p: c.p,
            n: c.n,
            d: c.d,
            heads: c.heads,
            kv_heads: c.kv_heads,
            layers: c.layers,
            max_fwd_err: max_fwd,
            max_bwd_err: max_bwd,
            max_fd_rel_err: max_fd,
            checks,
            passed,
        })?,
        Format::Csv => sink.csv(checks)?,
    }
    Ok(if passed {
        Outcome::Passed
    } else {
        Outcome::Failed
    })
}
