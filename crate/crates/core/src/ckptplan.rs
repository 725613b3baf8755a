//! Checkpoint placement on a toy transformer stack.
//!
//! Each layer is eight ops. Position `i` is the input of global op `i`, and
//! position `8L` is the pipeline output. A plan keeps a set of positions
//! from the forward pass; backward walks the segments between kept
//! positions in reverse, recomputing every op whose output was dropped.
//!
//! Keeping the attention output (with its logsumexp) lets the attention
//! backward run straight from the checkpoint, so the attention forward never
//! runs twice. Gradients are bit-identical across plans because every op
//! is a deterministic function evaluated in the same order.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flashcore::{
    block_attn_backward, block_attn_update, finalize, AttnAccumulator, AttnConfig, MaskMode,
};
use crate::numerics::{matmul, matmul_transpose_a, Matrix, Rng};

pub const OPS_PER_LAYER: usize = 8;
const RMS_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Norm1,
    QkvProj,
    Attention,
    OutProj,
    Norm2,
    MlpUp,
    MlpAct,
    MlpDown,
}

impl OpKind {
    pub const LAYER: [OpKind; OPS_PER_LAYER] = [
        OpKind::Norm1,
        OpKind::QkvProj,
        OpKind::Attention,
        OpKind::OutProj,
        OpKind::Norm2,
        OpKind::MlpUp,
        OpKind::MlpAct,
        OpKind::MlpDown,
    ];

    pub fn at(op: usize) -> OpKind {
        Self::LAYER[op % OPS_PER_LAYER]
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            OpKind::Norm1 => "norm1",
            OpKind::QkvProj => "qkv_proj",
            OpKind::Attention => "attention",
            OpKind::OutProj => "out_proj",
            OpKind::Norm2 => "norm2",
            OpKind::MlpUp => "mlp_up",
            OpKind::MlpAct => "mlp_act",
            OpKind::MlpDown => "mlp_down",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub w_qkv: Matrix,
    pub w_out: Matrix,
    pub w_up: Matrix,
    pub w_down: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerPipeline {
    pub layers: Vec<LayerWeights>,
    pub n: usize,
    pub d: usize,
    pub d_ff: usize,
    pub attn: AttnConfig,
}

impl LayerPipeline {
    /// Random weights scaled by `1/√fan_in`.
    pub fn new(layers: usize, n: usize, d: usize, d_ff: usize, seed: u64) -> Result<Self> {
        if n == 0 || d == 0 || d_ff == 0 {
            return Err(Error::config(format!(
                "pipeline dims must be positive: n={n} d={d} d_ff={d_ff}"
            )));
        }
        let mut rng = Rng::new(seed);
        let mut weight =
            |rows: usize, cols: usize| rng.matrix(rows, cols).scale(1.0 / (rows as f64).sqrt());
        let layers = (0..layers)
            .map(|_| LayerWeights {
                w_qkv: weight(d, 3 * d),
                w_out: weight(d, d),
                w_up: weight(d, d_ff),
                w_down: weight(d_ff, d),
            })
            .collect();
        Ok(LayerPipeline {
            layers,
            n,
            d,
            d_ff,
            attn: AttnConfig::for_head_dim(d),
        })
    }

    pub fn op_count(&self) -> usize {
        self.layers.len() * OPS_PER_LAYER
    }

    fn forward_op(&self, op: usize, x: &Matrix) -> Result<Act> {
        let w = &self.layers[op / OPS_PER_LAYER];
        let plain = |m: Matrix| Ok(Act { x: m, lse: None });
        match OpKind::at(op) {
            OpKind::Norm1 | OpKind::Norm2 => plain(rms_norm(x)),
            OpKind::QkvProj => plain(matmul(x, &w.w_qkv, false)?),
            OpKind::Attention => {
                let d = self.d;
                let (q, k, v) = (
                    x.slice_cols(0, d),
                    x.slice_cols(d, 2 * d),
                    x.slice_cols(2 * d, 3 * d),
                );
                let acc = block_attn_update(
                    &q,
                    &k,
                    &v,
                    AttnAccumulator::fresh(x.rows(), d),
                    MaskMode::Diagonal,
                    &self.attn,
                )?;
                let out = finalize(&acc)?;
                Ok(Act {
                    x: out.o,
                    lse: Some(out.lse),
                })
            }
            OpKind::OutProj => plain(matmul(x, &w.w_out, false)?),
            OpKind::MlpUp => plain(matmul(x, &w.w_up, false)?),
            OpKind::MlpAct => plain(x.map(f64::tanh)),
            OpKind::MlpDown => plain(matmul(x, &w.w_down, false)?),
        }
    }

    /// Returns the input gradient and adds weight gradients into `grads`.
    fn backward_op(
        &self,
        op: usize,
        x: &Matrix,
        y: &Act,
        dy: &Matrix,
        grads: &mut LayerGrads,
    ) -> Result<Matrix> {
        let w = &self.layers[op / OPS_PER_LAYER];
        let project = |wm: &Matrix, dw: &mut Matrix| -> Result<Matrix> {
            dw.add_assign(&matmul_transpose_a(x, dy)?)?;
            matmul(dy, wm, true)
        };
        match OpKind::at(op) {
            OpKind::Norm1 | OpKind::Norm2 => rms_norm_backward(x, dy),
            OpKind::QkvProj => project(&w.w_qkv, &mut grads.w_qkv),
            OpKind::Attention => {
                let d = self.d;
                let (q, k, v) = (
                    x.slice_cols(0, d),
                    x.slice_cols(d, 2 * d),
                    x.slice_cols(2 * d, 3 * d),
                );
                let lse = y.lse.as_ref().ok_or_else(|| {
                    Error::State(format!("attention op {op} output lacks its logsumexp"))
                })?;
                let g =
                    block_attn_backward(&q, &k, &v, &y.x, lse, dy, MaskMode::Diagonal, &self.attn)?;
                Matrix::hstack(&[g.dq, g.dk, g.dv])
            }
            OpKind::OutProj => project(&w.w_out, &mut grads.w_out),
            OpKind::MlpUp => project(&w.w_up, &mut grads.w_up),
            OpKind::MlpAct => x.zip_with(dy, |a, g| g * (1.0 - a.tanh() * a.tanh())),
            OpKind::MlpDown => project(&w.w_down, &mut grads.w_down),
        }
    }
}

/// Row-wise `x / rms(x)`.
fn rms_norm(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for i in 0..x.rows() {
        let r = rms(x.row(i));
        out.row_mut(i).iter_mut().for_each(|e| *e /= r);
    }
    out
}

fn rms(row: &[f64]) -> f64 {
    (row.iter().map(|e| e * e).sum::<f64>() / row.len() as f64 + RMS_EPS).sqrt()
}

/// `dx = (dy - y · mean(dy ∘ y)) / r` with `y = x / r`.
fn rms_norm_backward(x: &Matrix, dy: &Matrix) -> Result<Matrix> {
    if x.shape() != dy.shape() {
        return Err(Error::shape("norm gradient shape"));
    }
    let mut dx = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        let r = rms(x.row(i));
        let (xr, gr) = (x.row(i), dy.row(i));
        let mean = xr.iter().zip(gr).map(|(a, g)| a / r * g).sum::<f64>() / xr.len() as f64;
        for (j, out) in dx.row_mut(i).iter_mut().enumerate() {
            *out = (gr[j] - xr[j] / r * mean) / r;
        }
    }
    Ok(dx)
}

/// An activation at an op boundary. Attention outputs carry their logsumexp.
#[derive(Clone, Debug, PartialEq)]
struct Act {
    x: Matrix,
    lse: Option<Vec<f64>>,
}

impl Act {
    fn scalars(&self) -> usize {
        self.x.len() + self.lse.as_ref().map_or(0, Vec::len)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointStrategy {
    /// Keep every activation; nothing is recomputed.
    None,
    /// Keep each layer's input.
    LayerBoundary,
    /// Keep the pipeline input and each attention output.
    AttentionOutput,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointPlan {
    pub strategy: CheckpointStrategy,
    pub layers: usize,
    pub positions: BTreeSet<usize>,
}

impl CheckpointPlan {
    /// Half-open op ranges `[start, end)` between kept positions.
    pub fn segments(&self) -> Vec<(usize, usize)> {
        let end = self.layers * OPS_PER_LAYER;
        let starts: Vec<usize> = self
            .positions
            .iter()
            .copied()
            .filter(|&p| p < end)
            .collect();
        starts
            .iter()
            .enumerate()
            .map(|(i, &s)| (s, starts.get(i + 1).copied().unwrap_or(end)))
            .collect()
    }
}

pub fn plan(pipeline: &LayerPipeline, strategy: CheckpointStrategy) -> Result<CheckpointPlan> {
    let layers = pipeline.layers.len();
    if layers == 0 {
        return Err(Error::config("pipeline has no layers"));
    }
    let attn_out = OpKind::LAYER
        .iter()
        .position(|k| *k == OpKind::Attention)
        .unwrap_or(0)
        + 1;
    let positions = match strategy {
        CheckpointStrategy::None => (0..=pipeline.op_count()).collect(),
        CheckpointStrategy::LayerBoundary => (0..layers).map(|l| l * OPS_PER_LAYER).collect(),
        CheckpointStrategy::AttentionOutput => std::iter::once(0)
            .chain((0..layers).map(|l| l * OPS_PER_LAYER + attn_out))
            .collect(),
    };
    Ok(CheckpointPlan {
        strategy,
        layers,
        positions,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads {
    pub w_qkv: Matrix,
    pub w_out: Matrix,
    pub w_up: Matrix,
    pub w_down: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineGrads {
    pub d_input: Matrix,
    pub layers: Vec<LayerGrads>,
}

impl PipelineGrads {
    fn matrices(&self) -> impl Iterator<Item = &Matrix> {
        std::iter::once(&self.d_input).chain(
            self.layers
                .iter()
                .flat_map(|g| [&g.w_qkv, &g.w_out, &g.w_up, &g.w_down]),
        )
    }

    pub fn bit_eq(&self, other: &PipelineGrads) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .matrices()
                .zip(other.matrices())
                .all(|(a, b)| a.bit_eq(b))
    }
}

/// Costs of the stack per layer: attention forward, the other forward ops
/// together, and the full layer backward.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CkptCostModel {
    pub f_attn: f64,
    pub f_rest: f64,
    pub backward: f64,
    pub layers: usize,
}

impl CkptCostModel {
    /// Per-layer costs from operation counts at sequence length `n` and
    /// width `d`: causal attention `2n²d`, projections and MLP `24nd²`,
    /// backward twice the forward.
    pub fn scaling_preset(n: usize, d: usize, layers: usize) -> Self {
        let (n, d) = (n as f64, d as f64);
        let f_attn = 2.0 * n * n * d;
        let f_rest = 24.0 * n * d * d;
        CkptCostModel {
            f_attn,
            f_rest,
            backward: 2.0 * (f_attn + f_rest),
            layers,
        }
    }

    pub fn attention_share(&self) -> f64 {
        self.f_attn / (self.f_attn + self.f_rest)
    }

    fn validate(&self) -> Result<()> {
        let finite = [self.f_attn, self.f_rest, self.backward]
            .iter()
            .all(|c| c.is_finite());
        if !finite || self.f_attn < 0.0 || self.f_rest < 0.0 {
            return Err(Error::config(format!(
                "forward costs must be finite and non-negative: {self:?}"
            )));
        }
        if self.backward <= 0.0 || self.f_attn + self.f_rest <= 0.0 {
            return Err(Error::config(format!(
                "backward and total forward cost must be positive: {self:?}"
            )));
        }
        if self.layers == 0 {
            return Err(Error::config("cost model needs at least one layer"));
        }
        Ok(())
    }
}

/// One forward, the recomputation the strategy implies, and one backward.
pub fn iteration_time_model(cost: &CkptCostModel, strategy: CheckpointStrategy) -> Result<f64> {
    cost.validate()?;
    let l = cost.layers as f64;
    let forward = l * (cost.f_attn + cost.f_rest);
    let recompute = match strategy {
        CheckpointStrategy::None => 0.0,
        CheckpointStrategy::LayerBoundary => forward,
        CheckpointStrategy::AttentionOutput => l * cost.f_rest,
    };
    Ok(forward + recompute + l * cost.backward)
}

/// Layer-boundary time over attention-output time.
pub fn modeled_speedup(cost: &CkptCostModel) -> Result<f64> {
    Ok(
        iteration_time_model(cost, CheckpointStrategy::LayerBoundary)?
            / iteration_time_model(cost, CheckpointStrategy::AttentionOutput)?,
    )
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecomputeTrace {
    /// Ops rerun during backward, by kind.
    pub counts: BTreeMap<OpKind, usize>,
}

impl RecomputeTrace {
    pub fn attention_recomputes(&self) -> usize {
        self.counts.get(&OpKind::Attention).copied().unwrap_or(0)
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    /// Recompute time with attention at `f_attn` and each other op at an
    /// equal share of `f_rest`.
    pub fn modeled_time(&self, cost: &CkptCostModel) -> f64 {
        let rest = (self.total() - self.attention_recomputes()) as f64;
        self.attention_recomputes() as f64 * cost.f_attn
            + rest * cost.f_rest / (OPS_PER_LAYER - 1) as f64
    }
}

/// Scalars held between forward and backward.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SavedActivations {
    /// One `N × d` tensor per layer: its input or its attention output.
    pub per_layer_scalars: usize,
    /// Anything kept beyond the per-layer tensors: the pipeline input when
    /// it is not itself a layer checkpoint, logsumexp rows, and for the
    /// keep-everything baseline every other activation.
    pub extra_scalars: usize,
}

impl SavedActivations {
    pub fn total(&self) -> usize {
        self.per_layer_scalars + self.extra_scalars
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointRun {
    pub output: Matrix,
    pub grads: PipelineGrads,
    pub trace: RecomputeTrace,
    pub saved: SavedActivations,
}

fn per_layer_position(plan: &CheckpointPlan, pos: usize) -> bool {
    let within = pos % OPS_PER_LAYER;
    match plan.strategy {
        CheckpointStrategy::None => false,
        CheckpointStrategy::LayerBoundary => within == 0,
        CheckpointStrategy::AttentionOutput => pos > 0 && OpKind::at(pos - 1) == OpKind::Attention,
    }
}

/// Forward keeping only the plan's positions, then backward of `⟨d_out, out⟩`
/// with recomputation inside each segment.
pub fn run_with_checkpointing(
    pipeline: &LayerPipeline,
    plan: &CheckpointPlan,
    input: &Matrix,
    d_out: &Matrix,
) -> Result<CheckpointRun> {
    let (n, d) = (pipeline.n, pipeline.d);
    if input.shape() != (n, d) || d_out.shape() != (n, d) {
        return Err(Error::shape(format!(
            "pipeline expects {n} × {d}, got input {:?} and output gradient {:?}",
            input.shape(),
            d_out.shape()
        )));
    }
    if plan.layers != pipeline.layers.len() || !plan.positions.contains(&0) {
        return Err(Error::config("plan does not match the pipeline"));
    }
    let end = pipeline.op_count();

    let mut saved: BTreeMap<usize, Act> = BTreeMap::new();
    let mut cur = Act {
        x: input.clone(),
        lse: None,
    };
    for op in 0..end {
        let next = pipeline.forward_op(op, &cur.x)?;
        if plan.positions.contains(&op) {
            saved.insert(op, cur);
        }
        cur = next;
    }
    if plan.positions.contains(&end) {
        saved.insert(end, cur.clone());
    }
    let output = cur.x;

    let mut accounting = SavedActivations::default();
    for (&pos, act) in &saved {
        if per_layer_position(plan, pos) {
            accounting.per_layer_scalars += act.x.len();
            accounting.extra_scalars += act.scalars() - act.x.len();
        } else {
            accounting.extra_scalars += act.scalars();
        }
    }

    let mut grads: Vec<LayerGrads> = pipeline
        .layers
        .iter()
        .map(|w| LayerGrads {
            w_qkv: Matrix::zeros(w.w_qkv.rows(), w.w_qkv.cols()),
            w_out: Matrix::zeros(w.w_out.rows(), w.w_out.cols()),
            w_up: Matrix::zeros(w.w_up.rows(), w.w_up.cols()),
            w_down: Matrix::zeros(w.w_down.rows(), w.w_down.cols()),
        })
        .collect();
    let mut trace = RecomputeTrace::default();
    let mut dy = d_out.clone();
    for (s, e) in plan.segments().into_iter().rev() {
        // acts[i] is the input of op s + i
        let mut acts = vec![saved[&s].clone()];
        for op in s..e - 1 {
            let next = pipeline.forward_op(op, &acts[op - s].x)?;
            *trace.counts.entry(OpKind::at(op)).or_default() += 1;
            acts.push(next);
        }
        for op in (s..e).rev() {
            let y = match acts.get(op - s + 1).or_else(|| saved.get(&(op + 1))) {
                Some(y) => y,
                None if OpKind::at(op) != OpKind::Attention => &acts[op - s], // output unused
                None => {
                    return Err(Error::State(format!(
                        "attention op {op} has no kept output"
                    )))
                }
            };
            dy = pipeline.backward_op(
                op,
                &acts[op - s].x,
                y,
                &dy,
                &mut grads[op / OPS_PER_LAYER],
            )?;
        }
    }
    Ok(CheckpointRun {
        output,
        grads: PipelineGrads {
            d_input: dy,
            layers: grads,
        },
        trace,
        saved: accounting,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{central_difference, rel_err};

    fn setup(layers: usize, n: usize, d: usize) -> (LayerPipeline, Matrix, Matrix) {
        let p = LayerPipeline::new(layers, n, d, 2 * d, 5).unwrap();
        let mut rng = Rng::new(6);
        (p, rng.matrix(n, d), rng.matrix(n, d))
    }

    fn run(p: &LayerPipeline, s: CheckpointStrategy, x: &Matrix, g: &Matrix) -> CheckpointRun {
        run_with_checkpointing(p, &plan(p, s).unwrap(), x, g).unwrap()
    }

    #[test]
    fn plan_positions() {
        let (p, _, _) = setup(3, 4, 2);
        let lb = plan(&p, CheckpointStrategy::LayerBoundary).unwrap();
        let ao = plan(&p, CheckpointStrategy::AttentionOutput).unwrap();
        assert_eq!(lb.positions, BTreeSet::from([0, 8, 16]));
        assert_eq!(ao.positions, BTreeSet::from([0, 3, 11, 19]));
        let one = setup(1, 4, 2).0;
        assert_eq!(
            plan(&one, CheckpointStrategy::LayerBoundary)
                .unwrap()
                .positions,
            BTreeSet::from([0])
        );
        assert_eq!(
            plan(&one, CheckpointStrategy::AttentionOutput)
                .unwrap()
                .positions,
            BTreeSet::from([0, 3])
        );
        assert!(matches!(
            plan(&setup(0, 4, 2).0, CheckpointStrategy::LayerBoundary),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn segments_cover_every_op_once() {
        let (p, _, _) = setup(4, 4, 2);
        for s in [
            CheckpointStrategy::None,
            CheckpointStrategy::LayerBoundary,
            CheckpointStrategy::AttentionOutput,
        ] {
            let segs = plan(&p, s).unwrap().segments();
            let ops: Vec<usize> = segs.iter().flat_map(|&(a, b)| a..b).collect();
            assert_eq!(ops, (0..32).collect::<Vec<_>>());
        }
    }

    #[test]
    fn plans_agree_bitwise_and_count_recomputes() {
        let (p, x, g) = setup(2, 16, 8);
        let base = run(&p, CheckpointStrategy::None, &x, &g);
        let lb = run(&p, CheckpointStrategy::LayerBoundary, &x, &g);
        let ao = run(&p, CheckpointStrategy::AttentionOutput, &x, &g);
        assert!(lb.grads.bit_eq(&base.grads));
        assert!(ao.grads.bit_eq(&lb.grads));
        assert!(ao.output.bit_eq(&base.output));
        assert_eq!(base.trace.total(), 0);
        assert_eq!(lb.trace.attention_recomputes(), 2);
        assert_eq!(ao.trace.attention_recomputes(), 0);
        assert_eq!(lb.trace.total(), 14);
        assert_eq!(ao.trace.total(), 2 + 7 + 4);
    }

    #[test]
    fn saved_per_layer_scalars_match() {
        let (p, x, g) = setup(3, 8, 4);
        let lb = run(&p, CheckpointStrategy::LayerBoundary, &x, &g).saved;
        let ao = run(&p, CheckpointStrategy::AttentionOutput, &x, &g).saved;
        assert_eq!(lb.per_layer_scalars, 3 * 8 * 4);
        assert_eq!(ao.per_layer_scalars, lb.per_layer_scalars);
        assert_eq!(lb.extra_scalars, 0);
        // pipeline input plus one logsumexp row per layer
        assert_eq!(ao.extra_scalars, 8 * 4 + 3 * 8);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (p, x, g) = setup(2, 6, 4);
        let got = run(&p, CheckpointStrategy::AttentionOutput, &x, &g);
        let loss = |pl: &LayerPipeline, x: &Matrix| {
            let out =
                run_with_checkpointing(pl, &plan(pl, CheckpointStrategy::None).unwrap(), x, &g)
                    .unwrap()
                    .output;
            out.hadamard(&g).unwrap().data().iter().sum::<f64>()
        };
        let fd_x = central_difference(&x, 1e-6, |xp| loss(&p, xp));
        assert!(rel_err(&got.grads.d_input, &fd_x).unwrap() < 1e-5);
        let fd_w = central_difference(&p.layers[0].w_qkv, 1e-6, |w| {
            let mut q = p.clone();
            q.layers[0].w_qkv = w.clone();
            loss(&q, &x)
        });
        assert!(rel_err(&got.grads.layers[0].w_qkv, &fd_w).unwrap() < 1e-5);
        let fd_down = central_difference(&p.layers[1].w_down, 1e-6, |w| {
            let mut q = p.clone();
            q.layers[1].w_down = w.clone();
            loss(&q, &x)
        });
        assert!(rel_err(&got.grads.layers[1].w_down, &fd_down).unwrap() < 1e-5);
    }

    #[test]
    fn shape_errors() {
        let (p, x, _) = setup(1, 8, 4);
        let plan = plan(&p, CheckpointStrategy::LayerBoundary).unwrap();
        let bad = Matrix::zeros(8, 3);
        assert!(matches!(
            run_with_checkpointing(&p, &plan, &x, &bad),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn time_model() {
        let c = CkptCostModel {
            f_attn: 0.6,
            f_rest: 0.4,
            backward: 2.0,
            layers: 3,
        };
        assert!((modeled_speedup(&c).unwrap() - 4.0 / 3.4).abs() < 1e-12);
        let z = CkptCostModel { f_attn: 0.0, ..c };
        assert_eq!(
            iteration_time_model(&z, CheckpointStrategy::LayerBoundary).unwrap(),
            iteration_time_model(&z, CheckpointStrategy::AttentionOutput).unwrap()
        );
        assert!(iteration_time_model(
            &CkptCostModel { backward: 0.0, ..c },
            CheckpointStrategy::None
        )
        .is_err());
        assert!(iteration_time_model(
            &CkptCostModel { f_rest: -1.0, ..c },
            CheckpointStrategy::None
        )
        .is_err());
        let all_attn = CkptCostModel {
            f_attn: 1.0,
            f_rest: 0.0,
            backward: 2.0,
            layers: 1,
        };
        assert!((modeled_speedup(&all_attn).unwrap() - 4.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn recompute_time_under_cost() {
        let (p, x, g) = setup(2, 4, 2);
        let lb = run(&p, CheckpointStrategy::LayerBoundary, &x, &g).trace;
        let c = CkptCostModel {
            f_attn: 0.7,
            f_rest: 0.7,
            backward: 1.0,
            layers: 2,
        };
        // six of seven other ops per layer plus attention
        assert!((lb.modeled_time(&c) - 2.0 * (0.7 + 0.6)).abs() < 1e-12);
    }

    #[test]
    fn preset_share_grows_with_length() {
        let short = CkptCostModel::scaling_preset(1024, 4096, 32);
        let long = CkptCostModel::scaling_preset(32768, 4096, 32);
        assert!(short.attention_share() < long.attention_share());
        assert!(modeled_speedup(&short).unwrap() < modeled_speedup(&long).unwrap());
    }
}
