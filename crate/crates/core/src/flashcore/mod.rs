//! Blockwise exact attention with online softmax.
//!
//! An [`AttnAccumulator`] carries the unnormalized output together with the
//! running row max `m` and row sum `l`. Chunks of keys/values are absorbed one
//! at a time by [`block_attn_update`]; two partial accumulators over disjoint
//! key sets combine with [`rescale`]; [`finalize`] normalizes and produces the
//! per-row logsumexp that the backward pass consumes.
//!
//! Inside a call, work is tiled into `block_rows × block_cols` score tiles and
//! no larger score buffer is ever allocated (see [`probe`]).

#![allow(clippy::needless_range_loop)]

mod oracle;
pub mod probe;

pub use oracle::{dense_oracle, dense_oracle_backward};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const DEFAULT_BLOCK: usize = 16;

/// Tile sizes for the blockwise kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSizes {
    pub rows: usize,
    pub cols: usize,
}

impl Default for BlockSizes {
    fn default() -> Self {
        BlockSizes {
            rows: DEFAULT_BLOCK,
            cols: DEFAULT_BLOCK,
        }
    }
}

/// Kernel configuration: softmax scale and tile sizes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttnConfig {
    pub scale: f64,
    pub blocks: BlockSizes,
}

impl AttnConfig {
    /// `1/√d` scaling with the default 16×16 tiles.
    pub fn for_head_dim(d: usize) -> Self {
        AttnConfig {
            scale: 1.0 / (d as f64).sqrt(),
            blocks: BlockSizes::default(),
        }
    }

    pub fn with_blocks(mut self, rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::config(format!(
                "block sizes must be positive, got {rows}x{cols}"
            )));
        }
        self.blocks = BlockSizes { rows, cols };
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        if self.blocks.rows == 0 || self.blocks.cols == 0 {
            return Err(Error::config("block sizes must be positive"));
        }
        if !self.scale.is_finite() {
            return Err(Error::config("softmax scale must be finite"));
        }
        Ok(())
    }
}

/// Which keys of a chunk each query row may see.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MaskMode {
    /// Query chunk and key chunk are the same tokens; row `i` sees keys `0..=i`.
    Diagonal,
    /// Every key is visible.
    Full,
    /// No key is visible.
    Empty,
}

impl MaskMode {
    #[inline]
    fn visible(self, i: usize, j: usize) -> bool {
        match self {
            MaskMode::Diagonal => j <= i,
            MaskMode::Full => true,
            MaskMode::Empty => false,
        }
    }

    /// True when the whole tile `[q0, q1) × [k0, k1)` is masked out.
    #[inline]
    fn tile_masked(self, q1: usize, k0: usize) -> bool {
        match self {
            MaskMode::Diagonal => k0 >= q1,
            MaskMode::Full => false,
            MaskMode::Empty => true,
        }
    }
}

/// Running online-softmax state for one query chunk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttnAccumulator {
    /// Unnormalized output, `rows × d`.
    pub o: Matrix,
    /// Running row max of scaled scores.
    pub m: Vec<f64>,
    /// Running row sum of `exp(score - m)`.
    pub l: Vec<f64>,
}

impl AttnAccumulator {
    pub fn fresh(rows: usize, d: usize) -> Self {
        AttnAccumulator {
            o: Matrix::zeros(rows, d),
            m: vec![f64::NEG_INFINITY; rows],
            l: vec![0.0; rows],
        }
    }

    pub fn rows(&self) -> usize {
        self.m.len()
    }

    pub fn head_dim(&self) -> usize {
        self.o.cols()
    }

    /// Number of scalars this state occupies on the wire.
    pub fn scalar_count(&self) -> usize {
        self.o.len() + self.m.len() + self.l.len()
    }

    fn check(&self) -> Result<()> {
        if self.o.rows() != self.m.len() || self.m.len() != self.l.len() {
            return Err(Error::shape(format!(
                "accumulator with {} output rows, {} maxima, {} sums",
                self.o.rows(),
                self.m.len(),
                self.l.len()
            )));
        }
        Ok(())
    }
}

/// Normalized attention output and per-row logsumexp.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttnOutput {
    pub o: Matrix,
    pub lse: Vec<f64>,
}

/// Gradient contributions returned by [`block_attn_backward`].
#[derive(Clone, Debug, PartialEq)]
pub struct AttnGrads {
    pub dq: Matrix,
    pub dk: Matrix,
    pub dv: Matrix,
}

/// Per-row `D = rowsum(dO ∘ O)` used by the backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BackwardAux {
    pub d: Vec<f64>,
}

impl BackwardAux {
    pub fn new(o: &Matrix, d_o: &Matrix) -> Result<Self> {
        let prod = o.hadamard(d_o)?;
        if prod.rows() == 0 {
            return Ok(BackwardAux { d: Vec::new() });
        }
        Ok(BackwardAux {
            d: crate::numerics::rowsum(&prod)?,
        })
    }
}

/// Absorbs one key/value chunk into `acc`.
pub fn block_attn_update(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    mut acc: AttnAccumulator,
    mask: MaskMode,
    cfg: &AttnConfig,
) -> Result<AttnAccumulator> {
    cfg.validate()?;
    acc.check()?;
    check_qkv(q, k, v, mask)?;
    if acc.rows() != q.rows() || acc.head_dim() != v.cols() {
        return Err(Error::shape(format!(
            "accumulator {}x{} for query chunk {}x{} and values of width {}",
            acc.rows(),
            acc.head_dim(),
            q.rows(),
            q.cols(),
            v.cols()
        )));
    }
    if mask == MaskMode::Empty {
        return Ok(acc);
    }

    let (br, bc) = (cfg.blocks.rows, cfg.blocks.cols);
    let dv = v.cols();
    let mut p = vec![0.0; bc];
    for q0 in (0..q.rows()).step_by(br) {
        let q1 = (q0 + br).min(q.rows());
        for k0 in (0..k.rows()).step_by(bc) {
            let k1 = (k0 + bc).min(k.rows());
            if mask.tile_masked(q1, k0) {
                continue;
            }
            let s = score_tile(q, k, q0, q1, k0, k1, mask, cfg.scale);
            for ii in 0..s.rows() {
                let i = q0 + ii;
                let tile_max = s.row(ii).iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let m_new = acc.m[i].max(tile_max);
                if m_new == f64::NEG_INFINITY {
                    continue;
                }
                let alpha = (acc.m[i] - m_new).exp();
                let mut tile_sum = 0.0;
                for (jj, &sij) in s.row(ii).iter().enumerate() {
                    p[jj] = (sij - m_new).exp();
                    tile_sum += p[jj];
                }
                acc.l[i] = alpha * acc.l[i] + tile_sum;
                let o_row = acc.o.row_mut(i);
                for c in 0..dv {
                    let mut pv = 0.0;
                    for jj in 0..s.cols() {
                        pv += p[jj] * v.get(k0 + jj, c);
                    }
                    o_row[c] = alpha * o_row[c] + pv;
                }
                acc.m[i] = m_new;
            }
        }
    }
    Ok(acc)
}

/// Merges two partial accumulators computed over disjoint key sets.
pub fn rescale(a: &AttnAccumulator, b: &AttnAccumulator) -> Result<AttnAccumulator> {
    a.check()?;
    b.check()?;
    if a.o.shape() != b.o.shape() {
        return Err(Error::shape(format!(
            "rescale {:?} with {:?}",
            a.o.shape(),
            b.o.shape()
        )));
    }
    let mut out = a.clone();
    for i in 0..a.rows() {
        let m_new = a.m[i].max(b.m[i]);
        if m_new == f64::NEG_INFINITY {
            continue;
        }
        let wa = (a.m[i] - m_new).exp();
        let wb = (b.m[i] - m_new).exp();
        out.m[i] = m_new;
        out.l[i] = wa * a.l[i] + wb * b.l[i];
        let (ra, rb) = (a.o.row(i), b.o.row(i));
        for (c, dst) in out.o.row_mut(i).iter_mut().enumerate() {
            *dst = wa * ra[c] + wb * rb[c];
        }
    }
    Ok(out)
}

/// Normalizes the accumulated output and computes `lse = m + ln l`.
pub fn finalize(acc: &AttnAccumulator) -> Result<AttnOutput> {
    acc.check()?;
    let mut o = acc.o.clone();
    let mut lse = Vec::with_capacity(acc.rows());
    for i in 0..acc.rows() {
        let l = acc.l[i];
        if l <= 0.0 || acc.m[i] == f64::NEG_INFINITY {
            return Err(Error::DegenerateRow { row: i });
        }
        for x in o.row_mut(i) {
            *x /= l;
        }
        lse.push(acc.m[i] + l.ln());
    }
    Ok(AttnOutput { o, lse })
}

/// Gradient contributions of one key/value chunk.
///
/// `lse` must be the logsumexp over every key the query chunk attends to
/// globally, so that `exp(s - lse)` reproduces the final attention weights.
#[allow(clippy::too_many_arguments)]
pub fn block_attn_backward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    o: &Matrix,
    lse: &[f64],
    d_o: &Matrix,
    mask: MaskMode,
    cfg: &AttnConfig,
) -> Result<AttnGrads> {
    cfg.validate()?;
    check_qkv(q, k, v, mask)?;
    if o.rows() != q.rows() || d_o.shape() != o.shape() || lse.len() != q.rows() {
        return Err(Error::shape(format!(
            "backward with q {:?}, o {:?}, dO {:?}, lse {}",
            q.shape(),
            o.shape(),
            d_o.shape(),
            lse.len()
        )));
    }
    if o.cols() != v.cols() {
        return Err(Error::shape("output width differs from value width"));
    }
    let aux = BackwardAux::new(o, d_o)?;
    let mut dq = Matrix::zeros(q.rows(), q.cols());
    let mut dk = Matrix::zeros(k.rows(), k.cols());
    let mut dv = Matrix::zeros(v.rows(), v.cols());
    if mask == MaskMode::Empty {
        return Ok(AttnGrads { dq, dk, dv });
    }

    let (br, bc) = (cfg.blocks.rows, cfg.blocks.cols);
    let scale = cfg.scale;
    for k0 in (0..k.rows()).step_by(bc) {
        let k1 = (k0 + bc).min(k.rows());
        for q0 in (0..q.rows()).step_by(br) {
            let q1 = (q0 + br).min(q.rows());
            if mask.tile_masked(q1, k0) {
                continue;
            }
            let s = score_tile(q, k, q0, q1, k0, k1, mask, scale);
            // s becomes p in place, then ds
            let mut p = s;
            for ii in 0..p.rows() {
                let shift = lse[q0 + ii];
                for x in p.row_mut(ii) {
                    *x = (*x - shift).exp();
                }
            }
            for jj in 0..p.cols() {
                let dv_row = dv.row_mut(k0 + jj);
                for ii in 0..p.rows() {
                    let pij = p.get(ii, jj);
                    for (c, dst) in dv_row.iter_mut().enumerate() {
                        *dst += pij * d_o.get(q0 + ii, c);
                    }
                }
            }
            let mut ds = p;
            for ii in 0..ds.rows() {
                let i = q0 + ii;
                for jj in 0..ds.cols() {
                    let mut dp = 0.0;
                    for c in 0..v.cols() {
                        dp += d_o.get(i, c) * v.get(k0 + jj, c);
                    }
                    let pij = ds.get(ii, jj);
                    ds.set(ii, jj, pij * (dp - aux.d[i]));
                }
            }
            for ii in 0..ds.rows() {
                let dq_row = dq.row_mut(q0 + ii);
                for c in 0..q.cols() {
                    let mut acc = 0.0;
                    for jj in 0..ds.cols() {
                        acc += ds.get(ii, jj) * k.get(k0 + jj, c);
                    }
                    dq_row[c] += scale * acc;
                }
            }
            for jj in 0..ds.cols() {
                let dk_row = dk.row_mut(k0 + jj);
                for c in 0..q.cols() {
                    let mut acc = 0.0;
                    for ii in 0..ds.rows() {
                        acc += ds.get(ii, jj) * q.get(q0 + ii, c);
                    }
                    dk_row[c] += scale * acc;
                }
            }
        }
    }
    Ok(AttnGrads { dq, dk, dv })
}

fn check_qkv(q: &Matrix, k: &Matrix, v: &Matrix, mask: MaskMode) -> Result<()> {
    if q.cols() != k.cols() {
        return Err(Error::shape(format!(
            "query width {} vs key width {}",
            q.cols(),
            k.cols()
        )));
    }
    if k.rows() != v.rows() {
        return Err(Error::shape(format!(
            "{} keys vs {} values",
            k.rows(),
            v.rows()
        )));
    }
    if mask == MaskMode::Diagonal && q.rows() != k.rows() {
        return Err(Error::shape(
            "diagonal mask needs equal query and key chunk lengths",
        ));
    }
    Ok(())
}

/// Scaled, masked scores for one tile. Masked entries are `-inf`.
#[allow(clippy::too_many_arguments)]
fn score_tile(
    q: &Matrix,
    k: &Matrix,
    q0: usize,
    q1: usize,
    k0: usize,
    k1: usize,
    mask: MaskMode,
    scale: f64,
) -> Matrix {
    probe::record_tile(q1 - q0, k1 - k0);
    let mut s = Matrix::zeros(q1 - q0, k1 - k0);
    for i in q0..q1 {
        let q_row = q.row(i);
        for j in k0..k1 {
            let value = if mask.visible(i, j) {
                let k_row = k.row(j);
                let mut dot = 0.0;
                for c in 0..q.cols() {
                    dot += q_row[c] * k_row[c];
                }
                scale * dot
            } else {
                f64::NEG_INFINITY
            };
            s.set(i - q0, j - k0, value);
        }
    }
    s
}
