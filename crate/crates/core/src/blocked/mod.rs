//! Tiled smoothed cross-entropy that never materializes the `|V| × N` logits.
//!
//! The forward pass walks (token block × vocabulary block) tiles. Each tile of
//! logits is accumulated over hidden-dim chunks in a scratch buffer, folded
//! into the running per-token log-sum-exp, and contributes its target logit and
//! its smoothing row sum to the per-token score `o`. Nothing larger than one
//! tile is ever allocated.
//!
//! The backward pass recomputes tiles from the inputs and the saved LSE and
//! splits the gradient of `LSE - o` into three parts:
//!
//! - softmax: `C·P` and `E·Pᵀ` per tile, the only part the filter may skip;
//! - target: `-(1-β)` times the target column, scattered per token;
//! - smoothing: `-(β/|V|)` times the rank-one sums `C·1` and `Σ_i E_i`.
//!
//! Token blocks own disjoint rows of the LSE/`o` accumulators and disjoint
//! columns of `∂L/∂E`; vocabulary blocks own disjoint columns of `∂L/∂C`.
//! Summation orders are fixed, so parallel and serial runs agree bitwise.

mod kernel;
mod memory;

pub use memory::MemoryStats;

use kernel::{Tile, TileBuffers};
use memory::Ledger;

use crate::error::{check_range, Error, Result};
use crate::reduce::lse_merge;
use crate::reference::{check_beta, fill_token_weights, finish_loss, Gradients, LossOutput, Reduction};
use crate::tensor::{check_shapes, BlockPlan, DenseMatrix, TokenSequence};

/// Threshold below which half-precision gradient contributions vanish.
pub const DEFAULT_FILTER_EPSILON: f64 = 1.0 / 4096.0;

/// Gradient filtering and vocabulary ordering switches.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FilterConfig {
    /// Skip the softmax part of tiles whose largest probability is below `epsilon`.
    pub enabled: bool,
    pub epsilon: f64,
    /// Reorder vocabulary blocks by estimated mean logit before the backward pass.
    pub vocab_sorting: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            epsilon: DEFAULT_FILTER_EPSILON,
            vocab_sorting: false,
        }
    }
}

impl FilterConfig {
    pub fn off() -> Self {
        Self::default()
    }

    pub fn with_epsilon(epsilon: f64) -> Self {
        Self {
            enabled: true,
            epsilon,
            vocab_sorting: false,
        }
    }

    pub fn sorted(mut self) -> Self {
        self.vocab_sorting = true;
        self
    }

    fn validate(&self) -> Result<()> {
        check_range(
            "epsilon",
            self.epsilon,
            (0.0..1.0).contains(&self.epsilon),
            "[0, 1)",
        )
    }

    /// Tiles whose max of `logit - lse` falls below this are skipped.
    fn log_threshold(&self) -> f64 {
        if self.enabled && self.epsilon > 0.0 {
            self.epsilon.ln()
        } else {
            f64::NEG_INFINITY
        }
    }
}

struct Layout {
    n: usize,
    v: usize,
    d: usize,
    n_block: usize,
    v_block: usize,
    d_block: usize,
    order: Vec<usize>,
}

impl Layout {
    fn new(e: &DenseMatrix, c: &DenseMatrix, plan: &BlockPlan) -> Result<Self> {
        let (n, v, d) = (e.cols(), c.cols(), e.rows());
        plan.validate(v)?;
        Ok(Self {
            n,
            v,
            d,
            n_block: plan.n_block.min(n.max(1)),
            v_block: plan.v_block.min(v),
            d_block: plan.d_block.min(d.max(1)),
            order: plan.block_order(v),
        })
    }

    fn token_blocks(&self) -> usize {
        self.n.div_ceil(self.n_block)
    }

    fn tile(&self, nb: usize, vb: usize) -> Tile {
        Tile {
            n0: nb * self.n_block,
            n1: ((nb + 1) * self.n_block).min(self.n),
            v0: vb * self.v_block,
            v1: ((vb + 1) * self.v_block).min(self.v),
        }
    }

    /// Largest single scratch buffer the engine may request.
    fn scratch_limit(&self) -> usize {
        let tile = self.n_block * self.v_block;
        let packs = self.d_block * (self.n_block + self.v_block);
        (tile.max(packs).max(2 * self.d + self.n + self.order.len() + 4 * self.n_block)) * std::mem::size_of::<f64>()
    }

    fn ledger(&self) -> Ledger {
        Ledger::new(self.scratch_limit())
    }
}

/// Forward pass over one token block, writing its LSE and `o` rows.
#[allow(clippy::too_many_arguments)]
fn forward_block(
    e: &DenseMatrix,
    c: &DenseMatrix,
    x: &TokenSequence,
    beta: f64,
    layout: &Layout,
    ledger: &Ledger,
    nb: usize,
    lse: &mut [f64],
    o: &mut [f64],
) {
    let mut bufs = TileBuffers::new(ledger, layout.n_block, layout.v_block, layout.d_block);
    let mut stats = ledger.zeros::<f64>(3 * layout.n_block);
    let smooth = beta / layout.v as f64;
    lse.fill(f64::NEG_INFINITY);
    o.fill(0.0);

    for &vb in &layout.order {
        let t = layout.tile(nb, vb);
        bufs.compute(e, c, t);
        let cols = t.tokens();
        let tile = &bufs.logits[..cols * t.vocab()];
        let (col_max, rest) = stats.split_at_mut(layout.n_block);
        let (col_sum, row_sum) = rest.split_at_mut(layout.n_block);
        let (col_max, col_sum, row_sum) = (&mut col_max[..cols], &mut col_sum[..cols], &mut row_sum[..cols]);

        col_max.fill(f64::NEG_INFINITY);
        for row in tile.chunks_exact(cols) {
            for (m, &z) in col_max.iter_mut().zip(row) {
                *m = m.max(z);
            }
        }
        col_sum.fill(0.0);
        for row in tile.chunks_exact(cols) {
            for ((s, &z), &m) in col_sum.iter_mut().zip(row).zip(col_max.iter()) {
                *s += (z - m).exp();
            }
        }
        for i in 0..cols {
            lse[i] = lse_merge(lse[i], col_max[i] + col_sum[i].ln());
        }

        // target logits whose vocabulary id falls inside this block
        for i in 0..cols {
            let target = x.target(t.n0 + i);
            if (t.v0..t.v1).contains(&target) {
                o[i] += (1.0 - beta) * tile[(target - t.v0) * cols + i];
            }
        }
        if beta != 0.0 {
            row_sum.fill(0.0);
            for row in tile.chunks_exact(cols) {
                for (s, &z) in row_sum.iter_mut().zip(row) {
                    *s += z;
                }
            }
            for (oi, s) in o.iter_mut().zip(row_sum.iter()) {
                *oi += smooth * s;
            }
        }
    }
}

/// Memory-efficient forward pass.
pub fn forward(
    e: &DenseMatrix,
    c: &DenseMatrix,
    x: &TokenSequence,
    beta: f64,
    reduction: Reduction,
    plan: &BlockPlan,
) -> Result<(LossOutput, MemoryStats)> {
    check_shapes(e, c, x)?;
    check_beta(beta)?;
    let layout = Layout::new(e, c, plan)?;
    let ledger = layout.ledger();
    let mut lse = vec![0.0; layout.n];
    let mut o = vec![0.0; layout.n];

    let run = |(nb, (lse, o)): (usize, (&mut [f64], &mut [f64]))| {
        forward_block(e, c, x, beta, &layout, &ledger, nb, lse, o)
    };
    if plan.deterministic {
        lse.chunks_mut(layout.n_block)
            .zip(o.chunks_mut(layout.n_block))
            .enumerate()
            .for_each(run);
    } else {
        par::for_each_token_block(&mut lse, &mut o, layout.n_block, run);
    }

    let tiles = layout.token_blocks() * layout.order.len();
    let stats = MemoryStats {
        peak_auxiliary_bytes: ledger.peak(),
        tiles_processed: tiles,
        tiles_skipped_by_filter: 0,
    };
    Ok((finish_loss(x, lse, o, reduction), stats))
}

/// Turns a logit tile into weighted probabilities in place. Returns false
/// when the filter says the whole tile can be skipped.
fn tile_probabilities(tile: &mut [f64], cols: usize, lse: &[f64], weights: &[f64], log_threshold: f64) -> bool {
    if log_threshold > f64::NEG_INFINITY {
        let mut max_log = f64::NEG_INFINITY;
        for row in tile.chunks_exact(cols) {
            for (&z, &l) in row.iter().zip(lse) {
                max_log = max_log.max(z - l);
            }
        }
        if max_log < log_threshold {
            return false;
        }
    }
    for row in tile.chunks_exact_mut(cols) {
        for ((z, &l), &w) in row.iter_mut().zip(lse).zip(weights) {
            *z = w * (*z - l).exp();
        }
    }
    true
}

/// `grad_e[:, n0..n1] += C[:, v0..v1] · P` for one tile of probabilities.
fn accumulate_grad_e(c: &DenseMatrix, probs: &[f64], t: Tile, mut row_of: impl FnMut(usize) -> *mut f64) {
    let cols = t.tokens();
    for (j, p) in probs.chunks_exact(cols).enumerate() {
        for k in 0..c.rows() {
            let cw = c.get(k, t.v0 + j);
            // SAFETY: `row_of(k)` points at `cols` writable entries owned by this token block.
            let out = unsafe { std::slice::from_raw_parts_mut(row_of(k), cols) };
            for (g, &pi) in out.iter_mut().zip(p) {
                *g += cw * pi;
            }
        }
    }
}

/// `grad_c[:, v0..v1] += E[:, n0..n1] · Pᵀ` for one tile of probabilities.
fn accumulate_grad_c(e: &DenseMatrix, probs: &[f64], t: Tile, mut row_of: impl FnMut(usize) -> *mut f64) {
    let cols = t.tokens();
    for k in 0..e.rows() {
        let e_seg = &e.row(k)[t.n0..t.n1];
        // SAFETY: `row_of(k)` points at `t.vocab()` writable entries owned by this vocabulary block.
        let out = unsafe { std::slice::from_raw_parts_mut(row_of(k), t.vocab()) };
        for (g, p) in out.iter_mut().zip(probs.chunks_exact(cols)) {
            *g += dot(p, e_seg);
        }
    }
}

/// Dot product with eight fixed lanes, so the rounding is the same on every call.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    const LANES: usize = 8;
    let mut acc = [0.0f64; LANES];
    let (ac, bc) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let tail: f64 = ac.remainder().iter().zip(bc.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ac.zip(bc) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// Raw view of a row-major matrix whose column ranges are written by
/// different workers. Callers guarantee the ranges are disjoint.
#[derive(Clone, Copy)]
struct SharedColumns {
    ptr: *mut f64,
    cols: usize,
}

// SAFETY: workers only touch disjoint column ranges (see `Layout`).
unsafe impl Send for SharedColumns {}
unsafe impl Sync for SharedColumns {}

impl SharedColumns {
    fn new(m: &mut DenseMatrix) -> Self {
        Self {
            ptr: m.as_mut_slice().as_mut_ptr(),
            cols: m.cols(),
        }
    }

    #[inline]
    fn at(&self, row: usize, col: usize) -> *mut f64 {
        // SAFETY: row < rows and col <= cols by construction of the tiles.
        unsafe { self.ptr.add(row * self.cols + col) }
    }
}

#[derive(Default)]
struct TileCount {
    processed: usize,
    skipped: usize,
}

/// One tile of the softmax part in the single-threaded sweep.
#[allow(clippy::too_many_arguments)]
fn softmax_tile(
    e: &DenseMatrix,
    c: &DenseMatrix,
    lse: &[f64],
    weights: &[f64],
    log_threshold: f64,
    bufs: &mut TileBuffers<'_>,
    t: Tile,
) -> Option<usize> {
    bufs.compute(e, c, t);
    let cols = t.tokens();
    let tile = &mut bufs.logits[..cols * t.vocab()];
    tile_probabilities(tile, cols, &lse[t.n0..t.n1], &weights[t.n0..t.n1], log_threshold).then_some(cols)
}

/// Recompute-based backward pass.
#[allow(clippy::too_many_arguments)]
pub fn backward(
    e: &DenseMatrix,
    c: &DenseMatrix,
    x: &TokenSequence,
    beta: f64,
    reduction: Reduction,
    plan: &BlockPlan,
    lse: &[f64],
    upstream: f64,
    filter: FilterConfig,
) -> Result<(Gradients, MemoryStats)> {
    check_shapes(e, c, x)?;
    check_beta(beta)?;
    filter.validate()?;
    if lse.len() != x.len() {
        return Err(Error::Shape(format!("lse has {} entries for {} tokens", lse.len(), x.len())));
    }
    let sorted;
    let plan = if filter.vocab_sorting {
        sorted = plan_vocab_order(e, c, plan)?;
        &sorted
    } else {
        plan
    };
    let layout = Layout::new(e, c, plan)?;
    let ledger = layout.ledger();
    let mut weights = ledger.zeros::<f64>(x.len());
    fill_token_weights(x, reduction, upstream, &mut weights);
    let log_threshold = filter.log_threshold();
    let (d, n, v) = (layout.d, layout.n, layout.v);

    let mut grad_e = DenseMatrix::zeros(d, n);
    let mut grad_c = DenseMatrix::zeros(d, v);
    let ge = SharedColumns::new(&mut grad_e);
    let gc = SharedColumns::new(&mut grad_c);

    // (a) softmax part
    let count = if plan.deterministic {
        let mut bufs = TileBuffers::new(&ledger, layout.n_block, layout.v_block, layout.d_block);
        let mut count = TileCount::default();
        for nb in 0..layout.token_blocks() {
            for &vb in &layout.order {
                let t = layout.tile(nb, vb);
                count.processed += 1;
                match softmax_tile(e, c, lse, &weights, log_threshold, &mut bufs, t) {
                    Some(cols) => {
                        let probs = &bufs.logits[..cols * t.vocab()];
                        accumulate_grad_e(c, probs, t, |k| ge.at(k, t.n0));
                        accumulate_grad_c(e, probs, t, |k| gc.at(k, t.v0));
                    }
                    None => count.skipped += 1,
                }
            }
        }
        count
    } else {
        par::softmax_part(e, c, lse, &weights, log_threshold, &layout, &ledger, ge, gc)
    };

    // (b) target part
    for i in 0..n {
        let w = weights[i] * (1.0 - beta);
        if w == 0.0 {
            continue;
        }
        let target = x.target(i);
        for k in 0..d {
            let ck = c.get(k, target);
            let ek = e.get(k, i);
            grad_e.as_mut_slice()[k * n + i] -= w * ck;
            grad_c.as_mut_slice()[k * v + target] -= w * ek;
        }
    }

    // (c) smoothing part: rank-one in both gradients
    if beta != 0.0 {
        let smooth = beta / v as f64;
        let mut sums = ledger.zeros::<f64>(2 * d);
        let (c_sum, e_sum) = sums.split_at_mut(d);
        for k in 0..d {
            c_sum[k] = c.row(k).iter().sum();
            e_sum[k] = e.row(k).iter().zip(weights.iter()).map(|(a, w)| a * w).sum();
        }
        for k in 0..d {
            let shift = smooth * c_sum[k];
            for (g, &w) in grad_e.row_mut(k).iter_mut().zip(weights.iter()) {
                *g -= w * shift;
            }
            let shift = smooth * e_sum[k];
            grad_c.row_mut(k).iter_mut().for_each(|g| *g -= shift);
        }
    }

    let stats = MemoryStats {
        peak_auxiliary_bytes: ledger.peak(),
        tiles_processed: count.processed,
        tiles_skipped_by_filter: count.skipped,
    };
    Ok((Gradients { grad_e, grad_c }, stats))
}

/// Orders vocabulary blocks by descending estimated mean logit: the mean
/// embedding column dotted with each classifier column, max-pooled per block.
/// Ties keep ascending block order. Only the visiting order changes.
pub fn plan_vocab_order(e_sample: &DenseMatrix, c: &DenseMatrix, plan: &BlockPlan) -> Result<BlockPlan> {
    if e_sample.rows() != c.rows() {
        return Err(Error::Shape(format!(
            "sample hidden size {} does not match classifier {}",
            e_sample.rows(),
            c.rows()
        )));
    }
    plan.validate(c.cols())?;
    let (d, v) = (c.rows(), c.cols());
    let n = e_sample.cols().max(1) as f64;
    let mean: Vec<f64> = (0..d).map(|k| e_sample.row(k).iter().sum::<f64>() / n).collect();
    let blocks = plan.vocab_blocks(v);
    let v_block = plan.v_block.min(v);
    let mut score = vec![f64::NEG_INFINITY; blocks];
    let mut column = vec![0.0; v_block];
    for (b, best) in score.iter_mut().enumerate() {
        let (v0, v1) = (b * v_block, ((b + 1) * v_block).min(v));
        let column = &mut column[..v1 - v0];
        column.fill(0.0);
        for (k, &m) in mean.iter().enumerate() {
            for (acc, &cw) in column.iter_mut().zip(&c.row(k)[v0..v1]) {
                *acc += m * cw;
            }
        }
        *best = column.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    }
    let mut order: Vec<usize> = (0..blocks).collect();
    order.sort_by(|&a, &b| score[b].total_cmp(&score[a]).then(a.cmp(&b)));
    Ok(plan.clone().with_vocab_order(order))
}

/// Forward then backward with the forward's LSE. Peaks are maxed, tile counts summed.
#[allow(clippy::too_many_arguments)]
pub fn loss_and_grad(
    e: &DenseMatrix,
    c: &DenseMatrix,
    x: &TokenSequence,
    beta: f64,
    plan: &BlockPlan,
    filter: FilterConfig,
    reduction: Reduction,
    upstream: f64,
) -> Result<(LossOutput, Gradients, MemoryStats)> {
    filter.validate()?;
    let (loss, fwd) = forward(e, c, x, beta, reduction, plan)?;
    let (grads, bwd) = backward(e, c, x, beta, reduction, plan, &loss.lse, upstream, filter)?;
    Ok((loss, grads, fwd.merge(bwd)))
}

#[cfg(feature = "parallel")]
mod par {
    use super::*;
    use rayon::prelude::*;

    pub(super) fn for_each_token_block<F>(lse: &mut [f64], o: &mut [f64], n_block: usize, run: F)
    where
        F: Fn((usize, (&mut [f64], &mut [f64]))) + Sync + Send,
    {
        lse.par_chunks_mut(n_block)
            .zip(o.par_chunks_mut(n_block))
            .enumerate()
            .for_each(run);
    }

    /// Two sweeps: token blocks own `grad_e` columns, then vocabulary blocks own
    /// `grad_c` columns. Tiles are recomputed in each sweep.
    #[allow(clippy::too_many_arguments)]
    pub(super) fn softmax_part(
        e: &DenseMatrix,
        c: &DenseMatrix,
        lse: &[f64],
        weights: &[f64],
        log_threshold: f64,
        layout: &Layout,
        ledger: &Ledger,
        ge: SharedColumns,
        gc: SharedColumns,
    ) -> TileCount {
        let counts: Vec<(usize, usize)> = (0..layout.token_blocks())
            .into_par_iter()
            .map(|nb| {
                let mut bufs = TileBuffers::new(ledger, layout.n_block, layout.v_block, layout.d_block);
                let (mut processed, mut skipped) = (0, 0);
                for &vb in &layout.order {
                    let t = layout.tile(nb, vb);
                    processed += 1;
                    match softmax_tile(e, c, lse, weights, log_threshold, &mut bufs, t) {
                        Some(cols) => {
                            accumulate_grad_e(c, &bufs.logits[..cols * t.vocab()], t, |k| ge.at(k, t.n0))
                        }
                        None => skipped += 1,
                    }
                }
                (processed, skipped)
            })
            .collect();

        layout.order.par_iter().for_each(|&vb| {
            let mut bufs = TileBuffers::new(ledger, layout.n_block, layout.v_block, layout.d_block);
            for nb in 0..layout.token_blocks() {
                let t = layout.tile(nb, vb);
                if let Some(cols) = softmax_tile(e, c, lse, weights, log_threshold, &mut bufs, t) {
                    accumulate_grad_c(e, &bufs.logits[..cols * t.vocab()], t, |k| gc.at(k, t.v0));
                }
            }
        });

        let (processed, skipped) = counts
            .into_iter()
            .fold((0, 0), |(p, s), (a, b)| (p + a, s + b));
        TileCount { processed, skipped }
    }
}

#[cfg(not(feature = "parallel"))]
mod par {
    use super::*;

    pub(super) fn for_each_token_block<F>(lse: &mut [f64], o: &mut [f64], n_block: usize, run: F)
    where
        F: Fn((usize, (&mut [f64], &mut [f64]))),
    {
        lse.chunks_mut(n_block).zip(o.chunks_mut(n_block)).enumerate().for_each(run);
    }

    #[allow(clippy::too_many_arguments)]
    pub(super) fn softmax_part(
        e: &DenseMatrix,
        c: &DenseMatrix,
        lse: &[f64],
        weights: &[f64],
        log_threshold: f64,
        layout: &Layout,
        ledger: &Ledger,
        ge: SharedColumns,
        gc: SharedColumns,
    ) -> TileCount {
        let mut bufs = TileBuffers::new(ledger, layout.n_block, layout.v_block, layout.d_block);
        let mut count = TileCount::default();
        for nb in 0..layout.token_blocks() {
            for &vb in &layout.order {
                let t = layout.tile(nb, vb);
                count.processed += 1;
                match softmax_tile(e, c, lse, weights, log_threshold, &mut bufs, t) {
                    Some(cols) => {
                        let probs = &bufs.logits[..cols * t.vocab()];
                        accumulate_grad_e(c, probs, t, |k| ge.at(k, t.n0));
                        accumulate_grad_c(e, probs, t, |k| gc.at(k, t.v0));
                    }
                    None => count.skipped += 1,
                }
            }
        }
        count
    }
}
