//! Full-materialization oracle for smoothed cross-entropy.
//!
//! Everything here allocates the whole `|V| × N` logit matrix. It is the
//! correctness anchor for the blocked engine and the baseline for benches.

use serde::{Deserialize, Serialize};

use crate::error::{check_range, Result};
use crate::tensor::{check_shapes, DenseMatrix, TokenSequence};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Divide by the number of non-ignored tokens.
    Mean,
    #[default]
    Sum,
}

impl Reduction {
    pub fn as_str(self) -> &'static str {
        match self {
            Reduction::Mean => "mean",
            Reduction::Sum => "sum",
        }
    }
}

impl std::str::FromStr for Reduction {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mean" => Ok(Reduction::Mean),
            "sum" => Ok(Reduction::Sum),
            other => Err(format!("unknown reduction `{other}` (expected mean or sum)")),
        }
    }
}

/// Per-token log-sum-exp, smoothed target score and loss, plus the reduced total.
#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub lse: Vec<f64>,
    /// `(1-β)·z[x_i] + (β/|V|)·Σ_v z[v]`.
    pub o: Vec<f64>,
    /// `lse - o`, or 0 for ignored tokens.
    pub per_token_loss: Vec<f64>,
    pub total: f64,
    pub reduction: Reduction,
}

/// `∂L/∂E` (D×N) and `∂L/∂C` (D×|V|).
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub grad_e: DenseMatrix,
    pub grad_c: DenseMatrix,
}

impl Gradients {
    /// Worst relative Frobenius error of either gradient against `reference`.
    pub fn relative_error(&self, reference: &Gradients) -> f64 {
        self.grad_e
            .relative_error(&reference.grad_e)
            .max(self.grad_c.relative_error(&reference.grad_c))
    }

    pub fn is_finite(&self) -> bool {
        self.grad_e.is_finite() && self.grad_c.is_finite()
    }
}

pub(crate) fn check_beta(beta: f64) -> Result<()> {
    check_range("beta", beta, (0.0..=1.0).contains(&beta), "[0, 1]")
}

/// Per-token chain-rule weight: `upstream`, divided by the active count for
/// `mean`, and 0 for ignored tokens.
pub(crate) fn token_weights(x: &TokenSequence, reduction: Reduction, upstream: f64) -> Vec<f64> {
    let mut w = vec![0.0; x.len()];
    fill_token_weights(x, reduction, upstream, &mut w);
    w
}

pub(crate) fn fill_token_weights(x: &TokenSequence, reduction: Reduction, upstream: f64, out: &mut [f64]) {
    let scale = match reduction {
        Reduction::Sum => upstream,
        Reduction::Mean => {
            let active = x.active_count();
            if active == 0 {
                0.0
            } else {
                upstream / active as f64
            }
        }
    };
    for (i, w) in out.iter_mut().enumerate() {
        *w = if x.is_ignored(i) { 0.0 } else { scale };
    }
}

/// Assembles per-token losses and applies the reduction.
pub(crate) fn finish_loss(
    x: &TokenSequence,
    lse: Vec<f64>,
    o: Vec<f64>,
    reduction: Reduction,
) -> LossOutput {
    let per_token_loss: Vec<f64> = lse
        .iter()
        .zip(&o)
        .enumerate()
        .map(|(i, (l, s))| if x.is_ignored(i) { 0.0 } else { l - s })
        .collect();
    let sum: f64 = per_token_loss.iter().sum();
    let total = match reduction {
        Reduction::Sum => sum,
        Reduction::Mean => match x.active_count() {
            0 => 0.0,
            k => sum / k as f64,
        },
    };
    LossOutput {
        lse,
        o,
        per_token_loss,
        total,
        reduction,
    }
}

/// `Z = Cᵀ E` stored as |V| rows of N, accumulated over hidden dims in order.
pub fn logits(e: &DenseMatrix, c: &DenseMatrix) -> Vec<f64> {
    let (d, n, v) = (e.rows(), e.cols(), c.cols());
    let mut z = vec![0.0; v * n];
    for k in 0..d {
        let e_row = e.row(k);
        for (j, &cw) in c.row(k).iter().enumerate() {
            let z_row = &mut z[j * n..(j + 1) * n];
            for (zi, &ei) in z_row.iter_mut().zip(e_row) {
                *zi += cw * ei;
            }
        }
    }
    z
}

/// Column-wise log-sum-exp of a |V|×N row-major block.
fn column_lse(z: &[f64], v: usize, n: usize) -> Vec<f64> {
    let mut max = vec![f64::NEG_INFINITY; n];
    for row in z.chunks_exact(n).take(v) {
        for (m, &x) in max.iter_mut().zip(row) {
            *m = m.max(x);
        }
    }
    let mut sum = vec![0.0; n];
    for row in z.chunks_exact(n).take(v) {
        for ((s, &x), &m) in sum.iter_mut().zip(row).zip(&max) {
            *s += (x - m).exp();
        }
    }
    max.iter().zip(&sum).map(|(m, s)| m + s.ln()).collect()
}

/// Smoothed cross-entropy by full materialization.
pub fn naive_forward(
    e: &DenseMatrix,
    c: &DenseMatrix,
    x: &TokenSequence,
    beta: f64,
    reduction: Reduction,
) -> Result<LossOutput> {
    check_shapes(e, c, x)?;
    check_beta(beta)?;
    let (n, v) = (e.cols(), c.cols());
    let z = logits(e, c);
    let lse = column_lse(&z, v, n);

    let mut o: Vec<f64> = (0..n).map(|i| (1.0 - beta) * z[x.target(i) * n + i]).collect();
    if beta != 0.0 {
        let mut sums = vec![0.0; n];
        for row in z.chunks_exact(n) {
            for (s, &zi) in sums.iter_mut().zip(row) {
                *s += zi;
            }
        }
        let w = beta / v as f64;
        for (oi, s) in o.iter_mut().zip(&sums) {
            *oi += w * s;
        }
    }
    Ok(finish_loss(x, lse, o, reduction))
}

/// Analytic gradients by full materialization.
///
/// With `P = softmax(Z)` per token and
/// `A[v, i] = w_i · (P[v, i] - (1-β)·[v = x_i] - β/|V|)`,
/// returns `grad_e = C·A` and `grad_c = E·Aᵀ`.
pub fn naive_backward(
    e: &DenseMatrix,
    c: &DenseMatrix,
    x: &TokenSequence,
    beta: f64,
    reduction: Reduction,
    upstream: f64,
) -> Result<Gradients> {
    let a = adjusted_softmax(e, c, x, beta, reduction, upstream)?;
    let (d, n, v) = (e.rows(), e.cols(), c.cols());

    let mut grad_e = DenseMatrix::zeros(d, n);
    let mut grad_c = DenseMatrix::zeros(d, v);
    for k in 0..d {
        let c_row = c.row(k);
        let e_row = e.row(k);
        let ge = grad_e.row_mut(k);
        for (j, &cw) in c_row.iter().enumerate() {
            let a_row = &a[j * n..(j + 1) * n];
            for (g, &aij) in ge.iter_mut().zip(a_row) {
                *g += cw * aij;
            }
        }
        let gc = grad_c.row_mut(k);
        for (j, g) in gc.iter_mut().enumerate() {
            let a_row = &a[j * n..(j + 1) * n];
            *g = a_row.iter().zip(e_row).map(|(aij, ei)| aij * ei).sum();
        }
    }
    Ok(Gradients { grad_e, grad_c })
}

/// The weighted adjusted-softmax matrix `A` (|V| rows of N), exposed for
/// structural checks such as the per-token zero-sum property.
pub fn adjusted_softmax(
    e: &DenseMatrix,
    c: &DenseMatrix,
    x: &TokenSequence,
    beta: f64,
    reduction: Reduction,
    upstream: f64,
) -> Result<Vec<f64>> {
    check_shapes(e, c, x)?;
    check_beta(beta)?;
    let (n, v) = (e.cols(), c.cols());
    let mut z = logits(e, c);
    let lse = column_lse(&z, v, n);
    let w = token_weights(x, reduction, upstream);
    let smooth = beta / v as f64;
    for row in z.chunks_exact_mut(n) {
        for ((zi, l), wi) in row.iter_mut().zip(&lse).zip(&w) {
            *zi = wi * ((*zi - l).exp() - smooth);
        }
    }
    for i in 0..n {
        z[x.target(i) * n + i] -= w[i] * (1.0 - beta);
    }
    Ok(z)
}

/// Central finite differences of the reduced loss, one entry at a time.
pub fn finite_diff_grad(
    e: &DenseMatrix,
    c: &DenseMatrix,
    x: &TokenSequence,
    beta: f64,
    reduction: Reduction,
    h: f64,
) -> Result<Gradients> {
    check_range("h", h, h > 0.0, "> 0")?;
    check_shapes(e, c, x)?;
    check_beta(beta)?;
    let loss = |e: &DenseMatrix, c: &DenseMatrix| -> Result<f64> {
        Ok(naive_forward(e, c, x, beta, reduction)?.total)
    };

    let mut grad_e = DenseMatrix::zeros(e.rows(), e.cols());
    let mut probe = e.clone();
    for j in 0..probe.as_slice().len() {
        let orig = probe.as_slice()[j];
        probe.as_mut_slice()[j] = orig + h;
        let up = loss(&probe, c)?;
        probe.as_mut_slice()[j] = orig - h;
        let down = loss(&probe, c)?;
        probe.as_mut_slice()[j] = orig;
        grad_e.as_mut_slice()[j] = (up - down) / (2.0 * h);
    }

    let mut grad_c = DenseMatrix::zeros(c.rows(), c.cols());
    let mut probe = c.clone();
    for j in 0..probe.as_slice().len() {
        let orig = probe.as_slice()[j];
        probe.as_mut_slice()[j] = orig + h;
        let up = loss(e, &probe)?;
        probe.as_mut_slice()[j] = orig - h;
        let down = loss(e, &probe)?;
        probe.as_mut_slice()[j] = orig;
        grad_c.as_mut_slice()[j] = (up - down) / (2.0 * h);
    }
    Ok(Gradients { grad_e, grad_c })
}
