//! Dense storage, token sequences, block plans and instance generation.

mod format;
mod plan;
mod rng;

pub use format::{load_matrix, load_tokens, save_matrix, save_matrix_as, save_tokens, Dtype};
pub use plan::{plan_blocks, plan_blocks_with_budget, BlockOverrides, BlockPlan, DEFAULT_BUDGET_BYTES};
pub use rng::{inverse_normal_cdf, random_instance, zipf_instance, CounterRng, Instance};

use crate::error::{Error, Result};

/// Row-major matrix of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    /// Builds a matrix from row-major data, rejecting length mismatches and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows.saturating_mul(cols),
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::Domain(format!("non-finite entry at index {i}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Copies column `c` out (columns are strided in row-major storage).
    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// `‖self − reference‖_F / ‖reference‖_F`, falling back to the absolute
    /// difference norm when the reference is zero.
    pub fn relative_error(&self, reference: &DenseMatrix) -> f64 {
        assert_eq!(
            (self.rows, self.cols),
            (reference.rows, reference.cols),
            "relative_error on mismatched shapes"
        );
        let diff = self
            .data
            .iter()
            .zip(&reference.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let norm = reference.frobenius_norm();
        if norm == 0.0 {
            diff
        } else {
            diff / norm
        }
    }

    pub fn max_abs_diff(&self, other: &DenseMatrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Target vocabulary indices, one per token, with an optional ignore mask.
///
/// Ignored tokens contribute neither loss nor gradient and are excluded from
/// `mean` denominators.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    targets: Vec<u32>,
    ignore: Option<Vec<bool>>,
}

impl TokenSequence {
    pub fn new(targets: Vec<u32>) -> Self {
        Self {
            targets,
            ignore: None,
        }
    }

    pub fn with_ignore_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.targets.len() {
            return Err(Error::Shape(format!(
                "ignore mask has {} entries for {} tokens",
                mask.len(),
                self.targets.len()
            )));
        }
        self.ignore = Some(mask);
        Ok(self)
    }

    /// Masks the first `m` tokens, e.g. an instruction prefix.
    pub fn ignore_prefix(self, m: usize) -> Result<Self> {
        let n = self.targets.len();
        let mask = (0..n).map(|i| i < m).collect();
        self.with_ignore_mask(mask)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    #[inline]
    pub fn targets(&self) -> &[u32] {
        &self.targets
    }

    #[inline]
    pub fn target(&self, i: usize) -> usize {
        self.targets[i] as usize
    }

    #[inline]
    pub fn is_ignored(&self, i: usize) -> bool {
        self.ignore.as_ref().is_some_and(|m| m[i])
    }

    pub fn ignore_mask(&self) -> Option<&[bool]> {
        self.ignore.as_deref()
    }

    /// Number of tokens that are not ignored.
    pub fn active_count(&self) -> usize {
        match &self.ignore {
            Some(m) => m.iter().filter(|&&skip| !skip).count(),
            None => self.targets.len(),
        }
    }

    /// Checks every target against the vocabulary size.
    pub fn validate(&self, vocab: usize) -> Result<()> {
        match self.targets.iter().position(|&t| t as usize >= vocab) {
            Some(i) => Err(Error::Shape(format!(
                "target {} at position {i} is outside vocabulary of size {vocab}",
                self.targets[i]
            ))),
            None => Ok(()),
        }
    }
}

/// Validates that `E` (D×N), `C` (D×|V|) and `x` (N) agree.
pub(crate) fn check_shapes(e: &DenseMatrix, c: &DenseMatrix, x: &TokenSequence) -> Result<()> {
    if e.rows() != c.rows() {
        return Err(Error::Shape(format!(
            "embeddings have hidden size {} but classifier has {}",
            e.rows(),
            c.rows()
        )));
    }
    if e.cols() != x.len() {
        return Err(Error::Shape(format!(
            "{} embedding columns for {} targets",
            e.cols(),
            x.len()
        )));
    }
    if c.cols() == 0 {
        return Err(Error::Shape("empty vocabulary".into()));
    }
    x.validate(c.cols())
}
