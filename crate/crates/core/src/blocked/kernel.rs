//! Tile kernels shared by the forward and backward passes.

use super::memory::{Ledger, Scratch};
use crate::tensor::DenseMatrix;

/// Extents of one (token block, vocabulary block) tile.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tile {
    pub n0: usize,
    pub n1: usize,
    pub v0: usize,
    pub v1: usize,
}

impl Tile {
    #[inline]
    pub fn tokens(&self) -> usize {
        self.n1 - self.n0
    }

    #[inline]
    pub fn vocab(&self) -> usize {
        self.v1 - self.v0
    }
}

/// Per-worker buffers: the logit tile (vocab rows of token columns) and the
/// two packed hidden-dim chunks.
pub(crate) struct TileBuffers<'a> {
    pub logits: Scratch<'a, f64>,
    e_pack: Scratch<'a, f64>,
    c_pack: Scratch<'a, f64>,
    d_block: usize,
}

impl<'a> TileBuffers<'a> {
    pub fn new(ledger: &'a Ledger, n_block: usize, v_block: usize, d_block: usize) -> Self {
        Self {
            logits: ledger.zeros(n_block * v_block),
            e_pack: ledger.zeros(d_block * n_block),
            c_pack: ledger.zeros(d_block * v_block),
            d_block,
        }
    }

    /// Fills `logits[j * tokens + i] = Σ_k C[k, v0 + j] · E[k, n0 + i]`,
    /// summing over `k` in ascending order, one hidden-dim chunk at a time.
    pub fn compute(&mut self, e: &DenseMatrix, c: &DenseMatrix, t: Tile) {
        let (nb, vb) = (t.tokens(), t.vocab());
        let tile = &mut self.logits[..nb * vb];
        tile.fill(0.0);
        let d = e.rows();
        let mut d0 = 0;
        while d0 < d {
            let d1 = (d0 + self.d_block).min(d);
            let db = d1 - d0;
            // E chunk: db rows of nb; C chunk transposed: vb rows of db
            let e_pack = &mut self.e_pack[..db * nb];
            for k in 0..db {
                e_pack[k * nb..(k + 1) * nb].copy_from_slice(&e.row(d0 + k)[t.n0..t.n1]);
            }
            let c_pack = &mut self.c_pack[..db * vb];
            for k in 0..db {
                let c_row = &c.row(d0 + k)[t.v0..t.v1];
                for (j, &cw) in c_row.iter().enumerate() {
                    c_pack[j * db + k] = cw;
                }
            }
            for (j, out) in tile.chunks_exact_mut(nb).enumerate() {
                let weights = &c_pack[j * db..(j + 1) * db];
                for (k, &cw) in weights.iter().enumerate() {
                    let e_row = &e_pack[k * nb..(k + 1) * nb];
                    for (o, &x) in out.iter_mut().zip(e_row) {
                        *o += cw * x;
                    }
                }
            }
            d0 = d1;
        }
    }
}
