use crate::error::{Error, Result};

/// Default working-set budget for one logit tile plus its two input tiles.
pub const DEFAULT_BUDGET_BYTES: usize = 4 << 20;

const DEFAULT_N_BLOCK: usize = 256;
const DEFAULT_D_BLOCK: usize = 64;
const MAX_V_BLOCK: usize = 4096;
const WORD: usize = std::mem::size_of::<f64>();

/// Tile sizes for the blocked engine plus the order in which vocabulary
/// blocks are visited.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockPlan {
    pub n_block: usize,
    pub v_block: usize,
    pub d_block: usize,
    /// Permutation of `0..ceil(|V| / v_block)`; `None` means identity.
    pub vocab_order: Option<Vec<usize>>,
    /// Serial execution with a fixed visiting order.
    pub deterministic: bool,
}

/// Optional user-supplied tile sizes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BlockOverrides {
    pub n_block: Option<usize>,
    pub v_block: Option<usize>,
    pub d_block: Option<usize>,
}

impl BlockPlan {
    /// A plan with explicit sizes, identity order and deterministic execution.
    pub fn new(n_block: usize, v_block: usize, d_block: usize) -> Self {
        Self {
            n_block,
            v_block,
            d_block,
            vocab_order: None,
            deterministic: true,
        }
    }

    pub fn with_vocab_order(mut self, order: Vec<usize>) -> Self {
        self.vocab_order = Some(order);
        self
    }

    pub fn parallel(mut self) -> Self {
        self.deterministic = false;
        self
    }

    pub fn vocab_blocks(&self, v: usize) -> usize {
        v.div_ceil(self.v_block)
    }

    /// Vocabulary block visiting order.
    pub fn block_order(&self, v: usize) -> Vec<usize> {
        match &self.vocab_order {
            Some(order) => order.clone(),
            None => (0..self.vocab_blocks(v)).collect(),
        }
    }

    /// Bytes of one logit tile, two packed input tiles and four per-row
    /// accumulators, after clamping to the given extents.
    pub fn working_set_bytes(&self, n: usize, v: usize, d: usize) -> usize {
        let (nb, vb, db) = (self.n_block.min(n), self.v_block.min(v), self.d_block.min(d));
        (nb * vb + db * (nb + vb) + 4 * nb) * WORD
    }

    pub fn validate(&self, v: usize) -> Result<()> {
        if self.n_block == 0 || self.v_block == 0 || self.d_block == 0 {
            return Err(Error::InvalidPlan(format!(
                "block sizes must be >= 1, got ({}, {}, {})",
                self.n_block, self.v_block, self.d_block
            )));
        }
        if let Some(order) = &self.vocab_order {
            let blocks = self.vocab_blocks(v);
            let mut seen = vec![false; blocks];
            if order.len() != blocks {
                return Err(Error::InvalidPlan(format!(
                    "vocab_order has {} entries for {blocks} vocabulary blocks",
                    order.len()
                )));
            }
            for &b in order {
                if b >= blocks || std::mem::replace(&mut seen[b], true) {
                    return Err(Error::InvalidPlan(format!(
                        "vocab_order is not a permutation of 0..{blocks}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Plans tiles under the default 4 MiB budget.
pub fn plan_blocks(n: usize, v: usize, d: usize, overrides: BlockOverrides) -> Result<BlockPlan> {
    plan_blocks_with_budget(n, v, d, overrides, DEFAULT_BUDGET_BYTES)
}

/// Chooses `(N_B, V_B, D_B)` clamped to the extents.
///
/// Defaults: `D_B = min(D, 64)`, `N_B = min(N, 256)`, and `V_B` the largest
/// size (a multiple of 128 when at least 128, capped at 4096) whose working
/// set fits `budget_bytes`. `N_B` halves if even `V_B = 1` does not fit.
/// Overrides are clamped but never re-fitted to the budget.
pub fn plan_blocks_with_budget(
    n: usize,
    v: usize,
    d: usize,
    overrides: BlockOverrides,
    budget_bytes: usize,
) -> Result<BlockPlan> {
    if n == 0 || v == 0 || d == 0 {
        return Err(Error::InvalidPlan(format!("dimensions must be >= 1, got n={n} v={v} d={d}")));
    }
    for (name, o) in [
        ("n_block", overrides.n_block),
        ("v_block", overrides.v_block),
        ("d_block", overrides.d_block),
    ] {
        if o == Some(0) {
            return Err(Error::InvalidPlan(format!("{name} override must be >= 1")));
        }
    }

    let budget_words = budget_bytes / WORD;
    let d_block = overrides.d_block.unwrap_or(DEFAULT_D_BLOCK).min(d);
    let mut n_block = overrides.n_block.unwrap_or(DEFAULT_N_BLOCK).min(n);
    let v_block = match overrides.v_block {
        Some(vb) => vb.min(v),
        None => loop {
            // words = nb*vb + db*(nb+vb) + 4nb  =>  vb <= (budget - db*nb - 4nb) / (nb + db)
            let fixed = d_block * n_block + 4 * n_block;
            let fit = budget_words.saturating_sub(fixed) / (n_block + d_block);
            if fit >= 1 || n_block == 1 || overrides.n_block.is_some() {
                let fit = fit.clamp(1, MAX_V_BLOCK);
                let fit = if fit >= 128 { fit / 128 * 128 } else { fit };
                break fit.min(v);
            }
            n_block = n_block.div_ceil(2);
        },
    };
    let blocks = v.div_ceil(v_block);
    Ok(BlockPlan {
        n_block,
        v_block,
        d_block,
        vocab_order: Some((0..blocks).collect()),
        deterministic: true,
    })
}
