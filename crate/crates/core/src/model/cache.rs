use crate::error::{contract, Result};
use crate::tensor::Matrix;

/// Per-layer, per-head cached keys (post-rotary) and values.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    n_heads: usize,
    head_dim: usize,
    keys: Vec<Vec<Matrix>>,
    values: Vec<Vec<Matrix>>,
    len: usize,
}

impl KvCache {
    pub fn new(n_layers: usize, n_heads: usize, head_dim: usize) -> Self {
        let empty = || {
            (0..n_layers)
                .map(|_| (0..n_heads).map(|_| Matrix::zeros(0, head_dim)).collect())
                .collect()
        };
        Self {
            n_heads,
            head_dim,
            keys: empty(),
            values: empty(),
            len: 0,
        }
    }

    /// Number of cached token rows.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn n_layers(&self) -> usize {
        self.keys.len()
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    /// Keys of 0-based `layer`, `head`.
    pub fn keys(&self, layer: usize, head: usize) -> &Matrix {
        &self.keys[layer][head]
    }

    pub fn values(&self, layer: usize, head: usize) -> &Matrix {
        &self.values[layer][head]
    }

    pub(crate) fn push(&mut self, layer: usize, head: usize, k: &[f64], v: &[f64]) {
        self.keys[layer][head].push_row(k);
        self.values[layer][head].push_row(v);
    }

    /// Recomputes `len` after every layer has received its rows.
    pub(crate) fn sync_len(&mut self) {
        self.len = self.keys[0][0].rows();
        debug_assert!(self
            .keys
            .iter()
            .chain(&self.values)
            .flatten()
            .all(|m| m.rows() == self.len));
    }

    /// Keeps the first `keep` rows of every layer and head.
    pub fn truncate(&mut self, keep: usize) -> Result<()> {
        if keep > self.len {
            return Err(contract(format!(
                "cannot keep {keep} rows of a {}-row cache",
                self.len
            )));
        }
        for m in self.keys.iter_mut().chain(self.values.iter_mut()).flatten() {
            m.truncate_rows(keep);
        }
        self.len = keep;
        Ok(())
    }

    /// Keeps the rows at the given ascending indices, compacting them in
    /// order. Used to commit a substituted expansion token whose row sits
    /// past the rejected proposal rows.
    pub fn retain_rows(&mut self, rows: &[usize]) -> Result<()> {
        if rows.windows(2).any(|w| w[0] >= w[1]) || rows.last().is_some_and(|&r| r >= self.len) {
            return Err(contract("retain_rows needs ascending in-range indices"));
        }
        for m in self.keys.iter_mut().chain(self.values.iter_mut()).flatten() {
            let mut kept = Matrix::zeros(0, self.head_dim);
            for &r in rows {
                kept.push_row(m.row(r));
            }
            *m = kept;
        }
        self.len = rows.len();
        Ok(())
    }
}
