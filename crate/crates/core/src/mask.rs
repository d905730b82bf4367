//! Attention masks: causal self-attention, the block-wise cross-attention
//! mask used in draft training, and the expanded-proposal verification mask.
//!
//! Mask math is written with 1-based token indices. The only place that
//! converts to 0-based storage is [`AttentionMask::from_one_based`].

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allow: Vec<bool>,
}

impl AttentionMask {
    /// Builds a mask from a 0-based predicate.
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allow = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                allow.push(f(i, j));
            }
        }
        Self { rows, cols, allow }
    }

    /// Builds a mask from a predicate over 1-based (row, col) indices.
    pub fn from_one_based(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        Self::from_fn(rows, cols, |i, j| f(i + 1, j + 1))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// 0-based lookup.
    #[inline]
    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.allow[i * self.cols + j] = v;
    }

    pub fn count_allowed(&self) -> usize {
        self.allow.iter().filter(|a| **a).count()
    }

    /// Rows with no allowed column (0-based). These produce a zero
    /// attention output.
    pub fn bypass_rows(&self) -> Vec<usize> {
        (0..self.rows)
            .filter(|&i| (0..self.cols).all(|j| !self.allowed(i, j)))
            .collect()
    }

    /// Allowed columns of a row, 0-based.
    pub fn allowed_cols(&self, i: usize) -> Vec<usize> {
        (0..self.cols).filter(|&j| self.allowed(i, j)).collect()
    }

    /// Text grid, one line per row: `#` attends, `.` is masked.
    pub fn to_grid(&self) -> String {
        let mut s = String::with_capacity(self.rows * (self.cols + 1));
        for i in 0..self.rows {
            for j in 0..self.cols {
                s.push(if self.allowed(i, j) { '#' } else { '.' });
            }
            s.push('\n');
        }
        s
    }

    pub fn from_grid(grid: &str) -> Result<Self> {
        let lines: Vec<&str> = grid.lines().filter(|l| !l.is_empty()).collect();
        let cols = lines.first().map_or(0, |l| l.chars().count());
        let mut allow = Vec::with_capacity(lines.len() * cols);
        for line in &lines {
            if line.chars().count() != cols {
                return Err(contract("ragged mask grid"));
            }
            for c in line.chars() {
                allow.push(match c {
                    '#' => true,
                    '.' => false,
                    other => return Err(contract(format!("bad mask grid char {other:?}"))),
                });
            }
        }
        Ok(Self {
            rows: lines.len(),
            cols,
            allow,
        })
    }
}

impl fmt::Display for AttentionMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_grid())
    }
}

/// Splits a sequence into consecutive blocks of `block_length` tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockAssignment {
    pub block_length: usize,
}

impl BlockAssignment {
    pub fn new(block_length: usize) -> Result<Self> {
        if block_length == 0 {
            return Err(contract("block length must be at least 1"));
        }
        Ok(Self { block_length })
    }

    /// 1-based block of 1-based token `j`.
    #[inline]
    pub fn block(&self, j: usize) -> usize {
        debug_assert!(j >= 1);
        j.div_ceil(self.block_length)
    }
}

/// Maps each linearized-proposal slot to the proposal position it stands for.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionMap {
    gamma: usize,
    pos: Vec<usize>,
}

impl PositionMap {
    /// `expansion_positions` lists, in linearized order, the 1-based
    /// proposal position of every expansion token.
    pub fn new(gamma: usize, expansion_positions: &[usize]) -> Result<Self> {
        if gamma == 0 {
            return Err(contract("gamma must be at least 1"));
        }
        if let Some(&p) = expansion_positions.iter().find(|&&p| p == 0 || p > gamma) {
            return Err(contract(format!("expansion position {p} outside [1, {gamma}]")));
        }
        let mut pos: Vec<usize> = (1..=gamma).collect();
        pos.extend_from_slice(expansion_positions);
        Ok(Self { gamma, pos })
    }

    /// Position map for expansion sets of the given sizes, linearized in
    /// ascending position order.
    pub fn from_set_sizes(sizes: &[usize]) -> Result<Self> {
        let expansion: Vec<usize> = sizes
            .iter()
            .enumerate()
            .flat_map(|(i, &k)| std::iter::repeat_n(i + 1, k))
            .collect();
        Self::new(sizes.len(), &expansion)
    }

    pub fn gamma(&self) -> usize {
        self.gamma
    }

    pub fn beta(&self) -> usize {
        self.pos.len()
    }

    /// `pos(i)` for 1-based `i`.
    #[inline]
    pub fn pos(&self, i: usize) -> usize {
        self.pos[i - 1]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.pos
    }
}

/// `allow[i][j] = j <= i`.
pub fn causal_mask(n: usize) -> Result<AttentionMask> {
    if n == 0 {
        return Err(contract("causal mask needs n >= 1"));
    }
    Ok(AttentionMask::from_one_based(n, n, |i, j| j <= i))
}

/// Cross-attention training mask: the query for token `j` may see target
/// token `k` only when `block(j) > block(k)`.
///
/// `first_query` is the 1-based index of the first query token; rows run
/// over `first_query..first_query + n_queries`, columns over target tokens
/// `1..=kv_len`.
pub fn block_mask(
    first_query: usize,
    n_queries: usize,
    kv_len: usize,
    blocks: BlockAssignment,
) -> Result<AttentionMask> {
    if first_query == 0 {
        return Err(contract("query positions are 1-based"));
    }
    Ok(AttentionMask::from_one_based(n_queries, kv_len, |r, k| {
        let j = first_query + r - 1;
        blocks.block(j) > blocks.block(k)
    }))
}

/// Verification mask over a linearized expanded proposal: slot `i` sees
/// slot `j` iff (`j <= gamma` and `pos(i) > j`) or `i == j`.
pub fn cape_mask(gamma: usize, posmap: &PositionMap) -> Result<AttentionMask> {
    if posmap.gamma() != gamma {
        return Err(contract(format!(
            "position map built for gamma {} used with gamma {gamma}",
            posmap.gamma()
        )));
    }
    let beta = posmap.beta();
    Ok(AttentionMask::from_one_based(beta, beta, |i, j| {
        (j <= gamma && posmap.pos(i) > j) || i == j
    }))
}

#[derive(Debug, Clone)]
pub enum MaskKind<'a> {
    Causal,
    Block {
        first_query: usize,
        blocks: BlockAssignment,
    },
    Cape {
        gamma: usize,
        posmap: &'a PositionMap,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MaskReport {
    Pass,
    /// First disagreeing entry, 1-based.
    Mismatch {
        row: usize,
        col: usize,
        expected: bool,
    },
    ShapeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
}

impl MaskReport {
    pub fn passed(&self) -> bool {
        matches!(self, MaskReport::Pass)
    }
}

/// Re-derives every entry from the defining predicate, independently of the
/// constructors, and reports the first disagreement.
pub fn validate_mask_semantics(mask: &AttentionMask, kind: &MaskKind<'_>) -> MaskReport {
    let expected_shape = match kind {
        MaskKind::Causal => (mask.rows(), mask.rows()),
        MaskKind::Block { .. } => (mask.rows(), mask.cols()),
        MaskKind::Cape { posmap, .. } => (posmap.beta(), posmap.beta()),
    };
    if expected_shape != (mask.rows(), mask.cols()) {
        return MaskReport::ShapeMismatch {
            expected: expected_shape,
            found: (mask.rows(), mask.cols()),
        };
    }
    for row in 1..=mask.rows() {
        for col in 1..=mask.cols() {
            let expected = match kind {
                MaskKind::Causal => col <= row,
                MaskKind::Block {
                    first_query,
                    blocks,
                } => {
                    let l = blocks.block_length;
                    let j = first_query + row - 1;
                    // ceil via integer arithmetic, spelled differently from BlockAssignment::block
                    (j + l - 1) / l > (col + l - 1) / l
                }
                MaskKind::Cape { gamma, posmap } => {
                    row == col || (col <= *gamma && posmap.as_slice()[row - 1] > col)
                }
            };
            if mask.allowed(row - 1, col - 1) != expected {
                return MaskReport::Mismatch { row, col, expected };
            }
        }
    }
    MaskReport::Pass
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn causal_examples() {
        assert_eq!(causal_mask(1).unwrap().to_grid(), "#\n");
        let m = causal_mask(3).unwrap();
        assert_eq!(
            (0..3).map(|j| m.allowed(1, j)).collect::<Vec<_>>(),
            vec![true, true, false]
        );
        assert_eq!(causal_mask(8).unwrap().count_allowed(), 36);
        assert!(causal_mask(0).is_err());
    }

    #[test]
    fn block_examples() {
        let b = BlockAssignment::new(5).unwrap();
        let m = block_mask(7, 1, 10, b).unwrap();
        assert_eq!(m.allowed_cols(0), vec![0, 1, 2, 3, 4]);
        let m = block_mask(3, 1, 10, b).unwrap();
        assert_eq!(m.bypass_rows(), vec![0]);
        let m = block_mask(11, 1, 10, b).unwrap();
        assert_eq!(m.count_allowed(), 10);
    }

    #[test]
    fn block_index_is_ceiling() {
        let b = BlockAssignment::new(5).unwrap();
        let blocks: Vec<_> = (1..=11).map(|j| b.block(j)).collect();
        assert_eq!(blocks, vec![1, 1, 1, 1, 1, 2, 2, 2, 2, 2, 3]);
        assert!(BlockAssignment::new(0).is_err());
    }

    #[test]
    fn cape_examples() {
        // gamma 2, X_1 = {a}, X_2 = {b, c}
        let pm = PositionMap::new(2, &[1, 2, 2]).unwrap();
        assert_eq!(pm.as_slice(), &[1, 2, 1, 2, 2]);
        let m = cape_mask(2, &pm).unwrap();
        assert_eq!(m.allowed_cols(2), vec![2]);
        assert_eq!(m.allowed_cols(3), vec![0, 3]);
        assert_eq!(m.allowed_cols(4), vec![0, 4]);
        assert_eq!(m.allowed_cols(1), vec![0, 1]);
        let single = cape_mask(1, &PositionMap::new(1, &[]).unwrap()).unwrap();
        assert_eq!(single.to_grid(), "#\n");
        assert!(cape_mask(3, &pm).is_err());
        assert!(PositionMap::new(2, &[3]).is_err());
    }

    #[test]
    fn cape_golden_grid() {
        let pm = PositionMap::from_set_sizes(&[1, 2]).unwrap();
        let m = cape_mask(2, &pm).unwrap();
        let golden = "#....\n##...\n..#..\n#..#.\n#...#\n";
        assert_eq!(m.to_grid(), golden);
        assert_eq!(AttentionMask::from_grid(golden).unwrap(), m);
    }

    #[test]
    fn validator_catches_corruption() {
        let pm = PositionMap::from_set_sizes(&[1, 2]).unwrap();
        let mut m = cape_mask(2, &pm).unwrap();
        let kind = MaskKind::Cape {
            gamma: 2,
            posmap: &pm,
        };
        assert!(validate_mask_semantics(&m, &kind).passed());
        m.set(2, 0, true);
        assert_eq!(
            validate_mask_semantics(&m, &kind),
            MaskReport::Mismatch {
                row: 3,
                col: 1,
                expected: false
            }
        );
        let c = causal_mask(4).unwrap();
        assert!(validate_mask_semantics(&c, &MaskKind::Causal).passed());
    }
}
