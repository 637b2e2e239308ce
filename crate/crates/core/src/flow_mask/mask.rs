use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Query×key permission matrix. `true` lets information flow from the key
/// token into the query token; `false` forces the score to −∞.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allow: Vec<bool>,
}

impl AttentionMask {
    pub fn all(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            allow: vec![true; rows * cols],
        }
    }

    pub fn none(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            allow: vec![false; rows * cols],
        }
    }

    /// Only the diagonal is allowed.
    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| i == j)
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allow = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                allow.push(f(i, j));
            }
        }
        Self { rows, cols, allow }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, q: usize, k: usize) -> bool {
        self.allow[q * self.cols + k]
    }

    pub fn set(&mut self, q: usize, k: usize, allowed: bool) {
        self.allow[q * self.cols + k] = allowed;
    }

    pub fn row(&self, q: usize) -> &[bool] {
        &self.allow[q * self.cols..(q + 1) * self.cols]
    }

    pub fn allowed_count(&self) -> usize {
        self.allow.iter().filter(|a| **a).count()
    }

    /// First row with no allowed key, if any.
    pub fn first_blocked_row(&self) -> Option<usize> {
        (0..self.rows).find(|&r| !self.row(r).iter().any(|a| *a))
    }

    pub fn ensure_viable(&self) -> Result<()> {
        match self.first_blocked_row() {
            Some(r) => Err(Error::Policy(format!(
                "attention mask row {r} blocks every key"
            ))),
            None => Ok(()),
        }
    }

    /// Restricts the mask to the given query rows and key columns.
    pub fn submask(&self, rows: &[usize], cols: &[usize]) -> Self {
        Self::from_fn(rows.len(), cols.len(), |i, j| self.get(rows[i], cols[j]))
    }

    /// One line per query row, `1` for allowed and `0` for blocked.
    pub fn to_grid_text(&self) -> String {
        self.to_string()
    }

    pub fn from_grid_text(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        let rows = lines.len();
        let cols = lines.first().map_or(0, |l| l.trim().len());
        let mut allow = Vec::with_capacity(rows * cols);
        for (i, line) in lines.iter().enumerate() {
            let line = line.trim();
            if line.len() != cols {
                return Err(Error::Input(format!("mask grid line {i} has ragged width")));
            }
            for ch in line.chars() {
                match ch {
                    '1' => allow.push(true),
                    '0' => allow.push(false),
                    other => return Err(Error::Input(format!("unexpected mask symbol {other:?}"))),
                }
            }
        }
        Ok(Self { rows, cols, allow })
    }

    /// Cells where the two masks disagree, as `(query, key)` pairs.
    pub fn diff(&self, other: &AttentionMask) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for q in 0..self.rows.min(other.rows) {
            for k in 0..self.cols.min(other.cols) {
                if self.get(q, k) != other.get(q, k) {
                    out.push((q, k));
                }
            }
        }
        out
    }
}

impl std::fmt::Display for AttentionMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for r in 0..self.rows {
            for &a in self.row(r) {
                f.write_char(if a { '1' } else { '0' })?;
            }
            f.write_char('\n')?;
        }
        Ok(())
    }
}
