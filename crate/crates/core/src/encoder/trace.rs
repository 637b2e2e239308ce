use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::flow_mask::PartitionResult;
use crate::numerics::Tensor;

/// Per-layer bookkeeping of one encoder pass.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerRecord {
    pub layer: usize,
    /// Sequence length entering the layer.
    pub n_tokens: usize,
    /// Original grid index of every search token entering the layer.
    pub search_grid: Vec<usize>,
    /// Partition weights computed at this layer, aligned with `search_grid`.
    pub omega: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartitionRecord {
    pub layer: usize,
    /// Split over the search positions entering the layer.
    pub split: PartitionResult,
    /// Target tokens as original grid indices, ranked.
    pub xt_grid: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EliminationRecord {
    pub layer: usize,
    /// Dropped positions among the search tokens entering the layer.
    pub positions: Vec<usize>,
    /// Dropped tokens as original grid indices.
    pub grid: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionSnapshot {
    pub layer: usize,
    pub heads: Vec<Tensor>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EncoderTrace {
    pub layers: Vec<LayerRecord>,
    pub partitions: Vec<PartitionRecord>,
    pub eliminations: Vec<EliminationRecord>,
    pub attention: Vec<AttentionSnapshot>,
}

impl EncoderTrace {
    pub fn partition_at(&self, layer: usize) -> Result<&PartitionRecord> {
        self.partitions
            .iter()
            .find(|p| p.layer == layer)
            .ok_or_else(|| Error::Policy(format!("no recorded split at layer {layer}")))
    }

    pub fn elimination_at(&self, layer: usize) -> Result<&EliminationRecord> {
        self.eliminations
            .iter()
            .find(|e| e.layer == layer)
            .ok_or_else(|| Error::Policy(format!("no recorded elimination at layer {layer}")))
    }

    /// Partition weights of the last layer that computed them, scattered
    /// onto a search grid of `n_cells` cells (absent cells are 0).
    pub fn last_omega_grid(&self, n_cells: usize) -> Option<Vec<f64>> {
        let rec = self.layers.iter().rev().find(|r| r.omega.is_some())?;
        let mut out = vec![0.0; n_cells];
        for (&cell, &w) in rec.search_grid.iter().zip(rec.omega.as_ref()?) {
            if cell < n_cells {
                out[cell] = w;
            }
        }
        Some(out)
    }

    /// Plain-text dump, one record per line:
    /// `layer <l> tokens <n> search <n_x>`, `omega <l> <cell>:<w> ...`,
    /// `split <l> xt <cells...>` and `eliminate <l> <cells...>`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.layers {
            let _ = writeln!(
                s,
                "layer {} tokens {} search {}",
                r.layer,
                r.n_tokens,
                r.search_grid.len()
            );
            if let Some(w) = &r.omega {
                let _ = write!(s, "omega {}", r.layer);
                for (cell, v) in r.search_grid.iter().zip(w) {
                    let _ = write!(s, " {cell}:{v:.6e}");
                }
                s.push('\n');
            }
            for p in self.partitions.iter().filter(|p| p.layer == r.layer) {
                let _ = writeln!(s, "split {} xt {}", p.layer, join(&p.xt_grid));
            }
            for e in self.eliminations.iter().filter(|e| e.layer == r.layer) {
                let _ = writeln!(s, "eliminate {} {}", e.layer, join(&e.grid));
            }
        }
        s
    }
}

fn join(v: &[usize]) -> String {
    v.iter()
        .map(|i| i.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}
