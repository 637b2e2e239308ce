//! Attention permission matrices for every flow variant, partition weights
//! over search tokens, top-K target-token selection and elimination picks.

mod mask;

use std::fmt;
use std::str::FromStr;

pub use mask::AttentionMask;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::tokenization::{Group, TokenLayout};

/// Flow variant. Each one fixes which group-to-group interactions exist.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Free bidirectional flow, template and search tokens only.
    Baseline,
    /// Template queries may not read search keys.
    A,
    /// Adds dynamic-target tokens; template and dynamic-target queries may
    /// not read search keys.
    B,
    /// Adds dynamic-background tokens; early scheme at every layer.
    C,
    /// Early scheme, then deep scheme with target/non-target search split.
    D,
    /// Like `D` but dynamic-background queries may also read non-target
    /// search keys in deep layers.
    E,
    /// `D` plus search-token elimination.
    Full,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Baseline,
        Variant::A,
        Variant::B,
        Variant::C,
        Variant::D,
        Variant::E,
        Variant::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::A => "A",
            Variant::B => "B",
            Variant::C => "C",
            Variant::D => "D",
            Variant::E => "E",
            Variant::Full => "full",
        }
    }

    pub fn uses_dynamic_target(self) -> bool {
        !matches!(self, Variant::Baseline | Variant::A)
    }

    pub fn uses_dynamic_background(self) -> bool {
        !matches!(self, Variant::Baseline | Variant::A | Variant::B)
    }

    /// Whether deep layers split search tokens into target and non-target.
    pub fn uses_partition(self) -> bool {
        matches!(self, Variant::D | Variant::E | Variant::Full)
    }

    /// Elimination schedule applied when none is configured explicitly.
    pub fn default_elimination(self) -> Vec<Elimination> {
        match self {
            Variant::Full => vec![Elimination {
                layer: 7,
                count: 64,
            }],
            _ => Vec::new(),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "baseline" => Ok(Variant::Baseline),
            "A" | "a" => Ok(Variant::A),
            "B" | "b" => Ok(Variant::B),
            "C" | "c" => Ok(Variant::C),
            "D" | "d" => Ok(Variant::D),
            "E" | "e" => Ok(Variant::E),
            "full" => Ok(Variant::Full),
            other => Err(Error::Policy(format!(
                "unknown variant `{other}` (expected baseline|A|B|C|D|E|full)"
            ))),
        }
    }
}

/// How partition weights are aggregated over heads and center queries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregation {
    Mean,
    Max,
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "mean" => Ok(Aggregation::Mean),
            "max" => Ok(Aggregation::Max),
            other => Err(Error::Policy(format!("unknown aggregation `{other}`"))),
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregation::Mean => "mean",
            Aggregation::Max => "max",
        })
    }
}

/// When the search split is computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PartitionMode {
    /// The partition layer runs with the early mask, splits from its own
    /// attention, and every later layer re-splits from its attention.
    Recompute,
    /// Split once from the attention of the layer before the partition
    /// layer and keep it fixed.
    Once,
}

impl FromStr for PartitionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "recompute" => Ok(PartitionMode::Recompute),
            "once" => Ok(PartitionMode::Once),
            other => Err(Error::Policy(format!("unknown partition mode `{other}`"))),
        }
    }
}

impl fmt::Display for PartitionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PartitionMode::Recompute => "recompute",
            PartitionMode::Once => "once",
        })
    }
}

/// Removal of `count` search tokens after layer `layer` (1-based).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Elimination {
    pub layer: usize,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowPolicy {
    pub variant: Variant,
    /// 1-based index of the first layer that splits search tokens.
    pub partition_layer: usize,
    pub top_k: usize,
    pub elimination: Vec<Elimination>,
    pub layers: usize,
    pub partition_mode: PartitionMode,
    pub aggregation: Aggregation,
}

impl Default for FlowPolicy {
    fn default() -> Self {
        Self::new(Variant::Full)
    }
}

impl FlowPolicy {
    /// Default depth, partition layer and K for a variant.
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            partition_layer: 10,
            top_k: 64,
            elimination: variant.default_elimination(),
            layers: 12,
            partition_mode: PartitionMode::Recompute,
            aggregation: Aggregation::Mean,
        }
    }

    /// Checks the policy against the initial search-token count.
    pub fn validate(&self, n_x: usize) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Policy("encoder needs at least one layer".into()));
        }
        if self.partition_layer == 0 || self.partition_layer > self.layers {
            return Err(Error::Policy(format!(
                "partition layer {} outside [1, {}]",
                self.partition_layer, self.layers
            )));
        }
        if self.variant.uses_partition()
            && self.partition_mode == PartitionMode::Once
            && self.partition_layer < 2
        {
            return Err(Error::Policy(
                "one-shot partition needs a layer before the partition layer".into(),
            ));
        }
        let total: usize = self.elimination.iter().map(|e| e.count).sum();
        if total >= n_x && total > 0 {
            return Err(Error::Policy(format!(
                "eliminating {total} of {n_x} search tokens leaves none"
            )));
        }
        let mut remaining = n_x;
        let mut last_layer = 0;
        for e in &self.elimination {
            if e.layer == 0 || e.layer > self.layers {
                return Err(Error::Policy(format!(
                    "elimination layer {} out of range",
                    e.layer
                )));
            }
            if e.layer <= last_layer {
                return Err(Error::Policy("elimination layers must increase".into()));
            }
            last_layer = e.layer;
            remaining -= e.count;
            if self.variant.uses_partition()
                && e.layer >= self.partition_layer
                && remaining < self.top_k
            {
                return Err(Error::Policy(format!(
                    "elimination at layer {} leaves {remaining} search tokens, below K = {}",
                    e.layer, self.top_k
                )));
            }
        }
        if self.variant.uses_partition()
            && self.top_k > self.search_count_at(n_x, self.partition_layer)
        {
            return Err(Error::Policy(format!(
                "K = {} exceeds the search tokens available at the partition layer",
                self.top_k
            )));
        }
        Ok(())
    }

    /// Search tokens entering layer `layer` given `n_x` at the input.
    pub fn search_count_at(&self, n_x: usize, layer: usize) -> usize {
        let dropped: usize = self
            .elimination
            .iter()
            .filter(|e| e.layer < layer)
            .map(|e| e.count)
            .sum();
        n_x.saturating_sub(dropped)
    }

    /// Elimination count scheduled right after `layer`, if any.
    pub fn elimination_at(&self, layer: usize) -> Option<usize> {
        self.elimination
            .iter()
            .find(|e| e.layer == layer)
            .map(|e| e.count)
    }
}

/// Split of the current search tokens into target (`xt`) and non-target
/// (`xb`) sets. Indices are positions in the current search-token list.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionResult {
    /// Target search tokens, ranked by descending weight.
    pub xt: Vec<usize>,
    /// Remaining search tokens in ascending order.
    pub xb: Vec<usize>,
    pub omega: Vec<f64>,
}

impl PartitionResult {
    pub fn is_target(&self, pos: usize) -> bool {
        self.xt.contains(&pos)
    }

    /// Membership flags over the current search tokens.
    pub fn target_flags(&self) -> Vec<bool> {
        let mut flags = vec![false; self.xt.len() + self.xb.len()];
        for &i in &self.xt {
            flags[i] = true;
        }
        flags
    }

    /// Re-expresses the split after search positions `dropped` (ascending)
    /// were removed. Dropped positions must all be non-target.
    pub fn after_removal(&self, dropped: &[usize]) -> Result<Self> {
        let n = self.omega.len();
        let mut new_pos = vec![usize::MAX; n];
        let mut next = 0;
        let mut d = dropped.iter().peekable();
        for (i, slot) in new_pos.iter_mut().enumerate() {
            if d.peek() == Some(&&i) {
                d.next();
                continue;
            }
            *slot = next;
            next += 1;
        }
        let mut xt = Vec::with_capacity(self.xt.len());
        for &i in &self.xt {
            if new_pos[i] == usize::MAX {
                return Err(Error::Policy(format!(
                    "target search token {i} was eliminated"
                )));
            }
            xt.push(new_pos[i]);
        }
        let xb = self
            .xb
            .iter()
            .filter(|&&i| new_pos[i] != usize::MAX)
            .map(|&i| new_pos[i])
            .collect();
        let omega = (0..n)
            .filter(|&i| new_pos[i] != usize::MAX)
            .map(|i| self.omega[i])
            .collect();
        Ok(Self { xt, xb, omega })
    }
}

/// Which group interactions a layer allows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Free,
    /// Template queries blocked from search keys.
    TemplateShielded,
    /// Template and dynamic-target queries blocked from search keys.
    TemplatesShielded,
    Early,
    Deep {
        background_reads_non_target: bool,
    },
}

impl Stage {
    /// Whether `q`-group queries may read `k`-group keys. Search groups are
    /// `X` before partitioning and `XT`/`XB` after.
    pub fn allows(self, q: Group, k: Group) -> bool {
        use Group::*;
        let k_search = matches!(k, X | XT | XB);
        match self {
            Stage::Free => true,
            Stage::TemplateShielded => !(q == Z && k_search),
            Stage::TemplatesShielded => !(matches!(q, Z | DT) && k_search),
            Stage::Early => match q {
                Z => matches!(k, Z | DT),
                DT | DB => matches!(k, Z | DT | DB),
                X | XT | XB => true,
            },
            Stage::Deep {
                background_reads_non_target,
            } => match q {
                Z => matches!(k, Z | DT | XT),
                DT => matches!(k, Z | DT | DB | XT),
                DB => matches!(k, Z | DT | DB) || (background_reads_non_target && k == XB),
                X | XT | XB => true,
            },
        }
    }
}

/// Stage used at `layer` (1-based) given whether a split is available.
pub fn stage_for(
    policy: &FlowPolicy,
    layer: usize,
    partition: Option<&PartitionResult>,
) -> Result<Stage> {
    if layer == 0 || layer > policy.layers {
        return Err(Error::Policy(format!(
            "layer {layer} outside [1, {}]",
            policy.layers
        )));
    }
    Ok(match policy.variant {
        Variant::Baseline => Stage::Free,
        Variant::A => Stage::TemplateShielded,
        Variant::B => Stage::TemplatesShielded,
        Variant::C => Stage::Early,
        Variant::D | Variant::E | Variant::Full => match partition {
            Some(_) if layer < policy.partition_layer => {
                return Err(Error::Policy(format!(
                    "split supplied at layer {layer}, before partition layer {}",
                    policy.partition_layer
                )))
            }
            Some(_) => Stage::Deep {
                background_reads_non_target: policy.variant == Variant::E,
            },
            None if layer > policy.partition_layer => {
                return Err(Error::Policy(format!(
                    "layer {layer} needs a search split but none was supplied"
                )))
            }
            None => Stage::Early,
        },
    })
}

/// Query×key mask over the token sequence `[Z; DT; DB; X]` for one layer.
///
/// Partitioning variants use the deep scheme when a split is supplied (at or
/// after the partition layer) and the early scheme otherwise; the partition
/// layer itself may run either way. Non-partitioning variants ignore
/// `partition`.
pub fn build_mask(
    policy: &FlowPolicy,
    layout: &TokenLayout,
    layer: usize,
    partition: Option<&PartitionResult>,
) -> Result<AttentionMask> {
    let partition = partition.filter(|_| policy.variant.uses_partition());
    let stage = stage_for(policy, layer, partition)?;
    let groups = match partition {
        Some(p) => {
            if p.xt.len() + p.xb.len() != layout.n_x {
                return Err(Error::Policy(format!(
                    "split covers {} search tokens, layout has {}",
                    p.xt.len() + p.xb.len(),
                    layout.n_x
                )));
            }
            layout.groups_with_split(&p.target_flags())
        }
        None => layout.groups(),
    };
    let mask = AttentionMask::from_fn(groups.len(), groups.len(), |q, k| {
        stage.allows(groups[q], groups[k])
    });
    mask.ensure_viable()?;
    Ok(mask)
}

/// Mask of every layer, for inspection. Layers that need a token split use
/// a fixed one marking the first `K` current search tokens as target.
pub fn layer_masks(policy: &FlowPolicy, layout: &TokenLayout) -> Result<Vec<AttentionMask>> {
    policy.validate(layout.n_x)?;
    (1..=policy.layers)
        .map(|l| {
            let n = policy.search_count_at(layout.n_x, l);
            let current = layout.with_search_count(n);
            let needs_split = policy.variant.uses_partition()
                && match policy.partition_mode {
                    PartitionMode::Recompute => l > policy.partition_layer,
                    PartitionMode::Once => l >= policy.partition_layer,
                };
            let split = if needs_split {
                let omega: Vec<f64> = (0..n).map(|i| -(i as f64)).collect();
                Some(topk_partition(&omega, policy.top_k)?)
            } else {
                None
            };
            build_mask(policy, &current, l, split.as_ref())
        })
        .collect()
}

/// Partition weights ω over the current search tokens.
///
/// `z_rows` and `dt_rows` hold, per head, the softmax over search keys of
/// the center-query scores (`[n_center × n_x]`). Each group's rows are
/// aggregated over heads and center queries and the two results are added.
/// An absent dynamic target (`dt_rows` empty) contributes nothing.
pub fn partition_weights(
    z_rows: &[Tensor],
    dt_rows: &[Tensor],
    aggregation: Aggregation,
) -> Result<Vec<f64>> {
    let n_x = match z_rows.first() {
        Some(t) if t.rows() > 0 => t.cols(),
        _ => return Err(Error::Policy("empty template center set".into())),
    };
    let mut omega = aggregate_rows(z_rows, n_x, aggregation)?;
    if dt_rows.iter().any(|t| t.rows() > 0) {
        let dt = aggregate_rows(dt_rows, n_x, aggregation)?;
        for (o, v) in omega.iter_mut().zip(dt) {
            *o += v;
        }
    }
    Ok(omega)
}

fn aggregate_rows(heads: &[Tensor], n_x: usize, aggregation: Aggregation) -> Result<Vec<f64>> {
    let mut acc = vec![
        match aggregation {
            Aggregation::Mean => 0.0,
            Aggregation::Max => f64::NEG_INFINITY,
        };
        n_x
    ];
    let mut count = 0usize;
    for t in heads {
        let (rows, cols) = t.dims2()?;
        if cols != n_x {
            return Err(Error::Shape(format!(
                "attention rows have {cols} keys, expected {n_x}"
            )));
        }
        for r in 0..rows {
            for (a, v) in acc.iter_mut().zip(t.row(r)) {
                match aggregation {
                    Aggregation::Mean => *a += v,
                    Aggregation::Max => *a = a.max(*v),
                }
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Policy("empty center set".into()));
    }
    if aggregation == Aggregation::Mean {
        acc.iter_mut().for_each(|a| *a /= count as f64);
    }
    Ok(acc)
}

/// Top-K split by descending ω, ties going to the lower index.
pub fn topk_partition(omega: &[f64], k: usize) -> Result<PartitionResult> {
    if k > omega.len() {
        return Err(Error::Policy(format!(
            "K = {k} exceeds {} search tokens",
            omega.len()
        )));
    }
    let mut order: Vec<usize> = (0..omega.len()).collect();
    order.sort_by(|&a, &b| omega[b].total_cmp(&omega[a]).then(a.cmp(&b)));
    let xt = order[..k].to_vec();
    let mut xb = order[k..].to_vec();
    xb.sort_unstable();
    Ok(PartitionResult {
        xt,
        xb,
        omega: omega.to_vec(),
    })
}

/// The `count` lowest-ω positions, ties dropping the higher index first,
/// returned ascending. Positions in `protected` are never chosen.
pub fn select_elimination(omega: &[f64], count: usize, protected: &[usize]) -> Result<Vec<usize>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    if count >= omega.len() {
        return Err(Error::Policy(format!(
            "cannot eliminate {count} of {} search tokens",
            omega.len()
        )));
    }
    let mut shielded = vec![false; omega.len()];
    for &p in protected {
        if p >= omega.len() {
            return Err(Error::Policy(format!(
                "protected position {p} out of range"
            )));
        }
        shielded[p] = true;
    }
    let mut candidates: Vec<usize> = (0..omega.len()).filter(|&i| !shielded[i]).collect();
    if count > candidates.len() {
        return Err(Error::Policy(format!(
            "only {} non-target search tokens available to eliminate {count}",
            candidates.len()
        )));
    }
    candidates.sort_by(|&a, &b| omega[a].total_cmp(&omega[b]).then(b.cmp(&a)));
    let mut drop = candidates[..count].to_vec();
    drop.sort_unstable();
    Ok(drop)
}
