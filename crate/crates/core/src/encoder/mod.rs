//! Masked multi-head attention, pre-norm encoder layers and the full
//! encoder pass with search-token partitioning and elimination.

mod trace;

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

pub use trace::{AttentionSnapshot, EliminationRecord, EncoderTrace, LayerRecord, PartitionRecord};

use crate::error::{Error, Result};
use crate::flow_mask::{
    build_mask, partition_weights, select_elimination, topk_partition, AttentionMask, FlowPolicy,
    PartitionMode, PartitionResult,
};
use crate::numerics::{kernels, Graph, ParamStore, Tensor, Var};
use crate::tokenization::TokenLayout;

pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub policy: FlowPolicy,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 768,
            heads: 12,
            ffn_dim: 3072,
            policy: FlowPolicy::default(),
        }
    }
}

impl EncoderConfig {
    pub fn layers(&self) -> usize {
        self.policy.layers
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self, n_x: usize) -> Result<()> {
        if self.heads == 0 || self.dim == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::config(
                "model.heads",
                format!("dim {} is not divisible by {} heads", self.dim, self.heads),
            ));
        }
        if self.ffn_dim == 0 {
            return Err(Error::config("model.ffn_dim", "must be positive"));
        }
        self.policy.validate(n_x)
    }

    /// Adds randomly initialised encoder parameters to `store`.
    pub fn register(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        let d = self.dim;
        let f = self.ffn_dim;
        let mut dense =
            |store: &mut ParamStore, name: String, rows: usize, cols: usize| -> Result<()> {
                let dist = Normal::new(0.0, 1.0 / (rows as f64).sqrt()).expect("positive std");
                let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
                store.insert(name, Tensor::new(vec![rows, cols], data)?)?;
                Ok(())
            };
        for l in 1..=self.layers() {
            let p = layer_prefix(l);
            store.insert(format!("{p}.ln1.g"), Tensor::full(&[d], 1.0))?;
            store.insert(format!("{p}.ln1.b"), Tensor::zeros(&[d]))?;
            for w in ["wq", "wk", "wv", "wo"] {
                dense(store, format!("{p}.attn.{w}"), d, d)?;
                let b = w.replace('w', "b");
                store.insert(format!("{p}.attn.{b}"), Tensor::zeros(&[d]))?;
            }
            store.insert(format!("{p}.ln2.g"), Tensor::full(&[d], 1.0))?;
            store.insert(format!("{p}.ln2.b"), Tensor::zeros(&[d]))?;
            dense(store, format!("{p}.ffn.w1"), d, f)?;
            store.insert(format!("{p}.ffn.b1"), Tensor::zeros(&[f]))?;
            dense(store, format!("{p}.ffn.w2"), f, d)?;
            store.insert(format!("{p}.ffn.b2"), Tensor::zeros(&[d]))?;
        }
        store.insert("enc.norm.g", Tensor::full(&[d], 1.0))?;
        store.insert("enc.norm.b", Tensor::zeros(&[d]))?;
        Ok(())
    }
}

pub fn layer_prefix(layer: usize) -> String {
    format!("enc.{layer}")
}

/// Values recorded by one attention block.
pub struct AttentionVars {
    pub out: Var,
    pub q: Var,
    pub k: Var,
    /// Post-softmax attention per head.
    pub probs: Vec<Var>,
}

/// Records masked multi-head attention over `x` using the `{prefix}.attn.*`
/// parameters.
pub fn mha_graph(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    x: Var,
    mask: &Arc<AttentionMask>,
    heads: usize,
) -> Result<AttentionVars> {
    let (n, d) = g.value(x).dims2()?;
    if heads == 0 || d % heads != 0 {
        return Err(Error::Shape(format!(
            "dim {d} not divisible by {heads} heads"
        )));
    }
    if mask.rows() != n || mask.cols() != n {
        return Err(Error::Shape(format!(
            "{}×{} mask for {n} tokens",
            mask.rows(),
            mask.cols()
        )));
    }
    let dk = d / heads;
    let proj = |g: &mut Graph, w: &str, b: &str| -> Result<Var> {
        let wv = g.param(store, &format!("{prefix}.attn.{w}"))?;
        let bv = g.param(store, &format!("{prefix}.attn.{b}"))?;
        g.linear(x, wv, bv)
    };
    let q = proj(g, "wq", "bq")?;
    let k = proj(g, "wk", "bk")?;
    let v = proj(g, "wv", "bv")?;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dk, dk)?;
        let kh = g.slice_cols(k, h * dk, dk)?;
        let vh = g.slice_cols(v, h * dk, dk)?;
        let s = g.matmul_nt(qh, kh)?;
        let s = g.scale(s, scale)?;
        let p = g.masked_softmax(s, mask)?;
        outs.push(g.matmul(p, vh)?);
        probs.push(p);
    }
    let cat = if heads == 1 {
        outs[0]
    } else {
        g.concat_cols(&outs)?
    };
    let wo = g.param(store, &format!("{prefix}.attn.wo"))?;
    let bo = g.param(store, &format!("{prefix}.attn.bo"))?;
    let out = g.linear(cat, wo, bo)?;
    Ok(AttentionVars { out, q, k, probs })
}

/// Output of one recorded encoder layer.
pub struct LayerVars {
    pub out: Var,
    pub attention: AttentionVars,
}

/// `x + MHA(LN(x))` followed by `· + FFN(LN(·))`.
pub fn layer_graph(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &EncoderConfig,
    layer: usize,
    x: Var,
    mask: &Arc<AttentionMask>,
) -> Result<LayerVars> {
    let p = layer_prefix(layer);
    let prm = |g: &mut Graph, name: &str| g.param(store, &format!("{p}.{name}"));
    let g1 = prm(g, "ln1.g")?;
    let b1 = prm(g, "ln1.b")?;
    let h = g.layer_norm(x, g1, b1, LN_EPS)?;
    let attention = mha_graph(g, store, &p, h, mask, cfg.heads)?;
    let x1 = g.add(x, attention.out)?;
    let g2 = prm(g, "ln2.g")?;
    let b2 = prm(g, "ln2.b")?;
    let h2 = g.layer_norm(x1, g2, b2, LN_EPS)?;
    let w1 = prm(g, "ffn.w1")?;
    let fb1 = prm(g, "ffn.b1")?;
    let w2 = prm(g, "ffn.w2")?;
    let fb2 = prm(g, "ffn.b2")?;
    let f = g.linear(h2, w1, fb1)?;
    let f = g.gelu(f)?;
    let f = g.linear(f, w2, fb2)?;
    let out = g.add(x1, f)?;
    Ok(LayerVars { out, attention })
}

/// Masked multi-head attention of layer `layer` applied to `tokens`
/// (no normalisation or residual).
pub fn mha_masked(
    tokens: &Tensor,
    mask: &AttentionMask,
    store: &ParamStore,
    layer: usize,
    heads: usize,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.input(tokens.clone())?;
    let a = mha_graph(
        &mut g,
        store,
        &layer_prefix(layer),
        x,
        &Arc::new(mask.clone()),
        heads,
    )?;
    Ok(g.value(a.out).clone())
}

/// One encoder layer applied to `tokens`.
pub fn encoder_layer(
    tokens: &Tensor,
    mask: &AttentionMask,
    store: &ParamStore,
    cfg: &EncoderConfig,
    layer: usize,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.input(tokens.clone())?;
    let l = layer_graph(&mut g, store, cfg, layer, x, &Arc::new(mask.clone()))?;
    Ok(g.value(l.out).clone())
}

/// Per-head softmax over the current search keys of the center-query
/// scores, for the Z and DT center sets.
fn center_attention(
    g: &Graph,
    q: Var,
    k: Var,
    layout: &TokenLayout,
    heads: usize,
) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    let (qv, kv) = (g.value(q), g.value(k));
    let d = qv.cols();
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let (zc, dtc) = layout.center_positions();
    let xs = layout.x_start();
    let n_x = layout.n_x;
    let rows_for = |centers: &[usize]| -> Result<Vec<Tensor>> {
        let mut per_head = Vec::with_capacity(heads);
        for h in 0..heads {
            let mut data = vec![0.0; centers.len() * n_x];
            let mut scores = vec![0.0; n_x];
            for (r, &c) in centers.iter().enumerate() {
                let qr = &qv.row(c)[h * dk..(h + 1) * dk];
                for (j, s) in scores.iter_mut().enumerate() {
                    let kr = &kv.row(xs + j)[h * dk..(h + 1) * dk];
                    *s = scale * qr.iter().zip(kr).map(|(a, b)| a * b).sum::<f64>();
                }
                kernels::softmax_slice(&scores, &mut data[r * n_x..(r + 1) * n_x]);
            }
            per_head.push(Tensor::new(vec![centers.len(), n_x], data)?);
        }
        Ok(per_head)
    };
    Ok((rows_for(&zc)?, rows_for(&dtc)?))
}

/// Knobs for one encoder pass.
#[derive(Clone, Copy, Debug, Default)]
pub struct EncodeOptions<'a> {
    /// Keep every layer's post-softmax attention in the trace.
    pub record_attention: bool,
    /// Reuse the split and elimination decisions of an earlier pass instead
    /// of recomputing them, so the computation is a fixed smooth function
    /// of the parameters.
    pub replay: Option<&'a EncoderTrace>,
}

pub struct EncodeOutput {
    /// Final-normalised search tokens, `[n_kept × d]`.
    pub search: Var,
    /// Original search-grid index of every kept token, in sequence order.
    pub kept: Vec<usize>,
    pub trace: EncoderTrace,
    /// Layout after the last layer.
    pub layout: TokenLayout,
}

/// Records the whole encoder over an assembled `[Z; DT; DB; X]` sequence.
pub fn encode_graph(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &EncoderConfig,
    tokens: Var,
    layout: &TokenLayout,
    opts: EncodeOptions<'_>,
) -> Result<EncodeOutput> {
    let policy = &cfg.policy;
    cfg.validate(layout.n_x)?;
    if g.value(tokens).rows() != layout.total() || g.value(tokens).cols() != cfg.dim {
        return Err(Error::Shape(format!(
            "encoder input {:?} does not match layout total {} and dim {}",
            g.value(tokens).shape(),
            layout.total(),
            cfg.dim
        )));
    }
    let partitions = policy.variant.uses_partition();
    let p_layer = policy.partition_layer;
    let mut layout = layout.clone();
    let mut kept: Vec<usize> = (0..layout.n_x).collect();
    let mut split: Option<PartitionResult> = None;
    let mut trace = EncoderTrace::default();
    let mut x = tokens;

    for l in 1..=policy.layers {
        let active = match policy.partition_mode {
            PartitionMode::Recompute => l > p_layer,
            PartitionMode::Once => l >= p_layer,
        };
        let mask_split = if partitions && active {
            split.as_ref()
        } else {
            None
        };
        let mask = Arc::new(build_mask(policy, &layout, l, mask_split)?);
        let lv = layer_graph(g, store, cfg, l, x, &mask)?;
        x = lv.out;

        let splits_here = partitions
            && match policy.partition_mode {
                PartitionMode::Recompute => l >= p_layer,
                PartitionMode::Once => l + 1 == p_layer,
            };
        let eliminate = policy.elimination_at(l);

        let mut record = LayerRecord {
            layer: l,
            n_tokens: layout.total(),
            search_grid: kept.clone(),
            omega: None,
        };

        let omega = if (splits_here || eliminate.is_some()) && opts.replay.is_none() {
            let (zr, dtr) =
                center_attention(g, lv.attention.q, lv.attention.k, &layout, cfg.heads)?;
            let w = partition_weights(&zr, &dtr, policy.aggregation)?;
            record.omega = Some(w.clone());
            Some(w)
        } else {
            None
        };

        if splits_here {
            let s = match opts.replay {
                Some(t) => t.partition_at(l)?.split.clone(),
                None => topk_partition(omega.as_ref().expect("weights computed"), policy.top_k)?,
            };
            trace.partitions.push(PartitionRecord {
                layer: l,
                xt_grid: s.xt.iter().map(|&i| kept[i]).collect(),
                split: s.clone(),
            });
            split = Some(s);
        }

        if let Some(count) = eliminate {
            let drop = match opts.replay {
                Some(t) => t.elimination_at(l)?.positions.clone(),
                None => {
                    let protected = split.as_ref().map_or(&[][..], |s| &s.xt[..]);
                    select_elimination(omega.as_ref().expect("weights computed"), count, protected)?
                }
            };
            let mut keep_rows: Vec<usize> = (0..layout.x_start()).collect();
            let xs = layout.x_start();
            let mut di = drop.iter().peekable();
            let mut new_kept = Vec::with_capacity(kept.len() - drop.len());
            for (pos, &grid) in kept.iter().enumerate() {
                if di.peek() == Some(&&pos) {
                    di.next();
                    continue;
                }
                keep_rows.push(xs + pos);
                new_kept.push(grid);
            }
            trace.eliminations.push(EliminationRecord {
                layer: l,
                grid: drop.iter().map(|&i| kept[i]).collect(),
                positions: drop.clone(),
            });
            if let Some(s) = &split {
                split = Some(s.after_removal(&drop)?);
            }
            x = g.select_rows(x, &keep_rows)?;
            kept = new_kept;
            layout = layout.with_search_count(kept.len());
        }

        if opts.record_attention {
            trace.attention.push(AttentionSnapshot {
                layer: l,
                heads: lv
                    .attention
                    .probs
                    .iter()
                    .map(|&p| g.value(p).clone())
                    .collect(),
            });
        }
        trace.layers.push(record);
    }

    let all: Vec<usize> = layout.x_range().collect();
    let xs = g.select_rows(x, &all)?;
    let ng = g.param(store, "enc.norm.g")?;
    let nb = g.param(store, "enc.norm.b")?;
    let search = g.layer_norm(xs, ng, nb, LN_EPS)?;
    Ok(EncodeOutput {
        search,
        kept,
        trace,
        layout,
    })
}

/// Runs the encoder on group tokens and returns the final search features,
/// their original grid indices and the trace.
pub fn encode(
    z: &Tensor,
    dt: &Tensor,
    db: &Tensor,
    x: &Tensor,
    store: &ParamStore,
    cfg: &EncoderConfig,
) -> Result<(Tensor, Vec<usize>, EncoderTrace)> {
    let (tokens, layout) = crate::tokenization::assemble(z, dt, db, x)?;
    let mut g = Graph::new();
    let t = g.input(tokens)?;
    let out = encode_graph(&mut g, store, cfg, t, &layout, EncodeOptions::default())?;
    Ok((g.value(out.search).clone(), out.kept, out.trace))
}
