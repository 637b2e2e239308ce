//! The complete network: embeddings, encoder and head wired together, with
//! parameter initialisation and the training loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{encode_graph, EncodeOptions, EncoderConfig, EncoderTrace};
use crate::error::{Error, Result};
use crate::flow_mask::{Elimination, FlowPolicy, PartitionMode, Variant};
use crate::geometry::CenterBox;
use crate::head::{
    self, center_cell, decode_box, gaussian_target, predict_graph, reassemble_graph, HeadVars,
    LossWeights, ScoreMaps,
};
use crate::numerics::{Graph, ParamStore, Tensor, Var};
use crate::tokenization::{
    dynamic_split, embed_graph, EmbeddingParams, Geometry, GridRole, TokenLayout,
};

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ModelConfig {
    pub geometry: Geometry,
    pub encoder: EncoderConfig,
}

impl ModelConfig {
    /// Desk-scale model: d = 64, 4 heads, 4 layers, split from layer 3 with
    /// K = 16 over the 8×8 search grid.
    ///
    /// The split is taken once, from layer 2, so layers 3 and 4 both run
    /// the deep scheme. Re-splitting at layer 3 would leave only the last
    /// layer deep, and the deep scheme changes template rows only, which
    /// the head never reads; the split variants would then train exactly
    /// like `C`.
    pub fn toy(variant: Variant) -> Self {
        let mut policy = FlowPolicy::new(variant);
        policy.layers = 4;
        policy.partition_layer = 3;
        policy.partition_mode = PartitionMode::Once;
        policy.top_k = 16;
        policy.elimination = match variant {
            Variant::Full => vec![Elimination {
                layer: 2,
                count: 16,
            }],
            _ => Vec::new(),
        };
        Self {
            geometry: Geometry::toy(),
            encoder: EncoderConfig {
                dim: 64,
                heads: 4,
                ffn_dim: 256,
                policy,
            },
        }
    }

    /// Smallest useful model, for finite-difference checks: d = 16, 2
    /// heads, 2 layers on the toy geometry, split from layer 2.
    pub fn tiny(variant: Variant) -> Self {
        let mut cfg = Self::toy(variant);
        let policy = &mut cfg.encoder.policy;
        policy.layers = 2;
        policy.partition_layer = 2;
        policy.top_k = 8;
        if variant == Variant::Full {
            policy.elimination = vec![Elimination { layer: 1, count: 8 }];
        }
        cfg.encoder.dim = 16;
        cfg.encoder.heads = 2;
        cfg.encoder.ffn_dim = 32;
        cfg
    }

    pub fn variant(&self) -> Variant {
        self.encoder.policy.variant
    }

    pub fn layout(&self) -> TokenLayout {
        self.geometry.layout(self.variant())
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        self.encoder.validate(self.geometry.n_search())?;
        head::branch_widths(self.encoder.dim)?;
        Ok(())
    }

    /// Freshly initialised parameters, deterministic in `seed`. Every
    /// variant gets the same tensors for the same seed.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        EmbeddingParams::new(self.geometry, self.encoder.dim).register(&mut store, &mut rng)?;
        self.encoder.register(&mut store, &mut rng)?;
        head::register_head(&mut store, self.encoder.dim, &mut rng)?;
        Ok(store)
    }
}

/// Embedded template-side tokens fed to every frame.
#[derive(Clone, Debug, PartialEq)]
pub struct TemplateTokens {
    pub z: Tensor,
    pub dt: Tensor,
    pub db: Tensor,
}

/// Records the template, dynamic-target and dynamic-background embeddings.
/// Groups the variant does not use come back empty.
pub fn template_vars(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    template: Var,
    dynamic: Option<Var>,
) -> Result<(Var, Var, Var)> {
    let geo = &cfg.geometry;
    let d = cfg.encoder.dim;
    let z = embed_graph(g, store, geo, template, GridRole::Template)?;
    let variant = cfg.variant();
    let empty = g.input(Tensor::zeros(&[0, d]))?;
    if !variant.uses_dynamic_target() {
        return Ok((z, empty, empty));
    }
    let dynamic =
        dynamic.ok_or_else(|| Error::Input(format!("variant {variant} needs a dynamic region")))?;
    let all = embed_graph(g, store, geo, dynamic, GridRole::Dynamic)?;
    let (inner, ring) = dynamic_split(geo.dynamic_grid(), geo.template_grid())?;
    let dt = g.select_rows(all, &inner)?;
    let db = if variant.uses_dynamic_background() {
        g.select_rows(all, &ring)?
    } else {
        empty
    };
    Ok((z, dt, db))
}

/// Embeds template-side patches once, outside any training graph.
pub fn embed_templates(
    store: &ParamStore,
    cfg: &ModelConfig,
    template_patches: &Tensor,
    dynamic_patches: Option<&Tensor>,
) -> Result<TemplateTokens> {
    let mut g = Graph::new();
    let t = g.input(template_patches.clone())?;
    let d = dynamic_patches.map(|p| g.input(p.clone())).transpose()?;
    let (z, dt, db) = template_vars(&mut g, store, cfg, t, d)?;
    Ok(TemplateTokens {
        z: g.value(z).clone(),
        dt: g.value(dt).clone(),
        db: g.value(db).clone(),
    })
}

pub struct Forward {
    pub head: HeadVars,
    pub kept: Vec<usize>,
    pub trace: EncoderTrace,
}

/// Records embeddings of the search patches, the encoder and the head.
#[allow(clippy::too_many_arguments)]
pub fn forward_graph(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    z: Var,
    dt: Var,
    db: Var,
    search_patches: Var,
    opts: EncodeOptions<'_>,
) -> Result<Forward> {
    let geo = &cfg.geometry;
    let x = embed_graph(g, store, geo, search_patches, GridRole::Search)?;
    let layout = TokenLayout::new(
        g.value(z).rows(),
        g.value(dt).rows(),
        g.value(db).rows(),
        g.value(x).rows(),
    );
    let expected = cfg.layout();
    if (layout.n_z, layout.n_dt, layout.n_db) != (expected.n_z, expected.n_dt, expected.n_db) {
        return Err(Error::Geometry(format!(
            "template groups {}/{}/{} do not match variant {} layout {}/{}/{}",
            layout.n_z,
            layout.n_dt,
            layout.n_db,
            cfg.variant(),
            expected.n_z,
            expected.n_dt,
            expected.n_db
        )));
    }
    let tokens = g.concat_rows(&[z, dt, db, x])?;
    let enc = encode_graph(g, store, &cfg.encoder, tokens, &layout, opts)?;
    let grid = geo.search_grid();
    let map = reassemble_graph(g, enc.search, &enc.kept, grid)?;
    let head = predict_graph(g, store, map, grid)?;
    Ok(Forward {
        head,
        kept: enc.kept,
        trace: enc.trace,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub cls: f64,
    pub giou: f64,
    pub l1: f64,
    pub total: f64,
}

/// Records the weighted training loss of the head outputs against `gt`
/// (normalized search-crop coordinates). The box terms read the regression
/// maps at the ground-truth center cell.
pub fn loss_graph(
    g: &mut Graph,
    head: &HeadVars,
    gt: &CenterBox,
    grid: usize,
    weights: LossWeights,
) -> Result<(Var, LossParts)> {
    let target = gaussian_target(gt, grid);
    let cls = g.focal_loss(head.cls, &target)?;
    let (i, j) = center_cell(gt, grid);
    let pred = g.box_at(head.offset, head.size, i * grid + j, grid)?;
    let giou = g.giou_loss(pred, gt.to_array())?;
    let l1 = g.l1_loss(pred, &gt.to_array())?;
    let total = g.weighted_sum(&[(cls, 1.0), (giou, weights.iou), (l1, weights.l1)])?;
    let v = |g: &Graph, x: Var| g.value(x).data()[0];
    let parts = LossParts {
        cls: v(g, cls),
        giou: v(g, giou),
        l1: v(g, l1),
        total: v(g, total),
    };
    Ok((total, parts))
}

/// Head output and decoded box for one search crop.
#[derive(Clone, Debug)]
pub struct PredictionOutput {
    pub maps: ScoreMaps,
    pub bbox: CenterBox,
    pub confidence: f64,
    pub kept: Vec<usize>,
    pub trace: EncoderTrace,
}

pub fn predict_search(
    store: &ParamStore,
    cfg: &ModelConfig,
    templates: &TemplateTokens,
    search_patches: &Tensor,
    record_attention: bool,
) -> Result<PredictionOutput> {
    let mut g = Graph::new();
    let z = g.input(templates.z.clone())?;
    let dt = g.input(templates.dt.clone())?;
    let db = g.input(templates.db.clone())?;
    let x = g.input(search_patches.clone())?;
    let opts = EncodeOptions {
        record_attention,
        replay: None,
    };
    let fwd = forward_graph(&mut g, store, cfg, z, dt, db, x, opts)?;
    let maps = ScoreMaps::from_graph(&g, &fwd.head, cfg.geometry.search_grid())?;
    let (bbox, confidence) = decode_box(&maps);
    Ok(PredictionOutput {
        maps,
        bbox,
        confidence,
        kept: fwd.kept,
        trace: fwd.trace,
    })
}
