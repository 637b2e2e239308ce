use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::image::dynamic_split;
use super::Geometry;
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Tensor, Var};

/// Which positional table a patch grid uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridRole {
    Template,
    Search,
    /// Dynamic region: the central block reuses the template table, the
    /// surrounding ring has a table of its own.
    Dynamic,
}

/// Shapes of the patch projection and positional tables.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EmbeddingParams {
    pub geometry: Geometry,
    pub dim: usize,
}

impl EmbeddingParams {
    pub const PATCH_W: &'static str = "embed.patch.w";
    pub const PATCH_B: &'static str = "embed.patch.b";
    pub const POS_TEMPLATE: &'static str = "embed.pos.template";
    pub const POS_SEARCH: &'static str = "embed.pos.search";
    pub const POS_RING: &'static str = "embed.pos.ring";

    pub fn new(geometry: Geometry, dim: usize) -> Self {
        Self { geometry, dim }
    }

    /// Adds randomly initialised embedding parameters to `store`.
    pub fn register(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        let g = &self.geometry;
        let pd = g.patch_dim();
        let w = Normal::new(0.0, 1.0 / (pd as f64).sqrt()).expect("positive std");
        let pos = Normal::new(0.0, 0.1).expect("positive std");
        let mut sample = |shape: [usize; 2], dist: &Normal<f64>| {
            let data = (0..shape[0] * shape[1]).map(|_| dist.sample(rng)).collect();
            Tensor::new(shape.to_vec(), data)
        };
        store.insert(Self::PATCH_W, sample([pd, self.dim], &w)?)?;
        store.insert(Self::PATCH_B, Tensor::zeros(&[self.dim]))?;
        store.insert(
            Self::POS_TEMPLATE,
            sample([g.n_template(), self.dim], &pos)?,
        )?;
        store.insert(Self::POS_SEARCH, sample([g.n_search(), self.dim], &pos)?)?;
        store.insert(Self::POS_RING, sample([g.n_ring(), self.dim], &pos)?)?;
        Ok(())
    }
}

/// Row `i` of the result is the positional-table row used by grid cell `i`
/// of the dynamic region, indexing into `[template table; ring table]`.
fn dynamic_pos_rows(geometry: &Geometry) -> Result<Vec<usize>> {
    let (inner, ring) = dynamic_split(geometry.dynamic_grid(), geometry.template_grid())?;
    let n_t = inner.len();
    let mut rows = vec![0; inner.len() + ring.len()];
    for (k, &cell) in inner.iter().enumerate() {
        rows[cell] = k;
    }
    for (k, &cell) in ring.iter().enumerate() {
        rows[cell] = n_t + k;
    }
    Ok(rows)
}

/// Subtracted from every pixel value before the patch projection.
pub const PIXEL_CENTER: f64 = 0.5;

/// Records the embedding `(patches − PIXEL_CENTER)·W + b + pos`.
pub fn embed_graph(
    g: &mut Graph,
    store: &ParamStore,
    geometry: &Geometry,
    patches: Var,
    role: GridRole,
) -> Result<Var> {
    let expected = match role {
        GridRole::Template => geometry.n_template(),
        GridRole::Search => geometry.n_search(),
        GridRole::Dynamic => geometry.dynamic_grid().pow(2),
    };
    let n = g.value(patches).rows();
    if n != expected {
        return Err(Error::Geometry(format!(
            "{n} patches for a {role:?} grid of {expected}"
        )));
    }
    let w = g.param(store, EmbeddingParams::PATCH_W)?;
    let b = g.param(store, EmbeddingParams::PATCH_B)?;
    let shift = g.input(Tensor::full(&[geometry.patch_dim()], -PIXEL_CENTER))?;
    let centered = g.add_row(patches, shift)?;
    let proj = g.linear(centered, w, b)?;
    let pos = match role {
        GridRole::Template => g.param(store, EmbeddingParams::POS_TEMPLATE)?,
        GridRole::Search => g.param(store, EmbeddingParams::POS_SEARCH)?,
        GridRole::Dynamic => {
            let t = g.param(store, EmbeddingParams::POS_TEMPLATE)?;
            let r = g.param(store, EmbeddingParams::POS_RING)?;
            let both = g.concat_rows(&[t, r])?;
            g.select_rows(both, &dynamic_pos_rows(geometry)?)?
        }
    };
    g.add(proj, pos)
}

/// Token embeddings for one patch grid (`[N × d]`).
pub fn embed(
    patches: &Tensor,
    store: &ParamStore,
    geometry: &Geometry,
    role: GridRole,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = g.input(patches.clone())?;
    let out = embed_graph(&mut g, store, geometry, p, role)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::matmul;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store(geometry: Geometry, d: usize) -> ParamStore {
        let mut s = ParamStore::new();
        EmbeddingParams::new(geometry, d)
            .register(&mut s, &mut ChaCha8Rng::seed_from_u64(3))
            .unwrap();
        s
    }

    #[test]
    fn mid_grey_image_zero_pos_gives_bias() {
        let geo = Geometry::toy();
        let mut s = store(geo, 4);
        s.set(
            EmbeddingParams::PATCH_B,
            Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        )
        .unwrap();
        s.set(EmbeddingParams::POS_TEMPLATE, Tensor::zeros(&[16, 4]))
            .unwrap();
        let grey = Tensor::full(&[16, geo.patch_dim()], PIXEL_CENTER);
        let out = embed(&grey, &s, &geo, GridRole::Template).unwrap();
        for r in 0..16 {
            assert_eq!(out.row(r), &[1.0, 2.0, 3.0, 4.0]);
        }
    }

    #[test]
    fn zero_projection_gives_positional_rows() {
        let geo = Geometry::toy();
        let mut s = store(geo, 4);
        s.set(
            EmbeddingParams::PATCH_W,
            Tensor::zeros(&[geo.patch_dim(), 4]),
        )
        .unwrap();
        let patches = Tensor::full(&[64, geo.patch_dim()], 0.3);
        let out = embed(&patches, &s, &geo, GridRole::Search).unwrap();
        assert_eq!(
            out.data(),
            s.get(EmbeddingParams::POS_SEARCH).unwrap().data()
        );
    }

    #[test]
    fn random_patches_match_dense_product() {
        let geo = Geometry::toy();
        let s = store(geo, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data = (0..16 * geo.patch_dim())
            .map(|_| rng.random::<f64>())
            .collect();
        let patches = Tensor::new(vec![16, geo.patch_dim()], data).unwrap();
        let out = embed(&patches, &s, &geo, GridRole::Template).unwrap();
        let centered = Tensor::new(
            patches.shape().to_vec(),
            patches.data().iter().map(|v| v - PIXEL_CENTER).collect(),
        )
        .unwrap();
        let prod = matmul(&centered, s.get(EmbeddingParams::PATCH_W).unwrap()).unwrap();
        let pos = s.get(EmbeddingParams::POS_TEMPLATE).unwrap();
        for i in 0..16 {
            for j in 0..8 {
                let want = prod.get2(i, j) + pos.get2(i, j);
                assert!((out.get2(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dynamic_grid_reuses_template_table_in_center() {
        let geo = Geometry::toy();
        let mut s = store(geo, 4);
        s.set(
            EmbeddingParams::PATCH_W,
            Tensor::zeros(&[geo.patch_dim(), 4]),
        )
        .unwrap();
        let out = embed(
            &Tensor::zeros(&[36, geo.patch_dim()]),
            &s,
            &geo,
            GridRole::Dynamic,
        )
        .unwrap();
        let t = s.get(EmbeddingParams::POS_TEMPLATE).unwrap();
        let ring = s.get(EmbeddingParams::POS_RING).unwrap();
        // Cell (1,1) of the 6×6 grid is the first central cell.
        assert_eq!(out.row(7), t.row(0));
        assert_eq!(out.row(0), ring.row(0));
        assert!(embed(
            &Tensor::zeros(&[35, geo.patch_dim()]),
            &s,
            &geo,
            GridRole::Dynamic
        )
        .is_err());
    }
}
