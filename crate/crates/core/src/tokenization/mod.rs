//! Image crops to token sequences: patch extraction, embeddings, the
//! dynamic target/background split, and the grouped token layout.

mod embed;
mod image;

pub use embed::{embed, embed_graph, EmbeddingParams, GridRole};
pub use image::{dynamic_split, patchify, split_dynamic_region, unpatchify, ImageCrop};

use std::ops::Range;

use crate::error::{Error, Result};
use crate::flow_mask::Variant;
use crate::numerics::Tensor;

/// Token group inside the encoder sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Group {
    /// Initial target template.
    Z,
    /// Dynamic target.
    DT,
    /// Dynamic background ring.
    DB,
    /// Search tokens before partitioning.
    X,
    /// Search tokens carrying target cues.
    XT,
    /// Remaining search tokens.
    XB,
}

/// Crop sizes in pixels and the patch side.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub template: usize,
    pub search: usize,
    pub dynamic: usize,
    pub patch: usize,
}

impl Default for Geometry {
    fn default() -> Self {
        Self {
            template: 128,
            search: 256,
            dynamic: 192,
            patch: 16,
        }
    }
}

impl Geometry {
    /// Small geometry used for toy training: 4×4 template, 8×8 search and
    /// 6×6 dynamic grids of 8 px patches.
    pub fn toy() -> Self {
        Self {
            template: 32,
            search: 64,
            dynamic: 48,
            patch: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.patch;
        if p == 0 {
            return Err(Error::Geometry("patch size must be positive".into()));
        }
        for (name, side) in [
            ("template", self.template),
            ("search", self.search),
            ("dynamic", self.dynamic),
        ] {
            if side == 0 || side % p != 0 {
                return Err(Error::Geometry(format!(
                    "{name} size {side} is not a positive multiple of patch {p}"
                )));
            }
        }
        if self.dynamic < self.template
            || !(self.dynamic_grid() - self.template_grid()).is_multiple_of(2)
        {
            return Err(Error::Geometry(format!(
                "central {0}×{0} square is not patch-aligned inside the {1}×{1} dynamic region",
                self.template, self.dynamic
            )));
        }
        Ok(())
    }

    pub fn template_grid(&self) -> usize {
        self.template / self.patch
    }

    pub fn search_grid(&self) -> usize {
        self.search / self.patch
    }

    pub fn dynamic_grid(&self) -> usize {
        self.dynamic / self.patch
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }

    pub fn n_template(&self) -> usize {
        self.template_grid().pow(2)
    }

    pub fn n_search(&self) -> usize {
        self.search_grid().pow(2)
    }

    pub fn n_ring(&self) -> usize {
        self.dynamic_grid().pow(2) - self.n_template()
    }

    /// Layout of the token groups a variant feeds to the encoder.
    pub fn layout(&self, variant: Variant) -> TokenLayout {
        let n_dt = if variant.uses_dynamic_target() {
            self.n_template()
        } else {
            0
        };
        let n_db = if variant.uses_dynamic_background() {
            self.n_ring()
        } else {
            0
        };
        TokenLayout::new(self.n_template(), n_dt, n_db, self.n_search())
    }
}

/// Group sizes of the sequence `[Z; DT; DB; X]` plus the center-token sets
/// of the two template groups (indices within each group).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenLayout {
    pub n_z: usize,
    pub n_dt: usize,
    pub n_db: usize,
    pub n_x: usize,
    pub z_center: Vec<usize>,
    pub dt_center: Vec<usize>,
}

impl TokenLayout {
    pub fn new(n_z: usize, n_dt: usize, n_db: usize, n_x: usize) -> Self {
        Self {
            n_z,
            n_dt,
            n_db,
            n_x,
            z_center: center_indices(n_z),
            dt_center: center_indices(n_dt),
        }
    }

    pub fn total(&self) -> usize {
        self.n_z + self.n_dt + self.n_db + self.n_x
    }

    pub fn z_range(&self) -> Range<usize> {
        0..self.n_z
    }

    pub fn dt_range(&self) -> Range<usize> {
        self.n_z..self.n_z + self.n_dt
    }

    pub fn db_range(&self) -> Range<usize> {
        let s = self.n_z + self.n_dt;
        s..s + self.n_db
    }

    pub fn x_start(&self) -> usize {
        self.n_z + self.n_dt + self.n_db
    }

    pub fn x_range(&self) -> Range<usize> {
        self.x_start()..self.total()
    }

    /// Same template groups with a different current search count.
    pub fn with_search_count(&self, n_x: usize) -> Self {
        Self {
            n_x,
            ..self.clone()
        }
    }

    pub fn group_of(&self, i: usize) -> Group {
        if i < self.n_z {
            Group::Z
        } else if i < self.n_z + self.n_dt {
            Group::DT
        } else if i < self.x_start() {
            Group::DB
        } else {
            Group::X
        }
    }

    pub fn groups(&self) -> Vec<Group> {
        (0..self.total()).map(|i| self.group_of(i)).collect()
    }

    /// Groups with search tokens labelled `XT` where `target[pos]` is set and
    /// `XB` otherwise.
    pub fn groups_with_split(&self, target: &[bool]) -> Vec<Group> {
        let xs = self.x_start();
        (0..self.total())
            .map(|i| match self.group_of(i) {
                Group::X if target[i - xs] => Group::XT,
                Group::X => Group::XB,
                g => g,
            })
            .collect()
    }

    /// Sequence positions of the Z and DT center tokens.
    pub fn center_positions(&self) -> (Vec<usize>, Vec<usize>) {
        let z = self.z_center.clone();
        let dt = self.dt_center.iter().map(|i| i + self.n_z).collect();
        (z, dt)
    }

    /// Splits a sequence tensor into its four groups.
    pub fn slice(&self, tokens: &Tensor) -> Result<[Tensor; 4]> {
        if tokens.rows() != self.total() {
            return Err(Error::Shape(format!(
                "{} tokens for a layout of {}",
                tokens.rows(),
                self.total()
            )));
        }
        Ok([
            tokens.slice_rows(0, self.n_z)?,
            tokens.slice_rows(self.n_z, self.n_dt)?,
            tokens.slice_rows(self.n_z + self.n_dt, self.n_db)?,
            tokens.slice_rows(self.x_start(), self.n_x)?,
        ])
    }
}

/// Center tokens of a group of `n` tokens. A square group with side `g ≥ 3`
/// uses its central `c×c` block with `c = ⌈g/2⌉`, shrunk by one when needed so
/// the block sits symmetrically away from the border. Smaller or non-square
/// groups have no interior and use every token.
pub fn center_indices(n: usize) -> Vec<usize> {
    let g = (n as f64).sqrt().round() as usize;
    if g * g != n || g < 3 {
        return (0..n).collect();
    }
    let mut c = g.div_ceil(2);
    if (g - c) % 2 == 1 {
        c -= 1;
    }
    let start = (g - c) / 2;
    let mut out = Vec::with_capacity(c * c);
    for i in start..start + c {
        for j in start..start + c {
            out.push(i * g + j);
        }
    }
    out
}

/// Concatenates group tokens into `[Z; DT; DB; X]`.
pub fn assemble(z: &Tensor, dt: &Tensor, db: &Tensor, x: &Tensor) -> Result<(Tensor, TokenLayout)> {
    let d = z.cols();
    for (name, t) in [
        ("dynamic target", dt),
        ("dynamic background", db),
        ("search", x),
    ] {
        if !t.is_empty() && t.cols() != d {
            return Err(Error::Shape(format!(
                "{name} tokens have dim {}, template tokens {d}",
                t.cols()
            )));
        }
    }
    let tokens = Tensor::concat_rows(&[z, dt, db, x])?;
    let layout = TokenLayout::new(z.rows(), dt.rows(), db.rows(), x.rows());
    Ok((tokens, layout))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_geometry_counts() {
        let g = Geometry::default();
        g.validate().unwrap();
        let l = g.layout(Variant::Full);
        assert_eq!((l.n_z, l.n_dt, l.n_db, l.n_x), (64, 64, 80, 256));
        assert_eq!(l.total(), 464);
        assert_eq!(g.layout(Variant::A).total(), 320);
    }

    #[test]
    fn center_sets() {
        assert_eq!(center_indices(64).len(), 16);
        assert_eq!(center_indices(64)[0], 2 * 8 + 2);
        assert_eq!(center_indices(16), vec![5, 6, 9, 10]);
        assert_eq!(center_indices(9), vec![4]);
        assert_eq!(center_indices(2), vec![0, 1]);
        assert!(center_indices(0).is_empty());
    }

    #[test]
    fn misaligned_geometry_rejected() {
        let g = Geometry {
            template: 128,
            search: 256,
            dynamic: 176,
            patch: 16,
        };
        assert!(matches!(g.validate(), Err(Error::Geometry(_))));
    }

    proptest! {
        #[test]
        fn center_set_strictly_inside(g in 3usize..20) {
            let c = center_indices(g * g);
            prop_assert!(!c.is_empty());
            for i in c {
                let (r, col) = (i / g, i % g);
                prop_assert!(r > 0 && col > 0 && r < g - 1 && col < g - 1);
            }
        }

        #[test]
        fn assemble_then_slice_is_identity(nz in 1usize..5, ndt in 0usize..5, ndb in 0usize..5, nx in 1usize..9, d in 1usize..4) {
            let mk = |n: usize, base: f64| Tensor::new(vec![n, d], (0..n * d).map(|i| base + i as f64).collect()).unwrap();
            let (z, dt, db, x) = (mk(nz, 0.0), mk(ndt, 100.0), mk(ndb, 200.0), mk(nx, 300.0));
            let (tokens, layout) = assemble(&z, &dt, &db, &x).unwrap();
            let [z2, dt2, db2, x2] = layout.slice(&tokens).unwrap();
            prop_assert_eq!(z2.data(), z.data());
            prop_assert_eq!(dt2.data(), dt.data());
            prop_assert_eq!(db2.data(), db.data());
            prop_assert_eq!(x2.data(), x.data());
        }
    }
}
