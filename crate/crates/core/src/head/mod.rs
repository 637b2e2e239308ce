//! Convolutional prediction head over the reassembled search map, box
//! decoding, score-map export and the training losses.

pub mod loss;

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

pub use loss::{
    center_cell, focal_loss, gaussian_target, giou_loss, l1_loss, total_loss, FocalLoss,
    LossWeights,
};

use crate::error::{Error, Result};
use crate::geometry::CenterBox;
use crate::numerics::{Graph, ParamStore, Tensor, Var};

/// Number of 3×3 layers per branch before the 1×1 projection.
pub const CONV_DEPTH: usize = 4;
/// Initial classification bias; sigmoid(−2.19) ≈ 0.1.
pub const CLS_BIAS_INIT: f64 = -2.19;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Cls,
    Offset,
    Size,
}

impl Branch {
    pub const ALL: [Branch; 3] = [Branch::Cls, Branch::Offset, Branch::Size];

    pub fn name(self) -> &'static str {
        match self {
            Branch::Cls => "cls",
            Branch::Offset => "offset",
            Branch::Size => "size",
        }
    }

    pub fn channels(self) -> usize {
        match self {
            Branch::Cls => 1,
            Branch::Offset | Branch::Size => 2,
        }
    }
}

/// Channel widths of one branch: `d, d/2, …, d/2^depth`.
pub fn branch_widths(dim: usize) -> Result<Vec<usize>> {
    let div = 1 << CONV_DEPTH;
    if dim == 0 || !dim.is_multiple_of(div) {
        return Err(Error::config(
            "model.dim",
            format!("head needs a token dim divisible by {div}, got {dim}"),
        ));
    }
    Ok((0..=CONV_DEPTH).map(|i| dim >> i).collect())
}

/// Adds randomly initialised head parameters to `store`.
pub fn register_head(store: &mut ParamStore, dim: usize, rng: &mut impl Rng) -> Result<()> {
    let widths = branch_widths(dim)?;
    for branch in Branch::ALL {
        let b = branch.name();
        for i in 0..CONV_DEPTH {
            let (cin, cout) = (widths[i], widths[i + 1]);
            let fan_in = cin * 9;
            let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            let data = (0..cout * fan_in).map(|_| dist.sample(rng)).collect();
            store.insert(
                format!("head.{b}.{}.w", i + 1),
                Tensor::new(vec![cout, fan_in], data)?,
            )?;
            store.insert(format!("head.{b}.{}.b", i + 1), Tensor::zeros(&[cout]))?;
        }
        let cin = widths[CONV_DEPTH];
        let cout = branch.channels();
        let dist = Normal::new(0.0, (1.0 / cin as f64).sqrt()).expect("positive std");
        let data = (0..cout * cin).map(|_| dist.sample(rng)).collect();
        store.insert(
            format!("head.{b}.out.w"),
            Tensor::new(vec![cout, cin], data)?,
        )?;
        let bias = if branch == Branch::Cls {
            CLS_BIAS_INIT
        } else {
            0.0
        };
        store.insert(format!("head.{b}.out.b"), Tensor::full(&[cout], bias))?;
    }
    Ok(())
}

/// Scatters kept search features (`[n_kept × d]`) back onto the `g×g` grid
/// and returns a channel-major map `[d × g·g]`; eliminated cells are zero.
pub fn reassemble_map(features: &Tensor, kept: &[usize], grid: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let f = g.input(features.clone())?;
    let m = reassemble_graph(&mut g, f, kept, grid)?;
    Ok(g.value(m).clone())
}

pub fn reassemble_graph(g: &mut Graph, features: Var, kept: &[usize], grid: usize) -> Result<Var> {
    let full = g.scatter_rows(features, kept, grid * grid)?;
    g.transpose(full)
}

/// Recorded head outputs, each `[channels × g·g]`.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub cls: Var,
    pub offset: Var,
    pub size: Var,
}

pub fn predict_graph(g: &mut Graph, store: &ParamStore, map: Var, grid: usize) -> Result<HeadVars> {
    let mut outs = Vec::with_capacity(3);
    for branch in Branch::ALL {
        let b = branch.name();
        let mut x = map;
        for i in 1..=CONV_DEPTH {
            let w = g.param(store, &format!("head.{b}.{i}.w"))?;
            let bias = g.param(store, &format!("head.{b}.{i}.b"))?;
            x = g.conv2d(x, w, bias, grid, grid, 3)?;
            x = g.gelu(x)?;
        }
        let w = g.param(store, &format!("head.{b}.out.w"))?;
        let bias = g.param(store, &format!("head.{b}.out.b"))?;
        x = g.conv2d(x, w, bias, grid, grid, 1)?;
        outs.push(g.sigmoid(x)?);
    }
    Ok(HeadVars {
        cls: outs[0],
        offset: outs[1],
        size: outs[2],
    })
}

/// Classification, offset and size maps on a `g×g` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMaps {
    pub grid: usize,
    /// `[g × g]`, in `[0, 1]`.
    pub cls: Tensor,
    /// `[2 × g·g]`: x then y offsets within a cell.
    pub offset: Tensor,
    /// `[2 × g·g]`: normalized width then height.
    pub size: Tensor,
}

impl ScoreMaps {
    pub fn from_graph(g: &Graph, vars: &HeadVars, grid: usize) -> Result<Self> {
        Ok(Self {
            grid,
            cls: g.value(vars.cls).clone().reshape(vec![grid, grid])?,
            offset: g.value(vars.offset).clone(),
            size: g.value(vars.size).clone(),
        })
    }

    /// Classification map as CSV rows.
    pub fn cls_csv(&self) -> String {
        grid_csv(self.cls.data(), self.grid)
    }

    /// All maps as CSV grids separated by `# <name>` header lines.
    pub fn to_csv(&self) -> String {
        let hw = self.grid * self.grid;
        let mut s = String::new();
        let parts: [(&str, &[f64]); 5] = [
            ("cls", self.cls.data()),
            ("offset_x", &self.offset.data()[..hw]),
            ("offset_y", &self.offset.data()[hw..]),
            ("size_w", &self.size.data()[..hw]),
            ("size_h", &self.size.data()[hw..]),
        ];
        for (name, data) in parts {
            let _ = writeln!(s, "# {name}");
            s.push_str(&grid_csv(data, self.grid));
        }
        s
    }

    pub fn write_cls_pgm(&self, path: &Path) -> Result<()> {
        crate::synth_bench::write_pgm(path, &self.cls)
    }
}

fn grid_csv(data: &[f64], grid: usize) -> String {
    let mut s = String::new();
    for row in data.chunks(grid) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

/// Runs the head on a `[d × g·g]` map.
pub fn predict(map: &Tensor, store: &ParamStore, grid: usize) -> Result<ScoreMaps> {
    if grid == 0 {
        return Err(Error::Shape("head grid must be at least 1".into()));
    }
    let mut g = Graph::new();
    let m = g.input(map.clone())?;
    let vars = predict_graph(&mut g, store, m, grid)?;
    ScoreMaps::from_graph(&g, &vars, grid)
}

/// Box at the classification peak (ties go to the smallest row-major
/// index) and the peak score.
pub fn decode_box(maps: &ScoreMaps) -> (CenterBox, f64) {
    let g = maps.grid;
    let hw = g * g;
    let cls = maps.cls.data();
    let mut best = 0;
    for (i, &v) in cls.iter().enumerate() {
        if v > cls[best] {
            best = i;
        }
    }
    let (i, j) = (best / g, best % g);
    let o = maps.offset.data();
    let s = maps.size.data();
    let gf = g as f64;
    let b = CenterBox::new(
        (j as f64 + o[best]) / gf,
        (i as f64 + o[hw + best]) / gf,
        s[best],
        s[hw + best],
    );
    (b, cls[best])
}
