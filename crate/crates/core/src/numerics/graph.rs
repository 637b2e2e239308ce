//! Reverse-mode recording graph.
//!
//! Every op evaluates eagerly, stores its output and enough context to
//! replay its vector-Jacobian product. `backward` walks the nodes in reverse
//! creation order, which is a valid topological order by construction.

use std::collections::HashMap;
use std::sync::Arc;

use super::kernels::{self, LayerNormCache, Mat};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::flow_mask::AttentionMask;
use crate::head::loss as loss_kernels;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Input,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add(Var, Var),
    Mul(Var, Var),
    AddRow {
        a: Var,
        bias: Var,
    },
    Scale(Var, f64),
    Gelu(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: LayerNormCache,
    },
    MaskedSoftmax(Var),
    SliceCols {
        a: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SelectRows {
        a: Var,
        idx: Vec<usize>,
    },
    ScatterRows {
        a: Var,
        idx: Vec<usize>,
    },
    Transpose(Var),
    Conv2d(Box<ConvCtx>),
    Sum(Var),
    WeightedSum(Vec<(Var, f64)>),
    Focal {
        p: Var,
        grad: Vec<f64>,
    },
    BoxAt {
        offset: Var,
        size: Var,
        cell: usize,
        grid: usize,
    },
    Giou {
        pred: Var,
        grad: [f64; 4],
    },
    L1 {
        pred: Var,
        gt: Vec<f64>,
    },
}

struct ConvCtx {
    x: Var,
    w: Var,
    b: Var,
    cin: usize,
    cout: usize,
    h: usize,
    w_px: usize,
    k: usize,
    pad: usize,
    cols: Vec<f64>,
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients of a scalar with respect to every parameter leaf it touched.
#[derive(Debug, Default)]
pub struct Gradients {
    pub by_param: Vec<(ParamId, Vec<f64>)>,
}

/// Records a forward computation for later differentiation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    /// Focal-loss probabilities clamped away from {0, 1} so far.
    clamped_cells: usize,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn clamped_cells(&self) -> usize {
        self.clamped_cells
    }

    fn push(&mut self, value: Tensor, op: Op, name: &str) -> Result<Var> {
        value.ensure_finite(name)?;
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input; gradients are not propagated past it.
    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Input, "input")
    }

    /// Leaf bound to a named parameter of `store`. Repeated lookups of the same
    /// parameter share one node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let id = store
            .id(name)
            .ok_or_else(|| Error::Input(format!("unknown parameter `{name}`")))?;
        if let Some(v) = self.param_vars.get(&id) {
            return Ok(*v);
        }
        let v = self.push(store.value(id).clone(), Op::Param(id), name)?;
        self.param_vars.insert(id, v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, true)
    }

    fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let av = self.view(a, ta)?;
        let bv = self.view(b, tb)?;
        let (m, k) = logical(&av);
        let (k2, n) = logical(&bv);
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dims differ: {m}x{k} by {k2}x{n}"
            )));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(1.0, av, bv, 0.0, &mut out);
        let t = Tensor::new(vec![m, n], out)?;
        self.push(t, Op::MatMul { a, b, ta, tb }, "matmul")
    }

    fn view(&self, v: Var, trans: bool) -> Result<Mat<'_>> {
        let t = self.value(v);
        let (r, c) = t.dims2()?;
        let m = Mat::new(t.data(), r, c);
        Ok(if trans { m.t() } else { m })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                x.shape(),
                y.shape()
            )));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let t = Tensor::new(x.shape().to_vec(), data)?;
        self.push(t, Op::Add(a, b), "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::Shape(format!(
                "mul: {:?} vs {:?}",
                x.shape(),
                y.shape()
            )));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let t = Tensor::new(x.shape().to_vec(), data)?;
        self.push(t, Op::Mul(a, b), "mul")
    }

    /// Adds a length-`d` bias to every row of an `n×d` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let x = self.value(a);
        let (n, d) = x.dims2()?;
        let b = self.value(bias);
        if b.len() != d {
            return Err(Error::Shape(format!("bias of {} for {d} columns", b.len())));
        }
        let mut data = x.data().to_vec();
        for r in 0..n {
            for c in 0..d {
                data[r * d + c] += b.data()[c];
            }
        }
        let t = Tensor::new(vec![n, d], data)?;
        self.push(t, Op::AddRow { a, bias }, "add_row")
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let x = self.value(a);
        let data = x.data().iter().map(|v| v * s).collect();
        let t = Tensor::new(x.shape().to_vec(), data)?;
        self.push(t, Op::Scale(a, s), "scale")
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| kernels::gelu(v)).collect();
        let t = Tensor::new(x.shape().to_vec(), data)?;
        self.push(t, Op::Gelu(a), "gelu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| kernels::sigmoid(v)).collect();
        let t = Tensor::new(x.shape().to_vec(), data)?;
        self.push(t, Op::Sigmoid(a), "sigmoid")
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Input("layer_norm eps must be positive".into()));
        }
        let xt = self.value(x);
        let (n, d) = xt.dims2()?;
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.len() != d || b.len() != d {
            return Err(Error::Shape(format!(
                "layer_norm affine params of {}/{} for width {d}",
                g.len(),
                b.len()
            )));
        }
        let mut out = vec![0.0; n * d];
        let cache = kernels::layer_norm_forward(xt.data(), n, d, g.data(), b.data(), eps, &mut out);
        let t = Tensor::new(vec![n, d], out)?;
        self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cache,
            },
            "layer_norm",
        )
    }

    pub fn masked_softmax(&mut self, a: Var, mask: &Arc<AttentionMask>) -> Result<Var> {
        let x = self.value(a);
        let (n, m) = x.dims2()?;
        if mask.rows() != n || mask.cols() != m {
            return Err(Error::Shape(format!(
                "mask {}x{} for scores {n}x{m}",
                mask.rows(),
                mask.cols()
            )));
        }
        let mut out = vec![0.0; n * m];
        kernels::masked_softmax_rows(x.data(), n, m, mask, &mut out)
            .map_err(|r| Error::Policy(format!("softmax row {r} has no allowed key")))?;
        let t = Tensor::new(vec![n, m], out)?;
        self.push(t, Op::MaskedSoftmax(a), "masked_softmax")
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        let (n, d) = x.dims2()?;
        if start + len > d {
            return Err(Error::Shape(format!("slice {start}+{len} of {d} columns")));
        }
        let mut data = Vec::with_capacity(n * len);
        for r in 0..n {
            data.extend_from_slice(&x.data()[r * d + start..r * d + start + len]);
        }
        let t = Tensor::new(vec![n, len], data)?;
        self.push(t, Op::SliceCols { a, start }, "slice_cols")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != n {
                return Err(Error::Shape("concat_cols row mismatch".into()));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; n * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..n {
                data[r * total + off..r * total + off + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let t = Tensor::new(vec![n, total], data)?;
        self.push(t, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    /// Row concatenation; parts with zero rows are skipped.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let t = Tensor::concat_rows(&tensors)?;
        let kept = parts
            .iter()
            .copied()
            .filter(|&p| !self.value(p).is_empty())
            .collect();
        self.push(t, Op::ConcatRows(kept), "concat_rows")
    }

    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a).select_rows(idx)?;
        self.push(
            t,
            Op::SelectRows {
                a,
                idx: idx.to_vec(),
            },
            "select_rows",
        )
    }

    /// Places row `i` of `a` at row `idx[i]` of an `n_rows`-row zero matrix.
    pub fn scatter_rows(&mut self, a: Var, idx: &[usize], n_rows: usize) -> Result<Var> {
        let x = self.value(a);
        let (r, d) = x.dims2()?;
        if r != idx.len() {
            return Err(Error::Shape(format!("{} indices for {r} rows", idx.len())));
        }
        let mut seen = vec![false; n_rows];
        let mut data = vec![0.0; n_rows * d];
        for (i, &dst) in idx.iter().enumerate() {
            if dst >= n_rows || seen[dst] {
                return Err(Error::Input(format!(
                    "scatter index {dst} invalid or repeated for {n_rows} rows"
                )));
            }
            seen[dst] = true;
            data[dst * d..(dst + 1) * d].copy_from_slice(x.row(i));
        }
        let t = Tensor::new(vec![n_rows, d], data)?;
        self.push(
            t,
            Op::ScatterRows {
                a,
                idx: idx.to_vec(),
            },
            "scatter_rows",
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose2()?;
        self.push(t, Op::Transpose(a), "transpose")
    }

    /// Stride-1 "same" convolution of a `[cin, h·w]` map with weights
    /// `[cout, cin·k·k]` and bias `[cout]`.
    #[allow(clippy::too_many_arguments)]
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        h: usize,
        w_px: usize,
        k: usize,
    ) -> Result<Var> {
        if k.is_multiple_of(2) {
            return Err(Error::Shape("conv kernel must be odd".into()));
        }
        let pad = k / 2;
        let (cin, hw) = self.value(x).dims2()?;
        if hw != h * w_px {
            return Err(Error::Shape(format!("conv map {hw} cells for {h}x{w_px}")));
        }
        let (cout, kk) = self.value(w).dims2()?;
        if kk != cin * k * k || self.value(b).len() != cout {
            return Err(Error::Shape("conv weight/bias shape mismatch".into()));
        }
        let cols = kernels::im2col(self.value(x).data(), cin, h, w_px, k, pad);
        let mut out = vec![0.0; cout * hw];
        for co in 0..cout {
            out[co * hw..(co + 1) * hw].fill(self.value(b).data()[co]);
        }
        kernels::gemm(
            1.0,
            Mat::new(self.value(w).data(), cout, kk),
            Mat::new(&cols, kk, hw),
            1.0,
            &mut out,
        );
        let t = Tensor::new(vec![cout, hw], out)?;
        let ctx = ConvCtx {
            x,
            w,
            b,
            cin,
            cout,
            h,
            w_px,
            k,
            pad,
            cols,
        };
        self.push(t, Op::Conv2d(Box::new(ctx)), "conv2d")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), "sum")
    }

    /// `Σ wᵢ·aᵢ` over same-shaped inputs.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let shape = self.value(terms[0].0).shape().to_vec();
        let mut data = vec![0.0; self.value(terms[0].0).len()];
        for &(v, w) in terms {
            let t = self.value(v);
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape("weighted_sum shape mismatch".into()));
            }
            for (o, x) in data.iter_mut().zip(t.data()) {
                *o += w * x;
            }
        }
        let t = Tensor::new(shape, data)?;
        self.push(t, Op::WeightedSum(terms.to_vec()), "weighted_sum")
    }

    /// Penalty-reduced pixelwise focal loss of probabilities `p` against a
    /// Gaussian target with a single exact-1 peak.
    pub fn focal_loss(&mut self, p: Var, target: &Tensor) -> Result<Var> {
        let pt = self.value(p);
        if pt.len() != target.len() {
            return Err(Error::Shape(format!(
                "focal loss: {} predictions for {} targets",
                pt.len(),
                target.len()
            )));
        }
        let res = loss_kernels::focal_forward_backward(pt.data(), target.data())?;
        self.clamped_cells += res.clamped;
        self.push(
            Tensor::scalar(res.value),
            Op::Focal { p, grad: res.grad },
            "focal_loss",
        )
    }

    /// Box `(cx, cy, w, h)` read at one cell of the offset/size maps
    /// (`[2, g·g]` each, row-major cells).
    pub fn box_at(&mut self, offset: Var, size: Var, cell: usize, grid: usize) -> Result<Var> {
        let (o, s) = (self.value(offset), self.value(size));
        let hw = grid * grid;
        if o.shape() != [2, hw] || s.shape() != [2, hw] || cell >= hw {
            return Err(Error::Shape("box_at expects [2, g*g] maps".into()));
        }
        let (i, j) = (cell / grid, cell % grid);
        let gf = grid as f64;
        let data = vec![
            (j as f64 + o.data()[cell]) / gf,
            (i as f64 + o.data()[hw + cell]) / gf,
            s.data()[cell],
            s.data()[hw + cell],
        ];
        let t = Tensor::new(vec![4], data)?;
        self.push(
            t,
            Op::BoxAt {
                offset,
                size,
                cell,
                grid,
            },
            "box_at",
        )
    }

    /// `1 − GIoU` between a predicted `(cx, cy, w, h)` box and a fixed target.
    pub fn giou_loss(&mut self, pred: Var, gt: [f64; 4]) -> Result<Var> {
        let p = self.value(pred);
        if p.len() != 4 {
            return Err(Error::Shape("giou_loss expects 4 box values".into()));
        }
        let pb = [p.data()[0], p.data()[1], p.data()[2], p.data()[3]];
        let (value, grad) = loss_kernels::giou_loss_with_grad(pb, gt)?;
        self.push(Tensor::scalar(value), Op::Giou { pred, grad }, "giou_loss")
    }

    /// Mean absolute error against a fixed target vector.
    pub fn l1_loss(&mut self, pred: Var, gt: &[f64]) -> Result<Var> {
        let p = self.value(pred);
        if p.len() != gt.len() || gt.is_empty() {
            return Err(Error::Shape("l1_loss length mismatch".into()));
        }
        let v = p
            .data()
            .iter()
            .zip(gt)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / gt.len() as f64;
        self.push(
            Tensor::scalar(v),
            Op::L1 {
                pred,
                gt: gt.to_vec(),
            },
            "l1_loss",
        )
    }

    /// Back-propagates from a scalar node and returns parameter gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape("backward needs a scalar".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => out.by_param.push((*id, g)),
                Op::MatMul { a, b, ta, tb } => {
                    let (m, n) = node.value.dims2()?;
                    let gm = Mat::new(&g, m, n);
                    let av = self.view(*a, *ta)?;
                    let bv = self.view(*b, *tb)?;
                    if self.needs_grad(*a) {
                        let da = slot(&mut grads, *a, self);
                        if *ta {
                            kernels::gemm(1.0, bv, gm.t(), 1.0, da);
                        } else {
                            kernels::gemm(1.0, gm, bv.t(), 1.0, da);
                        }
                    }
                    if self.needs_grad(*b) {
                        let db = slot(&mut grads, *b, self);
                        if *tb {
                            kernels::gemm(1.0, gm.t(), av, 1.0, db);
                        } else {
                            kernels::gemm(1.0, av.t(), gm, 1.0, db);
                        }
                    }
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if self.needs_grad(v) {
                            axpy(slot(&mut grads, v, self), &g, 1.0);
                        }
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs_grad(*a) {
                        let other = self.value(*b).data();
                        let da = slot(&mut grads, *a, self);
                        for ((d, gg), o) in da.iter_mut().zip(&g).zip(other) {
                            *d += gg * o;
                        }
                    }
                    if self.needs_grad(*b) {
                        let other = self.value(*a).data();
                        let db = slot(&mut grads, *b, self);
                        for ((d, gg), o) in db.iter_mut().zip(&g).zip(other) {
                            *d += gg * o;
                        }
                    }
                }
                Op::AddRow { a, bias } => {
                    if self.needs_grad(*a) {
                        axpy(slot(&mut grads, *a, self), &g, 1.0);
                    }
                    if self.needs_grad(*bias) {
                        let (n, d) = node.value.dims2()?;
                        let db = slot(&mut grads, *bias, self);
                        for r in 0..n {
                            for c in 0..d {
                                db[c] += g[r * d + c];
                            }
                        }
                    }
                }
                Op::Scale(a, s) => {
                    if self.needs_grad(*a) {
                        axpy(slot(&mut grads, *a, self), &g, *s);
                    }
                }
                Op::Gelu(a) => {
                    if self.needs_grad(*a) {
                        let x = self.value(*a).data();
                        let da = slot(&mut grads, *a, self);
                        for ((d, gg), xv) in da.iter_mut().zip(&g).zip(x) {
                            *d += gg * kernels::gelu_grad(*xv);
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    if self.needs_grad(*a) {
                        let y = node.value.data();
                        let da = slot(&mut grads, *a, self);
                        for ((d, gg), yv) in da.iter_mut().zip(&g).zip(y) {
                            *d += gg * yv * (1.0 - yv);
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    cache,
                } => {
                    let (n, d) = node.value.dims2()?;
                    let gam = self.value(*gamma).data().to_vec();
                    let mut dx = self.needs_grad(*x).then(|| vec![0.0; n * d]);
                    let mut dg = self.needs_grad(*gamma).then(|| vec![0.0; d]);
                    let mut db = self.needs_grad(*beta).then(|| vec![0.0; d]);
                    kernels::layer_norm_backward(
                        cache,
                        &gam,
                        &g,
                        n,
                        d,
                        dx.as_deref_mut(),
                        dg.as_deref_mut(),
                        db.as_deref_mut(),
                    );
                    for (v, part) in [(*x, dx), (*gamma, dg), (*beta, db)] {
                        if let Some(part) = part {
                            axpy(slot(&mut grads, v, self), &part, 1.0);
                        }
                    }
                }
                Op::MaskedSoftmax(a) => {
                    if self.needs_grad(*a) {
                        let (n, m) = node.value.dims2()?;
                        let da = slot(&mut grads, *a, self);
                        kernels::softmax_rows_backward(node.value.data(), &g, n, m, da);
                    }
                }
                Op::SliceCols { a, start } => {
                    if self.needs_grad(*a) {
                        let (n, len) = node.value.dims2()?;
                        let d = self.value(*a).cols();
                        let da = slot(&mut grads, *a, self);
                        for r in 0..n {
                            for c in 0..len {
                                da[r * d + start + c] += g[r * len + c];
                            }
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let (n, total) = node.value.dims2()?;
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        if self.needs_grad(p) {
                            let dp = slot(&mut grads, p, self);
                            for r in 0..n {
                                for c in 0..w {
                                    dp[r * w + c] += g[r * total + off + c];
                                }
                            }
                        }
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        if self.needs_grad(p) {
                            axpy(slot(&mut grads, p, self), &g[off..off + len], 1.0);
                        }
                        off += len;
                    }
                }
                Op::SelectRows { a, idx } => {
                    if self.needs_grad(*a) {
                        let d = node.value.cols();
                        let da = slot(&mut grads, *a, self);
                        for (i, &src) in idx.iter().enumerate() {
                            for c in 0..d {
                                da[src * d + c] += g[i * d + c];
                            }
                        }
                    }
                }
                Op::ScatterRows { a, idx } => {
                    if self.needs_grad(*a) {
                        let d = node.value.cols();
                        let da = slot(&mut grads, *a, self);
                        for (i, &dst) in idx.iter().enumerate() {
                            for c in 0..d {
                                da[i * d + c] += g[dst * d + c];
                            }
                        }
                    }
                }
                Op::Transpose(a) => {
                    if self.needs_grad(*a) {
                        let (r, c) = node.value.dims2()?;
                        let da = slot(&mut grads, *a, self);
                        for i in 0..r {
                            for j in 0..c {
                                da[j * r + i] += g[i * c + j];
                            }
                        }
                    }
                }
                Op::Conv2d(ctx) => {
                    let hw = ctx.h * ctx.w_px;
                    let kk = ctx.cin * ctx.k * ctx.k;
                    let gm = Mat::new(&g, ctx.cout, hw);
                    if self.needs_grad(ctx.w) {
                        let dw = slot(&mut grads, ctx.w, self);
                        kernels::gemm(1.0, gm, Mat::new(&ctx.cols, kk, hw).t(), 1.0, dw);
                    }
                    if self.needs_grad(ctx.b) {
                        let db = slot(&mut grads, ctx.b, self);
                        for co in 0..ctx.cout {
                            db[co] += g[co * hw..(co + 1) * hw].iter().sum::<f64>();
                        }
                    }
                    if self.needs_grad(ctx.x) {
                        let mut dcols = vec![0.0; kk * hw];
                        kernels::gemm(
                            1.0,
                            Mat::new(self.value(ctx.w).data(), ctx.cout, kk).t(),
                            gm,
                            0.0,
                            &mut dcols,
                        );
                        let dx = slot(&mut grads, ctx.x, self);
                        kernels::col2im(&dcols, ctx.cin, ctx.h, ctx.w_px, ctx.k, ctx.pad, dx);
                    }
                }
                Op::Sum(a) => {
                    if self.needs_grad(*a) {
                        let da = slot(&mut grads, *a, self);
                        da.iter_mut().for_each(|d| *d += g[0]);
                    }
                }
                Op::WeightedSum(terms) => {
                    for &(v, w) in terms {
                        if self.needs_grad(v) {
                            axpy(slot(&mut grads, v, self), &g, w);
                        }
                    }
                }
                Op::Focal { p, grad } => {
                    if self.needs_grad(*p) {
                        axpy(slot(&mut grads, *p, self), grad, g[0]);
                    }
                }
                Op::BoxAt {
                    offset,
                    size,
                    cell,
                    grid,
                } => {
                    let hw = grid * grid;
                    let gf = *grid as f64;
                    if self.needs_grad(*offset) {
                        let d = slot(&mut grads, *offset, self);
                        d[*cell] += g[0] / gf;
                        d[hw + cell] += g[1] / gf;
                    }
                    if self.needs_grad(*size) {
                        let d = slot(&mut grads, *size, self);
                        d[*cell] += g[2];
                        d[hw + cell] += g[3];
                    }
                }
                Op::Giou { pred, grad } => {
                    if self.needs_grad(*pred) {
                        axpy(slot(&mut grads, *pred, self), grad, g[0]);
                    }
                }
                Op::L1 { pred, gt } => {
                    if self.needs_grad(*pred) {
                        let p = self.value(*pred).data();
                        let scale = g[0] / gt.len() as f64;
                        let dp = slot(&mut grads, *pred, self);
                        for ((d, pv), t) in dp.iter_mut().zip(p).zip(gt) {
                            let diff = pv - t;
                            if diff != 0.0 {
                                *d += scale * diff.signum();
                            }
                        }
                    }
                }
            }
        }
        out.by_param.sort_by_key(|(id, _)| *id);
        Ok(out)
    }

    fn needs_grad(&self, v: Var) -> bool {
        !matches!(self.nodes[v.0].op, Op::Input)
    }
}

fn logical(m: &Mat<'_>) -> (usize, usize) {
    if m.trans {
        (m.cols, m.rows)
    } else {
        (m.rows, m.cols)
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], v: Var, graph: &Graph) -> &'a mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; graph.value(v).len()])
}

fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}
