//! Define-by-run reverse-mode differentiation.
//!
//! Every method on [`Var`] evaluates eagerly and appends a node to the
//! owning [`Graph`]. Node ids are allocated in evaluation order, so the
//! node list is already a topological order and the backward pass is a
//! single reverse sweep.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{shape_err, NumError, Result};
use crate::kernels::{self, ConvGeom};
use crate::params::{Gradients, ParamStore};
use crate::tensor::Tensor;

/// Pairwise saliency combination used to build an attention mask
/// `M = SIM(m) + I - Diag(m)` from token saliencies `m`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MaskVariant {
    /// `m_i * m_j`
    Dot,
    /// `2 m_i m_j / max(m_i + m_j, eps)`
    Harmonic { eps: f64 },
    /// `(m_i + m_j) / 2`
    Arithmetic,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, ta: bool, tb: bool, m: usize, k: usize, n: usize },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    /// `[n, d] x [N, d] -> [N, n, d]`
    Modulate(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MulScalarVar(usize, usize),
    Pow(usize, usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    Gelu(usize),
    Abs(usize),
    Square(usize),
    ClampMin(usize, f64),
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    Sum(usize),
    Mean(usize),
    MeanRows(usize),
    ConcatCols(Vec<usize>),
    SliceCols { x: usize, start: usize, end: usize },
    SliceRows { x: usize, start: usize },
    MulCol(usize, usize),
    ConcatRows(Vec<usize>),
    Reshape(usize),
    Gather(usize, Rc<Vec<usize>>),
    Conv2d { x: usize, w: usize, b: usize, geom: ConvGeom, cols: Vec<f64> },
    PairDist(usize, usize),
    PairSqDist(usize, usize),
    AttnMask(usize, MaskVariant),
    GaussNll { q: usize, diff: usize, dv: usize, eps: f64 },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward evaluation.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<String, usize>>,
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn any_grad(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives a gradient (retrievable via [`Grads::wrt`]).
    pub fn input(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, true)
    }

    /// The named parameter as a differentiable leaf. Repeated requests for
    /// the same name return the same node.
    pub fn param(&self, store: &ParamStore, name: &str) -> Result<Var<'_>> {
        if let Some(&id) = self.params.borrow().get(name) {
            return Ok(Var { graph: self, id });
        }
        let t = store
            .get(name)
            .ok_or_else(|| NumError::Invalid(format!("unknown parameter `{name}`")))?
            .clone();
        let v = self.input(t);
        self.params.borrow_mut().insert(name.to_string(), v.id);
        Ok(v)
    }

    pub fn backward(&self, root: Var<'_>) -> Result<Grads> {
        let nodes = self.nodes.borrow();
        let root_shape = nodes[root.id].value.shape().to_vec();
        if nodes[root.id].value.numel() != 1 {
            return Err(NumError::NonScalarRoot(root_shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.id + 1];
        grads[root.id] = Some(vec![1.0]);

        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[id] = Some(g);
                continue;
            }
            backprop(&nodes, id, &g, &mut grads);
        }

        let leaves = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| match (&nodes[id].op, g) {
                (Op::Leaf, Some(g)) => Some(Tensor::from_parts(nodes[id].value.shape().to_vec(), g)),
                _ => None,
            })
            .collect();
        let params = self
            .params
            .borrow()
            .iter()
            .map(|(k, &v)| (k.clone(), v))
            .collect();
        Ok(Grads { leaves, params })
    }
}

/// Gradients of one backward pass, indexed by leaf.
pub struct Grads {
    leaves: Vec<Option<Tensor>>,
    params: Vec<(String, usize)>,
}

impl Grads {
    /// Gradient of a leaf; `None` when the loss does not depend on it.
    pub fn wrt(&self, v: Var<'_>) -> Option<&Tensor> {
        self.leaves.get(v.id).and_then(Option::as_ref)
    }

    /// Gradients keyed by parameter name, for parameters the loss touched.
    pub fn params(&self) -> Gradients {
        let mut out = Gradients::default();
        for (name, id) in &self.params {
            if let Some(Some(t)) = self.leaves.get(*id) {
                out.insert(name.clone(), t.clone());
            }
        }
        out
    }
}

fn accum(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, contrib: Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(g) => g.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(contrib),
    }
}

fn unary(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    x: usize,
    g: &[f64],
    f: impl Fn(f64) -> f64,
) {
    if !nodes[x].requires_grad {
        return;
    }
    let xv = nodes[x].value.data();
    let d = xv.iter().zip(g).map(|(&xi, &gi)| gi * f(xi)).collect();
    accum(nodes, grads, x, d);
}

fn unary_out(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    x: usize,
    y: &[f64],
    g: &[f64],
    f: impl Fn(f64) -> f64,
) {
    if !nodes[x].requires_grad {
        return;
    }
    let d = y.iter().zip(g).map(|(&yi, &gi)| gi * f(yi)).collect();
    accum(nodes, grads, x, d);
}

fn backprop(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = nodes[id].value.data();
    let val = |i: usize| nodes[i].value.data();
    let needs = |i: usize| nodes[i].requires_grad;
    match &nodes[id].op {
        Op::Leaf => {}
        &Op::MatMul { a, b, ta, tb, m, k, n } => {
            if needs(a) {
                let mut da = vec![0.0; m * k];
                if ta {
                    // A is k x m: dA = op(B) dC^T
                    kernels::gemm(tb, true, k, n, m, val(b), g, 0.0, &mut da);
                } else {
                    // dA = dC op(B)^T
                    kernels::gemm(false, !tb, m, n, k, g, val(b), 0.0, &mut da);
                }
                accum(nodes, grads, a, da);
            }
            if needs(b) {
                let mut db = vec![0.0; k * n];
                if tb {
                    // B is n x k: dB = dC^T op(A)
                    kernels::gemm(true, ta, n, m, k, g, val(a), 0.0, &mut db);
                } else {
                    // dB = op(A)^T dC
                    kernels::gemm(!ta, false, k, m, n, val(a), g, 0.0, &mut db);
                }
                accum(nodes, grads, b, db);
            }
        }
        &Op::Add(a, b) => {
            accum(nodes, grads, a, g.to_vec());
            accum(nodes, grads, b, g.to_vec());
        }
        &Op::Sub(a, b) => {
            accum(nodes, grads, a, g.to_vec());
            accum(nodes, grads, b, g.iter().map(|v| -v).collect());
        }
        &Op::Mul(a, b) => {
            if needs(a) {
                accum(nodes, grads, a, g.iter().zip(val(b)).map(|(x, y)| x * y).collect());
            }
            if needs(b) {
                accum(nodes, grads, b, g.iter().zip(val(a)).map(|(x, y)| x * y).collect());
            }
        }
        &Op::AddRow(x, b) => {
            accum(nodes, grads, x, g.to_vec());
            if needs(b) {
                let d = val(b).len();
                let mut db = vec![0.0; d];
                for row in g.chunks_exact(d) {
                    db.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                }
                accum(nodes, grads, b, db);
            }
        }
        &Op::MulRow(x, c) => {
            let cv = val(c);
            let d = cv.len();
            if needs(x) {
                let dx = g
                    .chunks_exact(d)
                    .flat_map(|row| row.iter().zip(cv).map(|(a, b)| a * b))
                    .collect();
                accum(nodes, grads, x, dx);
            }
            if needs(c) {
                let mut dc = vec![0.0; d];
                for (row, xr) in g.chunks_exact(d).zip(val(x).chunks_exact(d)) {
                    for j in 0..d {
                        dc[j] += row[j] * xr[j];
                    }
                }
                accum(nodes, grads, c, dc);
            }
        }
        &Op::Modulate(x, c) => {
            let xv = val(x);
            let cv = val(c);
            let d = nodes[x].value.cols();
            let n = xv.len() / d;
            if needs(x) {
                let mut dx = vec![0.0; xv.len()];
                for (gb, cr) in g.chunks_exact(n * d).zip(cv.chunks_exact(d)) {
                    for (dxr, gr) in dx.chunks_exact_mut(d).zip(gb.chunks_exact(d)) {
                        for j in 0..d {
                            dxr[j] += gr[j] * cr[j];
                        }
                    }
                }
                accum(nodes, grads, x, dx);
            }
            if needs(c) {
                let mut dc = vec![0.0; cv.len()];
                for (gb, dcr) in g.chunks_exact(n * d).zip(dc.chunks_exact_mut(d)) {
                    for (gr, xr) in gb.chunks_exact(d).zip(xv.chunks_exact(d)) {
                        for j in 0..d {
                            dcr[j] += gr[j] * xr[j];
                        }
                    }
                }
                accum(nodes, grads, c, dc);
            }
        }
        &Op::Scale(x, s) => accum(nodes, grads, x, g.iter().map(|v| v * s).collect()),
        &Op::AddScalar(x) => accum(nodes, grads, x, g.to_vec()),
        &Op::MulScalarVar(x, s) => {
            let sv = val(s)[0];
            if needs(x) {
                accum(nodes, grads, x, g.iter().map(|v| v * sv).collect());
            }
            if needs(s) {
                let ds = g.iter().zip(val(x)).map(|(a, b)| a * b).sum();
                accum(nodes, grads, s, vec![ds]);
            }
        }
        &Op::Pow(base, e) => {
            let ev = val(e)[0];
            let bv = val(base);
            if needs(base) {
                let d = bv
                    .iter()
                    .zip(g)
                    .map(|(&b, &gi)| if b > 0.0 { gi * ev * b.powf(ev - 1.0) } else { 0.0 })
                    .collect();
                accum(nodes, grads, base, d);
            }
            if needs(e) {
                let de = bv
                    .iter()
                    .zip(out)
                    .zip(g)
                    .map(|((&b, &y), &gi)| if b > 0.0 { gi * y * b.ln() } else { 0.0 })
                    .sum();
                accum(nodes, grads, e, vec![de]);
            }
        }
        &Op::Exp(x) => unary_out(nodes, grads, x, out, g, |y| y),
        &Op::Log(x) => unary(nodes, grads, x, g, |v| 1.0 / v),
        &Op::Tanh(x) => unary_out(nodes, grads, x, out, g, |y| 1.0 - y * y),
        &Op::Sigmoid(x) => unary_out(nodes, grads, x, out, g, |y| y * (1.0 - y)),
        &Op::Relu(x) => unary(nodes, grads, x, g, |v| if v > 0.0 { 1.0 } else { 0.0 }),
        &Op::Gelu(x) => unary(nodes, grads, x, g, |v| kernels::gelu_grad_scalar(v)),
        &Op::Abs(x) => unary(nodes, grads, x, g, |v| {
            if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            }
        }),
        &Op::Square(x) => unary(nodes, grads, x, g, |v| 2.0 * v),
        &Op::ClampMin(x, lo) => unary(nodes, grads, x, g, |v| if v > lo { 1.0 } else { 0.0 }),
        &Op::Softmax(x) => {
            let c = nodes[id].value.cols();
            let mut dx = vec![0.0; out.len()];
            for ((yr, gr), dr) in out.chunks_exact(c).zip(g.chunks_exact(c)).zip(dx.chunks_exact_mut(c)) {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..c {
                    dr[j] = yr[j] * (gr[j] - dot);
                }
            }
            accum(nodes, grads, x, dx);
        }
        &Op::LogSoftmax(x) => {
            let c = nodes[id].value.cols();
            let mut dx = vec![0.0; out.len()];
            for ((yr, gr), dr) in out.chunks_exact(c).zip(g.chunks_exact(c)).zip(dx.chunks_exact_mut(c)) {
                let s: f64 = gr.iter().sum();
                for j in 0..c {
                    dr[j] = gr[j] - yr[j].exp() * s;
                }
            }
            accum(nodes, grads, x, dx);
        }
        Op::LayerNorm { x, gain, bias, xhat, rstd } => {
            let (x, gain, bias) = (*x, *gain, *bias);
            let gv = val(gain);
            let d = gv.len();
            if needs(gain) {
                let mut dg = vec![0.0; d];
                for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                    for j in 0..d {
                        dg[j] += gr[j] * hr[j];
                    }
                }
                accum(nodes, grads, gain, dg);
            }
            if needs(bias) {
                let mut db = vec![0.0; d];
                for gr in g.chunks_exact(d) {
                    db.iter_mut().zip(gr).for_each(|(s, v)| *s += v);
                }
                accum(nodes, grads, bias, db);
            }
            if needs(x) {
                let mut dx = vec![0.0; g.len()];
                for (((gr, hr), dr), &rs) in g
                    .chunks_exact(d)
                    .zip(xhat.chunks_exact(d))
                    .zip(dx.chunks_exact_mut(d))
                    .zip(rstd)
                {
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..d {
                        let dh = gr[j] * gv[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    for j in 0..d {
                        let dh = gr[j] * gv[j];
                        dr[j] = rs * (dh - mean_dh - hr[j] * mean_dh_h);
                    }
                }
                accum(nodes, grads, x, dx);
            }
        }
        &Op::Sum(x) => accum(nodes, grads, x, vec![g[0]; val(x).len()]),
        &Op::Mean(x) => {
            let n = val(x).len();
            accum(nodes, grads, x, vec![g[0] / n as f64; n]);
        }
        &Op::MeanRows(x) => {
            let d = out.len();
            let rows = val(x).len() / d;
            let inv = 1.0 / rows as f64;
            let dx = (0..rows).flat_map(|_| g.iter().map(|v| v * inv)).collect();
            accum(nodes, grads, x, dx);
        }
        Op::ConcatCols(parts) => {
            let total = nodes[id].value.cols();
            let rows = out.len() / total;
            let mut offset = 0;
            for &p in parts {
                let w = nodes[p].value.cols();
                if needs(p) {
                    let mut dp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        dp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                    }
                    accum(nodes, grads, p, dp);
                }
                offset += w;
            }
        }
        &Op::SliceCols { x, start, end } => {
            let total = nodes[x].value.cols();
            let w = end - start;
            let rows = out.len() / w;
            let mut dx = vec![0.0; rows * total];
            for r in 0..rows {
                dx[r * total + start..r * total + end].copy_from_slice(&g[r * w..(r + 1) * w]);
            }
            accum(nodes, grads, x, dx);
        }
        &Op::SliceRows { x, start } => {
            let c = nodes[x].value.cols();
            let mut dx = vec![0.0; nodes[x].value.numel()];
            dx[start * c..start * c + g.len()].copy_from_slice(g);
            accum(nodes, grads, x, dx);
        }
        &Op::MulCol(x, s) => {
            let xv = val(x);
            let sv = val(s);
            let c = xv.len() / sv.len();
            if needs(x) {
                let dx = g.iter().enumerate().map(|(i, gi)| gi * sv[i / c]).collect();
                accum(nodes, grads, x, dx);
            }
            if needs(s) {
                let ds = g
                    .chunks_exact(c)
                    .zip(xv.chunks_exact(c))
                    .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                    .collect();
                accum(nodes, grads, s, ds);
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].value.numel();
                if needs(p) {
                    accum(nodes, grads, p, g[offset..offset + len].to_vec());
                }
                offset += len;
            }
        }
        &Op::Reshape(x) => accum(nodes, grads, x, g.to_vec()),
        Op::Gather(x, idx) => {
            let x = *x;
            let mut dx = vec![0.0; val(x).len()];
            for (&i, &gi) in idx.iter().zip(g) {
                dx[i] += gi;
            }
            accum(nodes, grads, x, dx);
        }
        Op::Conv2d { x, w, b, geom, cols } => {
            let (x, w, b) = (*x, *w, *b);
            let rows = geom.out_positions();
            let plen = geom.patch_len();
            let oc = geom.out_ch;
            if needs(w) {
                let mut dw = vec![0.0; plen * oc];
                kernels::gemm(true, false, plen, rows, oc, cols, g, 0.0, &mut dw);
                accum(nodes, grads, w, dw);
            }
            if needs(b) {
                let mut db = vec![0.0; oc];
                for gr in g.chunks_exact(oc) {
                    db.iter_mut().zip(gr).for_each(|(s, v)| *s += v);
                }
                accum(nodes, grads, b, db);
            }
            if needs(x) {
                let mut dcols = vec![0.0; rows * plen];
                kernels::gemm(false, true, rows, oc, plen, g, val(w), 0.0, &mut dcols);
                accum(nodes, grads, x, kernels::col2im(&dcols, geom));
            }
        }
        &Op::PairDist(q, k) => pair_backward(nodes, grads, q, k, g, Some(out)),
        &Op::PairSqDist(q, k) => pair_backward(nodes, grads, q, k, g, None),
        &Op::AttnMask(m, variant) => {
            let mv = val(m);
            let n = mv.len();
            let mut dm = vec![0.0; n];
            for i in 0..n {
                for j in 0..n {
                    let gij = g[i * n + j];
                    if gij == 0.0 {
                        continue;
                    }
                    let (a, b) = (mv[i], mv[j]);
                    if i == j {
                        if let MaskVariant::Dot = variant {
                            dm[i] += gij * (2.0 * a - 1.0);
                        }
                        continue;
                    }
                    let (da, db) = match variant {
                        MaskVariant::Dot => (b, a),
                        MaskVariant::Arithmetic => (0.5, 0.5),
                        MaskVariant::Harmonic { eps } => {
                            let s = a + b;
                            if s > eps {
                                (2.0 * b * b / (s * s), 2.0 * a * a / (s * s))
                            } else {
                                (2.0 * b / eps, 2.0 * a / eps)
                            }
                        }
                    };
                    dm[i] += gij * da;
                    dm[j] += gij * db;
                }
            }
            accum(nodes, grads, m, dm);
        }
        &Op::GaussNll { q, diff, dv, eps } => {
            let qv = val(q);
            let dvv = val(diff);
            let rows = g.len();
            let mut dq = vec![0.0; qv.len()];
            let mut dd = vec![0.0; dvv.len()];
            for r in 0..rows {
                let qr = &qv[r * 2 * dv..(r + 1) * 2 * dv];
                let d = [dvv[2 * r], dvv[2 * r + 1]];
                let om = precision_from_latent(qr, dv, eps);
                let det = om[0] * om[3] - om[1] * om[2];
                let inv = [om[3] / det, -om[1] / det, -om[2] / det, om[0] / det];
                let gr = g[r];
                // dL/dOmega = 0.5 (d d^T - Omega^{-1})
                let gm = [
                    0.5 * (d[0] * d[0] - inv[0]),
                    0.5 * (d[0] * d[1] - inv[1]),
                    0.5 * (d[1] * d[0] - inv[2]),
                    0.5 * (d[1] * d[1] - inv[3]),
                ];
                // Omega = Q Q^T / dv: dL/dQ = (G + G^T) Q / dv
                for a in 0..2 {
                    for c in 0..dv {
                        let mut s = 0.0;
                        for bb in 0..2 {
                            s += (gm[a * 2 + bb] + gm[bb * 2 + a]) * qr[bb * dv + c];
                        }
                        dq[r * 2 * dv + a * dv + c] = gr * s / dv as f64;
                    }
                }
                dd[2 * r] = gr * (om[0] * d[0] + om[1] * d[1]);
                dd[2 * r + 1] = gr * (om[2] * d[0] + om[3] * d[1]);
            }
            accum(nodes, grads, q, dq);
            accum(nodes, grads, diff, dd);
        }
    }
}

fn pair_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    q: usize,
    k: usize,
    g: &[f64],
    dist: Option<&[f64]>,
) {
    let qv = nodes[q].value.data();
    let kv = nodes[k].value.data();
    let d = nodes[q].value.cols();
    let n = qv.len() / d;
    let m = kv.len() / d;
    let mut dq = vec![0.0; qv.len()];
    let mut dk = vec![0.0; kv.len()];
    for i in 0..n {
        for j in 0..m {
            let coef = match dist {
                Some(dd) => {
                    let r = dd[i * m + j];
                    if r > 0.0 {
                        g[i * m + j] / r
                    } else {
                        0.0
                    }
                }
                None => 2.0 * g[i * m + j],
            };
            if coef == 0.0 {
                continue;
            }
            for c in 0..d {
                let diff = qv[i * d + c] - kv[j * d + c];
                dq[i * d + c] += coef * diff;
                dk[j * d + c] -= coef * diff;
            }
        }
    }
    accum(nodes, grads, q, dq);
    accum(nodes, grads, k, dk);
}

/// `Q Q^T / dv + eps I` for a row-major `2 x dv` latent, as `[a, b, c, d]`.
pub fn precision_from_latent(q: &[f64], dv: usize, eps: f64) -> [f64; 4] {
    let mut om = [0.0; 4];
    for a in 0..2 {
        for b in 0..2 {
            om[a * 2 + b] = (0..dv).map(|c| q[a * dv + c] * q[b * dv + c]).sum::<f64>() / dv as f64;
        }
    }
    om[0] += eps;
    om[3] += eps;
    om
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn cols(&self) -> usize {
        self.graph.nodes.borrow()[self.id].value.cols()
    }

    pub fn numel(&self) -> usize {
        self.graph.nodes.borrow()[self.id].value.numel()
    }

    fn same_graph(&self, other: &Var<'_>) -> Result<()> {
        if std::ptr::eq(self.graph, other.graph) {
            Ok(())
        } else {
            Err(NumError::Invalid("vars belong to different graphs".into()))
        }
    }

    fn emit(&self, value: Tensor, op: Op, inputs: &[usize]) -> Var<'g> {
        let rg = self.graph.any_grad(inputs);
        self.graph.push(value, op, rg)
    }

    fn map_unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'g> {
        let x = self.value();
        let y = x.map(f);
        self.emit(y, op, &[self.id])
    }

    /// `self @ other` for matrices; leading axes of `self` are flattened.
    pub fn matmul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.matmul_t(other, false, false)
    }

    /// `op(self) @ op(other)` where `op` optionally transposes.
    pub fn matmul_t(&self, other: &Var<'g>, ta: bool, tb: bool) -> Result<Var<'g>> {
        self.same_graph(other)?;
        let a = self.value();
        let b = other.value();
        let (ar, ac) = (a.rows(), a.cols());
        let (br, bc) = (b.rows(), b.cols());
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return shape_err("matmul", a.shape(), b.shape());
        }
        let mut c = vec![0.0; m * n];
        kernels::gemm(ta, tb, m, k, n, a.data(), b.data(), 0.0, &mut c);
        let op = Op::MatMul { a: self.id, b: other.id, ta, tb, m, k, n };
        Ok(self.emit(Tensor::from_parts(vec![m, n], c), op, &[self.id, other.id]))
    }

    fn zip_same(&self, other: &Var<'g>, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_graph(other)?;
        let a = self.value();
        let b = other.value();
        if a.shape() != b.shape() {
            return shape_err(name, a.shape(), b.shape());
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(a.shape().to_vec(), data))
    }

    pub fn add(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let t = self.zip_same(other, "add", |a, b| a + b)?;
        Ok(self.emit(t, Op::Add(self.id, other.id), &[self.id, other.id]))
    }

    pub fn sub(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let t = self.zip_same(other, "sub", |a, b| a - b)?;
        Ok(self.emit(t, Op::Sub(self.id, other.id), &[self.id, other.id]))
    }

    pub fn mul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let t = self.zip_same(other, "mul", |a, b| a * b)?;
        Ok(self.emit(t, Op::Mul(self.id, other.id), &[self.id, other.id]))
    }

    fn row_broadcast(&self, row: &Var<'g>, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_graph(row)?;
        let x = self.value();
        let r = row.value();
        if x.cols() != r.numel() {
            return shape_err(name, x.shape(), r.shape());
        }
        let d = r.numel();
        let data = x
            .data()
            .chunks_exact(d)
            .flat_map(|xr| xr.iter().zip(r.data()).map(|(&a, &b)| f(a, b)))
            .collect();
        Ok(Tensor::from_parts(x.shape().to_vec(), data))
    }

    /// Adds a length-`d` vector to every row.
    pub fn add_row(&self, row: &Var<'g>) -> Result<Var<'g>> {
        let t = self.row_broadcast(row, "add_row", |a, b| a + b)?;
        Ok(self.emit(t, Op::AddRow(self.id, row.id), &[self.id, row.id]))
    }

    /// Multiplies every row elementwise by a length-`d` vector.
    pub fn mul_row(&self, row: &Var<'g>) -> Result<Var<'g>> {
        let t = self.row_broadcast(row, "mul_row", |a, b| a * b)?;
        Ok(self.emit(t, Op::MulRow(self.id, row.id), &[self.id, row.id]))
    }

    /// `[n, d] x [N, d] -> [N, n, d]`: every row of `self` multiplied by each
    /// row of `rows` in turn.
    pub fn modulate(&self, rows: &Var<'g>) -> Result<Var<'g>> {
        self.same_graph(rows)?;
        let x = self.value();
        let c = rows.value();
        if x.cols() != c.cols() {
            return shape_err("modulate", x.shape(), c.shape());
        }
        let (n, d, big_n) = (x.rows(), x.cols(), c.rows());
        let mut data = Vec::with_capacity(big_n * n * d);
        for cr in c.data().chunks_exact(d) {
            for xr in x.data().chunks_exact(d) {
                data.extend(xr.iter().zip(cr).map(|(a, b)| a * b));
            }
        }
        let t = Tensor::from_parts(vec![big_n, n, d], data);
        Ok(self.emit(t, Op::Modulate(self.id, rows.id), &[self.id, rows.id]))
    }

    pub fn scale(&self, s: f64) -> Var<'g> {
        self.map_unary(Op::Scale(self.id, s), |x| x * s)
    }

    pub fn add_scalar(&self, s: f64) -> Var<'g> {
        self.map_unary(Op::AddScalar(self.id), |x| x + s)
    }

    pub fn neg(&self) -> Var<'g> {
        self.scale(-1.0)
    }

    /// Multiplies every element by a single-element var.
    pub fn mul_scalar(&self, s: &Var<'g>) -> Result<Var<'g>> {
        self.same_graph(s)?;
        let sv = s.value();
        if sv.numel() != 1 {
            return shape_err("mul_scalar", &self.shape(), sv.shape());
        }
        let k = sv.item();
        let y = self.value().map(|x| x * k);
        Ok(self.emit(y, Op::MulScalarVar(self.id, s.id), &[self.id, s.id]))
    }

    /// Elementwise `self ^ e` for non-negative bases and a single-element
    /// exponent. `0 ^ e` is taken to be 0.
    pub fn pow_scalar(&self, e: &Var<'g>) -> Result<Var<'g>> {
        self.same_graph(e)?;
        let ev = e.value();
        if ev.numel() != 1 {
            return shape_err("pow_scalar", &self.shape(), ev.shape());
        }
        let k = ev.item();
        let x = self.value();
        if x.data().iter().any(|&v| v < 0.0) {
            return Err(NumError::Invalid("pow_scalar: negative base".into()));
        }
        let y = x.map(|b| if b > 0.0 { b.powf(k) } else { 0.0 });
        Ok(self.emit(y, Op::Pow(self.id, e.id), &[self.id, e.id]))
    }

    pub fn exp(&self) -> Var<'g> {
        self.map_unary(Op::Exp(self.id), f64::exp)
    }

    pub fn log(&self) -> Var<'g> {
        self.map_unary(Op::Log(self.id), f64::ln)
    }

    pub fn tanh(&self) -> Var<'g> {
        self.map_unary(Op::Tanh(self.id), f64::tanh)
    }

    pub fn sigmoid(&self) -> Var<'g> {
        self.map_unary(Op::Sigmoid(self.id), |x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn relu(&self) -> Var<'g> {
        self.map_unary(Op::Relu(self.id), |x| x.max(0.0))
    }

    pub fn gelu(&self) -> Var<'g> {
        self.map_unary(Op::Gelu(self.id), kernels::gelu_scalar)
    }

    pub fn abs(&self) -> Var<'g> {
        self.map_unary(Op::Abs(self.id), f64::abs)
    }

    pub fn square(&self) -> Var<'g> {
        self.map_unary(Op::Square(self.id), |x| x * x)
    }

    pub fn clamp_min(&self, lo: f64) -> Var<'g> {
        self.map_unary(Op::ClampMin(self.id, lo), |x| x.max(lo))
    }

    pub fn softmax_rows(&self) -> Var<'g> {
        let x = self.value();
        let mut y = vec![0.0; x.numel()];
        kernels::softmax_rows(x.data(), x.cols(), &mut y);
        self.emit(Tensor::from_parts(x.shape().to_vec(), y), Op::Softmax(self.id), &[self.id])
    }

    pub fn log_softmax_rows(&self) -> Var<'g> {
        let x = self.value();
        let mut y = vec![0.0; x.numel()];
        kernels::log_softmax_rows(x.data(), x.cols(), &mut y);
        self.emit(Tensor::from_parts(x.shape().to_vec(), y), Op::LogSoftmax(self.id), &[self.id])
    }

    pub fn layer_norm(&self, gain: &Var<'g>, bias: &Var<'g>, eps: f64) -> Result<Var<'g>> {
        self.same_graph(gain)?;
        self.same_graph(bias)?;
        let x = self.value();
        let gv = gain.value();
        let bv = bias.value();
        let d = x.cols();
        if gv.numel() != d || bv.numel() != d {
            return shape_err("layer_norm", x.shape(), gv.shape());
        }
        let mut xhat = vec![0.0; x.numel()];
        let mut rstd = vec![0.0; x.rows()];
        kernels::layer_norm_rows(x.data(), d, eps, &mut xhat, &mut rstd);
        let (gd, bd) = (gv.data(), bv.data());
        let y = xhat
            .chunks_exact(d)
            .flat_map(|hr| (0..d).map(move |j| hr[j] * gd[j] + bd[j]))
            .collect();
        let op = Op::LayerNorm {
            x: self.id,
            gain: gain.id,
            bias: bias.id,
            xhat,
            rstd,
        };
        Ok(self.emit(
            Tensor::from_parts(x.shape().to_vec(), y),
            op,
            &[self.id, gain.id, bias.id],
        ))
    }

    pub fn sum(&self) -> Var<'g> {
        let s = self.value().sum();
        self.emit(Tensor::scalar(s), Op::Sum(self.id), &[self.id])
    }

    pub fn mean(&self) -> Var<'g> {
        let x = self.value();
        let s = x.sum() / x.numel() as f64;
        self.emit(Tensor::scalar(s), Op::Mean(self.id), &[self.id])
    }

    /// Column means of a matrix (global average pooling over tokens).
    pub fn mean_rows(&self) -> Var<'g> {
        let x = self.value();
        let d = x.cols();
        let rows = x.rows();
        let mut m = vec![0.0; d];
        for r in x.data().chunks_exact(d) {
            m.iter_mut().zip(r).for_each(|(s, v)| *s += v);
        }
        m.iter_mut().for_each(|v| *v /= rows as f64);
        self.emit(Tensor::from_parts(vec![d], m), Op::MeanRows(self.id), &[self.id])
    }

    pub fn concat_cols(parts: &[Var<'g>]) -> Result<Var<'g>> {
        let first = parts
            .first()
            .ok_or_else(|| NumError::Invalid("concat_cols of nothing".into()))?;
        let values: Vec<Rc<Tensor>> = parts.iter().map(Var::value).collect();
        let rows = values[0].rows();
        for (p, v) in parts.iter().zip(&values) {
            first.same_graph(p)?;
            if v.rows() != rows {
                return shape_err("concat_cols", values[0].shape(), v.shape());
            }
        }
        let total: usize = values.iter().map(|v| v.cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &values {
                data.extend_from_slice(v.row(r));
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(first.emit(Tensor::from_parts(vec![rows, total], data), Op::ConcatCols(ids.clone()), &ids))
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var<'g>> {
        let x = self.value();
        let c = x.cols();
        if start >= end || end > c {
            return Err(NumError::Invalid(format!("slice_cols {start}..{end} of {c} columns")));
        }
        let rows = x.rows();
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&x.row(r)[start..end]);
        }
        let op = Op::SliceCols { x: self.id, start, end };
        Ok(self.emit(Tensor::from_parts(vec![rows, end - start], data), op, &[self.id]))
    }

    /// Rows `start..end` of a matrix (leading axes flattened).
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Var<'g>> {
        let x = self.value();
        let (rows, c) = (x.rows(), x.cols());
        if start >= end || end > rows {
            return Err(NumError::Invalid(format!("slice_rows {start}..{end} of {rows} rows")));
        }
        let data = x.data()[start * c..end * c].to_vec();
        let op = Op::SliceRows { x: self.id, start };
        Ok(self.emit(Tensor::from_parts(vec![end - start, c], data), op, &[self.id]))
    }

    /// Multiplies row `i` by `s[i]`.
    pub fn mul_col(&self, s: &Var<'g>) -> Result<Var<'g>> {
        self.same_graph(s)?;
        let x = self.value();
        let sv = s.value();
        if x.rows() != sv.numel() {
            return shape_err("mul_col", x.shape(), sv.shape());
        }
        let c = x.cols();
        let data = x.data().iter().enumerate().map(|(i, v)| v * sv.data()[i / c]).collect();
        let t = Tensor::from_parts(x.shape().to_vec(), data);
        Ok(self.emit(t, Op::MulCol(self.id, s.id), &[self.id, s.id]))
    }

    /// Stacks parts with equal column counts vertically.
    pub fn concat_rows(parts: &[Var<'g>]) -> Result<Var<'g>> {
        let first = parts
            .first()
            .ok_or_else(|| NumError::Invalid("concat_rows of nothing".into()))?;
        let values: Vec<Rc<Tensor>> = parts.iter().map(Var::value).collect();
        let cols = values[0].cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for (p, v) in parts.iter().zip(&values) {
            first.same_graph(p)?;
            if v.cols() != cols {
                return shape_err("concat_rows", values[0].shape(), v.shape());
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(first.emit(Tensor::from_parts(vec![rows, cols], data), Op::ConcatRows(ids.clone()), &ids))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g>> {
        let x = (*self.value()).clone().reshape(shape)?;
        Ok(self.emit(x, Op::Reshape(self.id), &[self.id]))
    }

    /// Picks elements of the flattened input: `out[i] = self.flat[idx[i]]`.
    pub fn gather(&self, idx: Rc<Vec<usize>>, shape: &[usize]) -> Result<Var<'g>> {
        let x = self.value();
        if shape.iter().product::<usize>() != idx.len() {
            return shape_err("gather", shape, &[idx.len()]);
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= x.numel()) {
            return Err(NumError::Invalid(format!("gather index {bad} out of {}", x.numel())));
        }
        let data = idx.iter().map(|&i| x.data()[i]).collect();
        Ok(self.emit(Tensor::from_parts(shape.to_vec(), data), Op::Gather(self.id, idx), &[self.id]))
    }

    /// Channels-last convolution. `self` is `[B, H, W, C]` (or `[H, W, C]`),
    /// `w` is `[k, k, C, O]`, `b` is `[O]`. Output is `[B, Ho, Wo, O]`
    /// (batch axis dropped when the input had none).
    pub fn conv2d(&self, w: &Var<'g>, b: &Var<'g>, stride: usize, pad: usize) -> Result<Var<'g>> {
        self.same_graph(w)?;
        self.same_graph(b)?;
        let x = self.value();
        let wv = w.value();
        let bv = b.value();
        let (batched, dims) = match x.shape() {
            &[bb, h, ww, c] => (true, (bb, h, ww, c)),
            &[h, ww, c] => (false, (1, h, ww, c)),
            s => return shape_err("conv2d", s, wv.shape()),
        };
        let (kh, kw, ic, oc) = match wv.shape() {
            &[kh, kw, ic, oc] => (kh, kw, ic, oc),
            s => return shape_err("conv2d", x.shape(), s),
        };
        if kh != kw || ic != dims.3 || bv.numel() != oc || stride == 0 {
            return shape_err("conv2d", x.shape(), wv.shape());
        }
        if dims.1 + 2 * pad < kh || dims.2 + 2 * pad < kw {
            return shape_err("conv2d", x.shape(), wv.shape());
        }
        let geom = ConvGeom {
            batch: dims.0,
            height: dims.1,
            width: dims.2,
            in_ch: dims.3,
            out_ch: oc,
            kernel: kh,
            stride,
            pad,
        };
        let cols = kernels::im2col(x.data(), &geom);
        let rows = geom.out_positions();
        let mut y: Vec<f64> = (0..rows).flat_map(|_| bv.data().iter().copied()).collect();
        kernels::gemm(false, false, rows, geom.patch_len(), oc, &cols, wv.data(), 1.0, &mut y);
        let shape = if batched {
            vec![geom.batch, geom.out_height(), geom.out_width(), oc]
        } else {
            vec![geom.out_height(), geom.out_width(), oc]
        };
        let op = Op::Conv2d {
            x: self.id,
            w: w.id,
            b: b.id,
            geom,
            cols,
        };
        Ok(self.emit(Tensor::from_parts(shape, y), op, &[self.id, w.id, b.id]))
    }

    fn pairwise(&self, other: &Var<'g>, squared: bool) -> Result<Tensor> {
        self.same_graph(other)?;
        let q = self.value();
        let k = other.value();
        if q.cols() != k.cols() {
            return shape_err("pairwise", q.shape(), k.shape());
        }
        let (n, m, d) = (q.rows(), k.rows(), q.cols());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let qi = q.row(i);
            for j in 0..m {
                let kj = k.row(j);
                let s: f64 = (0..d).map(|c| (qi[c] - kj[c]) * (qi[c] - kj[c])).sum();
                out[i * m + j] = if squared { s } else { s.sqrt() };
            }
        }
        Ok(Tensor::from_parts(vec![n, m], out))
    }

    /// Euclidean distances between rows: `out[i, j] = |self_i - other_j|`.
    pub fn pairwise_dist(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let t = self.pairwise(other, false)?;
        Ok(self.emit(t, Op::PairDist(self.id, other.id), &[self.id, other.id]))
    }

    /// Squared Euclidean distances between rows.
    pub fn pairwise_sqdist(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let t = self.pairwise(other, true)?;
        Ok(self.emit(t, Op::PairSqDist(self.id, other.id), &[self.id, other.id]))
    }

    /// Attention mask `SIM(m) + I - Diag(m)` from a saliency vector.
    ///
    /// For the harmonic and arithmetic variants the diagonal is exactly 1.
    pub fn attention_mask(&self, variant: MaskVariant) -> Result<Var<'g>> {
        let m = self.value();
        if let Some(bad) = m.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(NumError::Invalid(format!("saliency {bad} outside [0, 1]")));
        }
        let t = mask_matrix(m.data(), variant);
        Ok(self.emit(t, Op::AttnMask(self.id, variant), &[self.id]))
    }

    /// Per-row Gaussian negative log-likelihood in precision form:
    /// `0.5 (d^T Omega d - log det Omega)` with `Omega = Q Q^T / dv + eps I`,
    /// where `self` holds latents `[M, 2 dv]` and `diff` holds `[M, 2]`.
    pub fn gauss_nll(&self, diff: &Var<'g>, dv: usize, eps: f64) -> Result<Var<'g>> {
        self.same_graph(diff)?;
        let q = self.value();
        let d = diff.value();
        if q.cols() != 2 * dv || d.cols() != 2 || q.rows() != d.rows() {
            return shape_err("gauss_nll", q.shape(), d.shape());
        }
        let rows = q.rows();
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let om = precision_from_latent(q.row(r), dv, eps);
            let det = om[0] * om[3] - om[1] * om[2];
            if det <= 0.0 {
                return Err(NumError::NonFinite(format!("singular precision at row {r}")));
            }
            let dr = d.row(r);
            let maha = dr[0] * (om[0] * dr[0] + om[1] * dr[1]) + dr[1] * (om[2] * dr[0] + om[3] * dr[1]);
            out.push(0.5 * (maha - det.ln()));
        }
        let op = Op::GaussNll {
            q: self.id,
            diff: diff.id,
            dv,
            eps,
        };
        Ok(self.emit(Tensor::from_parts(vec![rows], out), op, &[self.id, diff.id]))
    }

    /// `x W + b` for a 2-D (or flattened) input.
    pub fn linear(&self, w: &Var<'g>, b: Option<&Var<'g>>) -> Result<Var<'g>> {
        let y = self.matmul(w)?;
        match b {
            Some(b) => y.add_row(b),
            None => Ok(y),
        }
    }
}

/// Forward attention-mask construction shared with the plain API.
pub fn mask_matrix(m: &[f64], variant: MaskVariant) -> Tensor {
    let n = m.len();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let (a, b) = (m[i], m[j]);
            out[i * n + j] = if i == j {
                match variant {
                    MaskVariant::Dot => a * a + 1.0 - a,
                    _ => 1.0,
                }
            } else {
                match variant {
                    MaskVariant::Dot => a * b,
                    MaskVariant::Arithmetic => 0.5 * (a + b),
                    MaskVariant::Harmonic { eps } => 2.0 * a * b / (a + b).max(eps),
                }
            };
        }
    }
    Tensor::from_parts(vec![n, n], out)
}
