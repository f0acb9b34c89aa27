//! Define-by-run reverse-mode autodiff.
//!
//! Nodes are appended in execution order, which is a topological order, so
//! backward walks the node list from the loss down to index 0.

use std::collections::HashMap;
use std::ops::Range;
use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{Error, Result};
use crate::numerics::kernels::{self, gemm, Layout, LossParts};
use crate::numerics::{Grads, Ops, ParamId, Params, Tensor};

static NEXT_GRAPH_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a node of a particular [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    graph: u32,
    idx: usize,
}

#[derive(Debug)]
enum Op {
    Leaf { param: Option<ParamId> },
    MatMul { a: usize, b: usize },
    MatMulNt { a: usize, b: usize, scale: f64 },
    Add { a: usize, b: usize },
    AddBias { x: usize, bias: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, s: f64 },
    Silu { x: usize },
    RmsNorm { x: usize, gain: Option<usize>, group: usize, inv_rms: Vec<f64> },
    Rotary { x: usize, positions: Vec<usize>, head_dim: usize, inv_freq: Vec<f64> },
    Softmax { x: usize, axis: usize },
    Gather { table: usize, ids: Vec<u32> },
    Slice { x: usize, rows: Range<usize>, cols: Range<usize> },
    ConcatCols { parts: Vec<usize> },
    ConcatRows { parts: Vec<usize> },
    Dropout { x: usize, keep: Vec<f64> },
    Sum { x: usize },
    LmLoss { logits: usize, targets: Vec<u32>, mask: Vec<bool>, z_coef: f64, count: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::MatMulNt { .. } => "matmul_nt",
            Op::Add { .. } => "add",
            Op::AddBias { .. } => "add_bias",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Silu { .. } => "silu",
            Op::RmsNorm { .. } => "rmsnorm",
            Op::Rotary { .. } => "rotary",
            Op::Softmax { .. } => "softmax",
            Op::Gather { .. } => "gather_rows",
            Op::Slice { .. } => "slice",
            Op::ConcatCols { .. } => "concat_cols",
            Op::ConcatRows { .. } => "concat_rows",
            Op::Dropout { .. } => "dropout",
            Op::Sum { .. } => "sum",
            Op::LmLoss { .. } => "lm_loss",
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf { .. } => vec![],
            Op::MatMul { a, b } | Op::MatMulNt { a, b, .. } | Op::Add { a, b } | Op::Mul { a, b } => {
                vec![*a, *b]
            }
            Op::AddBias { x, bias } => vec![*x, *bias],
            Op::RmsNorm { x, gain, .. } => std::iter::once(*x).chain(*gain).collect(),
            Op::Scale { x, .. }
            | Op::Silu { x }
            | Op::Rotary { x, .. }
            | Op::Softmax { x, .. }
            | Op::Slice { x, .. }
            | Op::Dropout { x, .. }
            | Op::Sum { x } => vec![*x],
            Op::Gather { table, .. } => vec![*table],
            Op::ConcatCols { parts } | Op::ConcatRows { parts } => parts.clone(),
            Op::LmLoss { logits, .. } => vec![*logits],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording computation graph.
pub struct Graph {
    id: u32,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    backward_done: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            backward_done: false,
        }
    }

    /// Drops every node so the graph can record a new step.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.param_vars.clear();
        self.backward_done = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf holding a free variable that receives gradients (not a parameter).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, None, true)
    }

    pub fn grad(&self, v: &Var) -> Option<&[f64]> {
        self.check(v).ok()?;
        self.nodes[v.idx].value.grad()
    }

    fn check(&self, v: &Var) -> Result<()> {
        if v.graph != self.id || v.idx >= self.nodes.len() {
            return Err(Error::DetachedGraph);
        }
        Ok(())
    }

    fn push_leaf(&mut self, t: Tensor, param: Option<ParamId>, requires_grad: bool) -> Var {
        let idx = self.nodes.len();
        self.nodes.push(Node {
            value: t.with_requires_grad(requires_grad),
            op: Op::Leaf { param },
            requires_grad,
        });
        Var { graph: self.id, idx }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        kernels::check_finite(&value, op.name())?;
        let requires_grad = op.inputs().iter().any(|&i| self.nodes[i].requires_grad);
        let idx = self.nodes.len();
        self.nodes.push(Node { value: value.with_requires_grad(requires_grad), op, requires_grad });
        Ok(Var { graph: self.id, idx })
    }

    fn val(&self, v: &Var) -> Result<&Tensor> {
        self.check(v)?;
        Ok(&self.nodes[v.idx].value)
    }

    /// Runs reverse-mode differentiation from a scalar `loss`.
    pub fn backward(&mut self, loss: &Var) -> Result<()> {
        self.check(loss)?;
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let shape = self.nodes[loss.idx].value.shape().to_vec();
        if self.nodes[loss.idx].value.numel() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.idx] = Some(vec![1.0]);
        for idx in (0..=loss.idx).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(idx, &dy, &mut grads);
            }
            // only leaves keep their gradient once propagated
            if matches!(node.op, Op::Leaf { .. }) {
                grads[idx] = Some(dy);
            }
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if let (true, Some(g)) = (node.requires_grad, g) {
                node.value.set_grad(g);
            }
        }
        Ok(())
    }

    /// Adds the gradients of every parameter leaf into `grads`.
    pub fn accumulate_param_grads(&self, grads: &mut Grads) {
        for node in &self.nodes {
            if let (Op::Leaf { param: Some(id) }, Some(g)) = (&node.op, node.value.grad()) {
                grads.accumulate(*id, g);
            }
        }
    }

    fn propagate(&self, idx: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let y = &nodes[idx].value;
        macro_rules! with_grad {
            ($i:expr, |$g:ident| $body:expr) => {
                if nodes[$i].requires_grad {
                    let $g: &mut Vec<f64> =
                        grads[$i].get_or_insert_with(|| vec![0.0; nodes[$i].value.numel()]);
                    $body;
                }
            };
        }
        match &nodes[idx].op {
            Op::Leaf { .. } => {}
            Op::MatMul { a, b } => {
                let (m, k) = (nodes[*a].value.shape()[0], nodes[*a].value.shape()[1]);
                let n = nodes[*b].value.shape()[1];
                let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
                with_grad!(*a, |ga| gemm(m, n, k, 1.0, dy, Layout::Plain, bv, Layout::Transposed, 1.0, ga));
                with_grad!(*b, |gb| gemm(k, m, n, 1.0, av, Layout::Transposed, dy, Layout::Plain, 1.0, gb));
            }
            Op::MatMulNt { a, b, scale } => {
                let (m, k) = (nodes[*a].value.shape()[0], nodes[*a].value.shape()[1]);
                let n = nodes[*b].value.shape()[0];
                let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
                with_grad!(*a, |ga| gemm(m, n, k, *scale, dy, Layout::Plain, bv, Layout::Plain, 1.0, ga));
                with_grad!(*b, |gb| gemm(n, m, k, *scale, dy, Layout::Transposed, av, Layout::Plain, 1.0, gb));
            }
            Op::Add { a, b } => {
                with_grad!(*a, |ga| axpy(ga, dy, 1.0));
                with_grad!(*b, |gb| axpy(gb, dy, 1.0));
            }
            Op::AddBias { x, bias } => {
                with_grad!(*x, |gx| axpy(gx, dy, 1.0));
                with_grad!(*bias, |gb| {
                    let n = gb.len();
                    for row in dy.chunks(n) {
                        axpy(gb, row, 1.0);
                    }
                });
            }
            Op::Mul { a, b } => {
                let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
                with_grad!(*a, |ga| ga.iter_mut().zip(dy).zip(bv).for_each(|((g, d), v)| *g += d * v));
                with_grad!(*b, |gb| gb.iter_mut().zip(dy).zip(av).for_each(|((g, d), v)| *g += d * v));
            }
            Op::Scale { x, s } => with_grad!(*x, |gx| axpy(gx, dy, *s)),
            Op::Silu { x } => {
                let xv = nodes[*x].value.data();
                with_grad!(*x, |gx| {
                    for ((g, d), &v) in gx.iter_mut().zip(dy).zip(xv) {
                        let s = kernels::sigmoid(v);
                        *g += d * s * (1.0 + v * (1.0 - s));
                    }
                });
            }
            Op::RmsNorm { x, gain, group, inv_rms } => {
                let xv = nodes[*x].value.data();
                let gainv = gain.map(|g| nodes[g].value.data());
                let group = *group;
                if let Some(gi) = gain {
                    with_grad!(*gi, |gg| {
                        for ((xc, dc), r) in xv.chunks(group).zip(dy.chunks(group)).zip(inv_rms) {
                            for j in 0..group {
                                gg[j] += dc[j] * xc[j] * r;
                            }
                        }
                    });
                }
                with_grad!(*x, |gx| {
                    let mut dn = vec![0.0; group];
                    for (c, ((xc, dc), r)) in xv.chunks(group).zip(dy.chunks(group)).zip(inv_rms).enumerate() {
                        let mut dot = 0.0;
                        for j in 0..group {
                            dn[j] = dc[j] * gainv.map_or(1.0, |g| g[j]);
                            dot += dn[j] * xc[j] * r;
                        }
                        let mean = dot / group as f64;
                        let out = &mut gx[c * group..(c + 1) * group];
                        for j in 0..group {
                            out[j] += r * (dn[j] - xc[j] * r * mean);
                        }
                    }
                });
            }
            Op::Rotary { x, positions, head_dim, inv_freq } => {
                with_grad!(*x, |gx| {
                    let dyt = Tensor::new(y.shape().to_vec(), dy.to_vec()).expect("shape");
                    let back = kernels::rotary(&dyt, positions, *head_dim, inv_freq, -1.0).expect("validated");
                    axpy(gx, back.data(), 1.0);
                });
            }
            Op::Softmax { x, axis } => {
                let shape = y.shape();
                let len = shape[*axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let outer: usize = shape[..*axis].iter().product();
                let yv = y.data();
                with_grad!(*x, |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let dot: f64 = (0..len).map(|j| dy[base + j * inner] * yv[base + j * inner]).sum();
                            for j in 0..len {
                                let p = base + j * inner;
                                gx[p] += yv[p] * (dy[p] - dot);
                            }
                        }
                    }
                });
            }
            Op::Gather { table, ids } => {
                let d = nodes[*table].value.shape()[1];
                with_grad!(*table, |gt| {
                    for (row, &id) in dy.chunks(d).zip(ids) {
                        axpy(&mut gt[id as usize * d..(id as usize + 1) * d], row, 1.0);
                    }
                });
            }
            Op::Slice { x, rows, cols } => {
                let c = nodes[*x].value.shape()[1];
                let w = cols.len();
                with_grad!(*x, |gx| {
                    for (r, i) in rows.clone().enumerate() {
                        axpy(&mut gx[i * c + cols.start..i * c + cols.end], &dy[r * w..(r + 1) * w], 1.0);
                    }
                });
            }
            Op::ConcatCols { parts } => {
                let total = y.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = nodes[p].value.shape()[1];
                    with_grad!(p, |gp| {
                        for (r, row) in gp.chunks_mut(w).enumerate() {
                            axpy(row, &dy[r * total + offset..r * total + offset + w], 1.0);
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = nodes[p].value.numel();
                    with_grad!(p, |gp| axpy(gp, &dy[offset..offset + n], 1.0));
                    offset += n;
                }
            }
            Op::Dropout { x, keep } => {
                with_grad!(*x, |gx| gx.iter_mut().zip(dy).zip(keep).for_each(|((g, d), k)| *g += d * k));
            }
            Op::Sum { x } => with_grad!(*x, |gx| gx.iter_mut().for_each(|g| *g += dy[0])),
            Op::LmLoss { logits, targets, mask, z_coef, count } => {
                let lv = &nodes[*logits].value;
                let vocab = lv.shape()[1];
                let lse = kernels::row_logsumexp(lv);
                let w = dy[0] / *count as f64;
                with_grad!(*logits, |gl| {
                    for (i, row) in lv.data().chunks(vocab).enumerate() {
                        if !mask[i] {
                            continue;
                        }
                        let zf = 1.0 + 2.0 * z_coef * lse[i];
                        let out = &mut gl[i * vocab..(i + 1) * vocab];
                        for (j, &l) in row.iter().enumerate() {
                            out[j] += w * zf * (l - lse[i]).exp();
                        }
                        out[targets[i] as usize] -= w;
                    }
                });
            }
        }
    }
}

fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += alpha * s);
}

impl Ops for Graph {
    type V = Var;

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor {
        assert!(v.graph == self.id, "tensor handle from another graph");
        &self.nodes[v.idx].value
    }

    fn param(&mut self, params: &Params, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        let v = self.push_leaf(params.get(id).clone(), Some(id), true);
        self.param_vars.insert(id, v);
        v
    }

    fn constant(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, None, false)
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = kernels::matmul(self.val(a)?, self.val(b)?)?;
        self.push(out, Op::MatMul { a: a.idx, b: b.idx })
    }

    fn matmul_nt(&mut self, a: &Var, b: &Var, scale: f64) -> Result<Var> {
        let out = kernels::matmul_nt(self.val(a)?, self.val(b)?, scale)?;
        self.push(out, Op::MatMulNt { a: a.idx, b: b.idx, scale })
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = kernels::add(self.val(a)?, self.val(b)?)?;
        self.push(out, Op::Add { a: a.idx, b: b.idx })
    }

    fn add_bias(&mut self, x: &Var, bias: &Var) -> Result<Var> {
        let out = kernels::add_bias(self.val(x)?, self.val(bias)?)?;
        self.push(out, Op::AddBias { x: x.idx, bias: bias.idx })
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = kernels::mul(self.val(a)?, self.val(b)?)?;
        self.push(out, Op::Mul { a: a.idx, b: b.idx })
    }

    fn scale(&mut self, x: &Var, s: f64) -> Result<Var> {
        let out = kernels::scale(self.val(x)?, s);
        self.push(out, Op::Scale { x: x.idx, s })
    }

    fn silu(&mut self, x: &Var) -> Result<Var> {
        let out = kernels::silu(self.val(x)?);
        self.push(out, Op::Silu { x: x.idx })
    }

    fn rmsnorm(&mut self, x: &Var, gain: Option<&Var>, group: usize) -> Result<Var> {
        let gain_t = match gain {
            Some(g) => Some(self.val(g)?),
            None => None,
        };
        let (out, inv_rms) = kernels::rmsnorm(self.val(x)?, gain_t, group)?;
        self.push(out, Op::RmsNorm { x: x.idx, gain: gain.map(|g| g.idx), group, inv_rms })
    }

    fn rotary(&mut self, x: &Var, positions: &[usize], head_dim: usize, base: f64) -> Result<Var> {
        let inv_freq = kernels::rotary_inv_freq(head_dim, base);
        let out = kernels::rotary(self.val(x)?, positions, head_dim, &inv_freq, 1.0)?;
        self.push(out, Op::Rotary { x: x.idx, positions: positions.to_vec(), head_dim, inv_freq })
    }

    fn softmax(&mut self, x: &Var, axis: usize) -> Result<Var> {
        let out = kernels::softmax(self.val(x)?, axis)?;
        self.push(out, Op::Softmax { x: x.idx, axis })
    }

    fn masked_softmax(&mut self, x: &Var, visible: Option<&[bool]>) -> Result<Var> {
        let xt = self.val(x)?;
        let axis = xt.shape().len() - 1;
        let out = kernels::masked_softmax(xt, visible)?;
        self.push(out, Op::Softmax { x: x.idx, axis })
    }

    fn gather_rows(&mut self, table: &Var, ids: &[u32]) -> Result<Var> {
        let out = kernels::gather_rows(self.val(table)?, ids)?;
        self.push(out, Op::Gather { table: table.idx, ids: ids.to_vec() })
    }

    fn slice(&mut self, x: &Var, rows: Range<usize>, cols: Range<usize>) -> Result<Var> {
        let out = kernels::slice(self.val(x)?, rows.clone(), cols.clone())?;
        self.push(out, Op::Slice { x: x.idx, rows, cols })
    }

    fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors = parts.iter().map(|p| self.val(p)).collect::<Result<Vec<_>>>()?;
        let out = kernels::concat_cols(&tensors)?;
        self.push(out, Op::ConcatCols { parts: parts.iter().map(|p| p.idx).collect() })
    }

    fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors = parts.iter().map(|p| self.val(p)).collect::<Result<Vec<_>>>()?;
        let out = kernels::concat_rows(&tensors)?;
        self.push(out, Op::ConcatRows { parts: parts.iter().map(|p| p.idx).collect() })
    }

    fn dropout(&mut self, x: &Var, keep_scaled: Vec<f64>) -> Result<Var> {
        let xt = self.val(x)?;
        if keep_scaled.len() != xt.numel() {
            return Err(Error::shape("dropout", format!("mask {} for {:?}", keep_scaled.len(), xt.shape())));
        }
        let data = xt.data().iter().zip(&keep_scaled).map(|(v, k)| v * k).collect();
        let out = Tensor::new(xt.shape().to_vec(), data)?;
        self.push(out, Op::Dropout { x: x.idx, keep: keep_scaled })
    }

    fn sum(&mut self, x: &Var) -> Result<Var> {
        let s = self.val(x)?.data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { x: x.idx })
    }

    fn lm_loss(&mut self, logits: &Var, targets: &[u32], mask: &[bool], z_coef: f64) -> Result<(Var, LossParts)> {
        let parts = kernels::lm_loss(self.val(logits)?, targets, mask, z_coef)?;
        let op = Op::LmLoss {
            logits: logits.idx,
            targets: targets.to_vec(),
            mask: mask.to_vec(),
            z_coef,
            count: parts.tokens,
        };
        let v = self.push(Tensor::scalar(parts.total()), op)?;
        Ok((v, parts))
    }
}
