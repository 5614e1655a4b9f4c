//! Reverse-mode automatic differentiation over `f64` ndarrays.
//!
//! A [`Graph`] records operations as they execute; [`Graph::backward`]
//! replays them in reverse to accumulate gradients. All math is double
//! precision and single-threaded, so results are bit-reproducible for a
//! fixed op sequence. Every op materializes its output as a fresh
//! standard-layout array, which keeps reshapes cheap and safe.

use ndarray::{Array2, Array3, ArrayD, Axis, Ix2, IxDyn};

use crate::error::{Error, Result};

/// Dense double-precision tensor.
pub type Tensor = ArrayD<f64>;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    /// `a (..,m,k) x b (..,k,n)`; `b` may be 2-d and shared across leading dims.
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    /// `a + b` with `b` broadcastable to `a`'s shape.
    AddBroadcast {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        a: NodeId,
        factor: f64,
    },
    Relu {
        a: NodeId,
    },
    Gelu {
        a: NodeId,
    },
    /// Softmax over the last axis.
    Softmax {
        a: NodeId,
    },
    /// Layer normalization over the last axis with affine scale/shift.
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    },
    Permute {
        a: NodeId,
        axes: Vec<usize>,
    },
    Reshape {
        a: NodeId,
    },
    /// `select` along `axis` (duplicate indices accumulate on backward).
    IndexSelect {
        a: NodeId,
        axis: usize,
        indices: Vec<usize>,
    },
    /// Per-batch-row gather along axis 1 of a `(b, t, d)` tensor.
    GatherRows {
        a: NodeId,
        indices: Vec<Vec<usize>>,
    },
    /// Inverse of `GatherRows`: place `src (b, v, d)` rows at `positions`
    /// within `(b, total, d)`, filling the rest with `fill (d)`.
    ScatterRows {
        src: NodeId,
        fill: NodeId,
        positions: Vec<Vec<usize>>,
        total: usize,
    },
    Concat {
        parts: Vec<NodeId>,
        axis: usize,
    },
    BroadcastTo {
        a: NodeId,
    },
    /// Mean cross-entropy of `(b, c)` logits against integer labels, with
    /// optional label smoothing.
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        smoothing: f64,
    },
    /// Mean squared error of `(b, p, d)` predictions against a constant
    /// target, restricted to rows selected by `mask (b, p)`.
    MaskedMse {
        pred: NodeId,
        target: Tensor,
        mask: Vec<Vec<bool>>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn dim_err(msg: impl Into<String>) -> Error {
    Error::Dimension(msg.into())
}

/// Sum `grad` down to `shape` (inverse of a broadcast).
fn reduce_to_shape(grad: &Tensor, shape: &[usize]) -> Tensor {
    let mut g = grad.to_owned();
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (axis, (&gd, &sd)) in g.shape().to_vec().iter().zip(shape.iter()).enumerate() {
        if sd == 1 && gd != 1 {
            let summed = g.sum_axis(Axis(axis)).insert_axis(Axis(axis));
            g = summed;
        }
    }
    g
}

/// View `t` as `(p, m, n)` where `p` is the product of its leading dims.
fn as3(t: &Tensor) -> Result<Array3<f64>> {
    let nd = t.ndim();
    if nd < 2 {
        return Err(dim_err("matmul operand must have at least 2 dims"));
    }
    let m = t.shape()[nd - 2];
    let n = t.shape()[nd - 1];
    let p: usize = t.shape()[..nd - 2].iter().product();
    let v = t
        .view()
        .into_shape_with_order((p.max(1), m, n))
        .map_err(|e| dim_err(e.to_string()))?;
    Ok(v.to_owned())
}

fn matmul_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let an = a.ndim();
    let bn = b.ndim();
    let (m, k) = (a.shape()[an - 2], a.shape()[an - 1]);
    let (bk, n) = (b.shape()[bn - 2], b.shape()[bn - 1]);
    if k != bk {
        return Err(dim_err(format!(
            "matmul inner dims differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let lead: Vec<usize> = a.shape()[..an - 2].to_vec();
    let a3 = as3(a)?;
    let p = a3.shape()[0];
    let mut out = Array3::<f64>::zeros((p, m, n));
    if bn == 2 {
        let b2 = b.view().into_dimensionality::<Ix2>().unwrap();
        for i in 0..p {
            out.index_axis_mut(Axis(0), i)
                .assign(&a3.index_axis(Axis(0), i).dot(&b2));
        }
    } else {
        if b.shape()[..bn - 2] != lead[..] {
            return Err(dim_err(format!(
                "matmul leading dims differ: {:?} x {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let b3 = as3(b)?;
        for i in 0..p {
            out.index_axis_mut(Axis(0), i)
                .assign(&a3.index_axis(Axis(0), i).dot(&b3.index_axis(Axis(0), i)));
        }
    }
    let mut shape = lead;
    shape.push(m);
    shape.push(n);
    out.into_shape_with_order(IxDyn(&shape))
        .map_err(|e| dim_err(e.to_string()))
}

fn softmax_last_axis(x: &Tensor) -> Tensor {
    let mut out = x.to_owned();
    let last = out.ndim() - 1;
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    let _ = last;
    out
}

const GELU_COEF: f64 = 0.044_715;

fn gelu_scalar(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + GELU_COEF * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * GELU_COEF * x * x)
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        let value = value.as_standard_layout().to_owned();
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = matmul_forward(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul { a, b }, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let bv = self.value(b);
        let bb = bv.broadcast(av.raw_dim()).ok_or_else(|| {
            dim_err(format!(
                "add: cannot broadcast {:?} to {:?}",
                bv.shape(),
                av.shape()
            ))
        })?;
        let value = av + &bb;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::AddBroadcast { a, b }, rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(dim_err("sub: shape mismatch"));
        }
        let value = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(dim_err("mul: shape mismatch"));
        }
        let value = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let value = self.value(a) * factor;
        let rg = self.rg(a);
        self.push(value, Op::Scale { a, factor }, rg)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).mapv(|v| v.max(0.0));
        let rg = self.rg(a);
        self.push(value, Op::Relu { a }, rg)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).mapv(gelu_scalar);
        let rg = self.rg(a);
        self.push(value, Op::Gelu { a }, rg)
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let value = softmax_last_axis(self.value(a));
        let rg = self.rg(a);
        self.push(value, Op::Softmax { a }, rg)
    }

    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let xv = self.value(x);
        let n = *xv
            .shape()
            .last()
            .ok_or_else(|| dim_err("layer_norm on 0-d"))?;
        if self.value(gamma).shape() != [n] || self.value(beta).shape() != [n] {
            return Err(dim_err("layer_norm: affine params must match last dim"));
        }
        let gv = self.value(gamma).clone();
        let bv = self.value(beta).clone();
        let mut out = xv.to_owned();
        for mut row in out.rows_mut() {
            let mean = row.sum() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            for (i, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * r * gv[i] + bv[i];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            },
            rg,
        ))
    }

    pub fn permute(&mut self, a: NodeId, axes: &[usize]) -> Result<NodeId> {
        if axes.len() != self.value(a).ndim() {
            return Err(dim_err("permute: axes length mismatch"));
        }
        let value = self
            .value(a)
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        let rg = self.rg(a);
        Ok(self.push(
            value,
            Op::Permute {
                a,
                axes: axes.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self
            .value(a)
            .view()
            .into_shape_with_order(IxDyn(shape))
            .map_err(|e| dim_err(e.to_string()))?
            .to_owned();
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape { a }, rg))
    }

    pub fn index_select(&mut self, a: NodeId, axis: usize, indices: &[usize]) -> Result<NodeId> {
        let av = self.value(a);
        if axis >= av.ndim() {
            return Err(dim_err("index_select: axis out of range"));
        }
        if indices.iter().any(|&i| i >= av.shape()[axis]) {
            return Err(dim_err("index_select: index out of range"));
        }
        let value = av.select(Axis(axis), indices);
        let rg = self.rg(a);
        Ok(self.push(
            value.as_standard_layout().to_owned(),
            Op::IndexSelect {
                a,
                axis,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Gather rows along axis 1 with per-batch index lists (all equal length).
    pub fn gather_rows(&mut self, a: NodeId, indices: &[Vec<usize>]) -> Result<NodeId> {
        let av = self.value(a);
        if av.ndim() != 3 {
            return Err(dim_err("gather_rows expects (b, t, d)"));
        }
        let (b, t, d) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        if indices.len() != b {
            return Err(dim_err(
                "gather_rows: one index list per batch row required",
            ));
        }
        let k = indices.first().map_or(0, |v| v.len());
        if indices.iter().any(|v| v.len() != k) {
            return Err(dim_err("gather_rows: ragged index lists"));
        }
        if indices.iter().flatten().any(|&i| i >= t) {
            return Err(dim_err("gather_rows: index out of range"));
        }
        let a3 = av.view().into_dimensionality::<ndarray::Ix3>().unwrap();
        let mut out = Array3::<f64>::zeros((b, k, d));
        for (bi, idx) in indices.iter().enumerate() {
            for (j, &src) in idx.iter().enumerate() {
                out.index_axis_mut(Axis(0), bi)
                    .index_axis_mut(Axis(0), j)
                    .assign(&a3.index_axis(Axis(0), bi).index_axis(Axis(0), src));
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            out.into_dyn(),
            Op::GatherRows {
                a,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Scatter `src (b, v, d)` into a `(b, total, d)` tensor at `positions`,
    /// filling unoccupied rows with the `fill (d)` vector.
    pub fn scatter_rows(
        &mut self,
        src: NodeId,
        fill: NodeId,
        positions: &[Vec<usize>],
        total: usize,
    ) -> Result<NodeId> {
        let sv = self.value(src);
        if sv.ndim() != 3 {
            return Err(dim_err("scatter_rows expects (b, v, d) source"));
        }
        let (b, v, d) = (sv.shape()[0], sv.shape()[1], sv.shape()[2]);
        if self.value(fill).shape() != [d] {
            return Err(dim_err("scatter_rows: fill must be a (d,) vector"));
        }
        if positions.len() != b || positions.iter().any(|p| p.len() != v) {
            return Err(dim_err("scatter_rows: positions must be (b, v)"));
        }
        if positions.iter().flatten().any(|&p| p >= total) {
            return Err(dim_err("scatter_rows: position out of range"));
        }
        let s3 = sv.view().into_dimensionality::<ndarray::Ix3>().unwrap();
        let fillv = self.value(fill).clone();
        let mut out = Array3::<f64>::zeros((b, total, d));
        #[allow(clippy::needless_range_loop)]
        for bi in 0..b {
            for p in 0..total {
                out.index_axis_mut(Axis(0), bi)
                    .index_axis_mut(Axis(0), p)
                    .assign(&fillv.view().into_dimensionality::<ndarray::Ix1>().unwrap());
            }
            for (j, &p) in positions[bi].iter().enumerate() {
                out.index_axis_mut(Axis(0), bi)
                    .index_axis_mut(Axis(0), p)
                    .assign(&s3.index_axis(Axis(0), bi).index_axis(Axis(0), j));
            }
        }
        let rg = self.rg(src) || self.rg(fill);
        Ok(self.push(
            out.into_dyn(),
            Op::ScatterRows {
                src,
                fill,
                positions: positions.to_vec(),
                total,
            },
            rg,
        ))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(dim_err("concat of zero parts"));
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(axis), &views).map_err(|e| dim_err(e.to_string()))?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            value.as_standard_layout().to_owned(),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn broadcast_to(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self
            .value(a)
            .broadcast(IxDyn(shape))
            .ok_or_else(|| {
                dim_err(format!(
                    "cannot broadcast {:?} to {:?}",
                    self.value(a).shape(),
                    shape
                ))
            })?
            .to_owned();
        let rg = self.rg(a);
        Ok(self.push(value, Op::BroadcastTo { a }, rg))
    }

    /// Mean cross-entropy over the batch; returns a scalar (0-d) node.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        labels: &[usize],
        smoothing: f64,
    ) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.ndim() != 2 {
            return Err(dim_err("cross_entropy expects (b, c) logits"));
        }
        let (b, c) = (lv.shape()[0], lv.shape()[1]);
        if labels.len() != b {
            return Err(dim_err("cross_entropy: one label per row required"));
        }
        if labels.iter().any(|&y| y >= c) {
            return Err(dim_err("cross_entropy: label out of range"));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::config("label_smoothing", "must be in [0, 1)"));
        }
        let l2 = lv.view().into_dimensionality::<Ix2>().unwrap();
        let mut total = 0.0;
        for (bi, row) in l2.outer_iter().enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            let mean_lp: f64 = row.iter().map(|v| v - lse).sum::<f64>() / c as f64;
            let lp_y = row[labels[bi]] - lse;
            total += -((1.0 - smoothing) * lp_y + smoothing * mean_lp);
        }
        let value = ndarray::arr0(total / b as f64).into_dyn();
        let rg = self.rg(logits);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                smoothing,
            },
            rg,
        ))
    }

    /// MSE over rows of `pred` selected by `mask`; the target is a constant.
    /// Rows outside the mask contribute nothing, so their gradient is
    /// exactly zero.
    pub fn masked_mse(
        &mut self,
        pred: NodeId,
        target: Tensor,
        mask: &[Vec<bool>],
    ) -> Result<NodeId> {
        let pv = self.value(pred);
        if pv.ndim() != 3 {
            return Err(dim_err("masked_mse expects (b, p, d) predictions"));
        }
        if pv.shape() != target.shape() {
            return Err(dim_err(format!(
                "masked_mse: prediction {:?} vs target {:?}",
                pv.shape(),
                target.shape()
            )));
        }
        let (b, p, d) = (pv.shape()[0], pv.shape()[1], pv.shape()[2]);
        if mask.len() != b || mask.iter().any(|m| m.len() != p) {
            return Err(dim_err("masked_mse: mask must be (b, p)"));
        }
        let count: usize = mask.iter().flatten().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Data("masked_mse: empty mask".into()));
        }
        let p3 = pv.view().into_dimensionality::<ndarray::Ix3>().unwrap();
        let t3 = target.view().into_dimensionality::<ndarray::Ix3>().unwrap();
        let mut total = 0.0;
        for bi in 0..b {
            for pi in 0..p {
                if mask[bi][pi] {
                    for di in 0..d {
                        let diff = p3[[bi, pi, di]] - t3[[bi, pi, di]];
                        total += diff * diff;
                    }
                }
            }
        }
        let value = ndarray::arr0(total / (count * d) as f64).into_dyn();
        let rg = self.rg(pred);
        Ok(self.push(
            value,
            Op::MaskedMse {
                pred,
                target,
                mask: mask.to_vec(),
            },
            rg,
        ))
    }

    /// Backpropagate from a scalar node, returning per-node gradients.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(dim_err("backward requires a scalar loss"));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(self.value(loss).raw_dim()));

        for i in (0..self.nodes.len()).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[i].requires_grad {
                grads[i] = Some(g);
                continue;
            }
            self.accumulate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn add_grad(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let a3 = as3(av)?;
                let g3 = as3(g)?;
                let p = a3.shape()[0];
                if self.rg(*a) {
                    let mut da = Array3::<f64>::zeros(a3.raw_dim());
                    if bv.ndim() == 2 {
                        let b2 = bv.view().into_dimensionality::<Ix2>().unwrap();
                        let bt = b2.t();
                        for s in 0..p {
                            da.index_axis_mut(Axis(0), s)
                                .assign(&g3.index_axis(Axis(0), s).dot(&bt));
                        }
                    } else {
                        let b3 = as3(bv)?;
                        for s in 0..p {
                            da.index_axis_mut(Axis(0), s).assign(
                                &g3.index_axis(Axis(0), s)
                                    .dot(&b3.index_axis(Axis(0), s).t()),
                            );
                        }
                    }
                    self.add_grad(grads, *a, da.into_shape_with_order(av.raw_dim()).unwrap());
                }
                if self.rg(*b) {
                    if bv.ndim() == 2 {
                        let mut db = Array2::<f64>::zeros((bv.shape()[0], bv.shape()[1]));
                        for s in 0..p {
                            db += &a3
                                .index_axis(Axis(0), s)
                                .t()
                                .dot(&g3.index_axis(Axis(0), s));
                        }
                        self.add_grad(grads, *b, db.into_dyn());
                    } else {
                        let mut db = Array3::<f64>::zeros(as3(bv)?.raw_dim());
                        for s in 0..p {
                            db.index_axis_mut(Axis(0), s).assign(
                                &a3.index_axis(Axis(0), s)
                                    .t()
                                    .dot(&g3.index_axis(Axis(0), s)),
                            );
                        }
                        self.add_grad(grads, *b, db.into_shape_with_order(bv.raw_dim()).unwrap());
                    }
                }
            }
            Op::AddBroadcast { a, b } => {
                if self.rg(*a) {
                    self.add_grad(grads, *a, g.clone());
                }
                if self.rg(*b) {
                    let reduced = reduce_to_shape(g, self.value(*b).shape());
                    self.add_grad(grads, *b, reduced);
                }
            }
            Op::Sub { a, b } => {
                if self.rg(*a) {
                    self.add_grad(grads, *a, g.clone());
                }
                if self.rg(*b) {
                    self.add_grad(grads, *b, -g.clone());
                }
            }
            Op::Mul { a, b } => {
                if self.rg(*a) {
                    self.add_grad(grads, *a, g * self.value(*b));
                }
                if self.rg(*b) {
                    self.add_grad(grads, *b, g * self.value(*a));
                }
            }
            Op::Scale { a, factor } => {
                if self.rg(*a) {
                    self.add_grad(grads, *a, g * *factor);
                }
            }
            Op::Relu { a } => {
                if self.rg(*a) {
                    let mask = self.value(*a).mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    self.add_grad(grads, *a, g * &mask);
                }
            }
            Op::Gelu { a } => {
                if self.rg(*a) {
                    let deriv = self.value(*a).mapv(gelu_grad_scalar);
                    self.add_grad(grads, *a, g * &deriv);
                }
            }
            Op::Softmax { a } => {
                if self.rg(*a) {
                    let y = &self.nodes[i].value;
                    let mut dx = g * y;
                    // dx_i = y_i * (g_i - sum_j g_j y_j) per row
                    for (mut drow, yrow) in dx.rows_mut().into_iter().zip(y.rows()) {
                        let dot: f64 = drow.sum();
                        for (d, yv) in drow.iter_mut().zip(yrow.iter()) {
                            *d -= dot * yv;
                        }
                    }
                    self.add_grad(grads, *a, dx);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            } => {
                let xv = self.value(*x);
                let gv = self.value(*gamma);
                let n = *xv.shape().last().unwrap();
                let mut dx = Tensor::zeros(xv.raw_dim());
                let mut dgamma = Tensor::zeros(IxDyn(&[n]));
                let mut dbeta = Tensor::zeros(IxDyn(&[n]));
                for ((xrow, grow), mut dxrow) in
                    xv.rows().into_iter().zip(g.rows()).zip(dx.rows_mut())
                {
                    let mean = xrow.sum() / n as f64;
                    let var = xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                    let r = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = xrow.iter().map(|v| (v - mean) * r).collect();
                    let dxhat: Vec<f64> =
                        grow.iter().enumerate().map(|(j, gj)| gj * gv[j]).collect();
                    let mean_dxhat: f64 = dxhat.iter().sum::<f64>() / n as f64;
                    let mean_dxhat_xhat: f64 =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for j in 0..n {
                        dxrow[j] = r * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                        dgamma[j] += grow[j] * xhat[j];
                        dbeta[j] += grow[j];
                    }
                }
                if self.rg(*x) {
                    self.add_grad(grads, *x, dx);
                }
                if self.rg(*gamma) {
                    self.add_grad(grads, *gamma, dgamma);
                }
                if self.rg(*beta) {
                    self.add_grad(grads, *beta, dbeta);
                }
            }
            Op::Permute { a, axes } => {
                if self.rg(*a) {
                    let mut inverse = vec![0usize; axes.len()];
                    for (dst, &src) in axes.iter().enumerate() {
                        inverse[src] = dst;
                    }
                    let da = g
                        .view()
                        .permuted_axes(IxDyn(&inverse))
                        .as_standard_layout()
                        .to_owned();
                    self.add_grad(grads, *a, da);
                }
            }
            Op::Reshape { a } => {
                if self.rg(*a) {
                    let shape = self.value(*a).raw_dim();
                    self.add_grad(
                        grads,
                        *a,
                        g.view().into_shape_with_order(shape).unwrap().to_owned(),
                    );
                }
            }
            Op::IndexSelect { a, axis, indices } => {
                if self.rg(*a) {
                    let mut da = Tensor::zeros(self.value(*a).raw_dim());
                    for (j, &idx) in indices.iter().enumerate() {
                        let mut dst = da.index_axis_mut(Axis(*axis), idx);
                        dst += &g.index_axis(Axis(*axis), j);
                    }
                    self.add_grad(grads, *a, da);
                }
            }
            Op::GatherRows { a, indices } => {
                if self.rg(*a) {
                    let mut da = Tensor::zeros(self.value(*a).raw_dim());
                    for (bi, idx) in indices.iter().enumerate() {
                        for (j, &src) in idx.iter().enumerate() {
                            let mut dst = da.index_axis_mut(Axis(0), bi);
                            let mut dst = dst.index_axis_mut(Axis(0), src);
                            dst += &g.index_axis(Axis(0), bi).index_axis(Axis(0), j);
                        }
                    }
                    self.add_grad(grads, *a, da);
                }
            }
            Op::ScatterRows {
                src,
                fill,
                positions,
                total,
            } => {
                let (b, _v, d) = {
                    let s = self.value(*src).shape();
                    (s[0], s[1], s[2])
                };
                if self.rg(*src) {
                    let mut ds = Tensor::zeros(self.value(*src).raw_dim());
                    #[allow(clippy::needless_range_loop)]
                    for bi in 0..b {
                        for (j, &p) in positions[bi].iter().enumerate() {
                            let mut dst = ds.index_axis_mut(Axis(0), bi);
                            let mut dst = dst.index_axis_mut(Axis(0), j);
                            dst += &g.index_axis(Axis(0), bi).index_axis(Axis(0), p);
                        }
                    }
                    self.add_grad(grads, *src, ds);
                }
                if self.rg(*fill) {
                    let mut df = Tensor::zeros(IxDyn(&[d]));
                    #[allow(clippy::needless_range_loop)]
                    for bi in 0..b {
                        let occupied: std::collections::HashSet<usize> =
                            positions[bi].iter().copied().collect();
                        for p in 0..*total {
                            if !occupied.contains(&p) {
                                df += &g.index_axis(Axis(0), bi).index_axis(Axis(0), p);
                            }
                        }
                    }
                    self.add_grad(grads, *fill, df);
                }
            }
            Op::Concat { parts, axis } => {
                let mut offset = 0;
                for &part in parts {
                    let len = self.value(part).shape()[*axis];
                    if self.rg(part) {
                        let slice = g
                            .slice_axis(
                                Axis(*axis),
                                ndarray::Slice::from(offset as isize..(offset + len) as isize),
                            )
                            .to_owned();
                        self.add_grad(grads, part, slice);
                    }
                    offset += len;
                }
            }
            Op::BroadcastTo { a } => {
                if self.rg(*a) {
                    let reduced = reduce_to_shape(g, self.value(*a).shape());
                    self.add_grad(grads, *a, reduced);
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                smoothing,
            } => {
                if self.rg(*logits) {
                    let lv = self.value(*logits);
                    let (b, c) = (lv.shape()[0], lv.shape()[1]);
                    let probs = softmax_last_axis(lv);
                    let mut dl = probs;
                    let gscale = g.iter().next().copied().unwrap_or(1.0) / b as f64;
                    for bi in 0..b {
                        for ci in 0..c {
                            let target = if ci == labels[bi] {
                                1.0 - smoothing + smoothing / c as f64
                            } else {
                                smoothing / c as f64
                            };
                            dl[[bi, ci]] = gscale * (dl[[bi, ci]] - target);
                        }
                    }
                    self.add_grad(grads, *logits, dl);
                }
            }
            Op::MaskedMse { pred, target, mask } => {
                if self.rg(*pred) {
                    let pv = self.value(*pred);
                    let (b, p, d) = (pv.shape()[0], pv.shape()[1], pv.shape()[2]);
                    let count: usize = mask.iter().flatten().filter(|&&m| m).count();
                    let gscale = g.iter().next().copied().unwrap_or(1.0) * 2.0 / (count * d) as f64;
                    let mut dp = Tensor::zeros(pv.raw_dim());
                    for bi in 0..b {
                        for pi in 0..p {
                            if mask[bi][pi] {
                                for di in 0..d {
                                    dp[[bi, pi, di]] =
                                        gscale * (pv[[bi, pi, di]] - target[[bi, pi, di]]);
                                }
                            }
                        }
                    }
                    self.add_grad(grads, *pred, dp);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2, ArrayD};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng))
            .collect();
        ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
    }

    /// Central finite-difference check of d(scalar f)/d(input) for one leaf.
    fn finite_diff_check<F>(shape: &[usize], build: F, seed: u64)
    where
        F: Fn(&mut Graph, NodeId) -> NodeId,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = randn(shape, &mut rng);

        let mut g = Graph::new();
        let x = g.leaf(x0.clone(), true);
        let loss = build(&mut g, x);
        let grads = g.backward(loss).unwrap();
        let analytic = grads.get(x).unwrap().clone();

        let h = 1e-5;
        for idx in 0..x0.len() {
            let mut plus = x0.clone();
            plus.as_slice_mut().unwrap()[idx] += h;
            let mut minus = x0.clone();
            minus.as_slice_mut().unwrap()[idx] -= h;
            let eval = |t: Tensor| {
                let mut g = Graph::new();
                let x = g.leaf(t, false);
                let l = build(&mut g, x);
                g.value(l).iter().next().copied().unwrap()
            };
            let fd = (eval(plus) - eval(minus)) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[idx];
            let tol = 1e-6 + 1e-5 * fd.abs().max(a.abs());
            assert!(
                (fd - a).abs() <= tol,
                "grad mismatch at {idx}: fd={fd} analytic={a}"
            );
        }
    }

    #[test]
    fn matmul_2d_forward() {
        let mut g = Graph::new();
        let a = g.leaf(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn(), false);
        let b = g.leaf(arr2(&[[5.0, 6.0], [7.0, 8.0]]).into_dyn(), false);
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c), &arr2(&[[19.0, 22.0], [43.0, 50.0]]).into_dyn());
    }

    #[test]
    fn matmul_rejects_bad_inner_dim() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(IxDyn(&[2, 3])), false);
        let b = g.leaf(Tensor::zeros(IxDyn(&[4, 2])), false);
        assert!(g.matmul(a, b).is_err());
    }

    #[test]
    fn grad_matmul_batched() {
        finite_diff_check(
            &[2, 3, 4],
            |g, x| {
                let w = g.leaf(
                    Tensor::from_shape_vec(
                        IxDyn(&[4, 2]),
                        (0..8).map(|i| 0.1 * i as f64).collect(),
                    )
                    .unwrap(),
                    false,
                );
                let y = g.matmul(x, w).unwrap();
                let sq = g.mul(y, y).unwrap();
                sum_all(g, sq)
            },
            1,
        );
    }

    #[test]
    fn grad_matmul_both_sides_batched() {
        finite_diff_check(
            &[2, 3, 3],
            |g, x| {
                let p = g.permute(x, &[0, 2, 1]).unwrap();
                let y = g.matmul(x, p).unwrap();
                let sq = g.mul(y, y).unwrap();
                sum_all(g, sq)
            },
            11,
        );
    }

    fn sum_all(g: &mut Graph, x: NodeId) -> NodeId {
        let n = g.value(x).len();
        let flat = g.reshape(x, &[1, n]).unwrap();
        let ones = g.leaf(Tensor::ones(IxDyn(&[n, 1])), false);
        let s = g.matmul(flat, ones).unwrap();
        g.reshape(s, &[]).unwrap()
    }

    #[test]
    fn grad_softmax_layernorm_gelu() {
        finite_diff_check(
            &[3, 5],
            |g, x| {
                let gamma = g.leaf(arr1(&[1.0, 0.9, 1.1, 1.2, 0.8]).into_dyn(), false);
                let beta = g.leaf(arr1(&[0.1, -0.1, 0.0, 0.2, 0.3]).into_dyn(), false);
                let ln = g.layer_norm(x, gamma, beta, 1e-6).unwrap();
                let ge = g.gelu(ln);
                let sm = g.softmax(ge);
                let sq = g.mul(sm, sm).unwrap();
                sum_all(g, sq)
            },
            2,
        );
    }

    #[test]
    fn grad_layernorm_affine_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = randn(&[4, 6], &mut rng);
        let g0 = randn(&[6], &mut rng);
        let b0 = randn(&[6], &mut rng);

        let run = |gv: Tensor, bv: Tensor, want_grads: bool| {
            let mut g = Graph::new();
            let x = g.leaf(x0.clone(), false);
            let gamma = g.leaf(gv, want_grads);
            let beta = g.leaf(bv, want_grads);
            let ln = g.layer_norm(x, gamma, beta, 1e-6).unwrap();
            let sq = g.mul(ln, ln).unwrap();
            let loss = sum_all(&mut g, sq);
            if want_grads {
                let grads = g.backward(loss).unwrap();
                (
                    g.value(loss).iter().next().copied().unwrap(),
                    Some((
                        grads.get(gamma).unwrap().clone(),
                        grads.get(beta).unwrap().clone(),
                    )),
                )
            } else {
                (g.value(loss).iter().next().copied().unwrap(), None)
            }
        };
        let (_, grads) = run(g0.clone(), b0.clone(), true);
        let (dgamma, dbeta) = grads.unwrap();
        let h = 1e-5;
        for i in 0..6 {
            let mut gp = g0.clone();
            gp[i] += h;
            let mut gm = g0.clone();
            gm[i] -= h;
            let fd = (run(gp, b0.clone(), false).0 - run(gm, b0.clone(), false).0) / (2.0 * h);
            assert!((fd - dgamma[i]).abs() < 1e-6 + 1e-5 * fd.abs());

            let mut bp = b0.clone();
            bp[i] += h;
            let mut bm = b0.clone();
            bm[i] -= h;
            let fd = (run(g0.clone(), bp, false).0 - run(g0.clone(), bm, false).0) / (2.0 * h);
            assert!((fd - dbeta[i]).abs() < 1e-6 + 1e-5 * fd.abs());
        }
    }

    #[test]
    fn grad_gather_scatter_concat() {
        finite_diff_check(
            &[2, 4, 3],
            |g, x| {
                let picked = g.gather_rows(x, &[vec![0, 2], vec![1, 3]]).unwrap();
                let fill = g.leaf(arr1(&[0.5, -0.5, 0.25]).into_dyn(), false);
                let full = g
                    .scatter_rows(picked, fill, &[vec![0, 2], vec![1, 3]], 4)
                    .unwrap();
                let first = g.index_select(full, 1, &[0, 1]).unwrap();
                let both = g.concat(&[first, picked], 1).unwrap();
                let sq = g.mul(both, both).unwrap();
                sum_all(g, sq)
            },
            4,
        );
    }

    #[test]
    fn grad_cross_entropy_matches_fd() {
        finite_diff_check(
            &[3, 4],
            |g, x| g.cross_entropy(x, &[1, 3, 0], 0.1).unwrap(),
            5,
        );
    }

    #[test]
    fn grad_masked_mse_zero_on_visible() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pred0 = randn(&[2, 3, 4], &mut rng);
        let target = randn(&[2, 3, 4], &mut rng);
        let mask = vec![vec![true, false, true], vec![false, true, false]];

        let mut g = Graph::new();
        let pred = g.leaf(pred0, true);
        let loss = g.masked_mse(pred, target, &mask).unwrap();
        let grads = g.backward(loss).unwrap();
        let dp = grads.get(pred).unwrap();
        for bi in 0..2 {
            for pi in 0..3 {
                for di in 0..4 {
                    if !mask[bi][pi] {
                        assert_eq!(dp[[bi, pi, di]], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn grad_masked_mse_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let target = randn(&[2, 3, 4], &mut rng);
        let mask = vec![vec![true, false, true], vec![true, true, false]];
        let t2 = target.clone();
        finite_diff_check(
            &[2, 3, 4],
            move |g, x| g.masked_mse(x, t2.clone(), &mask).unwrap(),
            8,
        );
        let _ = target;
    }

    #[test]
    fn grad_permute_reshape_broadcast() {
        finite_diff_check(
            &[2, 3, 4],
            |g, x| {
                let p = g.permute(x, &[1, 0, 2]).unwrap();
                let r = g.reshape(p, &[3, 8]).unwrap();
                let bias = g.leaf(arr1(&[1.0; 8]).into_dyn(), false);
                let summed = g.add(r, bias).unwrap();
                let sq = g.mul(summed, summed).unwrap();
                sum_all(g, sq)
            },
            9,
        );
    }

    #[test]
    fn add_broadcast_reduces_grad_for_small_operand() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(IxDyn(&[2, 3, 4])), false);
        let b = g.leaf(Tensor::zeros(IxDyn(&[1, 3, 4])), true);
        let s = g.add(a, b).unwrap();
        let sq = {
            let one = g.leaf(Tensor::ones(IxDyn(&[2, 3, 4])), false);
            g.mul(s, one).unwrap()
        };
        let loss = sum_all(&mut g, sq);
        let grads = g.backward(loss).unwrap();
        let db = grads.get(b).unwrap();
        assert_eq!(db.shape(), &[1, 3, 4]);
        assert!(db.iter().all(|&v| (v - 2.0).abs() < 1e-12));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x0 = randn(&[5, 7], &mut rng);
        let mut g = Graph::new();
        let x = g.leaf(x0, false);
        let y = g.softmax(x);
        for row in g.value(y).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }
}
