//! Reverse-mode automatic differentiation over whole tensors.
//!
//! Operations are recorded on a tape: every node stores its value eagerly and
//! an operation tag referencing earlier nodes, so node ids form a topological
//! order by construction. `backward` walks the tape once in reverse,
//! accumulating gradients, and returns a gradient tensor per node.
//!
//! Broadcasting is deliberately restricted to one documented case — an
//! `H x W x 1` operand against an `H x W x C` one — plus scalar operands.
//! Anything else is rejected so every gradient rule stays auditable.

use crate::conv::{self, ConvGeom, Padding};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// Elementwise operation selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
}

/// Activation selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActivationOp {
    Relu,
    /// Softmax over the last axis.
    Softmax,
    Sigmoid,
}

/// Loss selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossOp {
    Mse,
    SoftmaxCrossEntropy,
    SmoothL1,
}

/// Cross-entropy target: one class index per row of the logits, or an
/// explicit one-hot (or soft) distribution of the same shape as the logits.
#[derive(Debug, Clone)]
pub enum CeTarget {
    Indices(Vec<usize>),
    OneHot(Tensor),
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// Rhs is `H x W x 1` broadcast over the lhs channel axis.
    AddBroadcast(NodeId, NodeId),
    SubBroadcast(NodeId, NodeId),
    MulBroadcast(NodeId, NodeId),
    AddConst(NodeId),
    Scale(NodeId, f64),
    /// Lhs `H x W x C` plus a per-channel bias `[C]`.
    BiasAdd(NodeId, NodeId),
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        stride: usize,
        geom: ConvGeom,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    SoftmaxLast(NodeId),
    /// `x [n] * w [n, m] -> [m]`.
    MatVec {
        input: NodeId,
        weight: NodeId,
    },
    ConcatChannels(Vec<NodeId>),
    /// Rank-2 concatenation along axis 0.
    ConcatRows(Vec<NodeId>),
    Reshape(NodeId),
    /// Row selection on a rank-2 tensor; rows may repeat.
    GatherRows {
        input: NodeId,
        rows: Vec<usize>,
    },
    SumAll(NodeId),
    MeanAll(NodeId),
    Mse {
        pred: NodeId,
        target: Tensor,
    },
    SmoothL1 {
        pred: NodeId,
        target: Tensor,
    },
    CrossEntropy {
        logits: NodeId,
        target: CeTarget,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients produced by [`Graph::backward`], one tensor per node, shaped
/// like the node's value. Nodes the root does not depend on hold zeros.
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn wrt(&self, id: NodeId) -> &Tensor {
        &self.grads[id.0]
    }

    /// Takes ownership of one gradient, leaving a scalar zero behind.
    pub fn take(&mut self, id: NodeId) -> Tensor {
        std::mem::replace(&mut self.grads[id.0], Tensor::scalar(0.0))
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn softmax_rows(values: &[f64], row_len: usize) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    for (row, orow) in values.chunks_exact(row_len).zip(out.chunks_exact_mut(row_len)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    out
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Inserts an input node (parameter or constant).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Classifies the `(lhs, rhs)` shape pair: `Ok(false)` for equal shapes,
    /// `Ok(true)` for the documented `H x W x C` vs `H x W x 1` broadcast.
    fn broadcast_kind(&self, a: NodeId, b: NodeId) -> Result<bool> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        if sa == sb {
            return Ok(false);
        }
        if sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && sa[1] == sb[1] && sb[2] == 1 {
            return Ok(true);
        }
        Err(Error::InvalidBroadcast {
            left: sa.to_vec(),
            right: sb.to_vec(),
        })
    }

    /// Spec-shaped elementwise entry point; `add`/`sub`/`mul` are the usual
    /// call sites.
    pub fn elementwise(&mut self, op: ElementwiseOp, a: NodeId, b: NodeId) -> Result<NodeId> {
        match op {
            ElementwiseOp::Add => self.add(a, b),
            ElementwiseOp::Sub => self.sub(a, b),
            ElementwiseOp::Mul => self.mul(a, b),
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.broadcast_kind(a, b)? {
            let value = self.apply_broadcast(a, b, |x, y| x + y);
            Ok(self.push(value, Op::AddBroadcast(a, b)))
        } else {
            let value = self.zip(a, b, |x, y| x + y);
            Ok(self.push(value, Op::Add(a, b)))
        }
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.broadcast_kind(a, b)? {
            let value = self.apply_broadcast(a, b, |x, y| x - y);
            Ok(self.push(value, Op::SubBroadcast(a, b)))
        } else {
            let value = self.zip(a, b, |x, y| x - y);
            Ok(self.push(value, Op::Sub(a, b)))
        }
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.broadcast_kind(a, b)? {
            let value = self.apply_broadcast(a, b, |x, y| x * y);
            Ok(self.push(value, Op::MulBroadcast(a, b)))
        } else {
            let value = self.zip(a, b, |x, y| x * y);
            Ok(self.push(value, Op::Mul(a, b)))
        }
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.map(a, |x| x + c);
        self.push(value, Op::AddConst(a))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let value = self.map(a, |x| x * k);
        self.push(value, Op::Scale(a, k))
    }

    /// Adds a per-channel bias `[C]` to an `H x W x C` tensor.
    pub fn bias_add(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (h, w, c) = {
            let s = self.value(x).shape();
            if s.len() != 3 {
                return Err(Error::ShapeMismatch {
                    context: "bias_add input",
                    left: s.to_vec(),
                    right: vec![0, 0, 0],
                });
            }
            (s[0], s[1], s[2])
        };
        let bs = self.value(bias).shape().to_vec();
        if bs != [c] {
            return Err(Error::ShapeMismatch {
                context: "bias_add bias",
                left: vec![h, w, c],
                right: bs,
            });
        }
        let xv = self.value(x).data();
        let bv = self.value(bias).data();
        let mut out = Vec::with_capacity(xv.len());
        for px in xv.chunks_exact(c) {
            for (v, b) in px.iter().zip(bv) {
                out.push(v + b);
            }
        }
        let value = Tensor::new(vec![h, w, c], out)?;
        Ok(self.push(value, Op::BiasAdd(x, bias)))
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        stride: usize,
        padding: Padding,
    ) -> Result<NodeId> {
        let (h, w, cin) = self.value(input).dims3();
        let ks = self.value(kernel).shape().to_vec();
        if ks.len() != 4 || ks[0] != ks[1] {
            return Err(Error::ShapeMismatch {
                context: "conv2d kernel",
                left: ks,
                right: vec![0, 0, cin, 0],
            });
        }
        let (k, kcin, cout) = (ks[0], ks[2], ks[3]);
        if kcin != cin {
            return Err(Error::LayerMismatch {
                layer: 0,
                expected: cin,
                got: kcin,
            });
        }
        let geom = conv::conv_geometry(h, w, k, stride, padding)?;
        let out = conv::forward(
            self.value(input).data(),
            h,
            w,
            cin,
            self.value(kernel).data(),
            k,
            cout,
            stride,
            geom,
        );
        let value = Tensor::new(vec![geom.out_h, geom.out_w, cout], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                stride,
                geom,
            },
        ))
    }

    pub fn activation(&mut self, op: ActivationOp, x: NodeId) -> NodeId {
        match op {
            ActivationOp::Relu => self.relu(x),
            ActivationOp::Softmax => self.softmax_last(x),
            ActivationOp::Sigmoid => self.sigmoid(x),
        }
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.map(x, |v| v.max(0.0));
        self.push(value, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = self.map(x, |v| 1.0 / (1.0 + (-v).exp()));
        self.push(value, Op::Sigmoid(x))
    }

    pub fn softmax_last(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let row_len = *t.shape().last().expect("tensor has at least one axis");
        let out = softmax_rows(t.data(), row_len);
        let value = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        self.push(value, Op::SoftmaxLast(x))
    }

    /// `x [n] * w [n, m] -> [m]` (dense layer without bias).
    pub fn matvec(&mut self, x: NodeId, weight: NodeId) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(weight).shape().to_vec();
        if xs.len() != 1 || ws.len() != 2 || ws[0] != xs[0] {
            return Err(Error::ShapeMismatch {
                context: "matvec",
                left: xs,
                right: ws,
            });
        }
        let (n, m) = (ws[0], ws[1]);
        let xv = self.value(x).data();
        let wv = self.value(weight).data();
        let mut out = vec![0.0; m];
        for i in 0..n {
            let xi = xv[i];
            let wrow = &wv[i * m..(i + 1) * m];
            for (o, &wij) in out.iter_mut().zip(wrow) {
                *o += xi * wij;
            }
        }
        let value = Tensor::new(vec![m], out)?;
        Ok(self.push(value, Op::MatVec { input: x, weight }))
    }

    /// Concatenates rank-3 tensors with equal spatial dims along the channel
    /// axis.
    pub fn concat_channels(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        assert!(!parts.is_empty(), "concat_channels needs at least one part");
        let (h, w, _) = self.value(parts[0]).dims3();
        let mut total_c = 0;
        for &p in parts {
            let (ph, pw, pc) = self.value(p).dims3();
            if (ph, pw) != (h, w) {
                return Err(Error::ShapeMismatch {
                    context: "concat_channels",
                    left: vec![h, w],
                    right: vec![ph, pw],
                });
            }
            total_c += pc;
        }
        let mut out = vec![0.0; h * w * total_c];
        let mut ch_off = 0;
        for &p in parts {
            let (_, _, pc) = self.value(p).dims3();
            let data = self.value(p).data();
            for px in 0..h * w {
                out[px * total_c + ch_off..px * total_c + ch_off + pc]
                    .copy_from_slice(&data[px * pc..(px + 1) * pc]);
            }
            ch_off += pc;
        }
        let value = Tensor::new(vec![h, w, total_c], out)?;
        Ok(self.push(value, Op::ConcatChannels(parts.to_vec())))
    }

    /// Concatenates rank-2 tensors with equal column counts along axis 0.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        assert!(!parts.is_empty(), "concat_rows needs at least one part");
        let (_, cols) = self.value(parts[0]).dims2();
        let mut rows = 0;
        for &p in parts {
            let (pr, pc) = self.value(p).dims2();
            if pc != cols {
                return Err(Error::ShapeMismatch {
                    context: "concat_rows",
                    left: vec![rows, cols],
                    right: vec![pr, pc],
                });
            }
            rows += pr;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(vec![rows, cols], out)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec())))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(x).reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// Selects rows of a rank-2 tensor; indices may repeat.
    pub fn gather_rows(&mut self, x: NodeId, rows: Vec<usize>) -> Result<NodeId> {
        assert!(!rows.is_empty(), "gather_rows needs at least one row");
        let (n, cols) = self.value(x).dims2();
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::ClassIndexOutOfRange {
                index: bad,
                classes: n,
            });
        }
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &r in &rows {
            out.extend_from_slice(&data[r * cols..(r + 1) * cols]);
        }
        let value = Tensor::new(vec![rows.len(), cols], out)?;
        Ok(self.push(value, Op::GatherRows { input: x, rows }))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let s: f64 = t.iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::MeanAll(x))
    }

    /// Spec-shaped loss entry point.
    pub fn loss(&mut self, op: LossOp, pred: NodeId, target: &Tensor) -> Result<NodeId> {
        match op {
            LossOp::Mse => self.mse(pred, target),
            LossOp::SmoothL1 => self.smooth_l1(pred, target),
            LossOp::SoftmaxCrossEntropy => {
                self.cross_entropy(pred, CeTarget::OneHot(target.clone()))
            }
        }
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: NodeId, target: &Tensor) -> Result<NodeId> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(Error::ShapeMismatch {
                context: "mse",
                left: p.shape().to_vec(),
                right: target.shape().to_vec(),
            });
        }
        let n = p.len() as f64;
        let s: f64 = p
            .iter()
            .zip(target.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(self.push(
            Tensor::scalar(s / n),
            Op::Mse {
                pred,
                target: target.clone(),
            },
        ))
    }

    /// Smooth-L1 (Huber with delta 1) averaged over all elements:
    /// `0.5 d^2` for `|d| <= 1`, `|d| - 0.5` otherwise.
    pub fn smooth_l1(&mut self, pred: NodeId, target: &Tensor) -> Result<NodeId> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(Error::ShapeMismatch {
                context: "smooth_l1",
                left: p.shape().to_vec(),
                right: target.shape().to_vec(),
            });
        }
        let n = p.len() as f64;
        let s: f64 = p
            .iter()
            .zip(target.iter())
            .map(|(a, b)| {
                let d = (a - b).abs();
                if d <= 1.0 {
                    0.5 * d * d
                } else {
                    d - 0.5
                }
            })
            .sum();
        Ok(self.push(
            Tensor::scalar(s / n),
            Op::SmoothL1 {
                pred,
                target: target.clone(),
            },
        ))
    }

    /// Softmax cross-entropy over the last axis, averaged across rows.
    pub fn cross_entropy(&mut self, logits: NodeId, target: CeTarget) -> Result<NodeId> {
        let t = self.value(logits);
        let row_len = *t.shape().last().expect("tensor has at least one axis");
        let rows = t.len() / row_len;
        match &target {
            CeTarget::Indices(idx) => {
                if idx.len() != rows {
                    return Err(Error::ShapeMismatch {
                        context: "cross_entropy targets",
                        left: vec![rows],
                        right: vec![idx.len()],
                    });
                }
                if let Some(&bad) = idx.iter().find(|&&i| i >= row_len) {
                    return Err(Error::ClassIndexOutOfRange {
                        index: bad,
                        classes: row_len,
                    });
                }
            }
            CeTarget::OneHot(oh) => {
                if oh.shape() != t.shape() {
                    return Err(Error::ShapeMismatch {
                        context: "cross_entropy one-hot target",
                        left: t.shape().to_vec(),
                        right: oh.shape().to_vec(),
                    });
                }
            }
        }
        let mut total = 0.0;
        for (r, row) in t.data().chunks_exact(row_len).enumerate() {
            let lse = log_sum_exp(row);
            match &target {
                CeTarget::Indices(idx) => total += lse - row[idx[r]],
                CeTarget::OneHot(oh) => {
                    let trow = &oh.data()[r * row_len..(r + 1) * row_len];
                    let mass: f64 = trow.iter().sum();
                    let dot: f64 = trow.iter().zip(row).map(|(a, b)| a * b).sum();
                    total += lse * mass - dot;
                }
            }
        }
        Ok(self.push(
            Tensor::scalar(total / rows as f64),
            Op::CrossEntropy { logits, target },
        ))
    }

    fn map(&self, x: NodeId, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(x);
        Tensor::new(t.shape().to_vec(), t.iter().map(|&v| f(v)).collect()).expect("same shape")
    }

    fn zip(&self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let ta = self.value(a);
        let tb = self.value(b);
        Tensor::new(
            ta.shape().to_vec(),
            ta.iter().zip(tb.iter()).map(|(&x, &y)| f(x, y)).collect(),
        )
        .expect("same shape")
    }

    fn apply_broadcast(&self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let ta = self.value(a);
        let tb = self.value(b);
        let (_, _, c) = ta.dims3();
        let mut out = Vec::with_capacity(ta.len());
        for (px, &bv) in ta.data().chunks_exact(c).zip(tb.iter()) {
            for &av in px {
                out.push(f(av, bv));
            }
        }
        Tensor::new(ta.shape().to_vec(), out).expect("same shape")
    }

    /// Reverse pass from a scalar root. Returns one gradient per node.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        if !self.value(root).is_scalar() {
            return Err(Error::NonScalarRoot {
                shape: self.value(root).shape().to_vec(),
            });
        }
        let mut grads: Vec<Tensor> = self
            .nodes
            .iter()
            .map(|n| Tensor::zeros(n.value.shape()))
            .collect();
        grads[root.0].data_mut()[0] = 1.0;

        for i in (0..=root.0).rev() {
            // Nodes after the root cannot feed into it (tape order). Take the
            // node's gradient out for distribution, then restore it so every
            // node keeps its gradient after the pass.
            let node = &self.nodes[i];
            let g = std::mem::replace(&mut grads[i], Tensor::scalar(0.0));
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.data());
                    accumulate(&mut grads[b.0], g.data());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[a.0], g.data());
                    accumulate_neg(&mut grads[b.0], g.data());
                }
                Op::Mul(a, b) => {
                    let gb: Vec<f64> = g
                        .iter()
                        .zip(self.value(*a).iter())
                        .map(|(&gv, &av)| gv * av)
                        .collect();
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(self.value(*b).iter())
                        .map(|(&gv, &bv)| gv * bv)
                        .collect();
                    accumulate(&mut grads[a.0], &ga);
                    accumulate(&mut grads[b.0], &gb);
                }
                Op::AddBroadcast(a, b) => {
                    accumulate(&mut grads[a.0], g.data());
                    self.accumulate_channel_sum(*a, &g, &mut grads[b.0], None);
                }
                Op::SubBroadcast(a, b) => {
                    accumulate(&mut grads[a.0], g.data());
                    self.accumulate_channel_sum_neg(*a, &g, &mut grads[b.0]);
                }
                Op::MulBroadcast(a, b) => {
                    // d/da = g * b (expanded); d/db = channel-sum of g * a.
                    let (_, _, c) = self.value(*a).dims3();
                    {
                        let ga = grads[a.0].data_mut();
                        for (px, (gpx, &bv)) in g
                            .data()
                            .chunks_exact(c)
                            .zip(self.value(*b).iter())
                            .enumerate()
                        {
                            for (ch, &gv) in gpx.iter().enumerate() {
                                ga[px * c + ch] += gv * bv;
                            }
                        }
                    }
                    let a_data = self.value(*a).data();
                    self.accumulate_channel_sum(*a, &g, &mut grads[b.0], Some(a_data));
                }
                Op::AddConst(a) => accumulate(&mut grads[a.0], g.data()),
                Op::Scale(a, k) => {
                    let ga: Vec<f64> = g.iter().map(|&gv| gv * k).collect();
                    accumulate(&mut grads[a.0], &ga);
                }
                Op::BiasAdd(a, b) => {
                    accumulate(&mut grads[a.0], g.data());
                    let (_, _, c) = self.value(*a).dims3();
                    let gb = grads[b.0].data_mut();
                    for px in g.data().chunks_exact(c) {
                        for (ch, &gv) in px.iter().enumerate() {
                            gb[ch] += gv;
                        }
                    }
                }
                Op::Conv2d {
                    input,
                    kernel,
                    stride,
                    geom,
                } => {
                    let (h, w, cin) = self.value(*input).dims3();
                    let ks = self.value(*kernel).shape();
                    let (k, cout) = (ks[0], ks[3]);
                    let gi = conv::backward_input(
                        g.data(),
                        h,
                        w,
                        cin,
                        self.value(*kernel).data(),
                        k,
                        cout,
                        *stride,
                        *geom,
                    );
                    let gk = conv::backward_kernel(
                        g.data(),
                        self.value(*input).data(),
                        h,
                        w,
                        cin,
                        k,
                        cout,
                        *stride,
                        *geom,
                    );
                    accumulate(&mut grads[input.0], &gi);
                    accumulate(&mut grads[kernel.0], &gk);
                }
                Op::Relu(a) => {
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(self.value(*a).iter())
                        .map(|(&gv, &av)| if av > 0.0 { gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads[a.0], &ga);
                }
                Op::Sigmoid(a) => {
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(node.value.iter())
                        .map(|(&gv, &sv)| gv * sv * (1.0 - sv))
                        .collect();
                    accumulate(&mut grads[a.0], &ga);
                }
                Op::SoftmaxLast(a) => {
                    let row_len = *node.value.shape().last().expect("non-empty shape");
                    let s = node.value.data();
                    let mut ga = vec![0.0; s.len()];
                    for ((srow, grow), garow) in s
                        .chunks_exact(row_len)
                        .zip(g.data().chunks_exact(row_len))
                        .zip(ga.chunks_exact_mut(row_len))
                    {
                        let dot: f64 = srow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        for ((gav, &sv), &gv) in garow.iter_mut().zip(srow).zip(grow) {
                            *gav = sv * (gv - dot);
                        }
                    }
                    accumulate(&mut grads[a.0], &ga);
                }
                Op::MatVec { input, weight } => {
                    let x = self.value(*input).data();
                    let wt = self.value(*weight);
                    let (n, m) = wt.dims2();
                    let wv = wt.data();
                    {
                        let gx = grads[input.0].data_mut();
                        for i in 0..n {
                            let wrow = &wv[i * m..(i + 1) * m];
                            let mut acc = 0.0;
                            for (&wij, &gv) in wrow.iter().zip(g.iter()) {
                                acc += wij * gv;
                            }
                            gx[i] += acc;
                        }
                    }
                    let gw = grads[weight.0].data_mut();
                    for i in 0..n {
                        let xi = x[i];
                        let grow = &mut gw[i * m..(i + 1) * m];
                        for (gwij, &gv) in grow.iter_mut().zip(g.iter()) {
                            *gwij += xi * gv;
                        }
                    }
                }
                Op::ConcatChannels(parts) => {
                    let (h, w, total_c) = node.value.dims3();
                    let mut ch_off = 0;
                    for &p in parts {
                        let (_, _, pc) = self.value(p).dims3();
                        let gp = grads[p.0].data_mut();
                        for px in 0..h * w {
                            for ch in 0..pc {
                                gp[px * pc + ch] += g.data()[px * total_c + ch_off + ch];
                            }
                        }
                        ch_off += pc;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        accumulate(&mut grads[p.0], &g.data()[off..off + len]);
                        off += len;
                    }
                }
                Op::Reshape(a) => accumulate(&mut grads[a.0], g.data()),
                Op::GatherRows { input, rows } => {
                    let (_, cols) = self.value(*input).dims2();
                    let gi = grads[input.0].data_mut();
                    for (out_r, &src_r) in rows.iter().enumerate() {
                        for ch in 0..cols {
                            gi[src_r * cols + ch] += g.data()[out_r * cols + ch];
                        }
                    }
                }
                Op::SumAll(a) => {
                    let gv = g.item();
                    for x in grads[a.0].data_mut() {
                        *x += gv;
                    }
                }
                Op::MeanAll(a) => {
                    let n = self.value(*a).len() as f64;
                    let gv = g.item() / n;
                    for x in grads[a.0].data_mut() {
                        *x += gv;
                    }
                }
                Op::Mse { pred, target } => {
                    let gv = g.item();
                    let n = target.len() as f64;
                    let gp = grads[pred.0].data_mut();
                    for ((x, &p), &t) in gp.iter_mut().zip(self.value(*pred).iter()).zip(target.iter())
                    {
                        *x += gv * 2.0 * (p - t) / n;
                    }
                }
                Op::SmoothL1 { pred, target } => {
                    let gv = g.item();
                    let n = target.len() as f64;
                    let gp = grads[pred.0].data_mut();
                    for ((x, &p), &t) in gp.iter_mut().zip(self.value(*pred).iter()).zip(target.iter())
                    {
                        let d = p - t;
                        *x += gv * d.clamp(-1.0, 1.0) / n;
                    }
                }
                Op::CrossEntropy { logits, target } => {
                    let gv = g.item();
                    let t = self.value(*logits);
                    let row_len = *t.shape().last().expect("non-empty shape");
                    let rows = t.len() / row_len;
                    let soft = softmax_rows(t.data(), row_len);
                    let gl = grads[logits.0].data_mut();
                    let scale = gv / rows as f64;
                    match target {
                        CeTarget::Indices(idx) => {
                            for r in 0..rows {
                                for ch in 0..row_len {
                                    let mut d = soft[r * row_len + ch];
                                    if ch == idx[r] {
                                        d -= 1.0;
                                    }
                                    gl[r * row_len + ch] += scale * d;
                                }
                            }
                        }
                        CeTarget::OneHot(oh) => {
                            for r in 0..rows {
                                let trow = &oh.data()[r * row_len..(r + 1) * row_len];
                                let mass: f64 = trow.iter().sum();
                                for ch in 0..row_len {
                                    let d = soft[r * row_len + ch] * mass - trow[ch];
                                    gl[r * row_len + ch] += scale * d;
                                }
                            }
                        }
                    }
                }
            }
            grads[i] = g;
        }
        Ok(Gradients { grads })
    }

    fn accumulate_channel_sum(
        &self,
        wide: NodeId,
        g: &Tensor,
        into: &mut Tensor,
        weight_by: Option<&[f64]>,
    ) {
        let (_, _, c) = self.value(wide).dims3();
        let out = into.data_mut();
        match weight_by {
            None => {
                for (px, gpx) in g.data().chunks_exact(c).enumerate() {
                    out[px] += gpx.iter().sum::<f64>();
                }
            }
            Some(a) => {
                for (px, (gpx, apx)) in g.data().chunks_exact(c).zip(a.chunks_exact(c)).enumerate()
                {
                    out[px] += gpx.iter().zip(apx).map(|(x, y)| x * y).sum::<f64>();
                }
            }
        }
    }

    fn accumulate_channel_sum_neg(&self, wide: NodeId, g: &Tensor, into: &mut Tensor) {
        let (_, _, c) = self.value(wide).dims3();
        let out = into.data_mut();
        for (px, gpx) in g.data().chunks_exact(c).enumerate() {
            out[px] -= gpx.iter().sum::<f64>();
        }
    }
}

fn accumulate(into: &mut Tensor, from: &[f64]) {
    for (a, b) in into.data_mut().iter_mut().zip(from) {
        *a += b;
    }
}

fn accumulate_neg(into: &mut Tensor, from: &[f64]) {
    for (a, b) in into.data_mut().iter_mut().zip(from) {
        *a -= b;
    }
}

/// Central-difference gradient `(f(x + h e_i) - f(x - h e_i)) / 2h` per
/// element. The independent oracle for `backward`: it only ever evaluates
/// `f`, never the tape.
pub fn finite_diff_grad(
    mut f: impl FnMut(&Tensor) -> f64,
    at: &Tensor,
    h: f64,
) -> Tensor {
    assert!(h > 0.0, "finite difference step must be positive");
    let mut grad = Tensor::zeros(at.shape());
    let mut probe = at.clone();
    for i in 0..at.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    grad
}
