//! Define-by-run reverse-mode autodiff tape.
//!
//! A [`Tape`] is rebuilt for every forward pass: leaves are registered,
//! each operation validates shapes, computes its output eagerly, and
//! records what backward needs. [`Tape::backward`] replays the record in
//! reverse once; a second call on the same tape is an error.
//!
//! The op catalogue is exactly what the slice encoder, the scan model and
//! Grad-CAM need: elementwise add/mul, dense products, grouped 2-D
//! convolution, 2x2 max pooling, global average pooling, relu/sigmoid/tanh,
//! concat/slice, inverted dropout, reductions, and a fused
//! sigmoid + binary-cross-entropy loss head.

use crate::metrics;
use crate::{Error, Result, Rng};
use rand::Rng as _;

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    needs_grad: bool,
}

enum Op {
    Add { a: usize, b: usize, out: usize },
    Mul { a: usize, b: usize, out: usize },
    Scale { x: usize, c: f64, out: usize },
    Relu { x: usize, out: usize },
    Sigmoid { x: usize, out: usize },
    Tanh { x: usize, out: usize },
    // a [m,k] . b [k,n] -> [m,n]
    Matmul { a: usize, b: usize, out: usize, m: usize, k: usize, n: usize },
    // x [n,d] . w [m,d]^T -> [n,m]
    Linear { x: usize, w: usize, out: usize, n: usize, d: usize, m: usize },
    Conv2d { x: usize, w: usize, out: usize, geom: ConvGeom },
    // x [n,c,h,w] + b[c]
    AddChanBias { x: usize, b: usize, out: usize },
    // x [n,m] + b[m]
    AddRowBias { x: usize, b: usize, out: usize },
    // 2x2 window, stride 2; argmax holds the flat input index per output
    MaxPool2 { x: usize, out: usize, argmax: Vec<usize> },
    // [n,c,h,w] -> [n,c]
    Gap { x: usize, out: usize, hw: usize },
    Concat { xs: Vec<usize>, axis: usize, out: usize },
    Slice { x: usize, axis: usize, start: usize, out: usize },
    // mask entries are 0 or 1/(1-p)
    Dropout { x: usize, out: usize, mask: Vec<f64> },
    SumAll { x: usize, out: usize },
    MeanAll { x: usize, out: usize },
    // scalar loss: sum_t bce(targets[t], sigmoid(logits[t])), clamped like
    // the evaluation metric; probs saved for backward
    MultiBce { logits: usize, out: usize, targets: Vec<f64>, probs: Vec<f64> },
}

impl Op {
    fn out(&self) -> usize {
        match self {
            Op::Add { out, .. }
            | Op::Mul { out, .. }
            | Op::Scale { out, .. }
            | Op::Relu { out, .. }
            | Op::Sigmoid { out, .. }
            | Op::Tanh { out, .. }
            | Op::Matmul { out, .. }
            | Op::Linear { out, .. }
            | Op::Conv2d { out, .. }
            | Op::AddChanBias { out, .. }
            | Op::AddRowBias { out, .. }
            | Op::MaxPool2 { out, .. }
            | Op::Gap { out, .. }
            | Op::Concat { out, .. }
            | Op::Slice { out, .. }
            | Op::Dropout { out, .. }
            | Op::SumAll { out, .. }
            | Op::MeanAll { out, .. }
            | Op::MultiBce { out, .. } => *out,
        }
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    groups: usize,
    oh: usize,
    ow: usize,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    ops: Vec<Op>,
    grads: Vec<Option<Vec<f64>>>,
    spent: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push_node(&mut self, shape: Vec<usize>, data: Vec<f64>, needs_grad: bool) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Registers a tensor as a leaf; it participates in backward iff it
    /// requires grad.
    pub fn leaf(&mut self, t: &super::Tensor) -> NodeId {
        self.push_node(t.shape().to_vec(), t.data().to_vec(), t.requires_grad())
    }

    /// Registers a non-differentiable input.
    pub fn constant(&mut self, shape: &[usize], data: &[f64]) -> Result<NodeId> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape {
                op: "constant",
                msg: format!("shape {shape:?} vs {} elements", data.len()),
            });
        }
        Ok(self.push_node(shape.to_vec(), data.to_vec(), false))
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Gradient of the last backward pass, if one reached this node.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Gradients for a list of leaves (zeros where backward never reached).
    pub fn leaf_grads(&self, ids: &[NodeId]) -> Vec<Vec<f64>> {
        ids.iter()
            .map(|&id| {
                self.grad(id)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; self.nodes[id.0].data.len()])
            })
            .collect()
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    // ── Elementwise ─────────────────────────────────────────────────────

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::Shape {
                op,
                msg: format!(
                    "{:?} vs {:?}",
                    self.nodes[a.0].shape, self.nodes[b.0].shape
                ),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        let out = self.push_node(self.nodes[a.0].shape.clone(), data, needs);
        self.ops.push(Op::Add { a: a.0, b: b.0, out: out.0 });
        Ok(out)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        let out = self.push_node(self.nodes[a.0].shape.clone(), data, needs);
        self.ops.push(Op::Mul { a: a.0, b: b.0, out: out.0 });
        Ok(out)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let data = self.nodes[x.0].data.iter().map(|v| c * v).collect();
        let needs = self.needs(x);
        let out = self.push_node(self.nodes[x.0].shape.clone(), data, needs);
        self.ops.push(Op::Scale { x: x.0, c, out: out.0 });
        out
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let data = self.nodes[x.0].data.iter().map(|v| v.max(0.0)).collect();
        let needs = self.needs(x);
        let out = self.push_node(self.nodes[x.0].shape.clone(), data, needs);
        self.ops.push(Op::Relu { x: x.0, out: out.0 });
        out
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let data = self.nodes[x.0].data.iter().map(|&v| sigmoid(v)).collect();
        let needs = self.needs(x);
        let out = self.push_node(self.nodes[x.0].shape.clone(), data, needs);
        self.ops.push(Op::Sigmoid { x: x.0, out: out.0 });
        out
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let data = self.nodes[x.0].data.iter().map(|v| v.tanh()).collect();
        let needs = self.needs(x);
        let out = self.push_node(self.nodes[x.0].shape.clone(), data, needs);
        self.ops.push(Op::Tanh { x: x.0, out: out.0 });
        out
    }

    // ── Dense products ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                msg: format!("{sa:?} . {sb:?}"),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0; m * n];
        {
            let av = &self.nodes[a.0].data;
            let bv = &self.nodes[b.0].data;
            for i in 0..m {
                let arow = &av[i * k..(i + 1) * k];
                let crow = &mut data[i * n..(i + 1) * n];
                for (kk, &aik) in arow.iter().enumerate() {
                    let brow = &bv[kk * n..(kk + 1) * n];
                    for (c, &bv) in crow.iter_mut().zip(brow) {
                        *c += aik * bv;
                    }
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        let out = self.push_node(vec![m, n], data, needs);
        self.ops.push(Op::Matmul { a: a.0, b: b.0, out: out.0, m, k, n });
        Ok(out)
    }

    /// `x [n,d] . w [m,d]^T -> [n,m]`, the dense-layer product with weights
    /// stored row-per-output.
    pub fn linear(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (sx, sw) = (&self.nodes[x.0].shape, &self.nodes[w.0].shape);
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(Error::Shape {
                op: "linear",
                msg: format!("{sx:?} . {sw:?}^T"),
            });
        }
        let (n, d, m) = (sx[0], sx[1], sw[0]);
        let mut data = vec![0.0; n * m];
        {
            let xv = &self.nodes[x.0].data;
            let wv = &self.nodes[w.0].data;
            for i in 0..n {
                let xrow = &xv[i * d..(i + 1) * d];
                for j in 0..m {
                    let wrow = &wv[j * d..(j + 1) * d];
                    data[i * m + j] = dot(xrow, wrow);
                }
            }
        }
        let needs = self.needs(x) || self.needs(w);
        let out = self.push_node(vec![n, m], data, needs);
        self.ops.push(Op::Linear { x: x.0, w: w.0, out: out.0, n, d, m });
        Ok(out)
    }

    // ── Convolution and pooling ─────────────────────────────────────────

    /// Grouped 2-D convolution with zero padding.
    /// `x [n,cin,h,w]`, `w [cout,cin/groups,kh,kw]`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<NodeId> {
        let (sx, sw) = (&self.nodes[x.0].shape, &self.nodes[w.0].shape);
        if sx.len() != 4 || sw.len() != 4 {
            return Err(Error::Shape {
                op: "conv2d",
                msg: format!("input {sx:?}, kernel {sw:?}; want rank 4"),
            });
        }
        let (n, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, cink, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        if groups == 0 || stride == 0 {
            return Err(Error::Shape {
                op: "conv2d",
                msg: format!("stride {stride}, groups {groups}; both must be >= 1"),
            });
        }
        if cin % groups != 0 || cout % groups != 0 || cink != cin / groups {
            return Err(Error::Shape {
                op: "conv2d",
                msg: format!("input channels {cin}, kernel {cink} per group, groups {groups}"),
            });
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::Shape {
                op: "conv2d",
                msg: format!("kernel {kh}x{kw} larger than padded input {h}x{wd} (pad {pad})"),
            });
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let geom = ConvGeom { n, cin, h, w: wd, cout, kh, kw, stride, pad, groups, oh, ow };
        let data = conv_forward(&self.nodes[x.0].data, &self.nodes[w.0].data, &geom);
        let needs = self.needs(x) || self.needs(w);
        let out = self.push_node(vec![n, cout, oh, ow], data, needs);
        self.ops.push(Op::Conv2d { x: x.0, w: w.0, out: out.0, geom });
        Ok(out)
    }

    pub fn add_chan_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (sx, sb) = (&self.nodes[x.0].shape, &self.nodes[b.0].shape);
        if sx.len() != 4 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(Error::Shape {
                op: "add_chan_bias",
                msg: format!("{sx:?} + {sb:?}"),
            });
        }
        let (n, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
        let mut data = self.nodes[x.0].data.clone();
        for ni in 0..n {
            for ci in 0..c {
                let bias = self.nodes[b.0].data[ci];
                for v in &mut data[(ni * c + ci) * hw..(ni * c + ci + 1) * hw] {
                    *v += bias;
                }
            }
        }
        let needs = self.needs(x) || self.needs(b);
        let out = self.push_node(sx.clone(), data, needs);
        self.ops.push(Op::AddChanBias { x: x.0, b: b.0, out: out.0 });
        Ok(out)
    }

    pub fn add_row_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (sx, sb) = (&self.nodes[x.0].shape, &self.nodes[b.0].shape);
        if sx.len() != 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(Error::Shape {
                op: "add_row_bias",
                msg: format!("{sx:?} + {sb:?}"),
            });
        }
        let (n, m) = (sx[0], sx[1]);
        let mut data = self.nodes[x.0].data.clone();
        for i in 0..n {
            for (v, bias) in data[i * m..(i + 1) * m].iter_mut().zip(&self.nodes[b.0].data) {
                *v += bias;
            }
        }
        let needs = self.needs(x) || self.needs(b);
        let out = self.push_node(sx.clone(), data, needs);
        self.ops.push(Op::AddRowBias { x: x.0, b: b.0, out: out.0 });
        Ok(out)
    }

    /// 2x2 max pooling with stride 2; spatial dims must be even.
    /// Ties go to the first element in scan order.
    pub fn maxpool2x2(&mut self, x: NodeId) -> Result<NodeId> {
        let sx = &self.nodes[x.0].shape;
        if sx.len() != 4 || sx[2] % 2 != 0 || sx[3] % 2 != 0 {
            return Err(Error::Shape {
                op: "maxpool2x2",
                msg: format!("{sx:?}; want rank 4 with even spatial dims"),
            });
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (oh, ow) = (h / 2, w / 2);
        let xv = &self.nodes[x.0].data;
        let mut data = vec![0.0; n * c * oh * ow];
        let mut argmax = vec![0usize; data.len()];
        for nc in 0..n * c {
            let base = nc * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_at = 0;
                    for di in 0..2 {
                        for dj in 0..2 {
                            let at = base + (2 * i + di) * w + 2 * j + dj;
                            if xv[at] > best {
                                best = xv[at];
                                best_at = at;
                            }
                        }
                    }
                    let o = nc * oh * ow + i * ow + j;
                    data[o] = best;
                    argmax[o] = best_at;
                }
            }
        }
        let needs = self.needs(x);
        let out = self.push_node(vec![n, c, oh, ow], data, needs);
        self.ops.push(Op::MaxPool2 { x: x.0, out: out.0, argmax });
        Ok(out)
    }

    /// Global average pooling, `[n,c,h,w] -> [n,c]`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let sx = &self.nodes[x.0].shape;
        if sx.len() != 4 {
            return Err(Error::Shape {
                op: "global_avg_pool",
                msg: format!("{sx:?}; want rank 4"),
            });
        }
        let (n, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
        let xv = &self.nodes[x.0].data;
        let data: Vec<f64> = (0..n * c)
            .map(|nc| xv[nc * hw..(nc + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        let needs = self.needs(x);
        let out = self.push_node(vec![n, c], data, needs);
        self.ops.push(Op::Gap { x: x.0, out: out.0, hw });
        Ok(out)
    }

    // ── Layout ──────────────────────────────────────────────────────────

    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::Shape {
                op: "concat",
                msg: "no inputs".into(),
            });
        }
        let first = self.nodes[xs[0].0].shape.clone();
        if axis >= first.len() {
            return Err(Error::Shape {
                op: "concat",
                msg: format!("axis {axis} for rank {}", first.len()),
            });
        }
        let mut axis_total = 0;
        for &x in xs {
            let s = &self.nodes[x.0].shape;
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::Shape {
                    op: "concat",
                    msg: format!("{s:?} vs {first:?} on axis {axis}"),
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![0.0; outer * axis_total * inner];
        let mut offset = 0;
        for &x in xs {
            let s_axis = self.nodes[x.0].shape[axis];
            let xv = &self.nodes[x.0].data;
            for o in 0..outer {
                let src = &xv[o * s_axis * inner..(o + 1) * s_axis * inner];
                let dst_start = (o * axis_total + offset) * inner;
                data[dst_start..dst_start + s_axis * inner].copy_from_slice(src);
            }
            offset += s_axis;
        }
        let needs = xs.iter().any(|&x| self.needs(x));
        let out = self.push_node(out_shape, data, needs);
        self.ops.push(Op::Concat {
            xs: xs.iter().map(|x| x.0).collect(),
            axis,
            out: out.0,
        });
        Ok(out)
    }

    /// Contiguous range along one axis.
    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let sx = self.nodes[x.0].shape.clone();
        if axis >= sx.len() || start + len > sx[axis] || len == 0 {
            return Err(Error::Shape {
                op: "slice",
                msg: format!("[{start}, {start}+{len}) on axis {axis} of {sx:?}"),
            });
        }
        let outer: usize = sx[..axis].iter().product();
        let inner: usize = sx[axis + 1..].iter().product();
        let mut out_shape = sx.clone();
        out_shape[axis] = len;
        let xv = &self.nodes[x.0].data;
        let mut data = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src_start = (o * sx[axis] + start) * inner;
            data[o * len * inner..(o + 1) * len * inner]
                .copy_from_slice(&xv[src_start..src_start + len * inner]);
        }
        let needs = self.needs(x);
        let out = self.push_node(out_shape, data, needs);
        self.ops.push(Op::Slice { x: x.0, axis, start, out: out.0 });
        Ok(out)
    }

    // ── Regularization and reductions ───────────────────────────────────

    /// Inverted dropout: keeps each element with probability `1-p` scaled
    /// by `1/(1-p)`. Training-time only; evaluation paths simply skip the
    /// call, which makes inference the identity.
    pub fn dropout(&mut self, x: NodeId, p: f64, rng: &mut Rng) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Shape {
                op: "dropout",
                msg: format!("p = {p}; want [0, 1)"),
            });
        }
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..self.nodes[x.0].data.len())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let data = self.nodes[x.0]
            .data
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let needs = self.needs(x);
        let out = self.push_node(self.nodes[x.0].shape.clone(), data, needs);
        self.ops.push(Op::Dropout { x: x.0, out: out.0, mask });
        Ok(out)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.nodes[x.0].data.iter().sum();
        let needs = self.needs(x);
        let out = self.push_node(vec![1], vec![s], needs);
        self.ops.push(Op::SumAll { x: x.0, out: out.0 });
        out
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.nodes[x.0].data.len();
        let s: f64 = self.nodes[x.0].data.iter().sum::<f64>() / n as f64;
        let needs = self.needs(x);
        let out = self.push_node(vec![1], vec![s], needs);
        self.ops.push(Op::MeanAll { x: x.0, out: out.0 });
        out
    }

    /// Fused sigmoid + multi-label binary cross-entropy against fixed
    /// targets. The forward value matches [`metrics::multi_bce`] applied to
    /// the sigmoid of the logits, including the probability clamp.
    pub fn multi_bce_loss(&mut self, logits: NodeId, targets: &[f64]) -> Result<NodeId> {
        let nl = self.nodes[logits.0].data.len();
        if targets.len() != nl {
            return Err(Error::Shape {
                op: "multi_bce_loss",
                msg: format!("{} logits vs {} targets", nl, targets.len()),
            });
        }
        let probs: Vec<f64> = self.nodes[logits.0].data.iter().map(|&z| sigmoid(z)).collect();
        let loss: f64 = targets
            .iter()
            .zip(&probs)
            .map(|(&y, &p)| metrics::bce(y, p))
            .sum();
        let needs = self.needs(logits);
        let out = self.push_node(vec![1], vec![loss], needs);
        self.ops.push(Op::MultiBce {
            logits: logits.0,
            out: out.0,
            targets: targets.to_vec(),
            probs,
        });
        Ok(out)
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse replay from a scalar loss node. Populates gradients for
    /// every node that influenced the loss; leaves that require grad but
    /// never touched it get zeros. The tape is spent afterwards.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.spent {
            return Err(Error::Tape(
                "backward already ran; record a fresh forward pass".into(),
            ));
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Tape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.spent = true;
        self.grads = self.nodes.iter().map(|_| None).collect();
        self.grads[loss.0] = Some(vec![1.0]);
        for idx in (0..self.nodes.len()).rev() {
            // Leaves keep zero grads when untouched.
            if self.nodes[idx].needs_grad && self.grads[idx].is_none() {
                self.grads[idx] = Some(vec![0.0; self.nodes[idx].data.len()]);
            }
        }

        for op in self.ops.iter().rev() {
            // Branches that never reached the loss carry no gradient.
            if self.grads[op.out()].is_none() {
                continue;
            }
            match op {
                Op::Add { a, b, out } => {
                    let go = take(&mut self.grads, *out);
                    add_into(&mut self.grads, &self.nodes, *a, &go);
                    add_into(&mut self.grads, &self.nodes, *b, &go);
                    self.grads[*out] = Some(go);
                }
                Op::Mul { a, b, out } => {
                    let go = take(&mut self.grads, *out);
                    if self.nodes[*a].needs_grad {
                        let contrib: Vec<f64> =
                            go.iter().zip(&self.nodes[*b].data).map(|(g, v)| g * v).collect();
                        add_into(&mut self.grads, &self.nodes, *a, &contrib);
                    }
                    if self.nodes[*b].needs_grad {
                        let contrib: Vec<f64> =
                            go.iter().zip(&self.nodes[*a].data).map(|(g, v)| g * v).collect();
                        add_into(&mut self.grads, &self.nodes, *b, &contrib);
                    }
                    self.grads[*out] = Some(go);
                }
                Op::Scale { x, c, out } => {
                    let go = take(&mut self.grads, *out);
                    if self.nodes[*x].needs_grad {
                        let contrib: Vec<f64> = go.iter().map(|g| g * c).collect();
                        add_into(&mut self.grads, &self.nodes, *x, &contrib);
                    }
                    self.grads[*out] = Some(go);
                }
                Op::Relu { x, out } => {
                    let go = take(&mut self.grads, *out);
                    if self.nodes[*x].needs_grad {
                        let contrib: Vec<f64> = go
                            .iter()
                            .zip(&self.nodes[*x].data)
                            .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                            .collect();
                        add_into(&mut self.grads, &self.nodes, *x, &contrib);
                    }
                    self.grads[*out] = Some(go);
                }
                Op::Sigmoid { x, out } => {
                    let go = take(&mut self.grads, *out);
                    if self.nodes[*x].needs_grad {
                        let contrib: Vec<f64> = go
                            .iter()
                            .zip(&self.nodes[*out].data)
                            .map(|(g, &y)| g * y * (1.0 - y))
                            .collect();
                        add_into(&mut self.grads, &self.nodes, *x, &contrib);
                    }
                    self.grads[*out] = Some(go);
                }
                Op::Tanh { x, out } => {
                    let go = take(&mut self.grads, *out);
                    if self.nodes[*x].needs_grad {
                        let contrib: Vec<f64> = go
                            .iter()
                            .zip(&self.nodes[*out].data)
                            .map(|(g, &y)| g * (1.0 - y * y))
                            .collect();
                        add_into(&mut self.grads, &self.nodes, *x, &contrib);
                    }
                    self.grads[*out] = Some(go);
                }
                Op::Matmul { a, b, out, m, k, n } => {
                    let go = take(&mut self.grads, *out);
                    if self.nodes[*a].needs_grad {
                        // dA = dOut . B^T
                        let bv = &self.nodes[*b].data;
                        let mut ga = take_or_zeros(&mut self.grads, &self.nodes, *a);
                        for i in 0..*m {
                            let gor = &go[i * n..(i + 1) * n];
                            for kk in 0..*k {
                                ga[i * k + kk] += dot(gor, &bv[kk * n..(kk + 1) * n]);
                            }
                        }
                        self.grads[*a] = Some(ga);
                    }
                    if self.nodes[*b].needs_grad {
                        // dB = A^T . dOut
                        let av = &self.nodes[*a].data;
                        let mut gb = take_or_zeros(&mut self.grads, &self.nodes, *b);
                        for i in 0..*m {
                            let gor = &go[i * n..(i + 1) * n];
                            for kk in 0..*k {
                                let aik = av[i * k + kk];
                                axpy(aik, gor, &mut gb[kk * n..(kk + 1) * n]);
                            }
                        }
                        self.grads[*b] = Some(gb);
                    }
                    self.grads[*out] = Some(go);
                }
                Op::Linear { x, w, out, n, d, m } => {
                    let go = take(&mut self.grads, *out);
                    if self.nodes[*x].needs_grad {
                        let wv = &self.nodes[*w].data;
                        let mut gx = take_or_zeros(&mut self.grads, &self.nodes, *x);
                        for i in 0..*n {
                            let gor = &go[i * m..(i + 1) * m];
                            let gxr = &mut gx[i * d..(i + 1) * d];
                            for j in 0..*m {
                                axpy(gor[j], &wv[j * d..(j + 1) * d], gxr);
                            }
                        }
                        self.grads[*x] = Some(gx);
                    }
                    if self.nodes[*w].needs_grad {
                        let xv = &self.nodes[*x].data;
                        let mut gw = take_or_zeros(&mut self.grads, &self.nodes, *w);
                        for i in 0..*n {
                            let gor = &go[i * m..(i + 1) * m];
                            let xr = &xv[i * d..(i + 1) * d];
                            for j in 0..*m {
                                axpy(gor[j], xr, &mut gw[j * d..(j + 1) * d]);
                            }
                        }
                        self.grads[*w] = Some(gw);
                    }
                    self.grads[*out] = Some(go);
                }
                Op::Conv2d { x, w, out, geom } => {
                    let go = take(&mut self.grads, *out);
                    if self.nodes[*x].needs_grad {
                        let mut gx = take_or_zeros(&mut self.grads, &self.nodes, *x);
                        conv_backward_input(&go, &self.nodes[*w].data, &mut gx, geom);
                        self.grads[*x] = Some(gx);
                    }
                    if self.nodes[*w].needs_grad {
                        let mut gw = take_or_zeros(&mut self.grads, &self.nodes, *w);
                        conv_backward_kernel(&go, &self.nodes[*x].data, &mut gw, geom);
                        self.grads[*w] = Some(gw);
                    }
                    self.grads[*out] = Some(go);
                }
                Op::AddChanBias { x, b, out } => {
                    let go = take(&mut self.grads, *out);
                    add_into(&mut self.grads, &self.nodes, *x, &go);
                    if self.nodes[*b].needs_grad {
                        let (c, hw) = {
                            let s = &self.nodes[*x].shape;
                            (s[1], s[2] * s[3])
                        };
                        let n = self.nodes[*x].shape[0];
                        let mut contrib = vec![0.0; c];
                        for ni in 0..n {
                            for (ci, acc) in contrib.iter_mut().enumerate() {
                                *acc += go[(ni * c + ci) * hw..(ni * c + ci + 1) * hw]
                                    .iter()
                                    .sum::<f64>();
                            }
                        }
                        add_into(&mut self.grads, &self.nodes, *b, &contrib);
                    }
                    self.grads[*out] = Some(go);
                }
                Op::AddRowBias { x, b, out } => {
                    let go = take(&mut self.grads, *out);
                    add_into(&mut self.grads, &self.nodes, *x, &go);
                    if self.nodes[*b].needs_grad {
                        let m = self.nodes[*b].data.len();
                        let mut contrib = vec![0.0; m];
                        for row in go.chunks_exact(m) {
                            for (acc, g) in contrib.iter_mut().zip(row) {
                                *acc += g;
                            }
                        }
                        add_into(&mut self.grads, &self.nodes, *b, &contrib);
                    }
                    self.grads[*out] = Some(go);
                }
                Op::MaxPool2 { x, out, argmax } => {
                    let go = take(&mut self.grads, *out);
                    if self.nodes[*x].needs_grad {
                        let mut gx = take_or_zeros(&mut self.grads, &self.nodes, *x);
                        for (g, &at) in go.iter().zip(argmax) {
                            gx[at] += g;
                        }
                        self.grads[*x] = Some(gx);
                    }
                    self.grads[*out] = Some(go);
                }
                Op::Gap { x, out, hw } => {
                    let go = take(&mut self.grads, *out);
                    if self.nodes[*x].needs_grad {
                        let mut gx = take_or_zeros(&mut self.grads, &self.nodes, *x);
                        let inv = 1.0 / *hw as f64;
                        for (nc, g) in go.iter().enumerate() {
                            for v in &mut gx[nc * hw..(nc + 1) * hw] {
                                *v += g * inv;
                            }
                        }
                        self.grads[*x] = Some(gx);
                    }
                    self.grads[*out] = Some(go);
                }
                Op::Concat { xs, axis, out } => {
                    let go = take(&mut self.grads, *out);
                    let out_axis = self.nodes[*out].shape[*axis];
                    let outer: usize = self.nodes[*out].shape[..*axis].iter().product();
                    let inner: usize = self.nodes[*out].shape[*axis + 1..].iter().product();
                    let mut offset = 0;
                    for &x in xs {
                        let s_axis = self.nodes[x].shape[*axis];
                        if self.nodes[x].needs_grad {
                            let mut contrib = vec![0.0; self.nodes[x].data.len()];
                            for o in 0..outer {
                                let src = (o * out_axis + offset) * inner;
                                contrib[o * s_axis * inner..(o + 1) * s_axis * inner]
                                    .copy_from_slice(&go[src..src + s_axis * inner]);
                            }
                            add_into(&mut self.grads, &self.nodes, x, &contrib);
                        }
                        offset += s_axis;
                    }
                    self.grads[*out] = Some(go);
                }
                Op::Slice { x, axis, start, out } => {
                    let go = take(&mut self.grads, *out);
                    if self.nodes[*x].needs_grad {
                        let len = self.nodes[*out].shape[*axis];
                        let x_axis = self.nodes[*x].shape[*axis];
                        let outer: usize = self.nodes[*x].shape[..*axis].iter().product();
                        let inner: usize = self.nodes[*x].shape[*axis + 1..].iter().product();
                        let mut gx = take_or_zeros(&mut self.grads, &self.nodes, *x);
                        for o in 0..outer {
                            let dst = (o * x_axis + start) * inner;
                            for (gv, g) in gx[dst..dst + len * inner]
                                .iter_mut()
                                .zip(&go[o * len * inner..(o + 1) * len * inner])
                            {
                                *gv += g;
                            }
                        }
                        self.grads[*x] = Some(gx);
                    }
                    self.grads[*out] = Some(go);
                }
                Op::Dropout { x, out, mask } => {
                    let go = take(&mut self.grads, *out);
                    if self.nodes[*x].needs_grad {
                        let contrib: Vec<f64> =
                            go.iter().zip(mask).map(|(g, m)| g * m).collect();
                        add_into(&mut self.grads, &self.nodes, *x, &contrib);
                    }
                    self.grads[*out] = Some(go);
                }
                Op::SumAll { x, out } => {
                    let go = take(&mut self.grads, *out);
                    if self.nodes[*x].needs_grad {
                        let contrib = vec![go[0]; self.nodes[*x].data.len()];
                        add_into(&mut self.grads, &self.nodes, *x, &contrib);
                    }
                    self.grads[*out] = Some(go);
                }
                Op::MeanAll { x, out } => {
                    let go = take(&mut self.grads, *out);
                    if self.nodes[*x].needs_grad {
                        let n = self.nodes[*x].data.len();
                        let contrib = vec![go[0] / n as f64; n];
                        add_into(&mut self.grads, &self.nodes, *x, &contrib);
                    }
                    self.grads[*out] = Some(go);
                }
                Op::MultiBce { logits, out, targets, probs } => {
                    let go = take(&mut self.grads, *out);
                    if self.nodes[*logits].needs_grad {
                        // d/dz of the clamped loss: (p - y) inside the clamp
                        // band, 0 where the clamp has flattened it.
                        let contrib: Vec<f64> = targets
                            .iter()
                            .zip(probs)
                            .map(|(&y, &p)| {
                                if p > metrics::PROB_CLAMP_LO && p < metrics::PROB_CLAMP_HI {
                                    go[0] * (p - y)
                                } else {
                                    0.0
                                }
                            })
                            .collect();
                        add_into(&mut self.grads, &self.nodes, *logits, &contrib);
                    }
                    self.grads[*out] = Some(go);
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

fn take(grads: &mut [Option<Vec<f64>>], id: usize) -> Vec<f64> {
    grads[id].take().expect("output gradient present during reverse replay")
}

fn take_or_zeros(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize) -> Vec<f64> {
    grads[id]
        .take()
        .unwrap_or_else(|| vec![0.0; nodes[id].data.len()])
}

fn add_into(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, contrib: &[f64]) {
    if !nodes[id].needs_grad {
        return;
    }
    match &mut grads[id] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(contrib) {
                *a += b;
            }
        }
        slot => *slot = Some(contrib.to_vec()),
    }
}

// ── Convolution kernels ─────────────────────────────────────────────────
//
// Inner loops run along output/input rows so stride-1 convolutions stream
// contiguous memory in both buffers.

fn conv_forward(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut out = vec![0.0; g.n * g.cout * g.oh * g.ow];
    let icg = g.cin / g.groups;
    let ocg = g.cout / g.groups;
    for ni in 0..g.n {
        for gi in 0..g.groups {
            for oc in gi * ocg..(gi + 1) * ocg {
                let out_base = (ni * g.cout + oc) * g.oh * g.ow;
                for ic_rel in 0..icg {
                    let ic = gi * icg + ic_rel;
                    let x_base = (ni * g.cin + ic) * g.h * g.w;
                    let w_base = (oc * icg + ic_rel) * g.kh * g.kw;
                    for kh in 0..g.kh {
                        for kw in 0..g.kw {
                            let wv = w[w_base + kh * g.kw + kw];
                            if wv == 0.0 {
                                continue;
                            }
                            for ohi in 0..g.oh {
                                let ih = (ohi * g.stride + kh) as isize - g.pad as isize;
                                if ih < 0 || ih >= g.h as isize {
                                    continue;
                                }
                                let x_row = x_base + ih as usize * g.w;
                                let out_row = out_base + ohi * g.ow;
                                let (lo, hi) = ow_range(g.ow, g.w, g.stride, g.pad, kw);
                                for owi in lo..hi {
                                    let iw = owi * g.stride + kw - g.pad;
                                    out[out_row + owi] += wv * x[x_row + iw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Output-column range where `ow*stride + kw - pad` lands inside `[0, w)`.
fn ow_range(ow: usize, w: usize, stride: usize, pad: usize, kw: usize) -> (usize, usize) {
    let lo = if kw >= pad {
        0
    } else {
        // smallest ow with ow*stride >= pad - kw
        (pad - kw + stride - 1) / stride
    };
    // largest ow with ow*stride + kw - pad <= w - 1
    let hi = if w + pad > kw {
        (((w + pad - kw - 1) / stride) + 1).min(ow)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn conv_backward_input(go: &[f64], w: &[f64], gx: &mut [f64], g: &ConvGeom) {
    let icg = g.cin / g.groups;
    let ocg = g.cout / g.groups;
    for ni in 0..g.n {
        for gi in 0..g.groups {
            for oc in gi * ocg..(gi + 1) * ocg {
                let go_base = (ni * g.cout + oc) * g.oh * g.ow;
                for ic_rel in 0..icg {
                    let ic = gi * icg + ic_rel;
                    let x_base = (ni * g.cin + ic) * g.h * g.w;
                    let w_base = (oc * icg + ic_rel) * g.kh * g.kw;
                    for kh in 0..g.kh {
                        for kw in 0..g.kw {
                            let wv = w[w_base + kh * g.kw + kw];
                            if wv == 0.0 {
                                continue;
                            }
                            for ohi in 0..g.oh {
                                let ih = (ohi * g.stride + kh) as isize - g.pad as isize;
                                if ih < 0 || ih >= g.h as isize {
                                    continue;
                                }
                                let x_row = x_base + ih as usize * g.w;
                                let go_row = go_base + ohi * g.ow;
                                let (lo, hi) = ow_range(g.ow, g.w, g.stride, g.pad, kw);
                                for owi in lo..hi {
                                    let iw = owi * g.stride + kw - g.pad;
                                    gx[x_row + iw] += wv * go[go_row + owi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_backward_kernel(go: &[f64], x: &[f64], gw: &mut [f64], g: &ConvGeom) {
    let icg = g.cin / g.groups;
    let ocg = g.cout / g.groups;
    for ni in 0..g.n {
        for gi in 0..g.groups {
            for oc in gi * ocg..(gi + 1) * ocg {
                let go_base = (ni * g.cout + oc) * g.oh * g.ow;
                for ic_rel in 0..icg {
                    let ic = gi * icg + ic_rel;
                    let x_base = (ni * g.cin + ic) * g.h * g.w;
                    let w_base = (oc * icg + ic_rel) * g.kh * g.kw;
                    for kh in 0..g.kh {
                        for kw in 0..g.kw {
                            let mut acc = 0.0;
                            for ohi in 0..g.oh {
                                let ih = (ohi * g.stride + kh) as isize - g.pad as isize;
                                if ih < 0 || ih >= g.h as isize {
                                    continue;
                                }
                                let x_row = x_base + ih as usize * g.w;
                                let go_row = go_base + ohi * g.ow;
                                let (lo, hi) = ow_range(g.ow, g.w, g.stride, g.pad, kw);
                                for owi in lo..hi {
                                    let iw = owi * g.stride + kw - g.pad;
                                    acc += go[go_row + owi] * x[x_row + iw];
                                }
                            }
                            gw[w_base + kh * g.kw + kw] += acc;
                        }
                    }
                }
            }
        }
    }
}
