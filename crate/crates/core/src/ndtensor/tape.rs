//! Reverse-mode differentiation tape.
//!
//! Every operation appends a node holding its output value and the op
//! record that produced it. Node ids grow monotonically, so the node list
//! is already a topological order and [`Tape::backward`] simply walks it
//! in reverse. Inputs stay alive on the tape, which is all the saved
//! state any backward rule needs.

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{arg_err, shape_err, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Relu(Var),
    Gap(Var),
    Linear {
        v: Var,
        w: Var,
        b: Option<Var>,
    },
    MulBroadcast {
        image: Var,
        mask: Var,
    },
    MinMaxNormalize {
        m: Var,
        eps: f64,
        detach: bool,
    },
    BilinearResize {
        m: Var,
        out_h: usize,
        out_w: usize,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
    },
    SqL2 {
        a: Var,
        b: Var,
    },
    Sum(Var),
    Scale(Var, f64),
    Add(Var, Var),
    SliceOuter {
        x: Var,
        start: usize,
        count: usize,
    },
    Reshape(Var),
    CamRaw {
        features: Var,
        weights: Var,
        classes: Vec<usize>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, .. } | Op::Linear { v: x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Relu(x) | Op::Gap(x) | Op::Sum(x) | Op::Scale(x, _) | Op::Reshape(x) => vec![*x],
            Op::MinMaxNormalize { m, .. } | Op::BilinearResize { m, .. } => vec![*m],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
            Op::SliceOuter { x, .. } => vec![*x],
            Op::MulBroadcast { image: a, mask: b } | Op::SqL2 { a, b } | Op::Add(a, b) => vec![*a, *b],
            Op::CamRaw {
                features, weights, ..
            } => vec![*features, *weights],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
    grad: Option<Tensor>,
}

/// Ordered record of operations for one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Splits a tensor shape into `(planes, h, w)` over its trailing two axes.
/// Rank 1 counts as a single `1×len` plane.
fn planes_of(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape.len() {
        0 => Err(shape_err!("spatial op needs rank ≥ 1")),
        1 => Ok((1, 1, shape[0])),
        r => {
            let (h, w) = (shape[r - 2], shape[r - 1]);
            Ok((shape[..r - 2].iter().product(), h, w))
        }
    }
}

fn conv_geom(xs: &[usize], ws: &[usize], stride: usize, pad: usize) -> Result<ConvGeom> {
    if stride == 0 {
        return Err(arg_err!("conv2d stride must be positive"));
    }
    if xs.len() != 4 || ws.len() != 4 {
        return Err(shape_err!("conv2d expects NCHW input and OIKK weights, got {xs:?} and {ws:?}"));
    }
    if ws[1] != xs[1] || ws[2] != ws[3] {
        return Err(shape_err!("conv2d weight {ws:?} incompatible with input {xs:?}"));
    }
    let k = ws[2];
    let (h, w) = (xs[2] + 2 * pad, xs[3] + 2 * pad);
    if h < k || w < k {
        return Err(shape_err!(
            "conv2d input {xs:?} with pad {pad} smaller than kernel {k}"
        ));
    }
    Ok(ConvGeom {
        n: xs[0],
        c: xs[1],
        h: xs[2],
        w: xs[3],
        o: ws[0],
        k,
        stride,
        pad,
        oh: (h - k) / stride + 1,
        ow: (w - k) / stride + 1,
    })
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input tensor. Gradients are accumulated only for leaves with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let value = self.eval(&op)?;
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(arg_err!("variable {} does not belong to this tape", v.0))
        }
    }

    /// Computes the output of `op` from the current values of its inputs.
    fn eval(&self, op: &Op) -> Result<Tensor> {
        for v in op.inputs() {
            self.check(v)?;
        }
        let val = |v: &Var| &self.nodes[v.0].value;
        Ok(match op {
            Op::Leaf => return Err(arg_err!("leaves have no forward rule")),
            Op::Conv2d { x, w, b, stride, pad } => {
                let (x, w) = (val(x), val(w));
                let g = conv_geom(x.shape(), w.shape(), *stride, *pad)?;
                let b = match b {
                    Some(b) => {
                        let b = val(b);
                        if b.shape() != [g.o] {
                            return Err(shape_err!("conv2d bias {:?} needs [{}]", b.shape(), g.o));
                        }
                        Some(b.data())
                    }
                    None => None,
                };
                Tensor::from_parts(
                    vec![g.n, g.o, g.oh, g.ow],
                    kernels::conv2d_forward(x.data(), w.data(), b, &g),
                )
            }
            Op::Relu(x) => val(x).map(|v| v.max(0.0)),
            Op::Gap(x) => {
                let x = val(x);
                if x.rank() != 4 {
                    return Err(shape_err!("gap expects NCHW, got {:?}", x.shape()));
                }
                let hw = x.shape()[2] * x.shape()[3];
                let data = x
                    .data()
                    .chunks_exact(hw)
                    .map(|c| c.iter().sum::<f64>() / hw as f64)
                    .collect();
                Tensor::from_parts(vec![x.shape()[0], x.shape()[1]], data)
            }
            Op::Linear { v, w, b } => {
                let (v, w) = (val(v), val(w));
                if v.rank() != 2 || w.rank() != 2 || v.shape()[1] != w.shape()[1] {
                    return Err(shape_err!(
                        "linear input {:?} incompatible with weight {:?}",
                        v.shape(),
                        w.shape()
                    ));
                }
                let (n, i, o) = (v.shape()[0], v.shape()[1], w.shape()[0]);
                let b = match b {
                    Some(b) => {
                        let b = val(b);
                        if b.shape() != [o] {
                            return Err(shape_err!("linear bias {:?} needs [{o}]", b.shape()));
                        }
                        Some(b.data())
                    }
                    None => None,
                };
                Tensor::from_parts(vec![n, o], kernels::linear_forward(v.data(), w.data(), b, n, i, o))
            }
            Op::MulBroadcast { image, mask } => {
                let (img, mask) = (val(image), val(mask));
                let (is, ms) = (img.shape(), mask.shape());
                if is.len() != 4 || ms.len() != 4 || ms[1] != 1 || is[0] != ms[0] || is[2..] != ms[2..] {
                    return Err(shape_err!("cannot broadcast mask {ms:?} over image {is:?}"));
                }
                let hw = is[2] * is[3];
                let mut out = img.data().to_vec();
                for (ni, chunk) in out.chunks_exact_mut(is[1] * hw).enumerate() {
                    let m = &mask.data()[ni * hw..(ni + 1) * hw];
                    for plane in chunk.chunks_exact_mut(hw) {
                        for (o, &mv) in plane.iter_mut().zip(m) {
                            *o *= mv;
                        }
                    }
                }
                Tensor::from_parts(is.to_vec(), out)
            }
            Op::MinMaxNormalize { m, eps, .. } => {
                let m = val(m);
                let (_, h, w) = planes_of(m.shape())?;
                Tensor::from_parts(m.shape().to_vec(), kernels::minmax_forward(m.data(), h * w, *eps))
            }
            Op::BilinearResize { m, out_h, out_w } => {
                let m = val(m);
                let (planes, h, w) = planes_of(m.shape())?;
                let mut shape = m.shape().to_vec();
                let r = shape.len();
                if r == 1 {
                    return Err(shape_err!("bilinear_resize needs a rank ≥ 2 map"));
                }
                shape[r - 2] = *out_h;
                shape[r - 1] = *out_w;
                Tensor::from_parts(
                    shape,
                    kernels::resize_forward(m.data(), planes, h, w, *out_h, *out_w),
                )
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                let l = val(logits);
                if l.rank() != 2 || l.shape()[0] != labels.len() {
                    return Err(shape_err!(
                        "logits {:?} do not match {} labels",
                        l.shape(),
                        labels.len()
                    ));
                }
                Tensor::scalar(kernels::cross_entropy(l.data(), labels, l.shape()[1]))
            }
            Op::SqL2 { a, b } => {
                let (a, b) = (val(a), val(b));
                Tensor::scalar(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum())
            }
            Op::Sum(x) => Tensor::scalar(val(x).sum()),
            Op::Scale(x, s) => val(x).map(|v| v * s),
            Op::Add(a, b) => {
                let (a, b) = (val(a), val(b));
                Tensor::from_parts(
                    a.shape().to_vec(),
                    a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect(),
                )
            }
            Op::SliceOuter { x, start, count } => val(x).slice_outer(*start, *count)?,
            Op::Reshape(_) => unreachable!("reshape is evaluated by Tape::reshape"),
            Op::CamRaw {
                features,
                weights,
                classes,
            } => {
                let (f, w) = (val(features), val(weights));
                let (n, k, hw) = cam_dims(f.shape(), w.shape(), classes)?;
                let mut out = vec![0.0; n * hw];
                for (ni, &c) in classes.iter().enumerate() {
                    let dst = &mut out[ni * hw..(ni + 1) * hw];
                    for ki in 0..k {
                        let wk = w.data()[c * k + ki];
                        let src = &f.data()[(ni * k + ki) * hw..(ni * k + ki + 1) * hw];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += wk * s;
                        }
                    }
                }
                let fs = f.shape();
                Tensor::from_parts(vec![n, 1, fs[2], fs[3]], out)
            }
        })
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        self.push(Op::Conv2d { x, w, b, stride, pad })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Relu(x))
    }

    /// Global average pooling `NCHW → NC`.
    pub fn gap(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Gap(x))
    }

    pub fn linear(&mut self, v: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.push(Op::Linear { v, w, b })
    }

    /// Multiplies an `NCHW` image by an `N1HW` mask replicated over channels.
    pub fn mul_broadcast(&mut self, image: Var, mask: Var) -> Result<Var> {
        self.push(Op::MulBroadcast { image, mask })
    }

    /// Rescales every trailing `H×W` plane to `(m − min) / (max − min + eps)`.
    ///
    /// With `detach` the min and max are treated as constants in backward.
    pub fn minmax_normalize(&mut self, m: Var, eps: f64, detach: bool) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(arg_err!("eps must be positive, got {eps}"));
        }
        self.push(Op::MinMaxNormalize { m, eps, detach })
    }

    /// Bilinear resampling of the trailing two axes with half-pixel centers and edge clamping.
    pub fn bilinear_resize(&mut self, m: Var, out_h: usize, out_w: usize) -> Result<Var> {
        if out_h == 0 || out_w == 0 {
            return Err(arg_err!("resize target must be at least 1×1"));
        }
        self.push(Op::BilinearResize { m, out_h, out_w })
    }

    /// Mean softmax cross-entropy of `[N, C]` logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.check(logits)?;
        let shape = self.shape(logits);
        if shape.len() != 2 {
            return Err(shape_err!("logits must be [N, C], got {shape:?}"));
        }
        let c = shape[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(arg_err!("label {bad} out of range for {c} classes"));
        }
        self.push(Op::SoftmaxCrossEntropy {
            logits,
            labels: labels.to_vec(),
        })
    }

    /// `Σ (a − b)²`.
    pub fn sq_l2(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!(
                "sq_l2 operands differ: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        self.push(Op::SqL2 { a, b })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Sum(x))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.push(Op::Scale(x, factor))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!(
                "add operands differ: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        self.push(Op::Add(a, b))
    }

    /// `count` consecutive entries along the leading axis.
    pub fn slice_outer(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        self.push(Op::SliceOuter { x, start, count })
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        self.check(x)?;
        let value = self.value(x).clone().reshape(shape)?;
        let requires_grad = self.requires_grad(x);
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Reshape(x),
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Per-sample class-weighted channel sum: `out[n] = Σ_k weights[classes[n], k] · features[n, k]`.
    ///
    /// `features` is `[N, K, h, w]`, `weights` is `[C, K]`; the result is `[N, 1, h, w]`.
    pub fn cam_raw(&mut self, features: Var, weights: Var, classes: &[usize]) -> Result<Var> {
        self.check(features)?;
        self.check(weights)?;
        cam_dims(self.shape(features), self.shape(weights), classes)?;
        self.push(Op::CamRaw {
            features,
            weights,
            classes: classes.to_vec(),
        })
    }

    /// Re-executes every recorded op from the leaf values into a fresh tape.
    pub fn replay(&self) -> Result<Tape> {
        let mut out = Tape {
            nodes: Vec::with_capacity(self.nodes.len()),
        };
        for node in &self.nodes {
            let value = match &node.op {
                Op::Leaf => node.value.clone(),
                Op::Reshape(x) => out.nodes[x.0].value.clone().reshape(node.value.shape().to_vec())?,
                op => out.eval(op)?,
            };
            out.nodes.push(Node {
                value,
                requires_grad: node.requires_grad,
                op: node.op.clone(),
                grad: None,
            });
        }
        Ok(out)
    }

    /// True when replaying the tape reproduces every stored value bit for bit.
    pub fn verify_replay(&self) -> Result<bool> {
        let replayed = self.replay()?;
        Ok(self
            .nodes
            .iter()
            .zip(&replayed.nodes)
            .all(|(a, b)| a.value.bit_eq(&b.value)))
    }

    /// Accumulates `d loss / d leaf` into every reachable leaf that requires a gradient.
    ///
    /// Calling it again without [`Tape::zero_grad`] adds to the existing gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss)?;
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(arg_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                adj[id] = Some(g);
                continue;
            }
            for (input, contrib) in self.local_grads(&node.op, &node.value, &g) {
                match &mut adj[input.0] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(&contrib) {
                            *a += c;
                        }
                    }
                    slot => *slot = Some(contrib),
                }
            }
        }
        for (id, g) in adj.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let node = &mut self.nodes[id];
            match &mut node.grad {
                Some(acc) => {
                    for (a, c) in acc.data_mut().iter_mut().zip(&g) {
                        *a += c;
                    }
                }
                slot => *slot = Some(Tensor::from_parts(node.value.shape().to_vec(), g)),
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of one op for each input that requires a gradient.
    fn local_grads(&self, op: &Op, out: &Tensor, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let val = |v: &Var| &self.nodes[v.0].value;
        let needs = |v: &Var| self.nodes[v.0].requires_grad;
        let mut res = Vec::new();
        match op {
            Op::Leaf => {}
            Op::Reshape(x) => res.push((*x, g.to_vec())),
            Op::Conv2d { x, w, b, stride, pad } => {
                let geom = conv_geom(val(x).shape(), val(w).shape(), *stride, *pad)
                    .expect("validated in forward");
                let need_b = b.is_some_and(|b| needs(&b));
                let grads = kernels::conv2d_backward(
                    val(x).data(),
                    val(w).data(),
                    g,
                    &geom,
                    (needs(x), needs(w), need_b),
                );
                res.extend(grads.x.map(|gx| (*x, gx)));
                res.extend(grads.w.map(|gw| (*w, gw)));
                if let (Some(b), Some(gb)) = (b, grads.b) {
                    res.push((*b, gb));
                }
            }
            Op::Relu(x) => {
                let gx = val(x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gi)| if v > 0.0 { gi } else { 0.0 })
                    .collect();
                res.push((*x, gx));
            }
            Op::Gap(x) => {
                let s = val(x).shape();
                let hw = s[2] * s[3];
                let mut gx = Vec::with_capacity(val(x).numel());
                for &gi in g {
                    gx.extend(std::iter::repeat(gi / hw as f64).take(hw));
                }
                res.push((*x, gx));
            }
            Op::Linear { v, w, b } => {
                let (vv, wv) = (val(v), val(w));
                let (n, i, o) = (vv.shape()[0], vv.shape()[1], wv.shape()[0]);
                if needs(v) {
                    res.push((*v, kernels::linear_backward_input(g, wv.data(), n, i, o)));
                }
                if needs(w) {
                    res.push((*w, kernels::linear_backward_weight(g, vv.data(), n, i, o)));
                }
                if let Some(b) = b.filter(|b| needs(b)) {
                    let mut gb = vec![0.0; o];
                    for row in g.chunks_exact(o) {
                        for (a, r) in gb.iter_mut().zip(row) {
                            *a += r;
                        }
                    }
                    res.push((b, gb));
                }
            }
            Op::MulBroadcast { image, mask } => {
                let (img, m) = (val(image), val(mask));
                let s = img.shape();
                let hw = s[2] * s[3];
                let per = s[1] * hw;
                if needs(image) {
                    let mut gi = g.to_vec();
                    for (ni, chunk) in gi.chunks_exact_mut(per).enumerate() {
                        let mv = &m.data()[ni * hw..(ni + 1) * hw];
                        for plane in chunk.chunks_exact_mut(hw) {
                            for (a, &b) in plane.iter_mut().zip(mv) {
                                *a *= b;
                            }
                        }
                    }
                    res.push((*image, gi));
                }
                if needs(mask) {
                    let mut gm = vec![0.0; m.numel()];
                    for ni in 0..s[0] {
                        let dst = &mut gm[ni * hw..(ni + 1) * hw];
                        for ci in 0..s[1] {
                            let off = ni * per + ci * hw;
                            let gs = &g[off..off + hw];
                            let xs = &img.data()[off..off + hw];
                            for ((d, &a), &b) in dst.iter_mut().zip(gs).zip(xs) {
                                *d += a * b;
                            }
                        }
                    }
                    res.push((*mask, gm));
                }
            }
            Op::MinMaxNormalize { m, eps, detach } => {
                let mv = val(m);
                let (_, h, w) = planes_of(mv.shape()).expect("validated in forward");
                res.push((*m, kernels::minmax_backward(mv.data(), g, h * w, *eps, *detach)));
            }
            Op::BilinearResize { m, out_h, out_w } => {
                let (planes, h, w) = planes_of(val(m).shape()).expect("validated in forward");
                res.push((*m, kernels::resize_backward(g, planes, h, w, *out_h, *out_w)));
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                let l = val(logits);
                let c = l.shape()[1];
                let scale = g[0] / labels.len() as f64;
                let mut p = kernels::softmax_rows(l.data(), c);
                for (row, &y) in p.chunks_exact_mut(c).zip(labels) {
                    row[y] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                res.push((*logits, p));
            }
            Op::SqL2 { a, b } => {
                let diff: Vec<f64> = val(a)
                    .data()
                    .iter()
                    .zip(val(b).data())
                    .map(|(x, y)| 2.0 * (x - y) * g[0])
                    .collect();
                if needs(b) {
                    res.push((*b, diff.iter().map(|d| -d).collect()));
                }
                if needs(a) {
                    res.push((*a, diff));
                }
            }
            Op::Sum(x) => res.push((*x, vec![g[0]; val(x).numel()])),
            Op::Scale(x, s) => res.push((*x, g.iter().map(|v| v * s).collect())),
            Op::Add(a, b) => {
                if needs(a) {
                    res.push((*a, g.to_vec()));
                }
                if needs(b) {
                    res.push((*b, g.to_vec()));
                }
            }
            Op::SliceOuter { x, start, .. } => {
                let xv = val(x);
                let inner = xv.numel() / xv.shape()[0];
                let mut gx = vec![0.0; xv.numel()];
                gx[start * inner..start * inner + g.len()].copy_from_slice(g);
                res.push((*x, gx));
            }
            Op::CamRaw {
                features,
                weights,
                classes,
            } => {
                let (f, w) = (val(features), val(weights));
                let (_, k, hw) = cam_dims(f.shape(), w.shape(), classes).expect("validated in forward");
                if needs(features) {
                    let mut gf = vec![0.0; f.numel()];
                    for (ni, &c) in classes.iter().enumerate() {
                        let gs = &g[ni * hw..(ni + 1) * hw];
                        for ki in 0..k {
                            let wk = w.data()[c * k + ki];
                            let dst = &mut gf[(ni * k + ki) * hw..(ni * k + ki + 1) * hw];
                            for (d, &gi) in dst.iter_mut().zip(gs) {
                                *d = wk * gi;
                            }
                        }
                    }
                    res.push((*features, gf));
                }
                if needs(weights) {
                    let mut gw = vec![0.0; w.numel()];
                    for (ni, &c) in classes.iter().enumerate() {
                        let gs = &g[ni * hw..(ni + 1) * hw];
                        for ki in 0..k {
                            let src = &f.data()[(ni * k + ki) * hw..(ni * k + ki + 1) * hw];
                            gw[c * k + ki] += src.iter().zip(gs).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                    res.push((*weights, gw));
                }
            }
        }
        debug_assert!(out.numel() == g.len());
        res
    }
}

fn cam_dims(fs: &[usize], ws: &[usize], classes: &[usize]) -> Result<(usize, usize, usize)> {
    if fs.len() != 4 || ws.len() != 2 || fs[1] != ws[1] {
        return Err(shape_err!("features {fs:?} incompatible with head weights {ws:?}"));
    }
    if classes.len() != fs[0] {
        return Err(shape_err!("{} classes given for a batch of {}", classes.len(), fs[0]));
    }
    if let Some(&bad) = classes.iter().find(|&&c| c >= ws[0]) {
        return Err(arg_err!("class {bad} out of range for {} classes", ws[0]));
    }
    Ok((fs[0], fs[1], fs[2] * fs[3]))
}
