use std::cell::{Ref, RefCell};

use super::kernels::{self, ConvGeom};
use super::{Shape, Tensor};
use crate::error::{Error, Result};

/// Index of a node in its [`Graph`]. Inputs always have smaller ids than the
/// nodes that consume them.
pub type NodeId = usize;

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        geom: ConvGeom,
    },
    Sigmoid(NodeId),
    Relu(NodeId),
    Log(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Ratio(NodeId, NodeId),
    Affine { input: NodeId, scale: f64 },
    Clamp { input: NodeId, lo: f64, hi: f64 },
    Concat(Vec<NodeId>),
    Upsample2x(NodeId),
    MaxPool2x2 { input: NodeId, argmax: Vec<u32> },
    Sum(NodeId),
    Mean(NodeId),
    SumPerImage(NodeId),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run differentiation graph.
///
/// Nodes are appended as operations execute, so the node list is always in
/// topological order. A graph lives on one thread; build a fresh one for
/// each forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
}

/// Handle to a node of a [`Graph`]: the value, its gradient slot, and the
/// record of the operation that produced it.
#[derive(Clone, Copy)]
pub struct DiffTensor<'g> {
    graph: &'g Graph,
    id: NodeId,
}

impl std::fmt::Debug for DiffTensor<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DiffTensor")
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

    /// Leaf that receives a gradient.
    pub fn parameter(&self, value: Tensor) -> DiffTensor<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant; gradients are never propagated into it.
    pub fn constant(&self, value: Tensor) -> DiffTensor<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> DiffTensor<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        DiffTensor {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: NodeId) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Clears every accumulated gradient.
    pub fn zero_grad(&self) {
        self.grads.borrow_mut().clear();
    }

    /// Channel-axis concatenation of same-batch, same-size tensors.
    pub fn concat<'g>(&'g self, parts: &[DiffTensor<'g>]) -> Result<DiffTensor<'g>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let s0 = first.shape();
        let mut channels = 0;
        for p in parts {
            let s = p.shape();
            if s.batch() != s0.batch() || s.height() != s0.height() || s.width() != s0.width() {
                return Err(Error::dim(
                    "concat",
                    "batch/height/width",
                    format!("{s} vs {s0}"),
                ));
            }
            channels += s.channels();
        }
        let out_shape = Shape::new(s0.batch(), channels, s0.height(), s0.width());
        let mut data = Vec::with_capacity(out_shape.numel());
        {
            let nodes = self.nodes.borrow();
            for n in 0..s0.batch() {
                for p in parts {
                    let v = &nodes[p.id].value;
                    let len = v.shape().image_len();
                    data.extend_from_slice(&v.data()[n * len..(n + 1) * len]);
                }
            }
        }
        let requires = parts.iter().any(|p| self.requires_grad(p.id));
        let value = Tensor::from_vec(out_shape, data)?;
        Ok(self.push(value, Op::Concat(parts.iter().map(|p| p.id).collect()), requires))
    }

    /// Reverse-mode sweep from a single-element output.
    ///
    /// Gradients accumulate across calls until [`Graph::zero_grad`].
    pub fn backward(&self, output: DiffTensor<'_>) -> Result<()> {
        let nodes = self.nodes.borrow();
        let out = &nodes[output.id];
        if out.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a single-element output, got shape {}",
                out.value.shape()
            )));
        }
        let mut pass: Vec<Option<Vec<f64>>> = vec![None; output.id + 1];
        pass[output.id] = Some(vec![1.0]);
        let mut grads = self.grads.borrow_mut();
        if grads.len() < nodes.len() {
            grads.resize(nodes.len(), None);
        }
        for id in (0..=output.id).rev() {
            let Some(g) = pass[id].take() else { continue };
            let node = &nodes[id];
            if node.requires_grad {
                propagate(&nodes, node, &g, &mut pass);
            }
            match &mut grads[id] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }
}

fn accumulate(nodes: &[Node], pass: &mut [Option<Vec<f64>>], id: NodeId, contribution: Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut pass[id] {
        Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, b)| *a += b),
        slot => *slot = Some(contribution),
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], pass: &mut [Option<Vec<f64>>]) {
    let val = |id: NodeId| nodes[id].value.data();
    let rg = |id: NodeId| nodes[id].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d {
            input,
            weight,
            bias,
            geom,
        } => {
            let mut gi = rg(*input).then(|| vec![0.0; val(*input).len()]);
            let mut gw = rg(*weight).then(|| vec![0.0; val(*weight).len()]);
            let mut gb = rg(*bias).then(|| vec![0.0; val(*bias).len()]);
            kernels::conv2d_backward(
                geom,
                val(*input),
                val(*weight),
                g,
                gi.as_deref_mut(),
                gw.as_deref_mut(),
                gb.as_deref_mut(),
            );
            for (id, buf) in [(*input, gi), (*weight, gw), (*bias, gb)] {
                if let Some(buf) = buf {
                    accumulate(nodes, pass, id, buf);
                }
            }
        }
        Op::Sigmoid(x) => {
            let d = zip_map(g, node.value.data(), |g, s| g * s * (1.0 - s));
            accumulate(nodes, pass, *x, d);
        }
        Op::Relu(x) => {
            let d = zip_map(g, val(*x), |g, v| if v > 0.0 { g } else { 0.0 });
            accumulate(nodes, pass, *x, d);
        }
        Op::Log(x) => {
            let d = zip_map(g, val(*x), |g, v| g / v);
            accumulate(nodes, pass, *x, d);
        }
        Op::Add(a, b) => {
            accumulate(nodes, pass, *a, g.to_vec());
            accumulate(nodes, pass, *b, g.to_vec());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, pass, *a, g.to_vec());
            accumulate(nodes, pass, *b, g.iter().map(|v| -v).collect());
        }
        Op::Mul(a, b) => {
            let da = zip_map(g, val(*b), |g, y| g * y);
            let db = zip_map(g, val(*a), |g, x| g * x);
            accumulate(nodes, pass, *a, da);
            accumulate(nodes, pass, *b, db);
        }
        Op::Ratio(a, b) => {
            let (num, den) = (val(*a), val(*b));
            let mut da = vec![0.0; g.len()];
            let mut db = vec![0.0; g.len()];
            for i in 0..g.len() {
                if den[i] != 0.0 {
                    da[i] = g[i] / den[i];
                    db[i] = -g[i] * num[i] / (den[i] * den[i]);
                }
            }
            accumulate(nodes, pass, *a, da);
            accumulate(nodes, pass, *b, db);
        }
        Op::Affine { input, scale } => {
            accumulate(nodes, pass, *input, g.iter().map(|v| v * scale).collect());
        }
        Op::Clamp { input, lo, hi } => {
            let d = zip_map(g, val(*input), |g, v| if v >= *lo && v <= *hi { g } else { 0.0 });
            accumulate(nodes, pass, *input, d);
        }
        Op::Concat(parts) => {
            let batch = node.value.shape().batch();
            let out_len = node.value.shape().image_len();
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].value.shape().image_len();
                if rg(p) {
                    let mut d = Vec::with_capacity(batch * len);
                    for n in 0..batch {
                        let start = n * out_len + offset;
                        d.extend_from_slice(&g[start..start + len]);
                    }
                    accumulate(nodes, pass, p, d);
                }
                offset += len;
            }
        }
        Op::Upsample2x(x) => {
            let s = nodes[*x].value.shape();
            let (h, w) = (s.height(), s.width());
            let mut d = vec![0.0; s.numel()];
            for (dst, src) in d.chunks_mut(h * w).zip(g.chunks(4 * h * w)) {
                for i in 0..h {
                    for j in 0..w {
                        let r0 = 2 * i * 2 * w;
                        let r1 = (2 * i + 1) * 2 * w;
                        dst[i * w + j] =
                            src[r0 + 2 * j] + src[r0 + 2 * j + 1] + src[r1 + 2 * j] + src[r1 + 2 * j + 1];
                    }
                }
            }
            accumulate(nodes, pass, *x, d);
        }
        Op::MaxPool2x2 { input, argmax } => {
            let mut d = vec![0.0; val(*input).len()];
            for (gv, &src) in g.iter().zip(argmax) {
                d[src as usize] += gv;
            }
            accumulate(nodes, pass, *input, d);
        }
        Op::Sum(x) => {
            accumulate(nodes, pass, *x, vec![g[0]; val(*x).len()]);
        }
        Op::Mean(x) => {
            let n = val(*x).len();
            accumulate(nodes, pass, *x, vec![g[0] / n as f64; n]);
        }
        Op::SumPerImage(x) => {
            let len = nodes[*x].value.shape().image_len();
            let d = g.iter().flat_map(|&gv| std::iter::repeat_n(gv, len)).collect();
            accumulate(nodes, pass, *x, d);
        }
    }
}

/// Largest double below 1; keeps the sigmoid inside the open unit interval.
const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        (1.0 / (1.0 + (-x).exp())).min(BELOW_ONE)
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'g> DiffTensor<'g> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn shape(&self) -> Shape {
        self.graph.value(self.id).shape()
    }

    /// Copy of the forward value.
    pub fn value(&self) -> Tensor {
        self.graph.value(self.id).clone()
    }

    pub fn with_value<T>(&self, f: impl FnOnce(&Tensor) -> T) -> T {
        f(&self.graph.value(self.id))
    }

    pub fn item(&self) -> Result<f64> {
        self.graph.value(self.id).item()
    }

    /// Accumulated gradient; all zeros if no backward pass reached this node.
    pub fn grad(&self) -> Tensor {
        let shape = self.shape();
        match self.graph.grads.borrow().get(self.id) {
            Some(Some(g)) => Tensor::from_vec(shape, g.clone()).expect("gradient shape"),
            _ => Tensor::zeros(shape),
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad(self.id)
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> DiffTensor<'g> {
        let value = {
            let v = self.graph.value(self.id);
            let data = v.data().iter().map(|&x| f(x)).collect();
            Tensor::from_vec(v.shape(), data).expect("same shape")
        };
        self.graph.push(value, op, self.requires_grad())
    }

    fn binary(
        &self,
        other: &DiffTensor<'g>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<DiffTensor<'g>> {
        let value = {
            let a = self.graph.value(self.id);
            let b = self.graph.value(other.id);
            if a.shape() != b.shape() {
                return Err(Error::dim(
                    name,
                    "all axes",
                    format!("{} vs {}", a.shape(), b.shape()),
                ));
            }
            Tensor::from_vec(a.shape(), zip_map(a.data(), b.data(), f))?
        };
        let requires = self.requires_grad() || other.requires_grad();
        Ok(self.graph.push(value, op, requires))
    }

    /// 2-D cross-correlation with square kernels.
    ///
    /// `weight` is `out×in×k×k` and `bias` is `1×out×1×1`.
    pub fn conv2d(
        &self,
        weight: &DiffTensor<'g>,
        bias: &DiffTensor<'g>,
        stride: usize,
        padding: usize,
    ) -> Result<DiffTensor<'g>> {
        let (xs, ws, bs) = (self.shape(), weight.shape(), bias.shape());
        let [n, c, h, w] = xs.0;
        let [o, wc, kh, kw] = ws.0;
        if stride == 0 {
            return Err(Error::Contract("conv2d stride must be positive".into()));
        }
        if wc != c {
            return Err(Error::dim(
                "conv2d",
                "input channels (axis 1)",
                format!("input {xs} has {c} channels, weight {ws} expects {wc}"),
            ));
        }
        if kh != kw {
            return Err(Error::dim(
                "conv2d",
                "kernel height/width (axes 2,3)",
                format!("kernel must be square, got {ws}"),
            ));
        }
        if bs != Shape::new(1, o, 1, 1) {
            return Err(Error::dim(
                "conv2d",
                "bias channels (axis 1)",
                format!("bias {bs} must be 1×{o}×1×1"),
            ));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::dim(
                "conv2d",
                "height/width (axes 2,3)",
                format!("padded input {xs} (padding {padding}) smaller than kernel {kh}×{kw}"),
            ));
        }
        let geom = ConvGeom {
            batch: n,
            in_ch: c,
            out_ch: o,
            height: h,
            width: w,
            kernel: kh,
            stride,
            padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
        };
        let data = {
            let nodes = self.graph.nodes.borrow();
            kernels::conv2d_forward(
                &geom,
                nodes[self.id].value.data(),
                nodes[weight.id].value.data(),
                nodes[bias.id].value.data(),
            )
        };
        let value = Tensor::from_vec(Shape::new(n, o, geom.out_h, geom.out_w), data)?;
        let requires = self.requires_grad() || weight.requires_grad() || bias.requires_grad();
        Ok(self.graph.push(
            value,
            Op::Conv2d {
                input: self.id,
                weight: weight.id,
                bias: bias.id,
                geom,
            },
            requires,
        ))
    }

    pub fn sigmoid(&self) -> DiffTensor<'g> {
        self.unary(Op::Sigmoid(self.id), stable_sigmoid)
    }

    pub fn relu(&self) -> DiffTensor<'g> {
        self.unary(Op::Relu(self.id), |x| x.max(0.0))
    }

    /// Natural logarithm; every input must be strictly positive.
    pub fn log(&self) -> Result<DiffTensor<'g>> {
        if let Some(bad) = self.with_value(|v| v.data().iter().copied().find(|&x| x.is_nan() || x <= 0.0)) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("nonpositive input {bad}"),
            });
        }
        Ok(self.unary(Op::Log(self.id), f64::ln))
    }

    pub fn add(&self, other: &DiffTensor<'g>) -> Result<DiffTensor<'g>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: &DiffTensor<'g>) -> Result<DiffTensor<'g>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(&self, other: &DiffTensor<'g>) -> Result<DiffTensor<'g>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    /// Elementwise `self / other` with `0/0 := 1` (and zero gradient there).
    /// A nonzero numerator over a zero denominator is a domain error.
    pub fn ratio(&self, other: &DiffTensor<'g>) -> Result<DiffTensor<'g>> {
        let bad = {
            let (a, b) = (self.graph.value(self.id), self.graph.value(other.id));
            a.data()
                .iter()
                .zip(b.data())
                .find(|(&x, &y)| y == 0.0 && x != 0.0)
                .map(|(&x, _)| x)
        };
        if let Some(x) = bad {
            return Err(Error::Domain {
                op: "ratio",
                detail: format!("{x} / 0"),
            });
        }
        self.binary(other, "ratio", Op::Ratio(self.id, other.id), |a, b| {
            if b == 0.0 {
                1.0
            } else {
                a / b
            }
        })
    }

    /// `scale·x + shift`.
    pub fn affine(&self, scale: f64, shift: f64) -> DiffTensor<'g> {
        self.unary(Op::Affine { input: self.id, scale }, |x| scale * x + shift)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&self, lo: f64, hi: f64) -> DiffTensor<'g> {
        self.unary(Op::Clamp { input: self.id, lo, hi }, |x| x.clamp(lo, hi))
    }

    pub fn concat(&self, other: &DiffTensor<'g>) -> Result<DiffTensor<'g>> {
        self.graph.concat(&[*self, *other])
    }

    /// Nearest-neighbour 2× upsampling of height and width.
    pub fn upsample_nearest_x2(&self) -> DiffTensor<'g> {
        let value = {
            let v = self.graph.value(self.id);
            let [n, c, h, w] = v.shape().0;
            let mut data = Vec::with_capacity(v.numel() * 4);
            for plane in v.data().chunks(h * w) {
                for row in plane.chunks(w) {
                    for _ in 0..2 {
                        for &x in row {
                            data.push(x);
                            data.push(x);
                        }
                    }
                }
            }
            Tensor::from_vec(Shape::new(n, c, 2 * h, 2 * w), data).expect("upsample shape")
        };
        self.graph
            .push(value, Op::Upsample2x(self.id), self.requires_grad())
    }

    /// 2×2 max pooling with stride 2; height and width must be even.
    pub fn maxpool2x2(&self) -> Result<DiffTensor<'g>> {
        let (value, argmax) = {
            let v = self.graph.value(self.id);
            let [n, c, h, w] = v.shape().0;
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::dim(
                    "maxpool2x2",
                    "height/width (axes 2,3)",
                    format!("{} has odd spatial size", v.shape()),
                ));
            }
            let (oh, ow) = (h / 2, w / 2);
            let mut data = Vec::with_capacity(n * c * oh * ow);
            let mut argmax = Vec::with_capacity(n * c * oh * ow);
            let src = v.data();
            for p in 0..n * c {
                let base = p * h * w;
                for i in 0..oh {
                    for j in 0..ow {
                        let cands = [
                            base + 2 * i * w + 2 * j,
                            base + 2 * i * w + 2 * j + 1,
                            base + (2 * i + 1) * w + 2 * j,
                            base + (2 * i + 1) * w + 2 * j + 1,
                        ];
                        let mut best = cands[0];
                        for &k in &cands[1..] {
                            if src[k] > src[best] {
                                best = k;
                            }
                        }
                        data.push(src[best]);
                        argmax.push(best as u32);
                    }
                }
            }
            (Tensor::from_vec(Shape::new(n, c, oh, ow), data)?, argmax)
        };
        Ok(self.graph.push(
            value,
            Op::MaxPool2x2 {
                input: self.id,
                argmax,
            },
            self.requires_grad(),
        ))
    }

    pub fn sum(&self) -> DiffTensor<'g> {
        let total = self.with_value(|v| v.data().iter().sum::<f64>());
        self.graph
            .push(Tensor::scalar(total), Op::Sum(self.id), self.requires_grad())
    }

    pub fn mean(&self) -> DiffTensor<'g> {
        let mean = self.with_value(|v| v.data().iter().sum::<f64>() / v.numel() as f64);
        self.graph
            .push(Tensor::scalar(mean), Op::Mean(self.id), self.requires_grad())
    }

    /// Sums each image of the batch over channels and pixels, giving `N×1×1×1`.
    pub fn sum_per_image(&self) -> DiffTensor<'g> {
        let value = self.with_value(|v| {
            let sums = v
                .data()
                .chunks(v.shape().image_len())
                .map(|c| c.iter().sum::<f64>())
                .collect();
            Tensor::from_vec(Shape::new(v.shape().batch(), 1, 1, 1), sums).expect("per-image shape")
        });
        self.graph
            .push(value, Op::SumPerImage(self.id), self.requires_grad())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: [usize; 4], data: &[f64]) -> Tensor {
        Tensor::from_vec(Shape(shape), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_of_ones_is_nine() {
        let g = Graph::new();
        let x = g.parameter(Tensor::full(Shape::new(1, 1, 3, 3), 1.0));
        let w = g.parameter(Tensor::full(Shape::new(1, 1, 3, 3), 1.0));
        let b = g.parameter(Tensor::zeros(Shape::new(1, 1, 1, 1)));
        let y = x.conv2d(&w, &b, 1, 0).unwrap();
        assert_eq!(y.shape(), Shape::SCALAR);
        assert_eq!(y.item().unwrap(), 9.0);
    }

    #[test]
    fn unit_kernel_is_identity() {
        let g = Graph::new();
        let data: Vec<f64> = (0..12).map(|i| i as f64 * 0.25 - 1.0).collect();
        let x = g.constant(t([1, 1, 3, 4], &data));
        let w = g.parameter(Tensor::full(Shape::new(1, 1, 1, 1), 1.0));
        let b = g.parameter(Tensor::zeros(Shape::new(1, 1, 1, 1)));
        let y = x.conv2d(&w, &b, 1, 0).unwrap();
        assert_eq!(y.value().data(), &data[..]);
    }

    #[test]
    fn conv_output_size_and_errors() {
        let g = Graph::new();
        let x = g.constant(Tensor::zeros(Shape::new(2, 3, 7, 9)));
        let w = g.parameter(Tensor::zeros(Shape::new(4, 3, 3, 3)));
        let b = g.parameter(Tensor::zeros(Shape::new(1, 4, 1, 1)));
        let y = x.conv2d(&w, &b, 2, 1).unwrap();
        assert_eq!(y.shape(), Shape::new(2, 4, 4, 5));

        let w_bad = g.parameter(Tensor::zeros(Shape::new(4, 2, 3, 3)));
        let err = x.conv2d(&w_bad, &b, 1, 1).unwrap_err();
        assert!(err.to_string().contains("input channels"), "{err}");
        let b_bad = g.parameter(Tensor::zeros(Shape::new(1, 5, 1, 1)));
        let err = x.conv2d(&w, &b_bad, 1, 1).unwrap_err();
        assert!(err.to_string().contains("bias channels"), "{err}");
    }

    #[test]
    fn sigmoid_values() {
        let g = Graph::new();
        let x = g.parameter(t([1, 1, 1, 3], &[0.0, -50.0, 50.0]));
        let y = x.sigmoid();
        let v = y.value();
        assert_eq!(v.data()[0], 0.5);
        assert!(v.data()[1] > 0.0 && v.data()[1] < 1e-20);
        assert!(v.data()[2] < 1.0);
        g.backward(y.sum()).unwrap();
        let gr = x.grad();
        assert_eq!(gr.data()[0], 0.25);
        assert!(gr.data()[1].is_finite() && gr.data()[1] > 0.0);
    }

    #[test]
    fn relu_and_upsample() {
        let g = Graph::new();
        let x = g.constant(t([1, 1, 1, 2], &[-1.0, 2.0]));
        assert_eq!(x.relu().value().data(), &[0.0, 2.0]);
        let s = g.constant(Tensor::scalar(3.0));
        let u = s.upsample_nearest_x2();
        assert_eq!(u.shape(), Shape::new(1, 1, 2, 2));
        assert_eq!(u.value().data(), &[3.0; 4]);
    }

    #[test]
    fn log_rejects_nonpositive() {
        let g = Graph::new();
        let x = g.parameter(t([1, 1, 1, 2], &[1.0, 0.0]));
        assert!(matches!(x.log(), Err(Error::Domain { op: "log", .. })));
    }

    #[test]
    fn ratio_zero_over_zero_is_one_with_zero_gradient() {
        let g = Graph::new();
        let a = g.parameter(t([1, 1, 1, 2], &[0.0, 1.0]));
        let b = g.parameter(t([1, 1, 1, 2], &[0.0, 2.0]));
        let r = a.ratio(&b).unwrap();
        assert_eq!(r.value().data(), &[1.0, 0.5]);
        g.backward(r.sum()).unwrap();
        assert_eq!(a.grad().data(), &[0.0, 0.5]);
        assert_eq!(b.grad().data(), &[0.0, -0.25]);
        let c = g.parameter(t([1, 1, 1, 2], &[1.0, 1.0]));
        assert!(c.ratio(&b).is_err());
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let g = Graph::new();
        let x = g.parameter(t([1, 2, 2, 2], &[1.0, -2.0, 3.0, 0.5, 0.0, 7.0, -1.0, 2.0]));
        g.backward(x.sum()).unwrap();
        assert_eq!(x.grad().data(), &[1.0; 8]);
    }

    #[test]
    fn backward_of_square_is_twice_input() {
        let g = Graph::new();
        let data = [1.0, -2.0, 3.0, 0.5];
        let x = g.parameter(t([1, 1, 2, 2], &data));
        let f = x.mul(&x).unwrap().sum();
        g.backward(f).unwrap();
        let expect: Vec<f64> = data.iter().map(|v| 2.0 * v).collect();
        assert_eq!(x.grad().data(), &expect[..]);
    }

    #[test]
    fn backward_accumulates_until_reset() {
        let g = Graph::new();
        let x = g.parameter(t([1, 1, 1, 2], &[1.0, 2.0]));
        let f = x.affine(3.0, 1.0).sum();
        g.backward(f).unwrap();
        g.backward(f).unwrap();
        assert_eq!(x.grad().data(), &[6.0, 6.0]);
        g.zero_grad();
        assert_eq!(x.grad().data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let g = Graph::new();
        let x = g.parameter(Tensor::zeros(Shape::new(1, 1, 2, 2)));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn unreachable_tensor_has_zero_grad() {
        let g = Graph::new();
        let x = g.parameter(Tensor::full(Shape::new(1, 1, 2, 2), 1.0));
        let y = g.parameter(Tensor::full(Shape::new(1, 1, 2, 2), 1.0));
        g.backward(x.sum()).unwrap();
        assert_eq!(y.grad(), Tensor::zeros(Shape::new(1, 1, 2, 2)));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let g = Graph::new();
        let x = g.parameter(Tensor::full(Shape::new(1, 1, 1, 2), 2.0));
        let c = g.constant(Tensor::full(Shape::new(1, 1, 1, 2), 5.0));
        g.backward(x.mul(&c).unwrap().sum()).unwrap();
        assert_eq!(x.grad().data(), &[5.0, 5.0]);
        assert_eq!(c.grad().data(), &[0.0, 0.0]);
    }

    #[test]
    fn maxpool_routes_to_argmax() {
        let g = Graph::new();
        let x = g.parameter(t([1, 1, 2, 4], &[1.0, 5.0, 0.0, 0.0, 2.0, 3.0, 9.0, -1.0]));
        let p = x.maxpool2x2().unwrap();
        assert_eq!(p.value().data(), &[5.0, 9.0]);
        g.backward(p.sum()).unwrap();
        assert_eq!(x.grad().data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let odd = g.parameter(Tensor::zeros(Shape::new(1, 1, 3, 4)));
        assert!(odd.maxpool2x2().is_err());
    }

    #[test]
    fn concat_stacks_channels_per_image() {
        let g = Graph::new();
        let a = g.parameter(t([2, 1, 1, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.parameter(t([2, 1, 1, 2], &[5.0, 6.0, 7.0, 8.0]));
        let c = a.concat(&b).unwrap();
        assert_eq!(c.shape(), Shape::new(2, 2, 1, 2));
        assert_eq!(c.value().data(), &[1.0, 2.0, 5.0, 6.0, 3.0, 4.0, 7.0, 8.0]);
        let bad = g.parameter(Tensor::zeros(Shape::new(1, 1, 1, 2)));
        assert!(a.concat(&bad).is_err());
    }

    #[test]
    fn sum_per_image_reduces_all_but_batch() {
        let g = Graph::new();
        let a = g.parameter(t([2, 2, 1, 1], &[1.0, 2.0, 3.0, 4.0]));
        let s = a.sum_per_image();
        assert_eq!(s.value().data(), &[3.0, 7.0]);
    }

    #[test]
    fn replay_is_bit_identical() {
        let run = || {
            let g = Graph::new();
            let data: Vec<f64> = (0..16).map(|i| (i as f64).sin()).collect();
            let x = g.constant(t([1, 1, 4, 4], &data));
            let w = g.parameter(t([2, 1, 3, 3], &(0..18).map(|i| (i as f64).cos()).collect::<Vec<_>>()));
            let b = g.parameter(t([1, 2, 1, 1], &[0.1, -0.2]));
            let y = x.conv2d(&w, &b, 1, 1).unwrap().relu().sigmoid().mean();
            g.backward(y).unwrap();
            (y.value(), w.grad())
        };
        assert_eq!(run(), run());
    }
}
