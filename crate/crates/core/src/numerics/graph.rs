//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every operation appends a node holding its output; `backward` walks the
//! node list in reverse. Graphs are built fresh for each forward pass.

use std::collections::HashMap;

use super::tensor::{axis_split, Tensor};
use super::{Gradients, ParamId, ParamStore};
use crate::error::{Error, Result};

/// Variance floor added under the square root in layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Probability clamp applied before the logarithms of the masked BCE.
pub const PROB_CLAMP: f64 = 1e-12;

const GELU_COEF: f64 = 0.044_715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// Operation kinds reachable through [`Graph::apply`].
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    MatMul,
    Add,
    Mul,
    Scale(f64),
    Relu,
    Gelu,
    Tanh,
    Sigmoid,
    Softmax { axis: usize },
    /// Inputs: x, gamma, beta.
    LayerNorm { axis: usize },
    /// Inputs: x `[N, in]`, weight `[out, in]`, optional bias `[out]`.
    Linear,
    Mean { axis: usize },
    Concat { axis: usize },
    Transpose,
    Reshape(Vec<usize>),
}

#[derive(Debug)]
enum Op {
    Input,
    Param,
    MatMul,
    Add,
    Mul,
    Scale(f64),
    Relu,
    Gelu,
    Tanh,
    Sigmoid,
    Softmax { axis: usize },
    LayerNorm { axis: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Linear,
    Mean { axis: usize },
    Sum,
    Concat { axis: usize },
    Transpose,
    Reshape,
    Narrow { axis: usize, start: usize },
    Conv2d,
    MaxPool2d { argmax: Vec<usize> },
    GlobalAvgPool,
    MaskedBce { target: Vec<f64>, mask: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param => "param",
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Relu => "relu",
            Op::Gelu => "gelu",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Linear => "linear",
            Op::Mean { .. } => "mean",
            Op::Sum => "sum",
            Op::Concat { .. } => "concat",
            Op::Transpose => "transpose",
            Op::Reshape => "reshape",
            Op::Narrow { .. } => "narrow",
            Op::Conv2d => "conv2d",
            Op::MaxPool2d { .. } => "max_pool2d",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::MaskedBce { .. } => "masked_bce",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    inputs: Vec<NodeId>,
    needs_grad: bool,
}

/// Recorded computation. Nodes are stored in creation order, which is a
/// valid topological order since inputs must exist before their consumers.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, NodeId>,
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn dims(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.dims()
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::Numeric { op: op.name() });
        }
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            inputs,
            needs_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Constant leaf; receives no gradient.
    pub fn input(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(Op::Input, Vec::new(), value)
    }

    /// Trainable leaf. Repeated calls with the same id return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<NodeId> {
        if let Some(&node) = self.params.get(&id) {
            return Ok(node);
        }
        let value = store.get(id).clone();
        if !value.is_finite() {
            return Err(Error::Numeric { op: "param" });
        }
        self.nodes.push(Node {
            value,
            op: Op::Param,
            inputs: Vec::new(),
            needs_grad: true,
        });
        let node = NodeId(self.nodes.len() - 1);
        self.params.insert(id, node);
        Ok(node)
    }

    /// Generic entry point dispatching on [`OpKind`].
    pub fn apply(&mut self, kind: OpKind, inputs: &[NodeId]) -> Result<NodeId> {
        let label = format!("{kind:?}");
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(Error::contract(format!("{label} takes {n} inputs, got {}", inputs.len())))
            }
        };
        match kind {
            OpKind::MatMul => arity(2).and_then(|_| self.matmul(inputs[0], inputs[1])),
            OpKind::Add => arity(2).and_then(|_| self.add(inputs[0], inputs[1])),
            OpKind::Mul => arity(2).and_then(|_| self.mul(inputs[0], inputs[1])),
            OpKind::Scale(s) => arity(1).and_then(|_| self.scale(inputs[0], s)),
            OpKind::Relu => arity(1).and_then(|_| self.relu(inputs[0])),
            OpKind::Gelu => arity(1).and_then(|_| self.gelu(inputs[0])),
            OpKind::Tanh => arity(1).and_then(|_| self.tanh(inputs[0])),
            OpKind::Sigmoid => arity(1).and_then(|_| self.sigmoid(inputs[0])),
            OpKind::Softmax { axis } => arity(1).and_then(|_| self.softmax(inputs[0], axis)),
            OpKind::LayerNorm { axis } => {
                arity(3).and_then(|_| self.layer_norm(inputs[0], inputs[1], inputs[2], axis))
            }
            OpKind::Linear => match inputs.len() {
                2 => self.linear(inputs[0], inputs[1], None),
                3 => self.linear(inputs[0], inputs[1], Some(inputs[2])),
                n => Err(Error::contract(format!("Linear takes 2 or 3 inputs, got {n}"))),
            },
            OpKind::Mean { axis } => arity(1).and_then(|_| self.mean(inputs[0], axis)),
            OpKind::Concat { axis } => self.concat(inputs, axis),
            OpKind::Transpose => arity(1).and_then(|_| self.transpose(inputs[0])),
            OpKind::Reshape(dims) => arity(1).and_then(|_| self.reshape(inputs[0], &dims)),
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ad, bd) = (self.dims(a), self.dims(b));
        if ad.len() != 2 || bd.len() != 2 || ad[1] != bd[0] {
            return Err(Error::shape("matmul", format!("{ad:?} x {bd:?}")));
        }
        let (m, k, n) = (ad[0], ad[1], bd[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Op::MatMul, vec![a, b], Tensor::from_parts(vec![m, n], out))
    }

    fn same_dims(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.dims(a), self.dims(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_dims("add", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push(Op::Add, vec![a, b], out)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_dims("mul", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push(Op::Mul, vec![a, b], out)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let out = map(self.value(a), |x| x * factor);
        self.push(Op::Scale(factor), vec![a], out)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let out = map(self.value(a), |x| if x > 0.0 { x } else { 0.0 });
        self.push(Op::Relu, vec![a], out)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let out = map(self.value(a), |x| {
            0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x)).tanh())
        });
        self.push(Op::Gelu, vec![a], out)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let out = map(self.value(a), f64::tanh);
        self.push(Op::Tanh, vec![a], out)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let out = map(self.value(a), sigmoid);
        self.push(Op::Sigmoid, vec![a], out)
    }

    fn check_axis(&self, op: &'static str, a: NodeId, axis: usize) -> Result<()> {
        if axis >= self.dims(a).len() {
            return Err(Error::shape(op, format!("axis {axis} out of range for {:?}", self.dims(a))));
        }
        Ok(())
    }

    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.check_axis("softmax", a, axis)?;
        let x = self.value(a);
        let (outer, n, inner) = axis_split(x.dims(), axis);
        let src = x.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| src[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..n {
                    let e = (src[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out[idx(j)] /= total;
                }
            }
        }
        let dims = x.dims().to_vec();
        self.push(Op::Softmax { axis }, vec![a], Tensor::from_parts(dims, out))
    }

    /// Normalizes along `axis`, then applies per-position `gamma`/`beta`
    /// whose length equals the extent of that axis.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, axis: usize) -> Result<NodeId> {
        self.check_axis("layer_norm", x, axis)?;
        let xv = self.value(x);
        let (outer, n, inner) = axis_split(xv.dims(), axis);
        for (what, id) in [("gamma", gamma), ("beta", beta)] {
            if self.value(id).len() != n {
                return Err(Error::shape(
                    "layer_norm",
                    format!("{what} has {} values, axis extent is {n}", self.value(id).len()),
                ));
            }
        }
        let (g, b, src) = (self.value(gamma).data(), self.value(beta).data(), xv.data());
        let mut xhat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        let mut inv_std = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let mean = (0..n).map(|j| src[idx(j)]).sum::<f64>() / n as f64;
                let var = (0..n).map(|j| (src[idx(j)] - mean).powi(2)).sum::<f64>() / n as f64;
                let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                inv_std.push(is);
                for j in 0..n {
                    let h = (src[idx(j)] - mean) * is;
                    xhat[idx(j)] = h;
                    out[idx(j)] = h * g[j] + b[j];
                }
            }
        }
        let dims = xv.dims().to_vec();
        self.push(
            Op::LayerNorm { axis, xhat, inv_std },
            vec![x, gamma, beta],
            Tensor::from_parts(dims, out),
        )
    }

    /// `x · weightᵀ + bias` with x `[N, in]`, weight `[out, in]`, bias `[out]`.
    pub fn linear(&mut self, x: NodeId, weight: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let (xd, wd) = (self.dims(x), self.dims(weight));
        if xd.len() != 2 || wd.len() != 2 || xd[1] != wd[1] {
            return Err(Error::shape("linear", format!("x {xd:?}, weight {wd:?}")));
        }
        let (rows, fan_in, fan_out) = (xd[0], xd[1], wd[0]);
        if let Some(b) = bias {
            if self.value(b).len() != fan_out {
                return Err(Error::shape(
                    "linear",
                    format!("bias has {} values, weight has {fan_out} rows", self.value(b).len()),
                ));
            }
        }
        let (xs, ws) = (self.value(x).data(), self.value(weight).data());
        let mut out = vec![0.0; rows * fan_out];
        for r in 0..rows {
            let xr = &xs[r * fan_in..(r + 1) * fan_in];
            for o in 0..fan_out {
                out[r * fan_out + o] = dot(xr, &ws[o * fan_in..(o + 1) * fan_in]);
            }
        }
        if let Some(b) = bias {
            let bs = self.value(b).data();
            for row in out.chunks_mut(fan_out) {
                row.iter_mut().zip(bs).for_each(|(v, b)| *v += b);
            }
        }
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        self.push(Op::Linear, inputs, Tensor::from_parts(vec![rows, fan_out], out))
    }

    /// Mean along `axis`, keeping that axis with extent 1.
    pub fn mean(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.check_axis("mean", a, axis)?;
        let x = self.value(a);
        let (outer, n, inner) = axis_split(x.dims(), axis);
        let src = x.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let row = &src[(o * n + j) * inner..(o * n + j + 1) * inner];
                out[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(row)
                    .for_each(|(acc, v)| *acc += v);
            }
        }
        out.iter_mut().for_each(|v| *v /= n as f64);
        let mut dims = x.dims().to_vec();
        dims[axis] = 1;
        self.push(Op::Mean { axis }, vec![a], Tensor::from_parts(dims, out))
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let total = self.value(a).data().iter().sum();
        self.push(Op::Sum, vec![a], Tensor::scalar(total))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        self.check_axis("concat", first, axis)?;
        let base = self.dims(first).to_vec();
        let mut extent = 0;
        for &p in parts {
            let d = self.dims(p);
            let compatible = d.len() == base.len()
                && d.iter().zip(&base).enumerate().all(|(k, (x, y))| k == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", format!("{base:?} vs {d:?} on axis {axis}")));
            }
            extent += d[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * extent * inner);
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let chunk = v.dims()[axis] * inner;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut dims = base;
        dims[axis] = extent;
        self.push(Op::Concat { axis }, parts.to_vec(), Tensor::from_parts(dims, out))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let d = self.dims(a);
        if d.len() != 2 {
            return Err(Error::shape("transpose", format!("needs rank 2, got {d:?}")));
        }
        let (r, c) = (d[0], d[1]);
        let out = transpose_raw(self.value(a).data(), r, c);
        self.push(Op::Transpose, vec![a], Tensor::from_parts(vec![c, r], out))
    }

    pub fn reshape(&mut self, a: NodeId, dims: &[usize]) -> Result<NodeId> {
        let len = self.value(a).len();
        if dims.is_empty() || dims.contains(&0) || dims.iter().product::<usize>() != len {
            return Err(Error::shape(
                "reshape",
                format!("{:?} into {dims:?}", self.dims(a)),
            ));
        }
        let out = self.value(a).clone().reshaped(dims.to_vec());
        self.push(Op::Reshape, vec![a], out)
    }

    /// Contiguous sub-range `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        self.check_axis("narrow", a, axis)?;
        let x = self.value(a);
        let (outer, n, inner) = axis_split(x.dims(), axis);
        if len == 0 || start + len > n {
            return Err(Error::shape("narrow", format!("[{start}, {}) of extent {n}", start + len)));
        }
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut dims = x.dims().to_vec();
        dims[axis] = len;
        self.push(Op::Narrow { axis, start }, vec![a], Tensor::from_parts(dims, out))
    }

    /// Stride-1 convolution with zero padding `k / 2` ("same" output size).
    /// x `[N, Cin, H, W]`, kernel `[Cout, Cin, k, k]` (k odd), bias `[Cout]`.
    pub fn conv2d(&mut self, x: NodeId, kernel: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xd, kd) = (self.dims(x), self.dims(kernel));
        if xd.len() != 4 || kd.len() != 4 || kd[1] != xd[1] || kd[2] != kd[3] || kd[2] % 2 == 0 {
            return Err(Error::shape("conv2d", format!("input {xd:?}, kernel {kd:?}")));
        }
        if self.value(bias).len() != kd[0] {
            return Err(Error::shape("conv2d", format!("bias length {} for {} filters", self.value(bias).len(), kd[0])));
        }
        let geom = ConvGeom::new(xd, kd);
        let out = conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
        );
        let dims = vec![geom.n, geom.cout, geom.h, geom.w];
        self.push(Op::Conv2d, vec![x, kernel, bias], Tensor::from_parts(dims, out))
    }

    /// 2×2 max pooling with stride 2 over the last two axes of a rank-4
    /// tensor; odd trailing rows/columns are dropped.
    pub fn max_pool2d(&mut self, x: NodeId) -> Result<NodeId> {
        let d = self.dims(x).to_vec();
        if d.len() != 4 || d[2] < 2 || d[3] < 2 {
            return Err(Error::shape("max_pool2d", format!("needs [N, C, H>=2, W>=2], got {d:?}")));
        }
        let (planes, h, w) = (d[0] * d[1], d[2], d[3]);
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * h * w;
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = base + 2 * y * w + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * y + dy) * w + 2 * xx + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let dims = vec![d[0], d[1], oh, ow];
        self.push(Op::MaxPool2d { argmax }, vec![x], Tensor::from_parts(dims, out))
    }

    /// Mean over the spatial axes: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let d = self.dims(x).to_vec();
        if d.len() != 4 {
            return Err(Error::shape("global_avg_pool", format!("needs rank 4, got {d:?}")));
        }
        let area = d[2] * d[3];
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(area)
            .map(|plane| plane.iter().sum::<f64>() / area as f64)
            .collect();
        self.push(Op::GlobalAvgPool, vec![x], Tensor::from_parts(vec![d[0], d[1]], out))
    }

    /// Masked binary cross-entropy of probabilities `p` against a binary
    /// `target`, averaged over positions where `mask` is 1.
    pub fn masked_bce(&mut self, p: NodeId, target: &[f64], mask: &[f64]) -> Result<NodeId> {
        let pv = self.value(p).data();
        if target.len() != pv.len() || mask.len() != pv.len() {
            return Err(Error::shape(
                "masked_bce",
                format!("p has {}, target {}, mask {}", pv.len(), target.len(), mask.len()),
            ));
        }
        let loss = crate::risk::masked_bce_value(pv, target, mask)?;
        self.push(
            Op::MaskedBce {
                target: target.to_vec(),
                mask: mask.to_vec(),
            },
            vec![p],
            Tensor::scalar(loss),
        )
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Backward> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got dims {:?}",
                self.dims(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.dims(loss), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || node.inputs.is_empty() {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let input_grads = self.local_backward(node, &upstream);
            grads[idx] = Some(upstream);
            for (input, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Backward { grads })
    }

    /// Backward pass collected into per-parameter gradients; parameters
    /// absent from the graph or off the loss path get exact zeros.
    pub fn gradients(&self, loss: NodeId, store: &ParamStore) -> Result<Gradients> {
        Ok(self.backward(loss)?.param_grads(self, store))
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn local_backward(&self, node: &Node, gy: &Tensor) -> Vec<Option<Tensor>> {
        let ins = &node.inputs;
        let y = &node.value;
        let val = |i: usize| self.value(ins[i]);
        match &node.op {
            Op::Input | Op::Param => Vec::new(),
            Op::MatMul => {
                let (a, b) = (val(0), val(1));
                let (m, k, n) = (a.dims()[0], a.dims()[1], b.dims()[1]);
                let ga = self.wants(ins[0]).then(|| {
                    let bt = transpose_raw(b.data(), k, n);
                    Tensor::from_parts(vec![m, k], matmul_raw(gy.data(), &bt, m, n, k))
                });
                let gb = self.wants(ins[1]).then(|| {
                    let at = transpose_raw(a.data(), m, k);
                    Tensor::from_parts(vec![k, n], matmul_raw(&at, gy.data(), k, m, n))
                });
                vec![ga, gb]
            }
            Op::Add => vec![Some(gy.clone()), Some(gy.clone())],
            Op::Mul => {
                let (a, b) = (val(0), val(1));
                vec![
                    self.wants(ins[0]).then(|| zip_map(gy, b, |g, v| g * v)),
                    self.wants(ins[1]).then(|| zip_map(gy, a, |g, v| g * v)),
                ]
            }
            Op::Scale(f) => vec![Some(map(gy, |g| g * f))],
            Op::Relu => vec![Some(zip_map(gy, y, |g, o| if o > 0.0 { g } else { 0.0 }))],
            Op::Gelu => vec![Some(zip_map(gy, val(0), |g, x| {
                let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
                let t = u.tanh();
                let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x);
                g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
            }))],
            Op::Tanh => vec![Some(zip_map(gy, y, |g, o| g * (1.0 - o * o)))],
            Op::Sigmoid => vec![Some(zip_map(gy, y, |g, o| g * o * (1.0 - o)))],
            Op::Softmax { axis } => {
                let (outer, n, inner) = axis_split(y.dims(), *axis);
                let (ys, gs) = (y.data(), gy.data());
                let mut gx = vec![0.0; ys.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let s: f64 = (0..n).map(|j| gs[idx(j)] * ys[idx(j)]).sum();
                        for j in 0..n {
                            gx[idx(j)] = ys[idx(j)] * (gs[idx(j)] - s);
                        }
                    }
                }
                vec![Some(Tensor::from_parts(y.dims().to_vec(), gx))]
            }
            Op::LayerNorm { axis, xhat, inv_std } => {
                let gamma = val(1).data();
                let (outer, n, inner) = axis_split(y.dims(), *axis);
                let gs = gy.data();
                let mut gx = vec![0.0; gs.len()];
                let mut ggamma = vec![0.0; n];
                let mut gbeta = vec![0.0; n];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..n {
                            let g = gs[idx(j)];
                            ggamma[j] += g * xhat[idx(j)];
                            gbeta[j] += g;
                            let d = g * gamma[j];
                            mean_d += d;
                            mean_dx += d * xhat[idx(j)];
                        }
                        mean_d /= n as f64;
                        mean_dx /= n as f64;
                        let is = inv_std[o * inner + i];
                        for j in 0..n {
                            let d = gs[idx(j)] * gamma[j];
                            gx[idx(j)] = is * (d - mean_d - xhat[idx(j)] * mean_dx);
                        }
                    }
                }
                vec![
                    Some(Tensor::from_parts(y.dims().to_vec(), gx)),
                    Some(Tensor::from_parts(val(1).dims().to_vec(), ggamma)),
                    Some(Tensor::from_parts(val(2).dims().to_vec(), gbeta)),
                ]
            }
            Op::Linear => {
                let (x, w) = (val(0), val(1));
                let (rows, fan_in, fan_out) = (x.dims()[0], x.dims()[1], w.dims()[0]);
                let gs = gy.data();
                let gx = self.wants(ins[0]).then(|| {
                    Tensor::from_parts(vec![rows, fan_in], matmul_raw(gs, w.data(), rows, fan_out, fan_in))
                });
                let gw = self.wants(ins[1]).then(|| {
                    let gt = transpose_raw(gs, rows, fan_out);
                    Tensor::from_parts(vec![fan_out, fan_in], matmul_raw(&gt, x.data(), fan_out, rows, fan_in))
                });
                let mut out = vec![gx, gw];
                if ins.len() == 3 {
                    let mut gb = vec![0.0; fan_out];
                    for row in gs.chunks(fan_out) {
                        gb.iter_mut().zip(row).for_each(|(a, g)| *a += g);
                    }
                    out.push(Some(Tensor::from_parts(val(2).dims().to_vec(), gb)));
                }
                out
            }
            Op::Mean { axis } => {
                let x = val(0);
                let (outer, n, inner) = axis_split(x.dims(), *axis);
                let gs = gy.data();
                let mut gx = Vec::with_capacity(x.len());
                for o in 0..outer {
                    for _ in 0..n {
                        gx.extend(gs[o * inner..(o + 1) * inner].iter().map(|g| g / n as f64));
                    }
                }
                vec![Some(Tensor::from_parts(x.dims().to_vec(), gx))]
            }
            Op::Sum => {
                let g = gy.data()[0];
                vec![Some(Tensor::full(val(0).dims(), g))]
            }
            Op::Concat { axis } => {
                let (outer, _, inner) = axis_split(y.dims(), *axis);
                let total = y.dims()[*axis] * inner;
                let mut offset = 0;
                ins.iter()
                    .map(|&p| {
                        let d = self.dims(p);
                        let chunk = d[*axis] * inner;
                        let g = self.wants(p).then(|| {
                            let mut out = Vec::with_capacity(outer * chunk);
                            for o in 0..outer {
                                let start = o * total + offset;
                                out.extend_from_slice(&gy.data()[start..start + chunk]);
                            }
                            Tensor::from_parts(d.to_vec(), out)
                        });
                        offset += chunk;
                        g
                    })
                    .collect()
            }
            Op::Transpose => {
                let (r, c) = (y.dims()[0], y.dims()[1]);
                vec![Some(Tensor::from_parts(vec![c, r], transpose_raw(gy.data(), r, c)))]
            }
            Op::Reshape => vec![Some(gy.clone().reshaped(val(0).dims().to_vec()))],
            Op::Narrow { axis, start } => {
                let x = val(0);
                let (outer, n, inner) = axis_split(x.dims(), *axis);
                let len = y.dims()[*axis];
                let mut gx = vec![0.0; x.len()];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    let src = o * len * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&gy.data()[src..src + len * inner]);
                }
                vec![Some(Tensor::from_parts(x.dims().to_vec(), gx))]
            }
            Op::Conv2d => {
                let (x, k) = (val(0), val(1));
                let geom = ConvGeom::new(x.dims(), k.dims());
                let grads = conv2d_backward(&geom, x.data(), k.data(), gy.data(), self.wants(ins[0]));
                vec![
                    grads.input.map(|g| Tensor::from_parts(x.dims().to_vec(), g)),
                    Some(Tensor::from_parts(k.dims().to_vec(), grads.kernel)),
                    Some(Tensor::from_parts(vec![geom.cout], grads.bias)),
                ]
            }
            Op::MaxPool2d { argmax } => {
                let x = val(0);
                let mut gx = vec![0.0; x.len()];
                for (&src, g) in argmax.iter().zip(gy.data()) {
                    gx[src] += g;
                }
                vec![Some(Tensor::from_parts(x.dims().to_vec(), gx))]
            }
            Op::GlobalAvgPool => {
                let x = val(0);
                let area = x.dims()[2] * x.dims()[3];
                let mut gx = Vec::with_capacity(x.len());
                for g in gy.data() {
                    gx.extend(std::iter::repeat_n(g / area as f64, area));
                }
                vec![Some(Tensor::from_parts(x.dims().to_vec(), gx))]
            }
            Op::MaskedBce { target, mask } => {
                let p = val(0);
                let g = gy.data()[0];
                let gp = crate::risk::masked_bce_grad(p.data(), target, mask);
                vec![Some(Tensor::from_parts(
                    p.dims().to_vec(),
                    gp.into_iter().map(|v| v * g).collect(),
                ))]
            }
        }
    }
}

/// Node-level gradients from one reverse sweep.
#[derive(Debug)]
pub struct Backward {
    grads: Vec<Option<Tensor>>,
}

impl Backward {
    /// Gradient reaching a node, or `None` if the node is off the loss path.
    pub fn node_grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn param_grads(&self, graph: &Graph, store: &ParamStore) -> Gradients {
        let mut out = Gradients::zeros_like(store);
        for (&param, &node) in &graph.params {
            if let Some(g) = self.node_grad(node) {
                if param.0 < out.len() {
                    *out.get_mut(param) = g.clone();
                }
            }
        }
        out
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

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(t.dims().to_vec(), t.data().iter().map(|&v| f(v)).collect())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_parts(
        a.dims().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `[m, k] x [k, n]`, row-major.
fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            row.iter_mut()
                .zip(&b[p * n..(p + 1) * n])
                .for_each(|(o, bv)| *o += av * bv);
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

struct ConvGeom {
    n: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
}

impl ConvGeom {
    fn new(xd: &[usize], kd: &[usize]) -> Self {
        ConvGeom {
            n: xd[0],
            cin: xd[1],
            cout: kd[0],
            h: xd[2],
            w: xd[3],
            k: kd[2],
            pad: kd[2] / 2,
        }
    }

    /// Output rows/cols for which the tap `(ky, kx)` reads inside the input,
    /// and the signed input offset of that tap.
    fn tap(&self, ky: usize, kx: usize) -> TapRange {
        let dy = ky as isize - self.pad as isize;
        let dx = kx as isize - self.pad as isize;
        let (h, w) = (self.h as isize, self.w as isize);
        TapRange {
            y0: (-dy).max(0) as usize,
            y1: (h - dy).min(h).max(0) as usize,
            x0: (-dx).max(0) as usize,
            x1: (w - dx).min(w).max(0) as usize,
            dy,
            dx,
        }
    }
}

struct TapRange {
    y0: usize,
    y1: usize,
    x0: usize,
    x1: usize,
    dy: isize,
    dx: isize,
}

impl TapRange {
    fn src(&self, y: usize, x: usize, w: usize) -> usize {
        (y as isize + self.dy) as usize * w + (x as isize + self.dx) as usize
    }
}

fn conv2d_forward(g: &ConvGeom, x: &[f64], kernel: &[f64], bias: &[f64]) -> Vec<f64> {
    let area = g.h * g.w;
    let mut out = vec![0.0; g.n * g.cout * area];
    for n in 0..g.n {
        for co in 0..g.cout {
            let plane = &mut out[(n * g.cout + co) * area..(n * g.cout + co + 1) * area];
            plane.fill(bias[co]);
            for ci in 0..g.cin {
                let src = &x[(n * g.cin + ci) * area..(n * g.cin + ci + 1) * area];
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let wv = kernel[((co * g.cin + ci) * g.k + ky) * g.k + kx];
                        let t = g.tap(ky, kx);
                        if t.x0 >= t.x1 {
                            continue;
                        }
                        let span = t.x1 - t.x0;
                        for y in t.y0..t.y1 {
                            let o = y * g.w + t.x0;
                            let s = t.src(y, t.x0, g.w);
                            plane[o..o + span]
                                .iter_mut()
                                .zip(&src[s..s + span])
                                .for_each(|(acc, v)| *acc += wv * v);
                        }
                    }
                }
            }
        }
    }
    out
}

struct ConvGrads {
    input: Option<Vec<f64>>,
    kernel: Vec<f64>,
    bias: Vec<f64>,
}

fn conv2d_backward(g: &ConvGeom, x: &[f64], kernel: &[f64], gy: &[f64], want_input: bool) -> ConvGrads {
    let area = g.h * g.w;
    let mut gk = vec![0.0; kernel.len()];
    let mut gb = vec![0.0; g.cout];
    let mut gx = want_input.then(|| vec![0.0; x.len()]);
    for n in 0..g.n {
        for co in 0..g.cout {
            let gplane = &gy[(n * g.cout + co) * area..(n * g.cout + co + 1) * area];
            gb[co] += gplane.iter().sum::<f64>();
            for ci in 0..g.cin {
                let in_off = (n * g.cin + ci) * area;
                let src = &x[in_off..in_off + area];
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let widx = ((co * g.cin + ci) * g.k + ky) * g.k + kx;
                        let t = g.tap(ky, kx);
                        if t.x0 >= t.x1 {
                            continue;
                        }
                        let span = t.x1 - t.x0;
                        let mut acc = 0.0;
                        for y in t.y0..t.y1 {
                            let o = y * g.w + t.x0;
                            let s = t.src(y, t.x0, g.w);
                            acc += dot(&gplane[o..o + span], &src[s..s + span]);
                        }
                        gk[widx] += acc;
                        if let Some(gx) = gx.as_mut() {
                            let wv = kernel[widx];
                            let dst = &mut gx[in_off..in_off + area];
                            for y in t.y0..t.y1 {
                                let o = y * g.w + t.x0;
                                let s = t.src(y, t.x0, g.w);
                                dst[s..s + span]
                                    .iter_mut()
                                    .zip(&gplane[o..o + span])
                                    .for_each(|(d, v)| *d += wv * v);
                            }
                        }
                    }
                }
            }
        }
    }
    ConvGrads {
        input: gx,
        kernel: gk,
        bias: gb,
    }
}
