//! Dynamic reverse-mode differentiation tape over dense f64 tensors.
//!
//! A tape is rebuilt for every forward pass. Operations append nodes in
//! evaluation order, so every node's inputs precede it; `backward` walks the
//! nodes in exact reverse insertion order and accumulates gradients.
//! Node-local gradients are reset at the start of each `backward` call, so
//! calling `backward` twice on the same tape adds the same contribution
//! twice to any leased parameter (accumulation is the documented contract;
//! callers zero parameter gradients between batches).

use crate::autodiff::tensor::{
    broadcast_shape, broadcast_strides, for_each_broadcast, Tensor,
};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    /// Input value; `slot` links back to a parameter store entry.
    Leaf { slot: Option<usize> },
    Matmul { a: NodeId, b: NodeId },
    Transpose { a: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: f64 },
    Exp { a: NodeId },
    Log { a: NodeId },
    Relu { a: NodeId },
    Sigmoid { a: NodeId },
    AbsSmooth { a: NodeId },
    Clamp { a: NodeId, lo: f64, hi: f64 },
    Sum { a: NodeId },
    Mean { a: NodeId },
    Concat { inputs: Vec<NodeId>, axis: usize },
    LayerNorm { a: NodeId, eps: f64 },
    Softmax { a: NodeId, axis: usize },
    Reshape { a: NodeId },
}

struct Node {
    op: Op,
    value: Tensor,
    grad: Vec<f64>,
}

/// Smoothing constant for the differentiable absolute value.
pub const ABS_SMOOTH_EPS: f64 = 1e-12;

/// Record of one forward pass, differentiable in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    pub fn grad(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].grad
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let grad = vec![0.0; value.len()];
        self.nodes.push(Node { op, value, grad });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant input node (no gradient sink).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf { slot: None }, value)
    }

    /// Input node whose gradient will be harvested into parameter `slot`.
    pub fn leaf_for_slot(&mut self, value: Tensor, slot: usize) -> NodeId {
        self.push(Op::Leaf { slot: Some(slot) }, value)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.leaf(Tensor::scalar(v))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        let da = self.value(a).data();
        let db = self.value(b).data();
        for i in 0..m {
            for p in 0..k {
                let aip = da[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &db[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aip * brow[j];
                }
            }
        }
        Ok(self.push(Op::Matmul { a, b }, Tensor::new(vec![m, n], out)?))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).shape();
        if s.len() != 2 {
            return Err(Error::Contract(format!(
                "transpose expects a matrix, got shape {s:?}"
            )));
        }
        let (r, c) = (s[0], s[1]);
        let d = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        Ok(self.push(Op::Transpose { a }, Tensor::new(vec![c, r], out)?))
    }

    fn broadcast_binary(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let out_shape = broadcast_shape(op_name, self.value(a).shape(), self.value(b).shape())?;
        let astr = broadcast_strides(self.value(a).shape(), &out_shape);
        let bstr = broadcast_strides(self.value(b).shape(), &out_shape);
        let mut out = vec![0.0; out_shape.iter().product()];
        {
            let da = self.value(a).data();
            let db = self.value(b).data();
            for_each_broadcast(&out_shape, &astr, &bstr, |oi, ai, bi| {
                out[oi] = f(da[ai], db[bi]);
            });
        }
        Ok(self.push(op, Tensor::new(out_shape, out)?))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.broadcast_binary("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.broadcast_binary("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.broadcast_binary("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.map_unary(a, |x| c * x);
        self.push(Op::Scale { a, c }, value)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let value = self.map_unary(a, f64::exp);
        self.push(Op::Exp { a }, value)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        if let Some(v) = self.value(a).data().iter().find(|v| **v <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                message: format!("non-positive input {v}"),
            });
        }
        let value = self.map_unary(a, f64::ln);
        Ok(self.push(Op::Log { a }, value))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.map_unary(a, |x| x.max(0.0));
        self.push(Op::Relu { a }, value)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = self.map_unary(a, sigmoid);
        self.push(Op::Sigmoid { a }, value)
    }

    /// `sqrt(x^2 + eps^2)`: absolute value with a defined derivative at 0.
    pub fn abs_smooth(&mut self, a: NodeId) -> NodeId {
        let value = self.map_unary(a, |x| (x * x + ABS_SMOOTH_EPS * ABS_SMOOTH_EPS).sqrt());
        self.push(Op::AbsSmooth { a }, value)
    }

    /// Hard clamp; gradient passes only where the input is strictly inside
    /// `(lo, hi)`.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let value = self.map_unary(a, |x| x.clamp(lo, hi));
        self.push(Op::Clamp { a, lo, hi }, value)
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Op::Sum { a }, Tensor::scalar(s))
    }

    /// Mean of all elements, as a `[1]` tensor.
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len() as f64;
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Op::Mean { a }, Tensor::scalar(s / n))
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        let first = self.value(inputs[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::Contract(format!(
                "concat axis {axis} out of range for rank {}",
                first.len()
            )));
        }
        let mut axis_total = 0usize;
        for &id in inputs {
            let s = self.value(id).shape();
            if s.len() != first.len()
                || s.iter()
                    .enumerate()
                    .any(|(d, &e)| d != axis && e != first[d])
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![0.0; out_shape.iter().product()];
        let mut offset = 0usize;
        for &id in inputs {
            let s = self.value(id).shape();
            let extent = s[axis];
            let d = self.value(id).data();
            for o in 0..outer {
                let src = &d[o * extent * inner..(o + 1) * extent * inner];
                let dst_start = (o * axis_total + offset) * inner;
                out[dst_start..dst_start + extent * inner].copy_from_slice(src);
            }
            offset += extent;
        }
        Ok(self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            Tensor::new(out_shape, out)?,
        ))
    }

    /// Normalize each lane along the last axis to zero mean and unit
    /// variance (variance floored by `eps`); no affine term.
    pub fn layer_norm(&mut self, a: NodeId, eps: f64) -> NodeId {
        let shape = self.value(a).shape().to_vec();
        let lane = *shape.last().expect("layer_norm needs rank >= 1");
        let d = self.value(a).data();
        let mut out = vec![0.0; d.len()];
        for l in 0..d.len() / lane {
            let x = &d[l * lane..(l + 1) * lane];
            let mu = x.iter().sum::<f64>() / lane as f64;
            let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / lane as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for i in 0..lane {
                out[l * lane + i] = (x[i] - mu) * inv;
            }
        }
        let value = Tensor::new(shape, out).expect("same shape");
        self.push(Op::LayerNorm { a, eps }, value)
    }

    /// Numerically stabilized softmax along `axis`; every slice sums to 1.
    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.value(a).shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Contract(format!(
                "softmax axis {axis} out of range for rank {}",
                shape.len()
            )));
        }
        let (outer, lane, inner) = lane_split(&shape, axis);
        let d = self.value(a).data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * lane + l) * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for l in 0..lane {
                    mx = mx.max(d[at(l)]);
                }
                let mut z = 0.0;
                for l in 0..lane {
                    let e = (d[at(l)] - mx).exp();
                    out[at(l)] = e;
                    z += e;
                }
                for l in 0..lane {
                    out[at(l)] /= z;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(Op::Softmax { a, axis }, value))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let data = self.value(a).data().to_vec();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(Op::Reshape { a }, value))
    }

    fn map_unary(&self, a: NodeId, f: impl Fn(f64) -> f64) -> Tensor {
        let v = self.value(a);
        Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect())
            .expect("same shape")
    }

    /// Reverse pass from a scalar loss. Node gradients are reset first, then
    /// seeded with 1 at `loss` and propagated in reverse insertion order.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        self.nodes[loss.0].grad[0] = 1.0;

        for i in (0..=loss.0).rev() {
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf { .. } => {}
                Op::Matmul { a, b } => self.back_matmul(i, a, b),
                Op::Transpose { a } => {
                    let (r, c) = (self.nodes[i].value.shape()[0], self.nodes[i].value.shape()[1]);
                    for x in 0..r {
                        for y in 0..c {
                            let g = self.nodes[i].grad[x * c + y];
                            self.nodes[a.0].grad[y * r + x] += g;
                        }
                    }
                }
                Op::Add { a, b } => {
                    self.back_broadcast(i, a, b, |g, _, _| (g, g));
                }
                Op::Sub { a, b } => {
                    self.back_broadcast(i, a, b, |g, _, _| (g, -g));
                }
                Op::Mul { a, b } => {
                    self.back_broadcast(i, a, b, |g, av, bv| (g * bv, g * av));
                }
                Op::Scale { a, c } => {
                    for j in 0..self.nodes[i].grad.len() {
                        let g = self.nodes[i].grad[j];
                        self.nodes[a.0].grad[j] += c * g;
                    }
                }
                Op::Exp { a } => self.back_unary(i, a, |g, _x, y| g * y),
                Op::Log { a } => self.back_unary(i, a, |g, x, _y| g / x),
                Op::Relu { a } => self.back_unary(i, a, |g, x, _y| if x > 0.0 { g } else { 0.0 }),
                Op::Sigmoid { a } => self.back_unary(i, a, |g, _x, y| g * y * (1.0 - y)),
                Op::AbsSmooth { a } => self.back_unary(i, a, |g, x, y| g * x / y),
                Op::Clamp { a, lo, hi } => {
                    self.back_unary(i, a, |g, x, _y| if x > lo && x < hi { g } else { 0.0 })
                }
                Op::Sum { a } => {
                    let g = self.nodes[i].grad[0];
                    self.nodes[a.0].grad.iter_mut().for_each(|d| *d += g);
                }
                Op::Mean { a } => {
                    let n = self.nodes[a.0].value.len() as f64;
                    let g = self.nodes[i].grad[0] / n;
                    self.nodes[a.0].grad.iter_mut().for_each(|d| *d += g);
                }
                Op::Concat { inputs, axis } => self.back_concat(i, &inputs, axis),
                Op::LayerNorm { a, eps } => self.back_layer_norm(i, a, eps),
                Op::Softmax { a, axis } => self.back_softmax(i, a, axis),
                Op::Reshape { a } => {
                    for j in 0..self.nodes[i].grad.len() {
                        let g = self.nodes[i].grad[j];
                        self.nodes[a.0].grad[j] += g;
                    }
                }
            }
        }
        Ok(())
    }

    /// Iterate `(slot, grad)` for every leaf bound to a parameter slot.
    pub fn slot_grads(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.nodes.iter().filter_map(|n| match n.op {
            Op::Leaf { slot: Some(s) } => Some((s, n.grad.as_slice())),
            _ => None,
        })
    }

    fn back_matmul(&mut self, i: usize, a: NodeId, b: NodeId) {
        let m = self.nodes[a.0].value.shape()[0];
        let k = self.nodes[a.0].value.shape()[1];
        let n = self.nodes[b.0].value.shape()[1];
        // dA += dC · B^T, dB += A^T · dC
        for x in 0..m {
            for j in 0..n {
                let g = self.nodes[i].grad[x * n + j];
                if g == 0.0 {
                    continue;
                }
                for p in 0..k {
                    let bv = self.nodes[b.0].value.data()[p * n + j];
                    self.nodes[a.0].grad[x * k + p] += g * bv;
                    let av = self.nodes[a.0].value.data()[x * k + p];
                    self.nodes[b.0].grad[p * n + j] += g * av;
                }
            }
        }
    }

    fn back_broadcast(
        &mut self,
        i: usize,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64, f64) -> (f64, f64),
    ) {
        let out_shape = self.nodes[i].value.shape().to_vec();
        let astr = broadcast_strides(self.nodes[a.0].value.shape(), &out_shape);
        let bstr = broadcast_strides(self.nodes[b.0].value.shape(), &out_shape);
        let mut ga = vec![0.0; self.nodes[a.0].value.len()];
        let mut gb = vec![0.0; self.nodes[b.0].value.len()];
        {
            let grad = &self.nodes[i].grad;
            let av = self.nodes[a.0].value.data();
            let bv = self.nodes[b.0].value.data();
            for_each_broadcast(&out_shape, &astr, &bstr, |oi, ai, bi| {
                let (da, db) = f(grad[oi], av[ai], bv[bi]);
                ga[ai] += da;
                gb[bi] += db;
            });
        }
        for (d, g) in self.nodes[a.0].grad.iter_mut().zip(&ga) {
            *d += g;
        }
        for (d, g) in self.nodes[b.0].grad.iter_mut().zip(&gb) {
            *d += g;
        }
    }

    fn back_unary(&mut self, i: usize, a: NodeId, f: impl Fn(f64, f64, f64) -> f64) {
        for j in 0..self.nodes[i].grad.len() {
            let g = self.nodes[i].grad[j];
            let x = self.nodes[a.0].value.data()[j];
            let y = self.nodes[i].value.data()[j];
            self.nodes[a.0].grad[j] += f(g, x, y);
        }
    }

    fn back_concat(&mut self, i: usize, inputs: &[NodeId], axis: usize) {
        let out_shape = self.nodes[i].value.shape().to_vec();
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let axis_total = out_shape[axis];
        let mut offset = 0usize;
        for &id in inputs {
            let extent = self.nodes[id.0].value.shape()[axis];
            for o in 0..outer {
                for e in 0..extent {
                    for inr in 0..inner {
                        let src = (o * axis_total + offset + e) * inner + inr;
                        let dst = (o * extent + e) * inner + inr;
                        let g = self.nodes[i].grad[src];
                        self.nodes[id.0].grad[dst] += g;
                    }
                }
            }
            offset += extent;
        }
    }

    fn back_layer_norm(&mut self, i: usize, a: NodeId, eps: f64) {
        let shape = self.nodes[i].value.shape().to_vec();
        let lane = *shape.last().unwrap();
        for l in 0..self.nodes[i].value.len() / lane {
            let base = l * lane;
            let x = &self.nodes[a.0].value.data()[base..base + lane];
            let mu = x.iter().sum::<f64>() / lane as f64;
            let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / lane as f64;
            let inv = 1.0 / (var + eps).sqrt();
            let y: Vec<f64> = self.nodes[i].value.data()[base..base + lane].to_vec();
            let dy: Vec<f64> = self.nodes[i].grad[base..base + lane].to_vec();
            let mean_dy = dy.iter().sum::<f64>() / lane as f64;
            let mean_dy_y = dy.iter().zip(&y).map(|(d, yy)| d * yy).sum::<f64>() / lane as f64;
            for j in 0..lane {
                self.nodes[a.0].grad[base + j] += inv * (dy[j] - mean_dy - y[j] * mean_dy_y);
            }
        }
    }

    fn back_softmax(&mut self, i: usize, a: NodeId, axis: usize) {
        let shape = self.nodes[i].value.shape().to_vec();
        let (outer, lane, inner) = lane_split(&shape, axis);
        for o in 0..outer {
            for inr in 0..inner {
                let at = |l: usize| (o * lane + l) * inner + inr;
                let mut dot = 0.0;
                for l in 0..lane {
                    dot += self.nodes[i].grad[at(l)] * self.nodes[i].value.data()[at(l)];
                }
                for l in 0..lane {
                    let y = self.nodes[i].value.data()[at(l)];
                    let dy = self.nodes[i].grad[at(l)];
                    self.nodes[a.0].grad[at(l)] += y * (dy - dot);
                }
            }
        }
    }
}

fn lane_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let lane = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, lane, inner)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
