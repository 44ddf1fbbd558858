use super::kernels::{mm_acc, mm_nt_acc, mm_tn_acc};
use super::{
    broadcast_shape, broadcast_strides, for_each_broadcast, numel,
    permute_copy, split_axis, Tensor,
};
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Handle to a tensor recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sin(Var),
    Cos(Var),
    Gelu(Var),
    Reshape(Var),
    Transpose { input: Var, perm: Vec<usize> },
    Slice { input: Var, axis: usize, start: usize },
    Concat { inputs: Vec<Var>, axis: usize },
    Sum { input: Var, axis: usize },
    Mean { input: Var, axis: usize },
    SumAll(Var),
    MaskedFill { input: Var, mask: Tensor },
    Softmax { input: Var, axis: usize },
    LogSoftmax { input: Var, axis: usize },
    MatMul(Var, Var),
    LayerNorm { input: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Embedding { table: Var, indices: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Ordered record of executed tensor operations.
///
/// Every operation appends one node; [`Graph::backward`] walks the nodes in
/// reverse execution order. Leaf nodes created with [`Graph::param`] keep a
/// gradient slot that accumulates across backward calls until
/// [`Graph::zero_grad`].
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    /// Leaf that participates in gradient computation.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that is treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
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

    /// Accumulated gradient of a leaf, if a backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = &self.nodes[x.0].value;
        let data = src.data().iter().map(|&v| f(v)).collect();
        let value = Tensor {
            shape: src.shape().to_vec(),
            data,
        };
        let rg = self.nodes[x.0].requires_grad;
        self.push(value, op, rg)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out_shape = broadcast_shape(ta.shape(), tb.shape())
            .ok_or_else(|| Error::shape(name, ta.shape(), tb.shape()))?;
        let data = if ta.shape() == tb.shape() {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let sa = broadcast_strides(ta.shape(), &out_shape);
            let sb = broadcast_strides(tb.shape(), &out_shape);
            let mut out = vec![0.0; numel(&out_shape)];
            let (da, db) = (ta.data(), tb.data());
            for_each_broadcast(&out_shape, &sa, &sb, |o, i, j| out[o] = f(da[i], db[j]));
            out
        };
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(Tensor { shape: out_shape, data }, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, Op::Scale(x, s), |v| v * s)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + s)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.nodes[x.0].value.data().iter().any(|&v| v <= 0.0) {
            return Err(Error::contract("log of a non-positive value"));
        }
        Ok(self.unary(x, Op::Log(x), f64::ln))
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sin(x), f64::sin)
    }

    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(x, Op::Cos(x), f64::cos)
    }

    /// Tanh-form gaussian error linear unit.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Gelu(x), |v| {
            0.5 * v * (1.0 + (GELU_C * (v + GELU_K * v * v * v)).tanh())
        })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[x.0].value.reshape(shape)?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, x: Var, a: usize, b: usize) -> Result<Var> {
        let rank = self.nodes[x.0].value.rank();
        if a >= rank || b >= rank {
            return Err(Error::contract(format!(
                "transpose axes ({a}, {b}) out of range for rank {rank}"
            )));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(a, b);
        let src = &self.nodes[x.0].value;
        let (shape, data) = permute_copy(src.data(), src.shape(), &perm);
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Tensor { shape, data }, Op::Transpose { input: x, perm }, rg))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let src = &self.nodes[x.0].value;
        if axis >= src.rank() || start >= end || end > src.shape()[axis] {
            return Err(Error::contract(format!(
                "slice {start}..{end} on axis {axis} of shape {:?}",
                src.shape()
            )));
        }
        let (outer, len, inner) = split_axis(src.shape(), axis);
        let width = end - start;
        let mut data = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = o * len * inner;
            data.extend_from_slice(&src.data()[base + start * inner..base + end * inner]);
        }
        let mut shape = src.shape().to_vec();
        shape[axis] = width;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Tensor { shape, data }, Op::Slice { input: x, axis, start }, rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let base_shape = self.nodes[first.0].value.shape().to_vec();
        if axis >= base_shape.len() {
            return Err(Error::contract(format!("concat axis {axis} out of range")));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.nodes[v.0].value.shape();
            let compatible = s.len() == base_shape.len()
                && s.iter().zip(&base_shape).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", &base_shape, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base_shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let t = &self.nodes[v.0].value;
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base_shape;
        shape[axis] = total;
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = Op::Concat {
            inputs: inputs.to_vec(),
            axis,
        };
        Ok(self.push(Tensor { shape, data }, op, rg))
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let src = &self.nodes[x.0].value;
        if axis >= src.rank() {
            return Err(Error::contract(format!(
                "reduction axis {axis} out of range for {:?}",
                src.shape()
            )));
        }
        let (outer, len, inner) = split_axis(src.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let row = &src.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (acc, &v) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        if mean {
            let inv = 1.0 / len as f64;
            data.iter_mut().for_each(|v| *v *= inv);
        }
        let mut shape = src.shape().to_vec();
        shape.remove(axis);
        let op = if mean {
            Op::Mean { input: x, axis }
        } else {
            Op::Sum { input: x, axis }
        };
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Tensor { shape, data }, op, rg))
    }

    /// Sum along `axis`, removing it.
    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    /// Mean along `axis`, removing it.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    /// Sum of all elements as a scalar.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let total = self.nodes[x.0].value.data().iter().sum();
        let rg = self.nodes[x.0].requires_grad;
        self.push(Tensor::scalar(total), Op::SumAll(x), rg)
    }

    /// Replaces positions where `mask` is non-zero by `value`; `mask` broadcasts against `x`.
    pub fn masked_fill(&mut self, x: Var, mask: &Tensor, value: f64) -> Result<Var> {
        let src = &self.nodes[x.0].value;
        let out_shape = broadcast_shape(src.shape(), mask.shape())
            .filter(|s| s.as_slice() == src.shape())
            .ok_or_else(|| Error::shape("masked_fill", src.shape(), mask.shape()))?;
        let sa = broadcast_strides(src.shape(), &out_shape);
        let sm = broadcast_strides(mask.shape(), &out_shape);
        let mut data = src.data().to_vec();
        let md = mask.data();
        for_each_broadcast(&out_shape, &sa, &sm, |o, _, j| {
            if md[j] != 0.0 {
                data[o] = value;
            }
        });
        let rg = self.nodes[x.0].requires_grad;
        let op = Op::MaskedFill {
            input: x,
            mask: mask.clone(),
        };
        Ok(self.push(Tensor { shape: out_shape, data }, op, rg))
    }

    /// Softmax along `axis`, stabilized by subtracting the slice maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, false)
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, true)
    }

    fn softmax_impl(&mut self, x: Var, axis: usize, log: bool) -> Result<Var> {
        let src = &self.nodes[x.0].value;
        if axis >= src.rank() {
            return Err(Error::contract(format!(
                "softmax axis {axis} out of range for {:?}",
                src.shape()
            )));
        }
        let (outer, len, inner) = split_axis(src.shape(), axis);
        let input = src.data();
        let mut data = vec![0.0; input.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).map(|l| input[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0;
                for l in 0..len {
                    let e = (input[at(l)] - max).exp();
                    data[at(l)] = e;
                    denom += e;
                }
                if log {
                    let lse = denom.ln();
                    for l in 0..len {
                        data[at(l)] = input[at(l)] - max - lse;
                    }
                } else {
                    let inv = 1.0 / denom;
                    for l in 0..len {
                        data[at(l)] *= inv;
                    }
                }
            }
        }
        let shape = src.shape().to_vec();
        let rg = self.nodes[x.0].requires_grad;
        let op = if log {
            Op::LogSoftmax { input: x, axis }
        } else {
            Op::Softmax { input: x, axis }
        };
        Ok(self.push(Tensor { shape, data }, op, rg))
    }

    /// Batched matrix product `[..., m, k] x [..., k, n]` with broadcasting batch axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let plan = MatmulPlan::new(ta.shape(), tb.shape())?;
        let mut data = vec![0.0; plan.out_shape.iter().product()];
        let (m, k, n) = (plan.m, plan.k, plan.n);
        plan.for_each_batch(|ia, ib, io| {
            mm_acc(
                &ta.data()[ia * m * k..(ia + 1) * m * k],
                &tb.data()[ib * k * n..(ib + 1) * k * n],
                &mut data[io * m * n..(io + 1) * m * n],
                m,
                k,
                n,
            );
        });
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(Tensor { shape: plan.out_shape, data }, Op::MatMul(a, b), rg))
    }

    /// Affine map on the last axis: `x W + b` with `W: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        match bias {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    /// Normalizes over the last axis, then applies a learnable scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let src = &self.nodes[x.0].value;
        let d = *src
            .shape()
            .last()
            .ok_or_else(|| Error::contract("layer_norm on a scalar"))?;
        for p in [gamma, beta] {
            if self.nodes[p.0].value.shape() != [d] {
                return Err(Error::shape("layer_norm", src.shape(), self.nodes[p.0].value.shape()));
            }
        }
        let rows = src.numel() / d;
        let g = self.nodes[gamma.0].value.data();
        let bt = self.nodes[beta.0].value.data();
        let mut xhat = vec![0.0; src.numel()];
        let mut rstd = vec![0.0; rows];
        let mut data = vec![0.0; src.numel()];
        for r in 0..rows {
            let row = &src.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                data[r * d + j] = h * g[j] + bt[j];
            }
        }
        let shape = src.shape().to_vec();
        let rg = [x, gamma, beta].iter().any(|v| self.nodes[v.0].requires_grad);
        let op = Op::LayerNorm {
            input: x,
            gamma,
            beta,
            xhat,
            rstd,
        };
        Ok(self.push(Tensor { shape, data }, op, rg))
    }

    /// Row lookup `table[indices]` producing `[indices.len(), d]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = &self.nodes[table.0].value;
        if t.rank() != 2 {
            return Err(Error::contract("embedding table must be rank 2"));
        }
        let (rows, d) = (t.shape()[0], t.shape()[1]);
        if indices.is_empty() {
            return Err(Error::contract("embedding lookup with no indices"));
        }
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= rows {
                return Err(Error::data(format!("embedding index {i} out of range 0..{rows}")));
            }
            data.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
        }
        let rg = self.nodes[table.0].requires_grad;
        let op = Op::Embedding {
            table,
            indices: indices.to_vec(),
        };
        Ok(self.push(Tensor { shape: vec![indices.len(), d], data }, op, rg))
    }

    /// Propagates `d loss / d node` back through the recorded graph and adds
    /// the result into every reachable gradient-requiring leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.propagate(id, &g, &mut grads);
            let node = &mut self.nodes[id];
            if matches!(node.op, Op::Leaf) {
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v),
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[id].value;
        macro_rules! buf {
            ($v:expr) => {
                grad_slot(nodes, grads, $v)
            };
        }

        match &nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let sign_b = if matches!(nodes[id].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let is_mul = matches!(nodes[id].op, Op::Mul(..));
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let sa = broadcast_strides(ta.shape(), out.shape());
                let sb = broadcast_strides(tb.shape(), out.shape());
                if let Some(ga) = buf!(a) {
                    let db = tb.data();
                    for_each_broadcast(out.shape(), &sa, &sb, |o, i, j| {
                        ga[i] += if is_mul { g[o] * db[j] } else { g[o] };
                    });
                }
                if let Some(gb) = buf!(b) {
                    let da = ta.data();
                    for_each_broadcast(out.shape(), &sa, &sb, |o, i, j| {
                        gb[j] += if is_mul { g[o] * da[i] } else { sign_b * g[o] };
                    });
                }
            }
            Op::Scale(x, s) => {
                if let Some(gx) = buf!(*x) {
                    gx.iter_mut().zip(g).for_each(|(a, v)| *a += s * v);
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if let Some(gx) = buf!(*x) {
                    gx.iter_mut().zip(g).for_each(|(a, v)| *a += v);
                }
            }
            Op::Exp(x) => {
                if let Some(gx) = buf!(*x) {
                    for ((a, v), y) in gx.iter_mut().zip(g).zip(out.data()) {
                        *a += v * y;
                    }
                }
            }
            Op::Log(x) | Op::Sin(x) | Op::Cos(x) | Op::Gelu(x) => {
                let x = *x;
                let input = nodes[x.0].value.data();
                let deriv: fn(f64) -> f64 = match nodes[id].op {
                    Op::Log(_) => |v| 1.0 / v,
                    Op::Sin(_) => f64::cos,
                    Op::Cos(_) => |v| -v.sin(),
                    _ => gelu_grad,
                };
                if let Some(gx) = buf!(x) {
                    for ((a, v), &xi) in gx.iter_mut().zip(g).zip(input) {
                        *a += v * deriv(xi);
                    }
                }
            }
            Op::Transpose { input, perm } => {
                if let Some(gx) = buf!(*input) {
                    let mut inverse = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inverse[p] = i;
                    }
                    let (_, back) = permute_copy(g, out.shape(), &inverse);
                    gx.iter_mut().zip(&back).for_each(|(a, v)| *a += v);
                }
            }
            Op::Slice { input, axis, start } => {
                if let Some(gx) = buf!(*input) {
                    let in_shape = nodes[input.0].value.shape();
                    let (outer, len, inner) = split_axis(in_shape, *axis);
                    let width = out.shape()[*axis];
                    for o in 0..outer {
                        let dst = o * len * inner + start * inner;
                        let src = o * width * inner;
                        for t in 0..width * inner {
                            gx[dst + t] += g[src + t];
                        }
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                for v in inputs {
                    let width = nodes[v.0].value.shape()[*axis];
                    if let Some(gx) = buf!(*v) {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * width * inner;
                            for t in 0..width * inner {
                                gx[dst + t] += g[src + t];
                            }
                        }
                    }
                    offset += width;
                }
            }
            Op::Sum { input, axis } | Op::Mean { input, axis } => {
                let scale = if matches!(nodes[id].op, Op::Mean { .. }) {
                    1.0 / nodes[input.0].value.shape()[*axis] as f64
                } else {
                    1.0
                };
                if let Some(gx) = buf!(*input) {
                    let (outer, len, inner) = split_axis(nodes[input.0].value.shape(), *axis);
                    for o in 0..outer {
                        for l in 0..len {
                            let base = (o * len + l) * inner;
                            for i in 0..inner {
                                gx[base + i] += scale * g[o * inner + i];
                            }
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                if let Some(gx) = buf!(*x) {
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::MaskedFill { input, mask } => {
                if let Some(gx) = buf!(*input) {
                    let sa = broadcast_strides(out.shape(), out.shape());
                    let sm = broadcast_strides(mask.shape(), out.shape());
                    let md = mask.data();
                    for_each_broadcast(out.shape(), &sa, &sm, |o, _, j| {
                        if md[j] == 0.0 {
                            gx[o] += g[o];
                        }
                    });
                }
            }
            Op::Softmax { input, axis } | Op::LogSoftmax { input, axis } => {
                let log = matches!(nodes[id].op, Op::LogSoftmax { .. });
                if let Some(gx) = buf!(*input) {
                    let (outer, len, inner) = split_axis(out.shape(), *axis);
                    let y = out.data();
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + i;
                            if log {
                                let gsum: f64 = (0..len).map(|l| g[at(l)]).sum();
                                for l in 0..len {
                                    gx[at(l)] += g[at(l)] - y[at(l)].exp() * gsum;
                                }
                            } else {
                                let dot: f64 = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                                for l in 0..len {
                                    gx[at(l)] += y[at(l)] * (g[at(l)] - dot);
                                }
                            }
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let plan = MatmulPlan::new(ta.shape(), tb.shape()).expect("recorded matmul");
                let (m, k, n) = (plan.m, plan.k, plan.n);
                if let Some(ga) = buf!(a) {
                    plan.for_each_batch(|ia, ib, io| {
                        mm_nt_acc(
                            &g[io * m * n..(io + 1) * m * n],
                            &tb.data()[ib * k * n..(ib + 1) * k * n],
                            &mut ga[ia * m * k..(ia + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    });
                }
                if let Some(gb) = buf!(b) {
                    plan.for_each_batch(|ia, ib, io| {
                        mm_tn_acc(
                            &ta.data()[ia * m * k..(ia + 1) * m * k],
                            &g[io * m * n..(io + 1) * m * n],
                            &mut gb[ib * k * n..(ib + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    });
                }
            }
            Op::LayerNorm { input, gamma, beta, xhat, rstd } => {
                let d = *out.shape().last().expect("rank >= 1");
                let rows = rstd.len();
                let gm = nodes[gamma.0].value.data();
                if let Some(gg) = buf!(*gamma) {
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(gbeta) = buf!(*beta) {
                    for r in 0..rows {
                        for j in 0..d {
                            gbeta[j] += g[r * d + j];
                        }
                    }
                }
                if let Some(gx) = buf!(*input) {
                    let inv_d = 1.0 / d as f64;
                    for r in 0..rows {
                        let row = r * d..(r + 1) * d;
                        let (gr, hr) = (&g[row.clone()], &xhat[row.clone()]);
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gm[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j];
                        }
                        mean_dh *= inv_d;
                        mean_dh_h *= inv_d;
                        for j in 0..d {
                            let dh = gr[j] * gm[j];
                            gx[r * d + j] += rstd[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Embedding { table, indices } => {
                if let Some(gt) = buf!(*table) {
                    let d = out.shape()[1];
                    for (r, &i) in indices.iter().enumerate() {
                        for j in 0..d {
                            gt[i * d + j] += g[r * d + j];
                        }
                    }
                }
            }
        }
    }
}

/// Zero-initialized gradient buffer for `v`, or `None` if it needs no gradient.
fn grad_slot<'a>(
    nodes: &[Node],
    grads: &'a mut [Option<Vec<f64>>],
    v: Var,
) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn gelu_grad(v: f64) -> f64 {
    let inner = GELU_C * (v + GELU_K * v * v * v);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * v * v)
}

/// Batch bookkeeping for a broadcast matrix product.
struct MatmulPlan {
    m: usize,
    k: usize,
    n: usize,
    batch: Vec<usize>,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
    out_shape: Vec<usize>,
}

impl MatmulPlan {
    fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return Err(Error::shape("matmul", a, b));
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (kb, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != kb {
            return Err(Error::shape("matmul", a, b));
        }
        let (ba, bb) = (&a[..a.len() - 2], &b[..b.len() - 2]);
        let batch = broadcast_shape(ba, bb).ok_or_else(|| Error::shape("matmul", a, b))?;
        let mut out_shape = batch.clone();
        out_shape.extend([m, n]);
        Ok(Self {
            m,
            k,
            n,
            a_strides: broadcast_strides(ba, &batch),
            b_strides: broadcast_strides(bb, &batch),
            batch,
            out_shape,
        })
    }

    /// Calls `f(a_batch, b_batch, out_batch)` for every output matrix.
    fn for_each_batch(&self, mut f: impl FnMut(usize, usize, usize)) {
        if self.batch.is_empty() {
            f(0, 0, 0);
            return;
        }
        for_each_broadcast(&self.batch, &self.a_strides, &self.b_strides, |o, i, j| f(i, j, o));
    }
}
