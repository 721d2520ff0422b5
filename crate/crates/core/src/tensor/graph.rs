use crate::error::{Error, Result};
use crate::tensor::kernels::{self, fmt_shape, numel};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    Gelu { a: Var },
    Sqrt { a: Var },
    Sum { a: Var },
    Mean { a: Var },
    L2NormLast { a: Var },
    Softmax { a: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, means: Vec<f64>, inv_stds: Vec<f64> },
    Permute { a: Var, order: Vec<usize> },
    Reshape { a: Var },
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { a: Var, axis: usize, start: usize },
    FrameConv { x: Var, w: Var, b: Var },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Gelu { .. } => "gelu",
            Op::Sqrt { .. } => "sqrt",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::L2NormLast { .. } => "l2_norm_lastaxis",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Permute { .. } => "permute",
            Op::Reshape { .. } => "reshape",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::FrameConv { .. } => "framewise_conv1d",
        }
    }
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Tape of executed ops in topological (creation) order. [`Graph::backward`]
/// replays it in reverse, visiting each op exactly once. A graph is confined
/// to one thread; independent graphs may run concurrently.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        let grad = requires_grad.then(|| vec![0.0; data.len()]);
        self.nodes.push(Node { shape, data, grad, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    /// Registers a tensor as a tape input. Trainability follows the tensor.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad(), Op::Leaf)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    /// Detached copy of a node's value.
    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::from_vec(self.nodes[v.0].shape.clone(), self.nodes[v.0].data.clone())
            .expect("node shape/data consistent")
    }

    pub fn item(&self, v: Var) -> Result<f64> {
        let n = &self.nodes[v.0];
        if n.data.len() != 1 {
            return Err(Error::Shape(format!(
                "expected scalar, got shape {}",
                fmt_shape(&n.shape)
            )));
        }
        Ok(n.data[0])
    }

    /// Accumulated gradient of a node, if it is on a trainable path.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    // ── Linear algebra ──────────────────────────────────────────────────

    /// Batched matrix product: trailing two dims conform, leading dims
    /// broadcast.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (data, shape) = matmul_full(
            self.data(a),
            self.shape(a),
            self.data(b),
            self.shape(b),
        )?;
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(shape, data, rg, Op::Matmul { a, b }))
    }

    // ── Elementwise suite ───────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add { a, b }, |x, y| x + y, |x, y| y + x)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub { a, b }, |x, y| x - y, |x, y| y - x)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul { a, b }, |x, y| x * y, |x, y| y * x)
    }

    /// `f` applies when `a` is the larger operand, `f_rev` when `b` is; in
    /// both cases the first closure argument is the larger operand's element.
    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64 + Sync + Send,
        f_rev: impl Fn(f64, f64) -> f64 + Sync + Send,
    ) -> Result<Var> {
        let a_big = self.check_broadcast(a, b, op.name())?;
        let (data, shape) = if a_big {
            (
                kernels::binary_map_cyclic(self.data(a), self.data(b), f),
                self.shape(a).to_vec(),
            )
        } else {
            (
                kernels::binary_map_cyclic(self.data(b), self.data(a), f_rev),
                self.shape(b).to_vec(),
            )
        };
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(shape, data, rg, op))
    }

    /// Validates the leading-dim broadcast contract and reports which operand
    /// carries the output shape.
    fn check_broadcast(&self, a: Var, b: Var, opname: &str) -> Result<bool> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let (big, small, a_big) = if sa.len() >= sb.len() { (sa, sb, true) } else { (sb, sa, false) };
        if !big.ends_with(small) {
            return Err(Error::Shape(format!(
                "{opname}: {} does not broadcast against {} (only missing leading dims broadcast)",
                fmt_shape(sa),
                fmt_shape(sb)
            )));
        }
        Ok(a_big)
    }

    /// Multiply by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = kernels::unary_map(self.data(a), |x| x * c);
        let shape = self.shape(a).to_vec();
        let rg = self.nodes[a.0].requires_grad;
        self.push(shape, data, rg, Op::Scale { a, c })
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let data = kernels::unary_map(self.data(a), kernels::gelu);
        let shape = self.shape(a).to_vec();
        let rg = self.nodes[a.0].requires_grad;
        self.push(shape, data, rg, Op::Gelu { a })
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some(&v) = self.data(a).iter().find(|v| **v < 0.0) {
            return Err(Error::NonFinite(format!("sqrt of negative value {v}")));
        }
        let data = kernels::unary_map(self.data(a), f64::sqrt);
        let shape = self.shape(a).to_vec();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(shape, data, rg, Op::Sqrt { a }))
    }

    /// Sum of all elements; rank-0 result.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.data(a).iter().sum();
        let rg = self.nodes[a.0].requires_grad;
        self.push(vec![], vec![s], rg, Op::Sum { a })
    }

    /// Mean of all elements; rank-0 result.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.data(a).len() as f64;
        let s: f64 = self.data(a).iter().sum();
        let rg = self.nodes[a.0].requires_grad;
        self.push(vec![], vec![s / n], rg, Op::Mean { a })
    }

    /// Euclidean norm over the last axis: shape [..., d] -> [...].
    pub fn l2_norm_lastaxis(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a);
        if shape.is_empty() {
            return Err(Error::Shape("l2_norm_lastaxis needs rank >= 1".into()));
        }
        let d = shape[shape.len() - 1];
        let out_shape: Vec<usize> = shape[..shape.len() - 1].to_vec();
        let data: Vec<f64> = self
            .data(a)
            .chunks(d)
            .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(out_shape, data, rg, Op::L2NormLast { a }))
    }

    // ── Normalization ───────────────────────────────────────────────────

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!(
                "softmax axis {axis} out of range for shape {}",
                fmt_shape(&shape)
            )));
        }
        let (outer, lane, inner) = lanes(&shape, axis);
        let data = kernels::softmax(self.data(a), outer, lane, inner);
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(shape, data, rg, Op::Softmax { a, axis }))
    }

    /// Layer norm over the last axis with affine parameters; population
    /// variance, `eps` guards zero variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let width = *shape.last().ok_or_else(|| Error::Shape("layer_norm needs rank >= 1".into()))?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [width] {
                return Err(Error::Shape(format!(
                    "layer_norm {name} shape {} vs last-axis extent {width}",
                    fmt_shape(self.shape(v))
                )));
            }
        }
        let (data, means, inv_stds) =
            kernels::layer_norm(self.data(x), self.data(gamma), self.data(beta), width, eps);
        let rg = self.nodes[x.0].requires_grad
            || self.nodes[gamma.0].requires_grad
            || self.nodes[beta.0].requires_grad;
        Ok(self.push(shape, data, rg, Op::LayerNorm { x, gamma, beta, means, inv_stds }))
    }

    // ── Shape ops ───────────────────────────────────────────────────────

    pub fn permute(&mut self, a: Var, order: &[usize]) -> Result<Var> {
        let shape = self.shape(a);
        let mut seen = order.to_vec();
        seen.sort_unstable();
        if order.len() != shape.len() || seen != (0..shape.len()).collect::<Vec<_>>() {
            return Err(Error::Shape(format!(
                "permute order {order:?} is not a permutation of axes of {}",
                fmt_shape(shape)
            )));
        }
        let out_shape: Vec<usize> = order.iter().map(|&o| shape[o]).collect();
        let data = kernels::permute(self.data(a), shape, order);
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(out_shape, data, rg, Op::Permute { a, order: order.to_vec() }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.data(a).len() {
            return Err(Error::Shape(format!(
                "cannot reshape {} to {}",
                fmt_shape(self.shape(a)),
                fmt_shape(shape)
            )));
        }
        let data = self.data(a).to_vec();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(shape.to_vec(), data, rg, Op::Reshape { a }))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat of zero tensors".into()));
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::Shape(format!(
                "concat axis {axis} out of range for shape {}",
                fmt_shape(&first)
            )));
        }
        let mut axis_total = 0;
        for &p in parts {
            let s = self.shape(p);
            let same = s.len() == first.len()
                && s.iter().enumerate().all(|(d, &e)| d == axis || e == first[d]);
            if !same {
                return Err(Error::Shape(format!(
                    "concat extent mismatch off axis {axis}: {} vs {}",
                    fmt_shape(&first),
                    fmt_shape(s)
                )));
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let mut data = vec![0.0; numel(&out_shape)];
        let mut offset = 0;
        for &p in parts {
            let len = self.shape(p)[axis];
            scatter_range(&mut data, &out_shape, axis, offset, self.data(p));
            offset += len;
        }
        let rg = parts.iter().any(|&p| self.nodes[p.0].requires_grad);
        Ok(self.push(out_shape, data, rg, Op::Concat { parts: parts.to_vec(), axis }))
    }

    /// Contiguous range along one axis.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::Shape(format!(
                "narrow [{start}, {start}+{len}) on axis {axis} of {}",
                fmt_shape(&shape)
            )));
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let data = copy_range(self.data(a), &shape, axis, start, len);
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(out_shape, data, rg, Op::Narrow { a, axis, start }))
    }

    /// Splits along an axis into the given extents; inverse of [`Graph::concat`].
    pub fn split(&mut self, a: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let total: usize = sizes.iter().sum();
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || total != shape[axis] {
            return Err(Error::Shape(format!(
                "split sizes {sizes:?} do not cover axis {axis} of {}",
                fmt_shape(&shape)
            )));
        }
        let mut out = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &sz in sizes {
            out.push(self.narrow(a, axis, start, sz)?);
            start += sz;
        }
        Ok(out)
    }

    /// Picks one index along an axis and drops that axis.
    pub fn select(&mut self, a: Var, axis: usize, index: usize) -> Result<Var> {
        let v = self.narrow(a, axis, index, 1)?;
        let mut shape = self.shape(v).to_vec();
        shape.remove(axis);
        self.reshape(v, &shape)
    }

    /// Linear map over the frame axis shared across feature columns:
    /// x [F, M], weight [T, F], bias [T] -> [T, M].
    pub fn framewise_conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || ws[1] != xs[0] || bs[0] != ws[0] {
            return Err(Error::Shape(format!(
                "framewise_conv1d: x {}, weight {}, bias {} (need x [F,M], weight [T,F], bias [T])",
                fmt_shape(xs),
                fmt_shape(ws),
                fmt_shape(bs)
            )));
        }
        let (t, m) = (ws[0], xs[1]);
        let (mut data, _) = matmul_full(self.data(w), ws, self.data(x), xs)?;
        let bias = self.data(b);
        for ti in 0..t {
            for mi in 0..m {
                data[ti * m + mi] += bias[ti];
            }
        }
        let rg = self.nodes[x.0].requires_grad
            || self.nodes[w.0].requires_grad
            || self.nodes[b.0].requires_grad;
        Ok(self.push(vec![t, m], data, rg, Op::FrameConv { x, w, b }))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Populates `d loss / d leaf` for every trainable leaf. Leaf gradients
    /// accumulate across repeated calls; intermediate gradients are scratch.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {}",
                fmt_shape(&self.nodes[loss.0].shape)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            // Nothing trainable upstream.
            return Ok(());
        }
        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf) {
                if let Some(g) = node.grad.as_mut() {
                    g.iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
        self.nodes[loss.0].grad.as_mut().expect("requires_grad node has grad")[0] += 1.0;

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            #[allow(unused_mut)]
            let mut dout = match self.nodes[i].grad.as_ref() {
                Some(g) if g.iter().any(|&v| v != 0.0) => g.clone(),
                _ => continue,
            };
            let op = self.nodes[i].op.clone();
            #[cfg(any(test, feature = "fault-injection"))]
            if fault::is_corrupted(op.name()) {
                dout.iter_mut().for_each(|v| *v *= 1.001);
            }
            self.propagate(i, &op, &dout);
        }
        Ok(())
    }

    fn propagate(&mut self, node: usize, op: &Op, dout: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (da, db) = {
                    let (an, bn) = (&self.nodes[a.0], &self.nodes[b.0]);
                    let out_shape = &self.nodes[node].shape;
                    let da = an.requires_grad.then(|| {
                        let bt = transpose_last2(&bn.data, &bn.shape);
                        let bt_shape = swap_last2(&bn.shape);
                        let (full, full_shape) =
                            matmul_full(dout, out_shape, &bt, &bt_shape).expect("grad matmul");
                        reduce_to_shape(&full, &full_shape, &an.shape)
                    });
                    let db = bn.requires_grad.then(|| {
                        let at = transpose_last2(&an.data, &an.shape);
                        let at_shape = swap_last2(&an.shape);
                        let (full, full_shape) =
                            matmul_full(&at, &at_shape, dout, out_shape).expect("grad matmul");
                        reduce_to_shape(&full, &full_shape, &bn.shape)
                    });
                    (da, db)
                };
                if let Some(da) = da {
                    self.add_grad(*a, &da);
                }
                if let Some(db) = db {
                    self.add_grad(*b, &db);
                }
            }
            Op::Add { a, b } => {
                self.add_grad_folded(*a, dout);
                self.add_grad_folded(*b, dout);
            }
            Op::Sub { a, b } => {
                self.add_grad_folded(*a, dout);
                let neg: Vec<f64> = dout.iter().map(|v| -v).collect();
                self.add_grad_folded(*b, &neg);
            }
            Op::Mul { a, b } => {
                let (da, db) = {
                    let (an, bn) = (&self.nodes[a.0], &self.nodes[b.0]);
                    let da = an.requires_grad.then(|| {
                        let other = broadcast_at(&bn.data, dout.len());
                        dout.iter().zip(other).map(|(&d, o)| d * o).collect::<Vec<f64>>()
                    });
                    let db = bn.requires_grad.then(|| {
                        let other = broadcast_at(&an.data, dout.len());
                        dout.iter().zip(other).map(|(&d, o)| d * o).collect::<Vec<f64>>()
                    });
                    (da, db)
                };
                if let Some(da) = da {
                    self.add_grad_folded(*a, &da);
                }
                if let Some(db) = db {
                    self.add_grad_folded(*b, &db);
                }
            }
            Op::Scale { a, c } => {
                let da: Vec<f64> = dout.iter().map(|v| v * c).collect();
                self.add_grad(*a, &da);
            }
            Op::Gelu { a } => {
                let da: Vec<f64> = {
                    let x = &self.nodes[a.0].data;
                    dout.iter().zip(x.iter()).map(|(&d, &x)| d * kernels::gelu_deriv(x)).collect()
                };
                self.add_grad(*a, &da);
            }
            Op::Sqrt { a } => {
                let da: Vec<f64> = {
                    let y = &self.nodes[node].data;
                    dout.iter()
                        .zip(y.iter())
                        .map(|(&d, &y)| if y == 0.0 { 0.0 } else { d * 0.5 / y })
                        .collect()
                };
                self.add_grad(*a, &da);
            }
            Op::Sum { a } => {
                let da = vec![dout[0]; self.nodes[a.0].data.len()];
                self.add_grad(*a, &da);
            }
            Op::Mean { a } => {
                let n = self.nodes[a.0].data.len();
                let da = vec![dout[0] / n as f64; n];
                self.add_grad(*a, &da);
            }
            Op::L2NormLast { a } => {
                let da: Vec<f64> = {
                    let an = &self.nodes[a.0];
                    let d = *an.shape.last().expect("rank checked at forward");
                    let y = &self.nodes[node].data;
                    an.data
                        .iter()
                        .enumerate()
                        .map(|(i, &x)| {
                            let r = i / d;
                            if y[r] == 0.0 {
                                0.0
                            } else {
                                dout[r] * x / y[r]
                            }
                        })
                        .collect()
                };
                self.add_grad(*a, &da);
            }
            Op::Softmax { a, axis } => {
                let da = {
                    let shape = &self.nodes[node].shape;
                    let (outer, lane, inner) = lanes(shape, *axis);
                    kernels::softmax_backward(&self.nodes[node].data, dout, outer, lane, inner)
                };
                self.add_grad(*a, &da);
            }
            Op::LayerNorm { x, gamma, beta, means, inv_stds } => {
                let (dx, dgamma, dbeta) = {
                    let xn = &self.nodes[x.0];
                    let width = *xn.shape.last().expect("rank checked at forward");
                    kernels::layer_norm_backward(
                        &xn.data,
                        &self.nodes[gamma.0].data,
                        dout,
                        means,
                        inv_stds,
                        width,
                    )
                };
                self.add_grad(*x, &dx);
                self.add_grad(*gamma, &dgamma);
                self.add_grad(*beta, &dbeta);
            }
            Op::Permute { a, order } => {
                let da = {
                    let out_shape = &self.nodes[node].shape;
                    let inv = kernels::invert_permutation(order);
                    kernels::permute(dout, out_shape, &inv)
                };
                self.add_grad(*a, &da);
            }
            Op::Reshape { a } => {
                self.add_grad(*a, dout);
            }
            Op::Concat { parts, axis } => {
                let out_shape = self.nodes[node].shape.clone();
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].shape[*axis];
                    if self.nodes[p.0].requires_grad {
                        let dp = copy_range(dout, &out_shape, *axis, offset, len);
                        self.add_grad(p, &dp);
                    }
                    offset += len;
                }
            }
            Op::Narrow { a, axis, start } => {
                let da = {
                    let an = &self.nodes[a.0];
                    let mut buf = vec![0.0; an.data.len()];
                    scatter_range(&mut buf, &an.shape, *axis, *start, dout);
                    buf
                };
                self.add_grad(*a, &da);
            }
            Op::FrameConv { x, w, b } => {
                let (dx, dw, db) = {
                    let xn = &self.nodes[x.0];
                    let wn = &self.nodes[w.0];
                    let m = xn.shape[1];
                    let dout_shape = [wn.shape[0], m];
                    let dx = xn.requires_grad.then(|| {
                        let wt = transpose_last2(&wn.data, &wn.shape);
                        matmul_full(&wt, &swap_last2(&wn.shape), dout, &dout_shape)
                            .expect("grad matmul")
                            .0
                    });
                    let dw = wn.requires_grad.then(|| {
                        let xt = transpose_last2(&xn.data, &xn.shape);
                        matmul_full(dout, &dout_shape, &xt, &swap_last2(&xn.shape))
                            .expect("grad matmul")
                            .0
                    });
                    let db = self.nodes[b.0]
                        .requires_grad
                        .then(|| dout.chunks(m).map(|row| row.iter().sum()).collect::<Vec<f64>>());
                    (dx, dw, db)
                };
                if let Some(dx) = dx {
                    self.add_grad(*x, &dx);
                }
                if let Some(dw) = dw {
                    self.add_grad(*w, &dw);
                }
                if let Some(db) = db {
                    self.add_grad(*b, &db);
                }
            }
        }
    }

    fn add_grad(&mut self, v: Var, contrib: &[f64]) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let g = node.grad.as_mut().expect("requires_grad node has grad");
        debug_assert_eq!(g.len(), contrib.len());
        for (gi, &c) in g.iter_mut().zip(contrib.iter()) {
            *gi += c;
        }
    }

    /// Like `add_grad`, folding the contribution down when the target was the
    /// smaller (cyclically tiled) operand.
    fn add_grad_folded(&mut self, v: Var, contrib: &[f64]) {
        let n = self.nodes[v.0].data.len();
        if !self.nodes[v.0].requires_grad {
            return;
        }
        if n == contrib.len() {
            self.add_grad(v, contrib);
        } else {
            let folded = kernels::fold_cyclic(contrib, n);
            self.add_grad(v, &folded);
        }
    }
}

/// (outer, lane, inner) extents for iterating an axis.
fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let lane = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, lane, inner)
}

/// Validated batched matmul on raw parts; returns (data, shape).
pub(crate) fn matmul_full(
    a: &[f64],
    a_shape: &[usize],
    b: &[f64],
    b_shape: &[usize],
) -> Result<(Vec<f64>, Vec<usize>)> {
    if a_shape.len() < 2 || b_shape.len() < 2 {
        return Err(Error::Shape(format!(
            "matmul needs rank >= 2: {} x {}",
            fmt_shape(a_shape),
            fmt_shape(b_shape)
        )));
    }
    let (m, k) = (a_shape[a_shape.len() - 2], a_shape[a_shape.len() - 1]);
    let (k2, n) = (b_shape[b_shape.len() - 2], b_shape[b_shape.len() - 1]);
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul inner dims differ: {} x {}",
            fmt_shape(a_shape),
            fmt_shape(b_shape)
        )));
    }
    let a_batch = &a_shape[..a_shape.len() - 2];
    let b_batch = &b_shape[..b_shape.len() - 2];
    let batch_rank = a_batch.len().max(b_batch.len());
    let mut batch_dims = vec![1usize; batch_rank];
    for i in 0..batch_rank {
        let ad = if i < batch_rank - a_batch.len() { 1 } else { a_batch[i - (batch_rank - a_batch.len())] };
        let bd = if i < batch_rank - b_batch.len() { 1 } else { b_batch[i - (batch_rank - b_batch.len())] };
        if ad != bd && ad != 1 && bd != 1 {
            return Err(Error::Shape(format!(
                "matmul leading dims not broadcastable: {} x {}",
                fmt_shape(a_shape),
                fmt_shape(b_shape)
            )));
        }
        batch_dims[i] = ad.max(bd);
    }
    let a_strides = kernels::batch_strides(&batch_dims, a_batch, m * k);
    let b_strides = kernels::batch_strides(&batch_dims, b_batch, k * n);
    let data = kernels::matmul(a, b, &batch_dims, &a_strides, &b_strides, m, k, n);
    let mut shape = batch_dims;
    shape.push(m);
    shape.push(n);
    Ok((data, shape))
}

fn swap_last2(shape: &[usize]) -> Vec<usize> {
    let mut s = shape.to_vec();
    let r = s.len();
    s.swap(r - 2, r - 1);
    s
}

fn transpose_last2(data: &[f64], shape: &[usize]) -> Vec<f64> {
    let r = shape.len();
    let mut order: Vec<usize> = (0..r).collect();
    order.swap(r - 2, r - 1);
    kernels::permute(data, shape, &order)
}

/// Sums `src` down to `dst_shape`, where dst dims are equal to src dims or 1
/// (or missing on the left). Used to fold broadcast matmul batch gradients.
fn reduce_to_shape(src: &[f64], src_shape: &[usize], dst_shape: &[usize]) -> Vec<f64> {
    if src_shape == dst_shape {
        return src.to_vec();
    }
    let rank = src_shape.len();
    let pad = rank - dst_shape.len();
    let mut out = vec![0.0; numel(dst_shape)];
    for (i, &v) in src.iter().enumerate() {
        let mut rem = i;
        let mut dst = 0;
        let mut stride = 1;
        // Build the destination flat index from the right.
        for d in (0..rank).rev() {
            let c = rem % src_shape[d];
            rem /= src_shape[d];
            if d >= pad {
                let dd = dst_shape[d - pad];
                let cc = if dd == 1 { 0 } else { c };
                dst += cc * stride;
                stride *= dd;
            }
        }
        out[dst] += v;
    }
    out
}

/// The smaller operand's data tiled (cyclically) to `len`, or borrowed as-is.
fn broadcast_at(data: &[f64], len: usize) -> Vec<f64> {
    if data.len() == len {
        data.to_vec()
    } else {
        (0..len).map(|i| data[i % data.len()]).collect()
    }
}

fn copy_range(data: &[f64], shape: &[usize], axis: usize, start: usize, len: usize) -> Vec<f64> {
    let (outer, asz, inner) = lanes(shape, axis);
    let mut out = vec![0.0; outer * len * inner];
    for o in 0..outer {
        let src = (o * asz + start) * inner;
        let dst = o * len * inner;
        out[dst..dst + len * inner].copy_from_slice(&data[src..src + len * inner]);
    }
    out
}

/// Writes `src` (with `len = src.len() / (outer * inner)` along the axis)
/// into `data` at `start`.
fn scatter_range(data: &mut [f64], shape: &[usize], axis: usize, start: usize, src: &[f64]) {
    let (outer, asz, inner) = lanes(shape, axis);
    let len = src.len() / (outer * inner).max(1);
    for o in 0..outer {
        let dst = (o * asz + start) * inner;
        let s = o * len * inner;
        for (slot, &v) in data[dst..dst + len * inner].iter_mut().zip(&src[s..s + len * inner]) {
            *slot += v;
        }
    }
}

#[cfg(any(test, feature = "fault-injection"))]
pub mod fault {
    //! Test hook: corrupt one op's backward rule (scales its incoming
    //! gradient by 1.001) so gradient checks can demonstrate they catch bad
    //! rules. Thread-local, so concurrent tests stay unaffected.
    use std::cell::RefCell;

    thread_local! {
        static CORRUPT: RefCell<Option<String>> = const { RefCell::new(None) };
    }

    pub fn set_corrupted_op(name: Option<&str>) {
        CORRUPT.with(|c| *c.borrow_mut() = name.map(String::from));
    }

    pub(crate) fn is_corrupted(name: &str) -> bool {
        CORRUPT.with(|c| c.borrow().as_deref() == Some(name))
    }
}
