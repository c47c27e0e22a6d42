//! Reverse-mode automatic differentiation over dense real tensors.
//!
//! A [`Graph`] is a tape: every primitive appends one node holding its
//! output value and the handles of its inputs, so inputs always precede the
//! operations that consume them. [`Graph::backward`] walks the tape in
//! reverse and accumulates gradients additively, which makes reusing a value
//! in several places correct without any bookkeeping by the caller.

use std::collections::HashMap;
use std::sync::Arc;

use super::kernels;
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A primitive whose forward value is computed by the caller and whose
/// vector-Jacobian product is supplied here.
pub trait CustomOp<R: Real>: Send + Sync {
    fn name(&self) -> &str;

    /// Returns one gradient per input, each with the input's length.
    fn backward(&self, inputs: &[&[R]], output: &[R], grad_out: &[R]) -> Vec<Vec<R>>;
}

enum Op<R: Real> {
    Leaf,
    Param,
    Matmul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, R),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Log(Var),
    Exp(Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<R>, rstd: Vec<R> },
    Conv2d { x: Var, kernels: Var, bias: Option<Var>, stride: usize, cols: Vec<R> },
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize },
    Reshape(Var),
    Permute { x: Var, axes: Vec<usize> },
    Slice { x: Var, axis: usize, start: usize },
    Concat { xs: Vec<Var>, axis: usize },
    Gather { x: Var, index: Arc<[usize]> },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<R>> },
}

struct Node<R: Real> {
    shape: Vec<usize>,
    value: Vec<R>,
    op: Op<R>,
    requires_grad: bool,
}

/// Tape of executed primitives.
pub struct Graph<R: Real> {
    nodes: Vec<Node<R>>,
    params: HashMap<ParamId, Var>,
    grads: Vec<Option<Vec<R>>>,
}

impl<R: Real> Default for Graph<R> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

impl<R: Real> Graph<R> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<R>, op: Op<R>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a tensor as a leaf; it is differentiated iff the tensor
    /// requests gradients.
    pub fn input(&mut self, t: &Tensor<R>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Records a non-differentiable leaf.
    pub fn constant(&mut self, shape: &[usize], data: Vec<R>) -> Var {
        self.push(shape.to_vec(), data, Op::Leaf, false)
    }

    pub fn scalar_const(&mut self, value: R) -> Var {
        self.push(vec![], vec![value], Op::Leaf, false)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<R>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let t = store.tensor(id);
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &[R] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor<R> {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape consistent")
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> R {
        self.nodes[v.0].value[0]
    }

    fn dims2(&self, v: Var, op: &str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [m, n] => Ok((*m, *n)),
            s => Err(Error::Shape(format!("{op}: expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let out = kernels::matmul(self.value(a), self.value(b), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::Matmul(a, b), rg))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &str, f: impl Fn(R, R) -> R, op: Op<R>) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(name, self.shape(a), self.shape(b)));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    fn row_broadcast(&mut self, x: Var, row: Var, name: &str, f: impl Fn(R, R) -> R, op: Op<R>) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&1);
        if self.value(row).len() != n || self.shape(x).is_empty() {
            return Err(shape_err(name, self.shape(x), self.shape(row)));
        }
        let r = self.value(row);
        let out = self.value(x).iter().enumerate().map(|(i, &v)| f(v, r[i % n])).collect();
        let rg = self.rg(&[x, row]);
        Ok(self.push(self.shape(x).to_vec(), out, op, rg))
    }

    /// `x + row` with `row` broadcast along every leading axis.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast(x, row, "add_row", |a, b| a + b, Op::AddRow(x, row))
    }

    /// `x ⊙ row` with `row` broadcast along every leading axis.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast(x, row, "mul_row", |a, b| a * b, Op::MulRow(x, row))
    }

    fn unary(&mut self, x: Var, f: impl Fn(R) -> R, op: Op<R>) -> Var {
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), out, op, rg)
    }

    pub fn scale(&mut self, x: Var, c: R) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: R) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(R::zero()), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| R::one() / (R::one() + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, R::tanh, Op::Tanh(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, R::ln, Op::Log(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, R::exp, Op::Exp(x))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_masked(x, axis, None)
    }

    /// Softmax along `axis`; positions with a false `mask` entry (same
    /// layout as `x`) get probability exactly zero.
    pub fn softmax_masked(&mut self, x: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!("softmax axis {axis} for shape {shape:?}")));
        }
        if let Some(m) = mask {
            if m.len() != self.value(x).len() {
                return Err(Error::Shape(format!("softmax mask of length {} for shape {shape:?}", m.len())));
            }
        }
        let out = kernels::softmax(self.value(x), &shape, axis, mask);
        let rg = self.rg(&[x]);
        Ok(self.push(shape, out, Op::Softmax { x, axis }, rg))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().ok_or_else(|| Error::Shape("log_softmax of a scalar".into()))?;
        let out = kernels::log_softmax_rows(self.value(x), cols);
        let rg = self.rg(&[x]);
        Ok(self.push(shape, out, Op::LogSoftmax(x), rg))
    }

    /// Normalizes every vector along the last axis, then applies `gain` and
    /// `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: R) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::Shape("layer_norm of a scalar".into()))?;
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(shape_err("layer_norm", &shape, self.shape(gain)));
        }
        let xs = self.value(x);
        let (gv, bv) = (self.value(gain), self.value(bias));
        let rows = xs.len() / d;
        let mut xhat = vec![R::zero(); xs.len()];
        let mut rstd = vec![R::zero(); rows];
        let mut out = vec![R::zero(); xs.len()];
        let dn = R::from_usize_lossy(d);
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<R>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<R>() / dn;
            let rs = R::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for i in 0..d {
                let h = (row[i] - mean) * rs;
                xhat[r * d + i] = h;
                out[r * d + i] = h * gv[i] + bv[i];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(shape, out, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg))
    }

    /// 3×3 cross-correlation of `x: cin×h×w` with `kernels: cout×cin×3×3`,
    /// zero padding of one on each spatial side.
    pub fn conv2d(&mut self, x: Var, kernels: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        let ks = self.shape(kernels).to_vec();
        if ks.len() != 4 || ks[2] != 3 || ks[3] != 3 {
            return Err(Error::Unsupported(format!("conv2d supports 3×3 kernels only, got kernel shape {ks:?}")));
        }
        if !(1..=2).contains(&stride) {
            return Err(Error::Unsupported(format!("conv2d stride {stride}")));
        }
        let xs = self.shape(x).to_vec();
        let [cin, h, w] = xs[..] else {
            return Err(Error::Shape(format!("conv2d input must be cin×h×w, got {xs:?}")));
        };
        let cout = ks[0];
        if ks[1] != cin {
            return Err(shape_err("conv2d", &xs, &ks));
        }
        if let Some(b) = bias {
            if self.value(b).len() != cout {
                return Err(shape_err("conv2d bias", &ks, self.shape(b)));
            }
        }
        let (ho, wo) = (kernels::conv_out_len(h, stride), kernels::conv_out_len(w, stride));
        let cols = kernels::im2col(self.value(x), cin, h, w, stride);
        let mut out = vec![R::zero(); cout * ho * wo];
        kernels::gemm_acc(self.value(kernels), &cols, &mut out, cout, cin * 9, ho * wo);
        if let Some(b) = bias {
            let bv = self.value(b);
            for (c, chunk) in out.chunks_mut(ho * wo).enumerate() {
                chunk.iter_mut().for_each(|v| *v += bv[c]);
            }
        }
        let mut deps = vec![x, kernels];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(vec![cout, ho, wo], out, Op::Conv2d { x, kernels, bias, stride, cols }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(vec![], vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = R::from_usize_lossy(self.value(x).len().max(1));
        let s = self.value(x).iter().copied().sum::<R>() / n;
        let rg = self.rg(&[x]);
        self.push(vec![], vec![s], Op::Mean(x), rg)
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!("sum_axis {axis} for shape {shape:?}")));
        }
        let (outer, n, inner) = kernels::axis_extents(&shape, axis);
        let xs = self.value(x);
        let mut out = vec![R::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..n {
                for k in 0..inner {
                    out[o * inner + k] += xs[o * n * inner + i * inner + k];
                }
            }
        }
        let mut new_shape = shape;
        new_shape.remove(axis);
        let rg = self.rg(&[x]);
        Ok(self.push(new_shape, out, Op::SumAxis { x, axis }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(shape_err("reshape", self.shape(x), shape));
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x), rg))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::Shape(format!("permute {axes:?} for shape {shape:?}")));
        }
        let map = permute_map(&shape, axes);
        let xs = self.value(x);
        let out = map.iter().map(|&i| xs[i]).collect();
        let new_shape = axes.iter().map(|&a| shape[a]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(new_shape, out, Op::Permute { x, axes: axes.to_vec() }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.dims2(x, "transpose")?;
        self.permute(x, &[1, 0])
    }

    /// Elements `start..start+len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::Shape(format!("slice {start}..{} on axis {axis} of shape {shape:?}", start + len)));
        }
        let (outer, n, inner) = kernels::axis_extents(&shape, axis);
        let xs = self.value(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            out.extend_from_slice(&xs[base..base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(new_shape, out, Op::Slice { x, axis, start }, rg))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?).to_vec();
        if axis >= first.len() {
            return Err(Error::Shape(format!("concat axis {axis} for shape {first:?}")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::axis_extents(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let n = self.shape(v)[axis];
                out.extend_from_slice(&self.value(v)[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut new_shape = first;
        new_shape[axis] = total;
        let rg = self.rg(xs);
        Ok(self.push(new_shape, out, Op::Concat { xs: xs.to_vec(), axis }, rg))
    }

    /// Flat gather: `out[i] = x[index[i]]`, shaped `shape`.
    pub fn gather(&mut self, x: Var, index: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        let n = self.value(x).len();
        if shape.iter().product::<usize>() != index.len() {
            return Err(Error::Shape(format!("gather of {} indices into {shape:?}", index.len())));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::Index { index: bad, len: n });
        }
        let xs = self.value(x);
        let out = index.iter().map(|&i| xs[i]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(shape.to_vec(), out, Op::Gather { x, index }, rg))
    }

    /// Records a caller-computed primitive with its own backward rule.
    pub fn custom(&mut self, inputs: &[Var], shape: Vec<usize>, value: Vec<R>, op: Box<dyn CustomOp<R>>) -> Result<Var> {
        if shape.iter().product::<usize>() != value.len() {
            return Err(Error::Shape(format!("{}: value does not fill {shape:?}", op.name())));
        }
        let rg = self.rg(inputs);
        Ok(self.push(shape, value, Op::Custom { inputs: inputs.to_vec(), op }, rg))
    }

    /// Back-propagates from a scalar `loss`, replacing any gradients from a
    /// previous call.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<R>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![R::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            self.backprop_node(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[R]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every parameter leaf touched by the last `backward`.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[R])> + '_ {
        self.params.iter().filter_map(|(&id, &v)| self.grad(v).map(|g| (id, g)))
    }

    fn backprop_node(&self, i: usize, g: &[R], grads: &mut [Option<Vec<R>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let val = |v: Var| self.nodes[v.0].value.as_slice();
        let mut send = |v: Var, gv: Vec<R>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&gv).for_each(|(a, &b)| *a += b),
                slot @ None => *slot = Some(gv),
            }
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Matmul(a, b) => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                if self.nodes[a.0].requires_grad {
                    let mut ga = vec![R::zero(); m * k];
                    kernels::gemm_a_bt_acc(g, val(*b), &mut ga, m, n, k);
                    send(*a, ga);
                }
                if self.nodes[b.0].requires_grad {
                    let mut gb = vec![R::zero(); k * n];
                    kernels::gemm_at_b_acc(val(*a), g, &mut gb, k, m, n);
                    send(*b, gb);
                }
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                send(*a, g.iter().zip(bv).map(|(&gi, &bi)| gi * bi).collect());
                send(*b, g.iter().zip(av).map(|(&gi, &ai)| gi * ai).collect());
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                send(*a, g.iter().zip(bv).map(|(&gi, &bi)| gi / bi).collect());
                send(*b, g.iter().zip(y).zip(bv).map(|((&gi, &yi), &bi)| -gi * yi / bi).collect());
            }
            Op::AddRow(x, row) => {
                let n = val(*row).len();
                let mut gr = vec![R::zero(); n];
                g.iter().enumerate().for_each(|(i, &v)| gr[i % n] += v);
                send(*x, g.to_vec());
                send(*row, gr);
            }
            Op::MulRow(x, row) => {
                let (xv, rv) = (val(*x), val(*row));
                let n = rv.len();
                let mut gr = vec![R::zero(); n];
                g.iter().zip(xv).enumerate().for_each(|(i, (&gi, &xi))| gr[i % n] += gi * xi);
                send(*x, g.iter().enumerate().map(|(i, &gi)| gi * rv[i % n]).collect());
                send(*row, gr);
            }
            Op::Scale(x, c) => send(*x, g.iter().map(|&v| v * *c).collect()),
            Op::AddScalar(x) => send(*x, g.to_vec()),
            Op::Relu(x) => send(*x, g.iter().zip(val(*x)).map(|(&gi, &xi)| if xi > R::zero() { gi } else { R::zero() }).collect()),
            Op::Sigmoid(x) => send(*x, g.iter().zip(y).map(|(&gi, &s)| gi * s * (R::one() - s)).collect()),
            Op::Tanh(x) => send(*x, g.iter().zip(y).map(|(&gi, &t)| gi * (R::one() - t * t)).collect()),
            Op::Log(x) => send(*x, g.iter().zip(val(*x)).map(|(&gi, &xi)| gi / xi).collect()),
            Op::Exp(x) => send(*x, g.iter().zip(y).map(|(&gi, &yi)| gi * yi).collect()),
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = kernels::axis_extents(&node.shape, *axis);
                let mut gx = vec![R::zero(); y.len()];
                for o in 0..outer {
                    for k in 0..inner {
                        let idx = |j: usize| o * n * inner + j * inner + k;
                        let dot: R = (0..n).map(|j| y[idx(j)] * g[idx(j)]).sum();
                        for j in 0..n {
                            gx[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
                send(*x, gx);
            }
            Op::LogSoftmax(x) => {
                let cols = *node.shape.last().unwrap_or(&1);
                let mut gx = vec![R::zero(); y.len()];
                for ((gr, yr), out) in g.chunks(cols).zip(y.chunks(cols)).zip(gx.chunks_mut(cols)) {
                    let s: R = gr.iter().copied().sum();
                    for j in 0..cols {
                        out[j] = gr[j] - yr[j].exp() * s;
                    }
                }
                send(*x, gx);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let gv = val(*gain);
                let d = gv.len();
                let dn = R::from_usize_lossy(d);
                let mut gg = vec![R::zero(); d];
                let mut gb = vec![R::zero(); d];
                let mut gx = vec![R::zero(); y.len()];
                for r in 0..rstd.len() {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut mean_dh = R::zero();
                    let mut mean_dh_h = R::zero();
                    for i in 0..d {
                        gg[i] += gr[i] * hr[i];
                        gb[i] += gr[i];
                        let dh = gr[i] * gv[i];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[i];
                    }
                    mean_dh /= dn;
                    mean_dh_h /= dn;
                    for i in 0..d {
                        let dh = gr[i] * gv[i];
                        gx[r * d + i] = rstd[r] * (dh - mean_dh - hr[i] * mean_dh_h);
                    }
                }
                send(*x, gx);
                send(*gain, gg);
                send(*bias, gb);
            }
            Op::Conv2d { x, kernels: k, bias, stride, cols } => {
                let xs = &self.nodes[x.0].shape;
                let (cin, h, w) = (xs[0], xs[1], xs[2]);
                let cout = node.shape[0];
                let hw = node.shape[1] * node.shape[2];
                if self.nodes[k.0].requires_grad {
                    let mut gk = vec![R::zero(); cout * cin * 9];
                    kernels::gemm_a_bt_acc(g, cols, &mut gk, cout, hw, cin * 9);
                    send(*k, gk);
                }
                if self.nodes[x.0].requires_grad {
                    let mut gcols = vec![R::zero(); cin * 9 * hw];
                    kernels::gemm_at_b_acc(val(*k), g, &mut gcols, cin * 9, cout, hw);
                    send(*x, kernels::col2im(&gcols, cin, h, w, *stride));
                }
                if let Some(b) = bias {
                    send(*b, g.chunks(hw).map(|c| c.iter().copied().sum()).collect());
                }
            }
            Op::Sum(x) => send(*x, vec![g[0]; val(*x).len()]),
            Op::Mean(x) => {
                let n = val(*x).len();
                send(*x, vec![g[0] / R::from_usize_lossy(n.max(1)); n]);
            }
            Op::SumAxis { x, axis } => {
                let (outer, n, inner) = kernels::axis_extents(&self.nodes[x.0].shape, *axis);
                let mut gx = vec![R::zero(); outer * n * inner];
                for o in 0..outer {
                    for i in 0..n {
                        for k in 0..inner {
                            gx[o * n * inner + i * inner + k] = g[o * inner + k];
                        }
                    }
                }
                send(*x, gx);
            }
            Op::Reshape(x) => send(*x, g.to_vec()),
            Op::Permute { x, axes } => {
                let map = permute_map(&self.nodes[x.0].shape, axes);
                let mut gx = vec![R::zero(); g.len()];
                for (o, &i) in map.iter().enumerate() {
                    gx[i] = g[o];
                }
                send(*x, gx);
            }
            Op::Slice { x, axis, start } => {
                let xs = &self.nodes[x.0].shape;
                let (outer, n, inner) = kernels::axis_extents(xs, *axis);
                let len = node.shape[*axis];
                let mut gx = vec![R::zero(); outer * n * inner];
                for o in 0..outer {
                    let base = o * n * inner + start * inner;
                    gx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                send(*x, gx);
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = kernels::axis_extents(&node.shape, *axis);
                let mut offset = 0;
                for &v in xs {
                    let n = self.nodes[v.0].shape[*axis];
                    let mut gv = Vec::with_capacity(outer * n * inner);
                    for o in 0..outer {
                        let base = o * total * inner + offset * inner;
                        gv.extend_from_slice(&g[base..base + n * inner]);
                    }
                    offset += n;
                    send(v, gv);
                }
            }
            Op::Gather { x, index } => {
                let mut gx = vec![R::zero(); val(*x).len()];
                for (&i, &gi) in index.iter().zip(g) {
                    gx[i] += gi;
                }
                send(*x, gx);
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&[R]> = inputs.iter().map(|&v| val(v)).collect();
                let gs = op.backward(&ins, y, g);
                debug_assert_eq!(gs.len(), inputs.len(), "{} returned wrong arity", op.name());
                for (&v, gv) in inputs.iter().zip(gs) {
                    send(v, gv);
                }
            }
        }
    }
}

/// For each output flat index of a permutation, the input flat index.
fn permute_map(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let nd = shape.len();
    let mut in_strides = vec![1; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; nd];
    for _ in 0..n {
        map.push(idx.iter().zip(axes).map(|(&i, &a)| i * in_strides[a]).sum());
        for d in (0..nd).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}
