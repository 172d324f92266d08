//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is the tape for one forward pass: every primitive appends a
//! node whose inputs were created earlier, so creation order is already a
//! topological order and [`Graph::backward`] simply walks it in reverse.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::kernels::{self, ConvGeom};
use crate::error::{contract_err, dim_err, Error, Result};
use crate::nn::Param;
use crate::tensor::{broadcast_shape, numel, Real, Tensor};

/// Whether batch normalization uses batch statistics (and updates its
/// running averages) or the stored running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    Train,
    #[default]
    Eval,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Offset(usize),
    MatMul { a: usize, b: usize, trans_b: bool },
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Concat { inputs: Vec<usize>, axis: usize },
    Narrow { input: usize, axis: usize, start: usize },
    Relu(usize),
    Sigmoid(usize),
    Gelu(usize),
    Softmax { input: usize, axis: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<T>, rstd: Vec<T> },
    BatchNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<T>, rstd: Vec<T>, batch_stats: bool },
    Conv2d { x: usize, w: usize, geom: ConvGeom },
    MeanAxes { input: usize },
    Sum(usize),
    CrossEntropy { logits: usize, labels: Vec<usize>, probs: Vec<T> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::MatMul { .. } => "matmul",
            Op::Reshape(..) => "reshape",
            Op::Permute(..) => "permute",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Gelu(..) => "gelu",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Conv2d { .. } => "conv2d",
            Op::MeanAxes { .. } => "mean",
            Op::Sum(..) => "sum",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Offset(a)
            | Op::Reshape(a)
            | Op::Permute(a, _)
            | Op::Narrow { input: a, .. }
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Gelu(a)
            | Op::Softmax { input: a, .. }
            | Op::MeanAxes { input: a, .. }
            | Op::Sum(a)
            | Op::CrossEntropy { logits: a, .. } => vec![*a],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::LayerNorm { x, gamma, beta, .. } | Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Conv2d { x, w, .. } => vec![*x, *w],
        }
    }
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// The tape of one forward pass.
pub struct Graph<T: Real = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<HashMap<String, usize>>,
    buffer_updates: RefCell<Vec<(String, Tensor<T>)>>,
    mode: Mode,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Real = f32> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({:?})", self.id, self.graph.nodes.borrow()[self.id].value)
    }
}

impl<T: Real> Graph<T> {
    pub fn new(mode: Mode) -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            buffer_updates: RefCell::new(Vec::new()),
            mode,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>) -> Result<Var<'_, T>> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = op.inputs().iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Ok(Var {
            graph: self,
            id: nodes.len() - 1,
        })
    }

    fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    /// Records a leaf whose gradient is reported by [`Grads::wrt`].
    pub fn input(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    /// Binds a model parameter. Repeated binds of the same name share one
    /// node, so fan-out gradients accumulate.
    pub fn param(&self, p: &Param<T>) -> Var<'_, T> {
        if let Some(&id) = self.params.borrow().get(&p.name) {
            return Var { graph: self, id };
        }
        let v = self.leaf(p.value.clone(), p.trainable);
        self.params.borrow_mut().insert(p.name.clone(), v.id);
        v
    }

    /// Queues a new value for a non-trainable buffer (running statistics).
    pub(crate) fn record_buffer(&self, name: &str, value: Tensor<T>) {
        self.buffer_updates.borrow_mut().push((name.to_string(), value));
    }

    /// Drains buffer updates queued during a training forward pass.
    pub fn take_buffer_updates(&self) -> Vec<(String, Tensor<T>)> {
        std::mem::take(&mut self.buffer_updates.borrow_mut())
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse accumulation from a one-element `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Grads<T>> {
        if !std::ptr::eq(loss.graph, self) {
            return Err(contract_err!("loss was recorded on a different graph"));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(contract_err!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(root.value.shape().to_vec(), T::one()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let contributions = backward_op(&nodes, node, &g)?;
            grads[id] = Some(g);
            for (input, contrib) in contributions {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                            *a = *a + *c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(Grads {
            grads,
            params: self.params.borrow().clone(),
        })
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads<T: Real = f32> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<String, usize>,
}

impl<T: Real> Grads<T> {
    /// Gradient with respect to a recorded value; `None` when the value
    /// does not influence the loss or does not require gradients.
    pub fn wrt(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradient of a named parameter, if it took part in the pass.
    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).and_then(|&id| self.grads[id].as_ref())
    }

    /// Gradient of `p`, or zeros when `p` did not influence the loss.
    pub fn param_or_zeros(&self, p: &Param<T>) -> Tensor<T> {
        self.param(&p.name)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(p.value.shape().to_vec()))
    }
}

fn tensor<T: Real>(shape: &[usize], data: Vec<T>) -> Tensor<T> {
    Tensor::from_parts_unchecked(shape.to_vec(), data)
}

fn backward_op<T: Real>(nodes: &[Node<T>], node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(usize, Tensor<T>)>> {
    let val = |i: usize| nodes[i].value.as_ref();
    let out = node.value.as_ref();
    Ok(match &node.op {
        Op::Leaf => vec![],
        Op::Add(a, b) => vec![(*a, g.sum_to(val(*a).shape())?), (*b, g.sum_to(val(*b).shape())?)],
        Op::Sub(a, b) => vec![
            (*a, g.sum_to(val(*a).shape())?),
            (*b, g.map(|v| -v).sum_to(val(*b).shape())?),
        ],
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let shape = g.shape();
            let ga = g.zip_with(&bv.broadcast_to(shape)?, |x, y| x * y)?;
            let gb = g.zip_with(&av.broadcast_to(shape)?, |x, y| x * y)?;
            vec![(*a, ga.sum_to(av.shape())?), (*b, gb.sum_to(bv.shape())?)]
        }
        Op::Scale(a, c) => vec![(*a, g.map(|v| v * *c))],
        Op::Offset(a) => vec![(*a, g.clone())],
        Op::MatMul { a, b, trans_b } => {
            let (av, bv) = (val(*a), val(*b));
            let (batch, m, k) = mat_dims(av.shape());
            let n = *g.shape().last().unwrap();
            // out = a·b (b: [k,n]) or a·bᵀ (b: [n,k])
            let b_kn = if *trans_b { kernels::transpose(bv.data(), batch, n, k) } else { bv.data().to_vec() };
            let ga = kernels::matmul(g.data(), &kernels::transpose(&b_kn, batch, k, n), batch, m, n, k);
            let gb_kn = kernels::matmul(&kernels::transpose(av.data(), batch, m, k), g.data(), batch, k, m, n);
            let gb = if *trans_b { kernels::transpose(&gb_kn, batch, k, n) } else { gb_kn };
            vec![(*a, tensor(av.shape(), ga)), (*b, tensor(bv.shape(), gb))]
        }
        Op::Reshape(a) => vec![(*a, tensor(val(*a).shape(), g.data().to_vec()))],
        Op::Permute(a, perm) => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            vec![(*a, g.permute(&inv)?)]
        }
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = kernels::axis_split(g.shape(), *axis);
            let mut start = 0;
            let mut res = Vec::with_capacity(inputs.len());
            for &i in inputs {
                let shape = val(i).shape();
                let len = shape[*axis];
                let mut data = Vec::with_capacity(numel(shape));
                for o in 0..outer {
                    let base = (o * total + start) * inner;
                    data.extend_from_slice(&g.data()[base..base + len * inner]);
                }
                res.push((i, tensor(shape, data)));
                start += len;
            }
            res
        }
        Op::Narrow { input, axis, start } => {
            let shape = val(*input).shape();
            let (outer, total, inner) = kernels::axis_split(shape, *axis);
            let len = g.shape()[*axis];
            let mut data = vec![T::zero(); numel(shape)];
            for o in 0..outer {
                let dst = (o * total + start) * inner;
                let src = o * len * inner;
                data[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
            }
            vec![(*input, tensor(shape, data))]
        }
        Op::Relu(a) => vec![(*a, g.zip_with(val(*a), |gv, x| if x > T::zero() { gv } else { T::zero() })?)],
        Op::Sigmoid(a) => vec![(*a, g.zip_with(out, |gv, y| gv * y * (T::one() - y))?)],
        Op::Gelu(a) => vec![(*a, g.zip_with(val(*a), |gv, x| gv * kernels::gelu_grad(x))?)],
        Op::Softmax { input, axis } => vec![(
            *input,
            tensor(out.shape(), kernels::softmax_backward(out.data(), g.data(), out.shape(), *axis)),
        )],
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let gv = val(*gamma);
            let (gx, gg, gb) = kernels::layer_norm_backward(xhat, rstd, gv.data(), g.data());
            vec![
                (*x, tensor(out.shape(), gx)),
                (*gamma, tensor(gv.shape(), gg)),
                (*beta, tensor(gv.shape(), gb)),
            ]
        }
        Op::BatchNorm { x, gamma, beta, xhat, rstd, batch_stats } => {
            let gv = val(*gamma);
            let c = gv.numel();
            let rows = xhat.len() / c;
            let mut gg = vec![T::zero(); c];
            let mut gb = vec![T::zero(); c];
            for (gr, hr) in g.data().chunks_exact(c).zip(xhat.chunks_exact(c)) {
                for j in 0..c {
                    gg[j] = gg[j] + gr[j] * hr[j];
                    gb[j] = gb[j] + gr[j];
                }
            }
            let mut gx = vec![T::zero(); xhat.len()];
            let rf = T::lit(rows as f64);
            for ((gxr, gr), hr) in gx.chunks_exact_mut(c).zip(g.data().chunks_exact(c)).zip(xhat.chunks_exact(c)) {
                for j in 0..c {
                    let scale = gv.data()[j] * rstd[j];
                    gxr[j] = if *batch_stats {
                        scale * (gr[j] - gb[j] / rf - hr[j] * gg[j] / rf)
                    } else {
                        scale * gr[j]
                    };
                }
            }
            vec![
                (*x, tensor(out.shape(), gx)),
                (*gamma, tensor(gv.shape(), gg)),
                (*beta, tensor(gv.shape(), gb)),
            ]
        }
        Op::Conv2d { x, w, geom } => {
            let (xv, wv) = (val(*x), val(*w));
            let (gx, gw) = kernels::conv2d_backward(xv.data(), wv.data(), g.data(), geom);
            vec![(*x, tensor(xv.shape(), gx)), (*w, tensor(wv.shape(), gw))]
        }
        Op::MeanAxes { input, .. } => {
            let shape = val(*input).shape();
            let count = T::lit((numel(shape) / g.numel()) as f64);
            vec![(*input, g.map(|v| v / count).broadcast_to(shape)?)]
        }
        Op::Sum(a) => {
            let shape = val(*a).shape();
            vec![(*a, Tensor::full(shape.to_vec(), g.item()))]
        }
        Op::CrossEntropy { logits, labels, probs } => {
            let shape = val(*logits).shape();
            let m = shape[1];
            let scale = g.item() / T::lit(labels.len() as f64);
            let mut data = probs.clone();
            for (r, &l) in labels.iter().enumerate() {
                data[r * m + l] = data[r * m + l] - T::one();
            }
            data.iter_mut().for_each(|v| *v = *v * scale);
            vec![(*logits, tensor(shape, data))]
        }
    })
}

/// `(batch, rows, cols)` of a rank-2 or rank-3 operand.
fn mat_dims(shape: &[usize]) -> (usize, usize, usize) {
    match shape {
        [r, c] => (1, *r, *c),
        [b, r, c] => (*b, *r, *c),
        _ => unreachable!("validated at record time"),
    }
}

/// Batch mean and biased variance per channel.
pub type Moments<T> = (Vec<T>, Vec<T>);

impl<'g, T: Real> Var<'g, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    /// Snapshot of the forward value.
    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    fn check_graph(&self, other: &Var<'g, T>) -> Result<()> {
        if std::ptr::eq(self.graph, other.graph) {
            Ok(())
        } else {
            Err(contract_err!("operands belong to different graphs"))
        }
    }

    fn binary(self, other: Var<'g, T>, op: fn(usize, usize) -> Op<T>, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_graph(&other)?;
        let (a, b) = (self.value(), other.value());
        let out = if a.shape() == b.shape() {
            a.zip_with(&b, f)?
        } else {
            let shape = broadcast_shape(a.shape(), b.shape())?;
            a.broadcast_to(&shape)?.zip_with(&b.broadcast_to(&shape)?, f)?
        };
        self.graph.push(out, op(self.id, other.id))
    }

    /// Elementwise sum with broadcasting.
    #[allow(clippy::should_implement_trait)]
    pub fn add(self, other: Var<'g, T>) -> Result<Self> {
        self.binary(other, Op::Add, |a, b| a + b)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn sub(self, other: Var<'g, T>) -> Result<Self> {
        self.binary(other, Op::Sub, |a, b| a - b)
    }

    /// Elementwise product with broadcasting.
    #[allow(clippy::should_implement_trait)]
    pub fn mul(self, other: Var<'g, T>) -> Result<Self> {
        self.binary(other, Op::Mul, |a, b| a * b)
    }

    pub fn scale(self, c: T) -> Result<Self> {
        let out = self.value().map(|v| v * c);
        self.graph.push(out, Op::Scale(self.id, c))
    }

    /// Adds a constant to every element.
    pub fn offset(self, c: T) -> Result<Self> {
        let out = self.value().map(|v| v + c);
        self.graph.push(out, Op::Offset(self.id))
    }

    /// `c - self`.
    pub fn rsub(self, c: T) -> Result<Self> {
        self.scale(-T::one())?.offset(c)
    }

    fn matmul_impl(self, other: Var<'g, T>, trans_b: bool) -> Result<Self> {
        self.check_graph(&other)?;
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != sb.len() || !(2..=3).contains(&sa.len()) {
            return Err(dim_err!("matmul needs two rank-2 or two rank-3 operands, got {sa:?} and {sb:?}"));
        }
        let (batch, m, k) = mat_dims(sa);
        let (bb, br, bc) = mat_dims(sb);
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if bb != batch || kb != k {
            return Err(dim_err!("matmul inner dimensions differ: {sa:?} × {sb:?}{}", if trans_b { "ᵀ" } else { "" }));
        }
        let b_kn = if trans_b { kernels::transpose(b.data(), batch, n, k) } else { b.data().to_vec() };
        let data = kernels::matmul(a.data(), &b_kn, batch, m, k, n);
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        self.graph.push(tensor(&shape, data), Op::MatMul { a: self.id, b: other.id, trans_b })
    }

    /// Matrix product `[m,k]·[k,n]`, or batched `[b,m,k]·[b,k,n]`.
    pub fn matmul(self, other: Var<'g, T>) -> Result<Self> {
        self.matmul_impl(other, false)
    }

    /// Product with the transpose of the last two axes of `other`.
    pub fn matmul_t(self, other: Var<'g, T>) -> Result<Self> {
        self.matmul_impl(other, true)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let out = self.value().reshape(shape.to_vec())?;
        self.graph.push(out, Op::Reshape(self.id))
    }

    pub fn permute(self, perm: &[usize]) -> Result<Self> {
        let out = self.value().permute(perm)?;
        self.graph.push(out, Op::Permute(self.id, perm.to_vec()))
    }

    /// Joins `parts` along `axis`; all other axes must agree.
    pub fn concat(parts: &[Var<'g, T>], axis: usize) -> Result<Self> {
        let first = parts.first().ok_or_else(|| contract_err!("concat of zero tensors"))?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(dim_err!("concat axis {axis} out of range for {base:?}"));
        }
        let mut total = 0;
        for (p, v) in parts.iter().zip(&values) {
            first.check_graph(p)?;
            let s = v.shape();
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(dim_err!("concat shapes {base:?} and {s:?} differ off axis {axis}"));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = kernels::axis_split(&base, axis);
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for v in &values {
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let inputs = parts.iter().map(|p| p.id).collect();
        first.graph.push(tensor(&shape, data), Op::Concat { inputs, axis })
    }

    /// The slice `start..start+len` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Self> {
        let v = self.value();
        let shape = v.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(dim_err!("narrow({axis}, {start}, {len}) out of range for {shape:?}"));
        }
        let (outer, total, inner) = kernels::axis_split(shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * total + start) * inner;
            data.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        self.graph.push(tensor(&out_shape, data), Op::Narrow { input: self.id, axis, start })
    }

    pub fn relu(self) -> Result<Self> {
        let out = self.value().map(|v| v.max(T::zero()));
        self.graph.push(out, Op::Relu(self.id))
    }

    pub fn sigmoid(self) -> Result<Self> {
        let out = self.value().map(kernels::sigmoid);
        self.graph.push(out, Op::Sigmoid(self.id))
    }

    /// GELU, tanh approximation:
    /// `0.5·x·(1 + tanh(sqrt(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(self) -> Result<Self> {
        let out = self.value().map(kernels::gelu);
        self.graph.push(out, Op::Gelu(self.id))
    }

    /// Softmax along `axis`, shifted by the per-slice maximum.
    pub fn softmax(self, axis: usize) -> Result<Self> {
        let v = self.value();
        if axis >= v.rank() {
            return Err(dim_err!("softmax axis {axis} out of range for {:?}", v.shape()));
        }
        let out = tensor(v.shape(), kernels::softmax(v.data(), v.shape(), axis));
        self.graph.push(out, Op::Softmax { input: self.id, axis })
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(self, gamma: Var<'g, T>, beta: Var<'g, T>, eps: T) -> Result<Self> {
        self.check_graph(&gamma)?;
        self.check_graph(&beta)?;
        if eps <= T::zero() {
            return Err(contract_err!("layer_norm eps must be positive"));
        }
        let (x, gv, bv) = (self.value(), gamma.value(), beta.value());
        let c = *x.shape().last().ok_or_else(|| dim_err!("layer_norm of a scalar"))?;
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(dim_err!("layer_norm affine shapes {:?}/{:?} vs width {c}", gv.shape(), bv.shape()));
        }
        let (y, xhat, rstd) = kernels::layer_norm(x.data(), gv.data(), bv.data(), eps);
        self.graph.push(
            tensor(x.shape(), y),
            Op::LayerNorm { x: self.id, gamma: gamma.id, beta: beta.id, xhat, rstd },
        )
    }

    /// Per-channel (last axis) normalization. With `batch_stats` the
    /// moments come from every leading position of `self` and are returned
    /// as `(mean, biased variance)`; otherwise `running` is used.
    pub fn batch_norm(
        self,
        gamma: Var<'g, T>,
        beta: Var<'g, T>,
        running: (&Tensor<T>, &Tensor<T>),
        eps: T,
        batch_stats: bool,
    ) -> Result<(Self, Option<Moments<T>>)> {
        self.check_graph(&gamma)?;
        self.check_graph(&beta)?;
        let (x, gv, bv) = (self.value(), gamma.value(), beta.value());
        let c = *x.shape().last().ok_or_else(|| dim_err!("batch_norm of a scalar"))?;
        for t in [gv.as_ref(), bv.as_ref(), running.0, running.1] {
            if t.shape() != [c] {
                return Err(dim_err!("batch_norm parameter shape {:?} vs {c} channels", t.shape()));
            }
        }
        let (mean, var) = if batch_stats {
            kernels::channel_moments(x.data(), c)
        } else {
            (running.0.data().to_vec(), running.1.data().to_vec())
        };
        let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = x.data().to_vec();
        let mut y = vec![T::zero(); xhat.len()];
        for (hr, yr) in xhat.chunks_exact_mut(c).zip(y.chunks_exact_mut(c)) {
            for j in 0..c {
                hr[j] = (hr[j] - mean[j]) * rstd[j];
                yr[j] = hr[j] * gv.data()[j] + bv.data()[j];
            }
        }
        let out = self.graph.push(
            tensor(x.shape(), y),
            Op::BatchNorm { x: self.id, gamma: gamma.id, beta: beta.id, xhat, rstd, batch_stats },
        )?;
        Ok((out, batch_stats.then_some((mean, var))))
    }

    /// NHWC cross-correlation with a `[k, k, c_in, c_out]` kernel. A rank-3
    /// input is treated as a batch of one.
    pub fn conv2d(self, kernel: Var<'g, T>, stride: usize, padding: usize) -> Result<Self> {
        self.check_graph(&kernel)?;
        let (x, w) = (self.value(), kernel.value());
        let (n, h, wd, c_in) = match x.shape() {
            [h, w, c] => (1, *h, *w, *c),
            [n, h, w, c] => (*n, *h, *w, *c),
            s => return Err(dim_err!("conv2d input must be HWC or NHWC, got {s:?}")),
        };
        let [k, kw, kc, c_out] = w.shape() else {
            return Err(dim_err!("conv2d kernel must be [k,k,c_in,c_out], got {:?}", w.shape()));
        };
        let (k, c_out) = (*k, *c_out);
        if k != *kw || *kc != c_in {
            return Err(dim_err!("kernel {:?} does not fit input {:?}", w.shape(), x.shape()));
        }
        if stride == 0 {
            return Err(contract_err!("conv2d stride must be at least 1"));
        }
        if h + 2 * padding < k || wd + 2 * padding < k {
            return Err(dim_err!("kernel {k}×{k} larger than padded input {h}×{wd} (padding {padding})"));
        }
        let geom = ConvGeom {
            n,
            h,
            w: wd,
            c_in,
            k,
            c_out,
            stride,
            pad: padding,
            out_h: (h + 2 * padding - k) / stride + 1,
            out_w: (wd + 2 * padding - k) / stride + 1,
        };
        let data = kernels::conv2d(x.data(), w.data(), &geom);
        let shape = if x.rank() == 3 {
            vec![geom.out_h, geom.out_w, c_out]
        } else {
            vec![n, geom.out_h, geom.out_w, c_out]
        };
        self.graph.push(tensor(&shape, data), Op::Conv2d { x: self.id, w: kernel.id, geom })
    }

    /// Mean over `axes`, keeping them as size-1 dimensions.
    pub fn mean_axes(self, axes: &[usize]) -> Result<Self> {
        let v = self.value();
        let mut shape = v.shape().to_vec();
        for &a in axes {
            if a >= shape.len() {
                return Err(dim_err!("mean axis {a} out of range for {:?}", v.shape()));
            }
            shape[a] = 1;
        }
        let count = T::lit((v.numel() / numel(&shape)) as f64);
        let out = v.sum_to(&shape)?.map(|s| s / count);
        self.graph.push(out, Op::MeanAxes { input: self.id })
    }

    /// Sum of all elements as a scalar.
    pub fn sum(self) -> Result<Self> {
        let out = Tensor::scalar(self.value().sum());
        self.graph.push(out, Op::Sum(self.id))
    }

    /// Mean of all elements as a scalar.
    pub fn mean(self) -> Result<Self> {
        let n = T::lit(self.value().numel() as f64);
        self.sum()?.scale(T::one() / n)
    }

    /// Mean negative log-likelihood of `labels` under `softmax(self)` for
    /// `[n, m]` logits, computed with log-sum-exp.
    pub fn cross_entropy(self, labels: &[usize]) -> Result<Self> {
        let v = self.value();
        let [n, m] = v.shape() else {
            return Err(dim_err!("cross_entropy expects [n, m] logits, got {:?}", v.shape()));
        };
        let (n, m) = (*n, *m);
        if labels.len() != n {
            return Err(contract_err!("{} labels for {n} rows", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= m) {
            return Err(contract_err!("label {bad} out of range for {m} classes"));
        }
        let probs = kernels::softmax(v.data(), v.shape(), 1);
        let mut total = T::zero();
        for (row, &l) in v.data().chunks_exact(m).zip(labels) {
            let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
            total = total + lse - row[l];
        }
        let loss = Tensor::scalar(total / T::lit(n as f64));
        self.graph.push(loss, Op::CrossEntropy { logits: self.id, labels: labels.to_vec(), probs })
    }
}
