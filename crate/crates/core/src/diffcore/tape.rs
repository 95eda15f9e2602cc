//! Reverse-mode computation record.
//!
//! Every primitive evaluates eagerly, appends a node holding its value and
//! the operation that produced it, and rejects non-finite results. Nodes are
//! appended in topological order, so backpropagation is a single reverse
//! sweep over the node list.

use std::sync::Arc;

use super::kernels::{self, axis_split, mm_nn, mm_nt, mm_tn, stable_sigmoid};
use super::params::{ParamId, ParameterStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<S> {
    Input,
    Constant,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    BatchMatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddBroadcast(NodeId, NodeId),
    MulBroadcast(NodeId, NodeId),
    Scale(NodeId, S),
    ScaleBy(NodeId, NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Softmax(NodeId),
    LayerNorm { input: NodeId, inv_std: Vec<S> },
    LogSumExp(NodeId),
    Concat { inputs: Vec<NodeId>, axis: usize },
    GatherRows { input: NodeId, index: Arc<[usize]> },
    Sum { input: NodeId, axis: usize },
    Mean { input: NodeId, axis: usize },
    SumAll(NodeId),
    MeanAll(NodeId),
    Reshape(NodeId),
    Permute { input: NodeId, map: Arc<[usize]> },
}

impl<S> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::BatchMatMul(..) => "batch_matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBroadcast(..) => "add_broadcast",
            Op::MulBroadcast(..) => "mul_broadcast",
            Op::Scale(..) => "scale",
            Op::ScaleBy(..) => "scale_by",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::LogSumExp(_) => "log_sum_exp",
            Op::Concat { .. } => "concat",
            Op::GatherRows { .. } => "gather_rows",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::SumAll(_) => "sum_all",
            Op::MeanAll(_) => "mean_all",
            Op::Reshape(_) => "reshape",
            Op::Permute { .. } => "permute",
        }
    }
}

impl<S> Op<S> {
    /// Whether any operand carries a gradient.
    fn reaches_grad(&self, nodes: &[Node<S>]) -> bool {
        let g = |id: &NodeId| nodes[id.0].grad;
        match self {
            Op::Input | Op::Param(_) => true,
            Op::Constant => false,
            Op::MatMul(a, b)
            | Op::BatchMatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddBroadcast(a, b)
            | Op::MulBroadcast(a, b)
            | Op::ScaleBy(a, b) => g(a) || g(b),
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Softmax(a)
            | Op::LogSumExp(a)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::Reshape(a) => g(a),
            Op::LayerNorm { input, .. }
            | Op::GatherRows { input, .. }
            | Op::Sum { input, .. }
            | Op::Mean { input, .. }
            | Op::Permute { input, .. } => g(input),
            Op::Concat { inputs, .. } => inputs.iter().any(g),
        }
    }
}

#[derive(Clone, Debug)]
struct Node<S> {
    value: Vec<S>,
    shape: Vec<usize>,
    op: Op<S>,
    /// Whether a parameter or differentiable input reaches this node.
    grad: bool,
}

/// Epsilon added to the variance in [`Tape::layer_norm`].
///
/// Small enough that normalized rows have unit variance to within 1e-6 for
/// any input row with variance above 1e-3.
pub const LAYER_NORM_EPS: f64 = 1e-9;

/// Single-writer computation record.
#[derive(Clone, Debug, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

/// Gradients of a scalar root with respect to every node that reaches it.
#[derive(Clone, Debug)]
pub struct Gradients<S> {
    per_node: Vec<Option<Vec<S>>>,
    params: Vec<(ParamId, usize)>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient with respect to a recorded node, or `None` if the node does not reach the root.
    pub fn wrt(&self, node: NodeId) -> Option<&[S]> {
        self.per_node.get(node.0).and_then(|g| g.as_deref())
    }

    /// `(parameter, gradient)` for every parameter leaf that reaches the root.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[S])> + '_ {
        self.params
            .iter()
            .filter_map(|&(pid, node)| self.per_node[node].as_deref().map(|g| (pid, g)))
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::Shape {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}

fn add_into<S: Scalar>(grads: &mut [Option<Vec<S>>], nodes: &[Node<S>], target: NodeId, contribution: &[S]) {
    if !nodes[target.0].grad {
        return;
    }
    match &mut grads[target.0] {
        Some(acc) => acc.iter_mut().zip(contribution).for_each(|(a, &c)| *a += c),
        None => grads[target.0] = Some(contribution.to_vec()),
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[S] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// The single value of a one-element node.
    pub fn scalar(&self, id: NodeId) -> S {
        self.nodes[id.0].value[0]
    }

    fn push(&mut self, value: Vec<S>, shape: Vec<usize>, op: Op<S>) -> Result<NodeId> {
        let id = self.nodes.len();
        if !kernels::all_finite(&value) {
            return Err(Error::NonFinite {
                op: op.name(),
                node: id,
            });
        }
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        let grad = op.reaches_grad(&self.nodes);
        self.nodes.push(Node { value, shape, op, grad });
        Ok(NodeId(id))
    }

    fn node(&self, id: NodeId) -> &Node<S> {
        &self.nodes[id.0]
    }

    /// Records an input that gradients can be taken with respect to.
    pub fn input(&mut self, values: Vec<S>, shape: &[usize]) -> Result<NodeId> {
        let expected: usize = shape.iter().product();
        if expected != values.len() || shape.contains(&0) {
            return Err(Error::Shape {
                op: "input",
                lhs: shape.to_vec(),
                rhs: vec![values.len()],
            });
        }
        self.push(values, shape.to_vec(), Op::Input)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, values: Vec<S>, shape: &[usize]) -> Result<NodeId> {
        let id = self.input(values, shape)?;
        self.nodes[id.0].op = Op::Constant;
        self.nodes[id.0].grad = false;
        Ok(id)
    }

    /// Records the current value of a parameter as a differentiable leaf.
    pub fn param(&mut self, store: &ParameterStore<S>, id: ParamId) -> Result<NodeId> {
        let p = store.parameter(id);
        self.push(p.value.clone(), p.shape.clone(), Op::Param(id))
    }

    /// `a · b` for `a: n×k`, `b: k×m`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::zero(); n * m];
        mm_nn(self.value(a), self.value(b), &mut out, n, k, m);
        self.push(out, vec![n, m], Op::MatMul(a, b))
    }

    /// Batched `a · b` for `a: B×n×k`, `b: B×k×m`.
    pub fn batch_matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::Shape {
                op: "batch_matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (batch, n, k, m) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![S::zero(); batch * n * m];
        let (va, vb) = (self.value(a), self.value(b));
        for t in 0..batch {
            mm_nn(
                &va[t * n * k..(t + 1) * n * k],
                &vb[t * k * m..(t + 1) * k * m],
                &mut out[t * n * m..(t + 1) * n * m],
                n,
                k,
                m,
            );
        }
        self.push(out, vec![batch, n, m], Op::BatchMatMul(a, b))
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(S, S) -> S,
        op: Op<S>,
    ) -> Result<NodeId> {
        same_shape(name, self.shape(a), self.shape(b))?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(out, shape, op)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn broadcast_check(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<usize> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(sb.iter().product())
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s (bias rows, positional tables).
    pub fn add_broadcast(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let blen = self.broadcast_check("add_broadcast", a, b)?;
        let vb = self.value(b);
        let out = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + vb[i % blen])
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::AddBroadcast(a, b))
    }

    /// `a ⊙ b` where `b`'s shape is a suffix of `a`'s.
    pub fn mul_broadcast(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let blen = self.broadcast_check("mul_broadcast", a, b)?;
        let vb = self.value(b);
        let out = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x * vb[i % blen])
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::MulBroadcast(a, b))
    }

    /// Multiplies by a fixed constant.
    pub fn scale(&mut self, a: NodeId, c: S) -> Result<NodeId> {
        let out = self.value(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::Scale(a, c))
    }

    /// Multiplies `a` by the one-element node `s`; both receive gradients.
    pub fn scale_by(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        if self.value(s).len() != 1 {
            return Err(Error::Shape {
                op: "scale_by",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(s).to_vec(),
            });
        }
        let c = self.scalar(s);
        let out = self.value(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::ScaleBy(a, s))
    }

    fn map(&mut self, a: NodeId, f: impl Fn(S) -> S, op: Op<S>) -> Result<NodeId> {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(out, shape, op)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.map(a, |x| x.max(S::zero()), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.map(a, stable_sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.map(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.map(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.map(a, |x| x.ln(), Op::Log(a))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.softmax_impl(a, None)
    }

    /// Softmax over the last axis where `allowed` (shaped like the trailing
    /// two axes of `a`) marks the entries that may receive weight. Disallowed
    /// entries get exactly zero weight; every row needs at least one allowed entry.
    pub fn masked_softmax(&mut self, a: NodeId, allowed: &[bool]) -> Result<NodeId> {
        self.softmax_impl(a, Some(allowed))
    }

    fn softmax_impl(&mut self, a: NodeId, allowed: Option<&[bool]>) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        let cols = *shape.last().expect("non-empty shape");
        if let Some(mask) = allowed {
            let rows = if shape.len() >= 2 { shape[shape.len() - 2] } else { 1 };
            if mask.len() != rows * cols {
                return Err(Error::Shape {
                    op: "masked_softmax",
                    lhs: shape,
                    rhs: vec![mask.len()],
                });
            }
        }
        let x = self.value(a);
        let mut out = vec![S::zero(); x.len()];
        for (r, (row, dst)) in x.chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
            let mask_row = allowed.map(|m| {
                let per = m.len() / cols;
                let rr = r % per;
                &m[rr * cols..(rr + 1) * cols]
            });
            let ok = |j: usize| mask_row.is_none_or(|m| m[j]);
            let mut max = S::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if ok(j) && v > max {
                    max = v;
                }
            }
            if max == S::neg_infinity() {
                return Err(Error::Computation(
                    "masked_softmax: a row has no allowed entries".into(),
                ));
            }
            let mut total = S::zero();
            for (j, (&v, d)) in row.iter().zip(dst.iter_mut()).enumerate() {
                if ok(j) {
                    *d = (v - max).exp();
                    total += *d;
                }
            }
            dst.iter_mut().for_each(|d| *d /= total);
        }
        self.push(out, shape, Op::Softmax(a))
    }

    /// Normalizes each row over the last axis to zero mean and unit variance
    /// (biased variance plus [`LAYER_NORM_EPS`]). No affine part.
    pub fn layer_norm(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        let cols = *shape.last().expect("non-empty shape");
        let n = S::count(cols);
        let eps = S::lit(LAYER_NORM_EPS);
        let x = self.value(a);
        let mut out = vec![S::zero(); x.len()];
        let mut inv_std = Vec::with_capacity(x.len() / cols);
        for (row, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
            let mean = row.iter().copied().sum::<S>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
            let inv = S::one() / (var + eps).sqrt();
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        self.push(out, shape, Op::LayerNorm { input: a, inv_std })
    }

    /// `log Σ exp` over the last axis, stabilized by the row maximum.
    /// The last axis is dropped from the shape (a vector reduces to `[1]`).
    pub fn log_sum_exp(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        let cols = *shape.last().expect("non-empty shape");
        let out: Vec<S> = self
            .value(a)
            .chunks(cols)
            .map(|row| {
                let max = row.iter().copied().fold(S::neg_infinity(), S::max);
                max + row.iter().map(|&v| (v - max).exp()).sum::<S>().ln()
            })
            .collect();
        let mut out_shape = shape[..shape.len() - 1].to_vec();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        self.push(out, out_shape, Op::LogSumExp(a))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::Shape {
                op: "concat",
                lhs: first,
                rhs: vec![axis],
            });
        }
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for &id in inputs {
            let s = self.shape(id);
            let compatible =
                s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            out_shape[axis] += s[axis];
        }
        let (outer, _, inner) = axis_split(&out_shape, axis);
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &id in inputs {
                let chunk = self.shape(id)[axis] * inner;
                out.extend_from_slice(&self.value(id)[o * chunk..(o + 1) * chunk]);
            }
        }
        self.push(
            out,
            out_shape,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    /// Selects rows of a matrix: `out[r] = a[index[r]]`.
    pub fn gather_rows(&mut self, a: NodeId, index: Arc<[usize]>) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 || index.iter().any(|&i| i >= shape[0]) || index.is_empty() {
            return Err(Error::Shape {
                op: "gather_rows",
                lhs: shape,
                rhs: vec![index.len()],
            });
        }
        let cols = shape[1];
        let x = self.value(a);
        let mut out = Vec::with_capacity(index.len() * cols);
        for &i in index.iter() {
            out.extend_from_slice(&x[i * cols..(i + 1) * cols]);
        }
        self.push(out, vec![index.len(), cols], Op::GatherRows { input: a, index })
    }

    fn reduce_axis(&mut self, a: NodeId, axis: usize, mean: bool) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape {
                op: if mean { "mean" } else { "sum" },
                lhs: shape,
                rhs: vec![axis],
            });
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let x = self.value(a);
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &x[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (d, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += v;
                }
            }
        }
        if mean {
            let nn = S::count(n);
            out.iter_mut().for_each(|v| *v /= nn);
        }
        let mut out_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|&(d, _)| d != axis)
            .map(|(_, &e)| e)
            .collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let op = if mean {
            Op::Mean { input: a, axis }
        } else {
            Op::Sum { input: a, axis }
        };
        self.push(out, out_shape, op)
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.reduce_axis(a, axis, false)
    }

    /// Mean pooling over `axis`, removing it.
    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.reduce_axis(a, axis, true)
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let total = self.value(a).iter().copied().sum();
        self.push(vec![total], vec![1], Op::SumAll(a))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let total = v.iter().copied().sum::<S>() / S::count(v.len());
        self.push(vec![total], vec![1], Op::MeanAll(a))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = self.value(a).to_vec();
        self.push(out, shape.to_vec(), Op::Reshape(a))
    }

    /// Reorders axes: output axis `d` is input axis `axes[d]`.
    pub fn permute(&mut self, a: NodeId, axes: &[usize]) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        let valid = axes.len() == shape.len()
            && axes
                .iter()
                .all(|&d| d < shape.len() && !std::mem::replace(&mut seen[d], true));
        if !valid {
            return Err(Error::Shape {
                op: "permute",
                lhs: shape,
                rhs: axes.to_vec(),
            });
        }
        let map: Arc<[usize]> = kernels::permutation_map(&shape, axes).into();
        let x = self.value(a);
        let out = map.iter().map(|&src| x[src]).collect();
        let out_shape = axes.iter().map(|&d| shape[d]).collect();
        self.push(out, out_shape, Op::Permute { input: a, map })
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let rank = self.shape(a).len();
        if rank < 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: self.shape(a).to_vec(),
                rhs: vec![],
            });
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(a, &axes)
    }

    /// Reverse sweep from the one-element node `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<S>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::State(format!(
                "backpropagate called for node {} but the record holds {} nodes; evaluate first",
                loss.0,
                self.nodes.len()
            )));
        }
        if self.node(loss).value.len() != 1 {
            return Err(Error::State(format!(
                "backpropagate needs a scalar root, node {} has shape {:?}",
                loss.0,
                self.node(loss).shape
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![S::one()]);
        let mut params = Vec::new();

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.grad {
                continue;
            }
            match &node.op {
                Op::Input | Op::Constant => {}
                Op::Param(pid) => params.push((*pid, id)),
                Op::MatMul(a, b) => {
                    let (n, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let m = self.shape(*b)[1];
                    if self.nodes[a.0].grad {
                        let mut ga = vec![S::zero(); n * k];
                        mm_nt(&g, self.value(*b), &mut ga, n, m, k);
                        add_into(&mut grads, &self.nodes, *a, &ga);
                    }
                    if self.nodes[b.0].grad {
                        let mut gb = vec![S::zero(); k * m];
                        mm_tn(self.value(*a), &g, &mut gb, n, k, m);
                        add_into(&mut grads, &self.nodes, *b, &gb);
                    }
                }
                Op::BatchMatMul(a, b) => {
                    let sa = self.shape(*a);
                    let (batch, n, k) = (sa[0], sa[1], sa[2]);
                    let m = self.shape(*b)[2];
                    let (va, vb) = (self.value(*a), self.value(*b));
                    if self.nodes[a.0].grad {
                        let mut ga = vec![S::zero(); batch * n * k];
                        for t in 0..batch {
                            let gt = &g[t * n * m..(t + 1) * n * m];
                            mm_nt(
                                gt,
                                &vb[t * k * m..(t + 1) * k * m],
                                &mut ga[t * n * k..(t + 1) * n * k],
                                n,
                                m,
                                k,
                            );
                        }
                        add_into(&mut grads, &self.nodes, *a, &ga);
                    }
                    if self.nodes[b.0].grad {
                        let mut gb = vec![S::zero(); batch * k * m];
                        for t in 0..batch {
                            let gt = &g[t * n * m..(t + 1) * n * m];
                            mm_tn(
                                &va[t * n * k..(t + 1) * n * k],
                                gt,
                                &mut gb[t * k * m..(t + 1) * k * m],
                                n,
                                k,
                                m,
                            );
                        }
                        add_into(&mut grads, &self.nodes, *b, &gb);
                    }
                }
                Op::Add(a, b) => {
                    add_into(&mut grads, &self.nodes, *a, &g);
                    add_into(&mut grads, &self.nodes, *b, &g);
                }
                Op::Sub(a, b) => {
                    add_into(&mut grads, &self.nodes, *a, &g);
                    let neg: Vec<S> = g.iter().map(|&v| -v).collect();
                    add_into(&mut grads, &self.nodes, *b, &neg);
                }
                Op::Mul(a, b) => {
                    let ga: Vec<S> = g.iter().zip(self.value(*b)).map(|(&gv, &y)| gv * y).collect();
                    let gb: Vec<S> = g.iter().zip(self.value(*a)).map(|(&gv, &x)| gv * x).collect();
                    add_into(&mut grads, &self.nodes, *a, &ga);
                    add_into(&mut grads, &self.nodes, *b, &gb);
                }
                Op::AddBroadcast(a, b) => {
                    let blen = self.value(*b).len();
                    let mut gb = vec![S::zero(); blen];
                    for (i, &gv) in g.iter().enumerate() {
                        gb[i % blen] += gv;
                    }
                    add_into(&mut grads, &self.nodes, *a, &g);
                    add_into(&mut grads, &self.nodes, *b, &gb);
                }
                Op::MulBroadcast(a, b) => {
                    let vb = self.value(*b);
                    let va = self.value(*a);
                    let blen = vb.len();
                    let mut gb = vec![S::zero(); blen];
                    let mut ga = Vec::with_capacity(g.len());
                    for (i, &gv) in g.iter().enumerate() {
                        ga.push(gv * vb[i % blen]);
                        gb[i % blen] += gv * va[i];
                    }
                    add_into(&mut grads, &self.nodes, *a, &ga);
                    add_into(&mut grads, &self.nodes, *b, &gb);
                }
                Op::Scale(a, c) => {
                    let ga: Vec<S> = g.iter().map(|&v| v * *c).collect();
                    add_into(&mut grads, &self.nodes, *a, &ga);
                }
                Op::ScaleBy(a, s) => {
                    let c = self.scalar(*s);
                    let ga: Vec<S> = g.iter().map(|&v| v * c).collect();
                    let gs: S = g.iter().zip(self.value(*a)).map(|(&gv, &x)| gv * x).sum();
                    add_into(&mut grads, &self.nodes, *a, &ga);
                    add_into(&mut grads, &self.nodes, *s, &[gs]);
                }
                Op::Relu(a) => {
                    let ga: Vec<S> = g
                        .iter()
                        .zip(self.value(*a))
                        .map(|(&gv, &x)| if x > S::zero() { gv } else { S::zero() })
                        .collect();
                    add_into(&mut grads, &self.nodes, *a, &ga);
                }
                Op::Sigmoid(a) => {
                    let ga: Vec<S> = g
                        .iter()
                        .zip(&node.value)
                        .map(|(&gv, &y)| gv * y * (S::one() - y))
                        .collect();
                    add_into(&mut grads, &self.nodes, *a, &ga);
                }
                Op::Tanh(a) => {
                    let ga: Vec<S> = g
                        .iter()
                        .zip(&node.value)
                        .map(|(&gv, &y)| gv * (S::one() - y * y))
                        .collect();
                    add_into(&mut grads, &self.nodes, *a, &ga);
                }
                Op::Exp(a) => {
                    let ga: Vec<S> = g.iter().zip(&node.value).map(|(&gv, &y)| gv * y).collect();
                    add_into(&mut grads, &self.nodes, *a, &ga);
                }
                Op::Log(a) => {
                    let ga: Vec<S> = g.iter().zip(self.value(*a)).map(|(&gv, &x)| gv / x).collect();
                    add_into(&mut grads, &self.nodes, *a, &ga);
                }
                Op::Softmax(a) => {
                    let cols = *node.shape.last().unwrap();
                    let mut ga = vec![S::zero(); g.len()];
                    for ((gr, yr), dst) in g.chunks(cols).zip(node.value.chunks(cols)).zip(ga.chunks_mut(cols)) {
                        let dot: S = gr.iter().zip(yr).map(|(&gv, &y)| gv * y).sum();
                        for ((d, &gv), &y) in dst.iter_mut().zip(gr).zip(yr) {
                            *d = y * (gv - dot);
                        }
                    }
                    add_into(&mut grads, &self.nodes, *a, &ga);
                }
                Op::LayerNorm { input, inv_std } => {
                    let cols = *node.shape.last().unwrap();
                    let n = S::count(cols);
                    let mut ga = vec![S::zero(); g.len()];
                    for (r, ((gr, yr), dst)) in g
                        .chunks(cols)
                        .zip(node.value.chunks(cols))
                        .zip(ga.chunks_mut(cols))
                        .enumerate()
                    {
                        let g_mean = gr.iter().copied().sum::<S>() / n;
                        let gy_mean = gr.iter().zip(yr).map(|(&gv, &y)| gv * y).sum::<S>() / n;
                        for ((d, &gv), &y) in dst.iter_mut().zip(gr).zip(yr) {
                            *d = inv_std[r] * (gv - g_mean - y * gy_mean);
                        }
                    }
                    add_into(&mut grads, &self.nodes, *input, &ga);
                }
                Op::LogSumExp(a) => {
                    let x = self.value(*a);
                    let cols = *self.shape(*a).last().unwrap();
                    let mut ga = vec![S::zero(); x.len()];
                    for (r, (xr, dst)) in x.chunks(cols).zip(ga.chunks_mut(cols)).enumerate() {
                        let lse = node.value[r];
                        for (d, &v) in dst.iter_mut().zip(xr) {
                            *d = g[r] * (v - lse).exp();
                        }
                    }
                    add_into(&mut grads, &self.nodes, *a, &ga);
                }
                Op::Concat { inputs, axis } => {
                    let (outer, _, inner) = axis_split(&node.shape, *axis);
                    let mut offset = 0;
                    let total_chunk = node.shape[*axis] * inner;
                    for &input in inputs {
                        let chunk = self.shape(input)[*axis] * inner;
                        let mut gi = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            let start = o * total_chunk + offset;
                            gi.extend_from_slice(&g[start..start + chunk]);
                        }
                        add_into(&mut grads, &self.nodes, input, &gi);
                        offset += chunk;
                    }
                }
                Op::GatherRows { input, index } => {
                    let cols = node.shape[1];
                    let mut gi = vec![S::zero(); self.value(*input).len()];
                    for (r, &src) in index.iter().enumerate() {
                        for (d, &gv) in gi[src * cols..(src + 1) * cols]
                            .iter_mut()
                            .zip(&g[r * cols..(r + 1) * cols])
                        {
                            *d += gv;
                        }
                    }
                    add_into(&mut grads, &self.nodes, *input, &gi);
                }
                Op::Sum { input, axis } | Op::Mean { input, axis } => {
                    let in_shape = self.shape(*input);
                    let (outer, n, inner) = axis_split(in_shape, *axis);
                    let factor = if matches!(node.op, Op::Mean { .. }) {
                        S::one() / S::count(n)
                    } else {
                        S::one()
                    };
                    let mut gi = vec![S::zero(); outer * n * inner];
                    for o in 0..outer {
                        for k in 0..n {
                            let dst = &mut gi[(o * n + k) * inner..(o * n + k + 1) * inner];
                            for (d, &gv) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                *d = gv * factor;
                            }
                        }
                    }
                    add_into(&mut grads, &self.nodes, *input, &gi);
                }
                Op::SumAll(a) => {
                    let gi = vec![g[0]; self.value(*a).len()];
                    add_into(&mut grads, &self.nodes, *a, &gi);
                }
                Op::MeanAll(a) => {
                    let len = self.value(*a).len();
                    let gi = vec![g[0] / S::count(len); len];
                    add_into(&mut grads, &self.nodes, *a, &gi);
                }
                Op::Reshape(a) => add_into(&mut grads, &self.nodes, *a, &g),
                Op::Permute { input, map } => {
                    let mut gi = vec![S::zero(); g.len()];
                    for (&src, &gv) in map.iter().zip(&g) {
                        gi[src] = gv;
                    }
                    add_into(&mut grads, &self.nodes, *input, &gi);
                }
            }
            if matches!(node.op, Op::Param(_) | Op::Input) {
                grads[id] = Some(g);
            }
        }

        Ok(Gradients {
            per_node: grads,
            params,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t() -> Tape<f64> {
        Tape::new()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = t();
        let x = tape.input(vec![0.0; 3], &[1, 3]).unwrap();
        let y = tape.softmax(x).unwrap();
        for &v in tape.value(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut tape = t();
        let x = tape.input(vec![-1.0, 2.0], &[2]).unwrap();
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y), &[0.0, 2.0]);
    }

    #[test]
    fn matmul_hand_case() {
        let mut tape = t();
        let a = tape.input(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let b = tape.input(vec![1.0, 1.0], &[2, 1]).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[3.0, 7.0]);
        assert_eq!(tape.shape(c), &[2, 1]);
    }

    #[test]
    fn shape_mismatch_names_primitive_and_shapes() {
        let mut tape = t();
        let a = tape.input(vec![1.0; 6], &[2, 3]).unwrap();
        let b = tape.input(vec![1.0; 6], &[2, 3]).unwrap();
        let err = tape.matmul(a, b).unwrap_err();
        match err {
            Error::Shape { op, lhs, rhs } => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_finite_result_is_rejected_with_node_id() {
        let mut tape = t();
        let a = tape.input(vec![0.0], &[1]).unwrap();
        let err = tape.log(a).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "log", node: 1 }));
    }

    #[test]
    fn square_gradient() {
        let mut tape = t();
        let x = tape.input(vec![3.0], &[1]).unwrap();
        let y = tape.mul(x, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[6.0]);
    }

    #[test]
    fn mean_gradient_is_uniform() {
        let mut tape = t();
        let x = tape.input(vec![1.0, 5.0, -2.0, 0.5], &[4]).unwrap();
        let y = tape.mean(x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[0.25; 4]);
    }

    #[test]
    fn backward_on_empty_record_is_state_error() {
        let tape = t();
        assert!(matches!(tape.backward(NodeId(0)), Err(Error::State(_))));
    }

    #[test]
    fn masked_entries_get_zero_weight() {
        let mut tape = t();
        let x = tape.input(vec![5.0, 1.0, 2.0, 3.0], &[2, 2]).unwrap();
        let y = tape.masked_softmax(x, &[true, false, true, true]).unwrap();
        assert_eq!(tape.value(y)[0], 1.0);
        assert_eq!(tape.value(y)[1], 0.0);
    }

    #[test]
    fn layer_norm_rows_standardized() {
        let mut tape = t();
        let x = tape
            .input(vec![1.0, 2.0, 3.0, 10.0, -4.0, 0.5, 7.0, 7.5], &[2, 4])
            .unwrap();
        let y = tape.layer_norm(x).unwrap();
        for row in tape.value(y).chunks(4) {
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn concat_and_permute_roundtrip_shapes() {
        let mut tape = t();
        let a = tape.input((0..6).map(f64::from).collect(), &[2, 3]).unwrap();
        let b = tape.input((6..8).map(f64::from).collect(), &[2, 1]).unwrap();
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c), &[0.0, 1.0, 2.0, 6.0, 3.0, 4.0, 5.0, 7.0]);
        let p = tape.transpose(c).unwrap();
        assert_eq!(tape.shape(p), &[4, 2]);
        assert_eq!(tape.value(p), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0, 6.0, 7.0]);
    }
}
