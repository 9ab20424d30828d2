use std::collections::HashSet;

use super::kernels::{
    broadcast_shapes, gelu, gelu_grad, gemm_nn, gemm_nt, gemm_tn, permute_map, permuted_shape,
    split_axis, Broadcast,
};
use super::{numel, ParamGrads, ParamId, ParamStore, Real, Result, Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    /// Constant copy of another node; the source is kept only for inspection.
    Detach(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Minimum(Var, Var),
    Scale(Var, T),
    Offset(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sigmoid(Var),
    Gelu(Var),
    Clamp {
        x: Var,
        lo: T,
        hi: T,
    },
    MatMul(Var, Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    LogSumExp {
        x: Var,
        axis: usize,
    },
    SumAxis {
        x: Var,
        axis: usize,
    },
    Sum(Var),
    Mean(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    CrossEntropy {
        logits: Var,
        target: Vec<T>,
        probs: Vec<T>,
    },
}

impl<T> Op<T> {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf | Detach(_) => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Minimum(a, b) | MatMul(a, b) => vec![*a, *b],
            Scale(x, _)
            | Offset(x)
            | Exp(x)
            | Log(x)
            | Square(x)
            | Sigmoid(x)
            | Gelu(x)
            | Sum(x)
            | Mean(x)
            | Reshape(x) => vec![*x],
            Clamp { x, .. }
            | Softmax { x, .. }
            | LogSoftmax { x, .. }
            | LogSumExp { x, .. }
            | SumAxis { x, .. }
            | Permute { x, .. }
            | Slice { x, .. } => vec![*x],
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Concat { parts, .. } => parts.clone(),
            CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Tape of recorded operations.
///
/// Nodes are appended in creation order, so reverse index order is a valid
/// reverse topological order for backpropagation.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false, None)
    }

    /// A free leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true, None)
    }

    /// Binds a parameter; frozen parameters enter as constants.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        self.leaf(p.value.clone(), p.trainable, Some(id))
    }

    /// Same values as `x`, but no gradient flows back through it.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.nodes.push(Node {
            value,
            op: Op::Detach(x),
            requires_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, x: Var) -> &Tensor<T> {
        &self.nodes[x.0].value
    }

    pub fn shape(&self, x: Var) -> &[usize] {
        self.nodes[x.0].value.shape()
    }

    pub fn requires_grad(&self, x: Var) -> bool {
        self.nodes[x.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Direct inputs of `x` through which gradient can flow.
    pub fn parents(&self, x: Var) -> Vec<Var> {
        self.nodes[x.0].op.parents()
    }

    /// The node a detached copy was taken from, if `x` is one.
    pub fn detached_from(&self, x: Var) -> Option<Var> {
        match self.nodes[x.0].op {
            Op::Detach(src) => Some(src),
            _ => None,
        }
    }

    /// Every node reachable from `x` along gradient-carrying edges, `x` included.
    pub fn ancestors(&self, x: Var) -> HashSet<Var> {
        let mut seen = HashSet::new();
        let mut stack = vec![x];
        while let Some(v) = stack.pop() {
            if seen.insert(v) {
                stack.extend(self.parents(v));
            }
        }
        seen
    }

    /// Parameters bound in this graph that `x` depends on.
    pub fn param_ancestors(&self, x: Var) -> HashSet<ParamId> {
        self.ancestors(x)
            .into_iter()
            .filter_map(|v| self.nodes[v.0].param)
            .collect()
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let src = &self.nodes[x.0].value;
        let data = src.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(src.shape(), data).expect("same shape");
        self.push(value, op)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        op: Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value = if ta.shape() == tb.shape() {
            let data = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::new(ta.shape(), data)?
        } else {
            let shape = broadcast_shapes(ta.shape(), tb.shape()).ok_or_else(|| {
                TensorError::ShapeMismatch {
                    op: name,
                    lhs: ta.shape().to_vec(),
                    rhs: tb.shape().to_vec(),
                }
            })?;
            let (ma, mb) = (
                Broadcast::new(ta.shape(), &shape),
                Broadcast::new(tb.shape(), &shape),
            );
            let total: usize = shape.iter().product();
            let data = (0..total)
                .map(|j| f(ta.data()[ma.index(j)], tb.data()[mb.index(j)]))
                .collect();
            Tensor::new(&shape, data)?
        };
        Ok(self.push(value, op))
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

    /// Elementwise minimum; on ties the gradient goes to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "minimum", Op::Minimum(a, b), |x, y| {
            if x <= y {
                x
            } else {
                y
            }
        })
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.unary(x, Op::Offset(x), |v| v + c)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), |v| v.exp())
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), |v| v.ln())
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), |v| T::one() / (T::one() + (-v).exp()))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Gelu(x), gelu)
    }

    /// Clamps into `[lo, hi]`; gradient is zero where the clamp is active.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        self.unary(x, Op::Clamp { x, lo, hi }, |v| v.max(lo).min(hi))
    }

    /// Batched matrix product `[.., m, k] x [.., k, n]`. Batch dimensions must
    /// match, or one operand may be a plain matrix that is broadcast.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let geo = MatMulGeometry::new(ta.shape(), tb.shape())?;
        let mut out = vec![T::zero(); geo.batch * geo.m * geo.n];
        for t in 0..geo.batch {
            gemm_nn(
                &ta.data()[t * geo.a_step..][..geo.m * geo.k],
                &tb.data()[t * geo.b_step..][..geo.k * geo.n],
                &mut out[t * geo.m * geo.n..(t + 1) * geo.m * geo.n],
                geo.m,
                geo.k,
                geo.n,
            );
        }
        let value = Tensor::new(&geo.out_shape, out)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let src = &self.nodes[x.0].value;
        let rank = src.rank();
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if sorted != (0..rank).collect::<Vec<_>>() {
            return Err(TensorError::Invalid {
                op: "permute",
                msg: format!("{perm:?} is not a permutation of rank {rank}"),
            });
        }
        let map = permute_map(src.shape(), perm);
        let data = map.iter().map(|&i| src.data()[i]).collect();
        let value = Tensor::new(&permuted_shape(src.shape(), perm), data)?;
        Ok(self.push(
            value,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let rank = self.shape(x).len();
        if rank < 2 {
            return Err(TensorError::InvalidAxis {
                op: "transpose",
                axis: 1,
                rank,
            });
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(x, &perm)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[x.0].value.clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or(TensorError::Invalid {
                op: "concat",
                msg: "no inputs".into(),
            })?)
            .to_vec();
        check_axis("concat", axis, first.len())?;
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            out_shape[axis] += s[axis];
        }
        let (outer, _, inner) = split_axis(&out_shape, axis);
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &p in parts {
                let t = &self.nodes[p.0].value;
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let src = &self.nodes[x.0].value;
        check_axis("slice", axis, src.rank())?;
        if start >= end || end > src.shape()[axis] {
            return Err(TensorError::Invalid {
                op: "slice",
                msg: format!("range {start}..{end} invalid for shape {:?}", src.shape()),
            });
        }
        let (outer, len, inner) = split_axis(src.shape(), axis);
        let width = end - start;
        let mut data = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = (o * len + start) * inner;
            data.extend_from_slice(&src.data()[base..base + width * inner]);
        }
        let mut shape = src.shape().to_vec();
        shape[axis] = width;
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(value, Op::Slice { x, axis, start }))
    }

    /// Numerically stable softmax along `axis` (max subtraction).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let src = &self.nodes[x.0].value;
        check_axis("softmax", axis, src.rank())?;
        let data = softmax_along(src.data(), src.shape(), axis);
        let value = Tensor::new(src.shape(), data)?;
        Ok(self.push(value, Op::Softmax { x, axis }))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let src = &self.nodes[x.0].value;
        check_axis("log_softmax", axis, src.rank())?;
        let lse = logsumexp_along(src.data(), src.shape(), axis);
        let (outer, len, inner) = split_axis(src.shape(), axis);
        let mut data = src.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let m = lse[o * inner + i];
                for l in 0..len {
                    data[(o * len + l) * inner + i] -= m;
                }
            }
        }
        let value = Tensor::new(src.shape(), data)?;
        Ok(self.push(value, Op::LogSoftmax { x, axis }))
    }

    /// `log(sum(exp(x)))` along `axis`, which is removed from the shape.
    pub fn logsumexp(&mut self, x: Var, axis: usize) -> Result<Var> {
        let src = &self.nodes[x.0].value;
        check_axis("logsumexp", axis, src.rank())?;
        let data = logsumexp_along(src.data(), src.shape(), axis);
        let mut shape = src.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(value, Op::LogSumExp { x, axis }))
    }

    /// Sum along `axis`, which is removed from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let src = &self.nodes[x.0].value;
        check_axis("sum_axis", axis, src.rank())?;
        let (outer, len, inner) = split_axis(src.shape(), axis);
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let row = &src.data()[(o * len + l) * inner..][..inner];
                for (d, &v) in data[o * inner..][..inner].iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        let mut shape = src.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(value, Op::SumAxis { x, axis }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let s: T = t.data().iter().copied().sum();
        let n = T::lit(t.numel() as f64);
        self.push(Tensor::scalar(s / n), Op::Mean(x))
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let src = &self.nodes[x.0].value;
        let d = *src.shape().last().unwrap_or(&0);
        for p in [gamma, beta] {
            let s = self.nodes[p.0].value.shape();
            if s != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: src.shape().to_vec(),
                    rhs: s.to_vec(),
                });
            }
        }
        let (g, b) = (
            self.nodes[gamma.0].value.data(),
            self.nodes[beta.0].value.data(),
        );
        let rows = src.numel() / d.max(1);
        let inv_d = T::lit(1.0 / d as f64);
        let eps = T::lit(eps);
        let mut xhat = Vec::with_capacity(src.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(src.numel());
        for r in 0..rows {
            let row = &src.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * rs;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let value = Tensor::new(src.shape(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Mean over rows of `-sum(target * log_softmax(logits))` along the last axis.
    ///
    /// `target` must hold a probability distribution per row (one-hot for
    /// hard labels, mixed for MixUp).
    pub fn cross_entropy(&mut self, logits: Var, target: &Tensor<T>) -> Result<Var> {
        let src = &self.nodes[logits.0].value;
        if src.shape() != target.shape() || src.rank() == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: src.shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let k = *src.shape().last().expect("rank >= 1");
        let rows = src.numel() / k;
        for r in 0..rows {
            let row = &target.data()[r * k..(r + 1) * k];
            let sum: f64 = row.iter().map(|t| t.as_f64()).sum();
            if (sum - 1.0).abs() > 1e-4 || row.iter().any(|&t| t < T::zero()) {
                return Err(TensorError::TargetNotNormalized { row: r, sum });
            }
        }
        let axis = src.rank() - 1;
        let lse = logsumexp_along(src.data(), src.shape(), axis);
        let mut loss = T::zero();
        let mut probs = Vec::with_capacity(src.numel());
        for r in 0..rows {
            for j in 0..k {
                let z = src.data()[r * k + j];
                let t = target.data()[r * k + j];
                let logp = z - lse[r];
                if t != T::zero() {
                    loss -= t * logp;
                }
                probs.push(logp.exp());
            }
        }
        loss /= T::lit(rows as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                target: target.data().to_vec(),
                probs,
            },
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// A graph can be differentiated once; a second call is an error rather
    /// than a silent accumulation.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(TensorError::GraphConsumed);
        }
        let shape = self.shape(loss).to_vec();
        if numel(&shape) != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut params = ParamGrads::empty(0);
        for (node, g) in self.nodes.iter().zip(&grads) {
            if let (Some(id), Some(g)) = (node.param, g) {
                params.accumulate(id, g);
            }
        }
        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
            params,
        })
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Detach(_) => {}
            Op::Add(a, b) => {
                self.acc_broadcast(*a, out.shape(), g, grads, |x| x);
                self.acc_broadcast(*b, out.shape(), g, grads, |x| x);
            }
            Op::Sub(a, b) => {
                self.acc_broadcast(*a, out.shape(), g, grads, |x| x);
                self.acc_broadcast(*b, out.shape(), g, grads, |x| -x);
            }
            Op::Mul(a, b) | Op::Minimum(a, b) => {
                let is_min = matches!(node.op, Op::Minimum(..));
                let (ta, tb) = (val(*a), val(*b));
                let ma = index_map(ta.shape(), out.shape());
                let mb = index_map(tb.shape(), out.shape());
                let pairs = (0..g.len()).map(|j| (ta.data()[ma(j)], tb.data()[mb(j)]));
                let (ga, gb): (Vec<T>, Vec<T>) = if is_min {
                    pairs
                        .zip(g)
                        .map(|((x, y), &gj)| {
                            if x <= y {
                                (gj, T::zero())
                            } else {
                                (T::zero(), gj)
                            }
                        })
                        .unzip()
                } else {
                    pairs.zip(g).map(|((x, y), &gj)| (gj * y, gj * x)).unzip()
                };
                self.acc_broadcast(*a, out.shape(), &ga, grads, |x| x);
                self.acc_broadcast(*b, out.shape(), &gb, grads, |x| x);
            }
            Op::Scale(x, c) => self.acc_map(*x, grads, |j| g[j] * *c),
            Op::Offset(x) | Op::Reshape(x) => self.acc_map(*x, grads, |j| g[j]),
            Op::Exp(x) => self.acc_map(*x, grads, |j| g[j] * out.data()[j]),
            Op::Log(x) => {
                let xs = val(*x).data();
                self.acc_map(*x, grads, |j| g[j] / xs[j])
            }
            Op::Square(x) => {
                let xs = val(*x).data();
                self.acc_map(*x, grads, |j| g[j] * T::lit(2.0) * xs[j])
            }
            Op::Sigmoid(x) => {
                let ys = out.data();
                self.acc_map(*x, grads, |j| g[j] * ys[j] * (T::one() - ys[j]))
            }
            Op::Gelu(x) => {
                let xs = val(*x).data();
                self.acc_map(*x, grads, |j| g[j] * gelu_grad(xs[j]))
            }
            Op::Clamp { x, lo, hi } => {
                let xs = val(*x).data();
                self.acc_map(*x, grads, |j| {
                    if xs[j] >= *lo && xs[j] <= *hi {
                        g[j]
                    } else {
                        T::zero()
                    }
                })
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let geo = MatMulGeometry::new(ta.shape(), tb.shape()).expect("checked in forward");
                let (m, k, n) = (geo.m, geo.k, geo.n);
                if let Some(ga) = self.grad_slot(*a, grads) {
                    for t in 0..geo.batch {
                        gemm_nt(
                            &g[t * m * n..(t + 1) * m * n],
                            &tb.data()[t * geo.b_step..][..k * n],
                            &mut ga[t * geo.a_step..][..m * k],
                            m,
                            n,
                            k,
                        );
                    }
                }
                if let Some(gb) = self.grad_slot(*b, grads) {
                    for t in 0..geo.batch {
                        gemm_tn(
                            &ta.data()[t * geo.a_step..][..m * k],
                            &g[t * m * n..(t + 1) * m * n],
                            &mut gb[t * geo.b_step..][..k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = split_axis(out.shape(), *axis);
                let y = out.data();
                if let Some(gx) = self.grad_slot(*x, grads) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + i;
                            let dot: T = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                            for l in 0..len {
                                gx[at(l)] += y[at(l)] * (g[at(l)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LogSoftmax { x, axis } => {
                let (outer, len, inner) = split_axis(out.shape(), *axis);
                let y = out.data();
                if let Some(gx) = self.grad_slot(*x, grads) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + i;
                            let total: T = (0..len).map(|l| g[at(l)]).sum();
                            for l in 0..len {
                                gx[at(l)] += g[at(l)] - y[at(l)].exp() * total;
                            }
                        }
                    }
                }
            }
            Op::LogSumExp { x, axis } => {
                let src = val(*x);
                let (outer, len, inner) = split_axis(src.shape(), *axis);
                let lse = out.data();
                if let Some(gx) = self.grad_slot(*x, grads) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let r = o * inner + i;
                            for l in 0..len {
                                let at = (o * len + l) * inner + i;
                                gx[at] += g[r] * (src.data()[at] - lse[r]).exp();
                            }
                        }
                    }
                }
            }
            Op::SumAxis { x, axis } => {
                let (outer, len, inner) = split_axis(val(*x).shape(), *axis);
                if let Some(gx) = self.grad_slot(*x, grads) {
                    for o in 0..outer {
                        for l in 0..len {
                            for i in 0..inner {
                                gx[(o * len + l) * inner + i] += g[o * inner + i];
                            }
                        }
                    }
                }
            }
            Op::Sum(x) => self.acc_map(*x, grads, |_| g[0]),
            Op::Mean(x) => {
                let n = T::lit(val(*x).numel() as f64);
                self.acc_map(*x, grads, |_| g[0] / n)
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = val(*gamma).numel();
                let gam = val(*gamma).data();
                let rows = rstd.len();
                if let Some(gg) = self.grad_slot(*gamma, grads) {
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(gb) = self.grad_slot(*beta, grads) {
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] += g[r * d + j];
                        }
                    }
                }
                if let Some(gx) = self.grad_slot(*x, grads) {
                    let inv_d = T::lit(1.0 / d as f64);
                    for r in 0..rows {
                        let dxhat: Vec<T> = (0..d).map(|j| g[r * d + j] * gam[j]).collect();
                        let mean_dxhat = dxhat.iter().copied().sum::<T>() * inv_d;
                        let mean_dxhat_xhat = dxhat
                            .iter()
                            .zip(&xhat[r * d..(r + 1) * d])
                            .map(|(&a, &b)| a * b)
                            .sum::<T>()
                            * inv_d;
                        for j in 0..d {
                            gx[r * d + j] += rstd[r]
                                * (dxhat[j] - mean_dxhat - xhat[r * d + j] * mean_dxhat_xhat);
                        }
                    }
                }
            }
            Op::Permute { x, perm } => {
                let map = permute_map(val(*x).shape(), perm);
                if let Some(gx) = self.grad_slot(*x, grads) {
                    for (j, &src) in map.iter().enumerate() {
                        gx[src] += g[j];
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                let out_len = out.shape()[*axis];
                for &p in parts {
                    let plen = val(p).shape()[*axis];
                    if let Some(gp) = self.grad_slot(p, grads) {
                        for o in 0..outer {
                            let src = &g[(o * out_len + offset) * inner..][..plen * inner];
                            for (d, &s) in
                                gp[o * plen * inner..][..plen * inner].iter_mut().zip(src)
                            {
                                *d += s;
                            }
                        }
                    }
                    offset += plen;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, len, inner) = split_axis(val(*x).shape(), *axis);
                let width = out.shape()[*axis];
                if let Some(gx) = self.grad_slot(*x, grads) {
                    for o in 0..outer {
                        let dst = &mut gx[(o * len + start) * inner..][..width * inner];
                        for (d, &s) in dst.iter_mut().zip(&g[o * width * inner..][..width * inner])
                        {
                            *d += s;
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                target,
                probs,
            } => {
                let k = *val(*logits).shape().last().expect("rank >= 1");
                let rows = T::lit((probs.len() / k) as f64);
                self.acc_map(*logits, grads, |j| g[0] * (probs[j] - target[j]) / rows)
            }
        }
    }

    /// Gradient buffer of `v`, allocated on first use; `None` for constants.
    fn grad_slot<'g>(&self, v: Var, grads: &'g mut [Option<Vec<T>>]) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn acc_map(&self, v: Var, grads: &mut [Option<Vec<T>>], f: impl Fn(usize) -> T) {
        if let Some(gv) = self.grad_slot(v, grads) {
            for (j, slot) in gv.iter_mut().enumerate() {
                *slot += f(j);
            }
        }
    }

    /// Accumulates `f(g)` into `v`, summing over broadcast axes.
    fn acc_broadcast(
        &self,
        v: Var,
        out_shape: &[usize],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        f: impl Fn(T) -> T,
    ) {
        let shape = self.nodes[v.0].value.shape().to_vec();
        if let Some(gv) = self.grad_slot(v, grads) {
            if shape == out_shape {
                for (d, &s) in gv.iter_mut().zip(g) {
                    *d += f(s);
                }
            } else {
                let map = Broadcast::new(&shape, out_shape);
                for (j, &s) in g.iter().enumerate() {
                    gv[map.index(j)] += f(s);
                }
            }
        }
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
    params: ParamGrads<T>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to any node. `None` when no gradient reached it.
    pub fn wrt(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(&self.shapes[v.0], g.clone()).ok()
    }

    pub fn params(&self) -> &ParamGrads<T> {
        &self.params
    }

    pub fn into_params(self) -> ParamGrads<T> {
        self.params
    }
}

struct MatMulGeometry {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_step: usize,
    b_step: usize,
    out_shape: Vec<usize>,
}

impl MatMulGeometry {
    fn new(sa: &[usize], sb: &[usize]) -> Result<Self> {
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch_shape = if ba == bb || bb.is_empty() {
            ba
        } else if ba.is_empty() {
            bb
        } else {
            return Err(mismatch());
        };
        let mut out_shape = batch_shape.to_vec();
        out_shape.extend([m, n]);
        Ok(Self {
            batch: numel(batch_shape),
            m,
            k,
            n,
            a_step: if ba.is_empty() { 0 } else { m * k },
            b_step: if bb.is_empty() { 0 } else { k * n },
            out_shape,
        })
    }
}

fn check_axis(op: &'static str, axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        Err(TensorError::InvalidAxis { op, axis, rank })
    } else {
        Ok(())
    }
}

fn index_map<'a>(src: &[usize], out: &[usize]) -> Box<dyn Fn(usize) -> usize + 'a> {
    if src == out {
        Box::new(|j| j)
    } else {
        let map = Broadcast::new(src, out);
        Box::new(move |j| map.index(j))
    }
}

fn softmax_along<T: Real>(data: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut out = vec![T::zero(); data.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |l: usize| (o * len + l) * inner + i;
            let max = (0..len)
                .map(|l| data[at(l)])
                .fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for l in 0..len {
                let e = (data[at(l)] - max).exp();
                out[at(l)] = e;
                total += e;
            }
            for l in 0..len {
                out[at(l)] /= total;
            }
        }
    }
    out
}

fn logsumexp_along<T: Real>(data: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut out = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for i in 0..inner {
            let at = |l: usize| (o * len + l) * inner + i;
            let max = (0..len)
                .map(|l| data[at(l)])
                .fold(T::neg_infinity(), T::max);
            let total: T = (0..len).map(|l| (data[at(l)] - max).exp()).sum();
            out.push(max + total.ln());
        }
    }
    out
}
