//! Static computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] is built once (shapes are checked while building), then
//! evaluated any number of times against named input bindings. Gradients of a
//! scalar node are taken with respect to inputs declared as leaves.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::kernels;
use crate::scalar::{round_half_away, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<S> {
    Input { name: String },
    Constant(Tensor<S>),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddRowBias(NodeId, NodeId),
    AddScalar(NodeId, S),
    MulScalar(NodeId, S),
    Transpose(NodeId),
    Reshape(NodeId),
    Gather(NodeId, Vec<usize>),
    ScatterAdd(NodeId, Vec<usize>),
    Concat(NodeId, NodeId),
    Softmax(NodeId),
    MaskedSoftmax(NodeId, NodeId),
    Gelu(NodeId),
    LayerNorm(NodeId, NodeId, NodeId),
    Exp(NodeId),
    Softplus(NodeId),
    Ln(NodeId),
    NormalCdf(NodeId),
    ClampMin(NodeId, S),
    RoundSte(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    SumLastAxis(NodeId),
}

impl<S> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Constant(_) => "constant",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddRowBias(..) => "add_row_bias",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Gather(..) => "gather",
            Op::ScatterAdd(..) => "scatter_add",
            Op::Concat(..) => "concat",
            Op::Softmax(..) => "softmax",
            Op::MaskedSoftmax(..) => "masked_softmax",
            Op::Gelu(..) => "gelu",
            Op::LayerNorm(..) => "layer_norm",
            Op::Exp(..) => "exp",
            Op::Softplus(..) => "softplus",
            Op::Ln(..) => "ln",
            Op::NormalCdf(..) => "normal_cdf",
            Op::ClampMin(..) => "clamp_min",
            Op::RoundSte(..) => "round_ste",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumLastAxis(..) => "sum_last_axis",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Input { .. } | Constant(_) => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | AddRowBias(a, b)
            | Concat(a, b) | MaskedSoftmax(a, b) => vec![*a, *b],
            LayerNorm(a, b, c) => vec![*a, *b, *c],
            AddScalar(a, _) | MulScalar(a, _) | Transpose(a) | Reshape(a) | Gather(a, _)
            | ScatterAdd(a, _) | Softmax(a) | Gelu(a) | Exp(a) | Softplus(a) | Ln(a)
            | NormalCdf(a) | ClampMin(a, _) | RoundSte(a) | Sum(a) | Mean(a)
            | SumLastAxis(a) => vec![*a],
        }
    }
}

#[derive(Clone, Debug)]
struct Node<S> {
    op: Op<S>,
    shape: Vec<usize>,
    needs_grad: bool,
}

/// Computation graph over scalar type `S`.
#[derive(Clone, Debug, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    inputs: BTreeMap<String, NodeId>,
    leaves: BTreeMap<String, NodeId>,
    outputs: BTreeMap<String, NodeId>,
}

/// Values of every node after one evaluation.
#[derive(Clone, Debug)]
pub struct Evaluation<S> {
    values: Vec<Tensor<S>>,
    outputs: BTreeMap<String, NodeId>,
}

impl<S: Scalar> Evaluation<S> {
    pub fn value(&self, node: NodeId) -> &Tensor<S> {
        &self.values[node.0]
    }

    pub fn output(&self, name: &str) -> Option<&Tensor<S>> {
        self.outputs.get(name).map(|&n| &self.values[n.0])
    }

    /// Named outputs, in name order.
    pub fn outputs(&self) -> BTreeMap<String, Tensor<S>> {
        self.outputs
            .iter()
            .map(|(k, &n)| (k.clone(), self.values[n.0].clone()))
            .collect()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            inputs: BTreeMap::new(),
            leaves: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, n: NodeId) -> &[usize] {
        &self.nodes[n.0].shape
    }

    fn push(&mut self, op: Op<S>, shape: Vec<usize>) -> NodeId {
        let needs_grad = op.inputs().iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            op,
            shape,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn err(&self, op: &str, detail: String) -> Error {
        Error::shape(format!("node #{} ({op})", self.nodes.len()), detail)
    }

    /// Non-differentiable named input.
    pub fn input(&mut self, name: &str, shape: impl Into<Vec<usize>>) -> NodeId {
        let id = self.push(
            Op::Input {
                name: name.to_string(),
            },
            shape.into(),
        );
        self.inputs.insert(name.to_string(), id);
        id
    }

    /// Differentiable named input.
    pub fn leaf(&mut self, name: &str, shape: impl Into<Vec<usize>>) -> NodeId {
        let id = self.input(name, shape);
        self.nodes[id.0].needs_grad = true;
        self.leaves.insert(name.to_string(), id);
        id
    }

    pub fn constant(&mut self, t: Tensor<S>) -> NodeId {
        let shape = t.shape().to_vec();
        self.push(Op::Constant(t), shape)
    }

    pub fn set_output(&mut self, name: &str, node: NodeId) {
        self.outputs.insert(name.to_string(), node);
    }

    pub fn output_node(&self, name: &str) -> Option<NodeId> {
        self.outputs.get(name).copied()
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.err("matmul", format!("{sa:?} x {sb:?}")));
        }
        Ok(self.push(Op::MatMul(a, b), vec![sa[0], sb[1]]))
    }

    fn same_shape(&mut self, a: NodeId, b: NodeId, op: Op<S>) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            let d = format!("{:?} vs {:?}", self.shape(a), self.shape(b));
            return Err(self.err(op.name(), d));
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(op, shape))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, Op::Div(a, b))
    }

    /// Adds a vector to every row of `a` (broadcast over the last axis).
    pub fn add_row_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(bias).to_vec());
        if sb.len() != 1 || sa.last() != Some(&sb[0]) {
            return Err(self.err("add_row_bias", format!("{sa:?} + {sb:?}")));
        }
        Ok(self.push(Op::AddRowBias(a, bias), sa))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: S) -> NodeId {
        let s = self.shape(a).to_vec();
        self.push(Op::AddScalar(a, c), s)
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: S) -> NodeId {
        let s = self.shape(a).to_vec();
        self.push(Op::MulScalar(a, c), s)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(self.err("transpose", format!("rank {} input", s.len())));
        }
        Ok(self.push(Op::Transpose(a), vec![s[1], s[0]]))
    }

    pub fn reshape(&mut self, a: NodeId, shape: impl Into<Vec<usize>>) -> Result<NodeId> {
        let shape = shape.into();
        if numel(&shape) != numel(self.shape(a)) {
            let d = format!("{:?} -> {shape:?}", self.shape(a));
            return Err(self.err("reshape", d));
        }
        Ok(self.push(Op::Reshape(a), shape))
    }

    /// `out.flat[i] = a.flat[index[i]]`.
    pub fn gather(
        &mut self,
        a: NodeId,
        index: Vec<usize>,
        shape: impl Into<Vec<usize>>,
    ) -> Result<NodeId> {
        let shape = shape.into();
        let n = numel(self.shape(a));
        if numel(&shape) != index.len() {
            return Err(self.err("gather", format!("{} indices for {shape:?}", index.len())));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(self.err("gather", format!("index {bad} out of {n}")));
        }
        Ok(self.push(Op::Gather(a, index), shape))
    }

    /// `out = zeros(shape); out.flat[index[i]] += a.flat[i]`.
    pub fn scatter_add(
        &mut self,
        a: NodeId,
        index: Vec<usize>,
        shape: impl Into<Vec<usize>>,
    ) -> Result<NodeId> {
        let shape = shape.into();
        let n = numel(&shape);
        if numel(self.shape(a)) != index.len() {
            let d = format!("{} indices for input {:?}", index.len(), self.shape(a));
            return Err(self.err("scatter_add", d));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(self.err("scatter_add", format!("index {bad} out of {n}")));
        }
        Ok(self.push(Op::ScatterAdd(a, index), shape))
    }

    /// Concatenates two matrices along columns.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(self.err("concat", format!("{sa:?} | {sb:?}")));
        }
        Ok(self.push(Op::Concat(a, b), vec![sa[0], sa[1] + sb[1]]))
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a).to_vec();
        self.push(Op::Softmax(a), s)
    }

    /// Softmax over the last axis of `logits + mask`. The mask must have the
    /// logits' shape or a trailing sub-shape of it; no gradient flows into it.
    pub fn masked_softmax(&mut self, logits: NodeId, mask: NodeId) -> Result<NodeId> {
        let (sl, sm) = (self.shape(logits).to_vec(), self.shape(mask).to_vec());
        if sm.len() > sl.len() || sl[sl.len() - sm.len()..] != sm[..] || sm.is_empty() {
            return Err(self.err("masked_softmax", format!("{sl:?} with mask {sm:?}")));
        }
        Ok(self.push(Op::MaskedSoftmax(logits, mask), sl))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a).to_vec();
        self.push(Op::Gelu(a), s)
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().unwrap_or(&0);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            let det = format!(
                "{sx:?} with gamma {:?}, beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            );
            return Err(self.err("layer_norm", det));
        }
        Ok(self.push(Op::LayerNorm(x, gamma, beta), sx))
    }

    fn unary(&mut self, a: NodeId, op: Op<S>) -> NodeId {
        let s = self.shape(a).to_vec();
        self.push(op, s)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Exp(a))
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Softplus(a))
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Ln(a))
    }

    pub fn normal_cdf(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::NormalCdf(a))
    }

    /// `max(a, floor)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, a: NodeId, floor: S) -> NodeId {
        self.unary(a, Op::ClampMin(a, floor))
    }

    /// Rounds half away from zero; the backward pass is the identity.
    pub fn round_ste(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::RoundSte(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a), vec![])
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a), vec![])
    }

    pub fn sum_last_axis(&mut self, a: NodeId) -> Result<NodeId> {
        let mut s = self.shape(a).to_vec();
        if s.is_empty() {
            return Err(self.err("sum_last_axis", "scalar input".into()));
        }
        s.pop();
        Ok(self.push(Op::SumLastAxis(a), s))
    }

    /// `x · w + b` with `w (k×n)` and `b (n)`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let y = self.matmul(x, w)?;
        self.add_row_bias(y, b)
    }

    pub fn evaluate(&self, inputs: &HashMap<String, Tensor<S>>) -> Result<Evaluation<S>> {
        let mut values: Vec<Tensor<S>> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let v = self.forward(node, &values, inputs).map_err(|e| match e {
                Error::Shape { detail, .. } => Error::Shape {
                    context: format!("node #{i} ({})", node.op.name()),
                    detail,
                },
                other => other,
            })?;
            debug_assert_eq!(v.shape(), &node.shape[..], "node #{i}");
            values.push(v);
        }
        Ok(Evaluation {
            values,
            outputs: self.outputs.clone(),
        })
    }

    fn forward(
        &self,
        node: &Node<S>,
        vals: &[Tensor<S>],
        inputs: &HashMap<String, Tensor<S>>,
    ) -> Result<Tensor<S>> {
        let v = |n: &NodeId| &vals[n.0];
        let shape = node.shape.clone();
        let zip = |a: &NodeId, b: &NodeId, f: fn(S, S) -> S| {
            let d = v(a).data().iter().zip(v(b).data()).map(|(&x, &y)| f(x, y));
            Tensor::new(shape.clone(), d.collect())
        };
        let map = |a: &NodeId, f: &dyn Fn(S) -> S| {
            Tensor::new(shape.clone(), v(a).data().iter().map(|&x| f(x)).collect())
        };
        match &node.op {
            Op::Input { name } => {
                let t = inputs
                    .get(name)
                    .ok_or_else(|| Error::UnboundInput(name.clone()))?;
                if t.shape() != &shape[..] {
                    return Err(Error::shape(
                        "input",
                        format!("`{name}` bound with {:?}, expected {shape:?}", t.shape()),
                    ));
                }
                Ok(t.clone())
            }
            Op::Constant(t) => Ok(t.clone()),
            Op::MatMul(a, b) => {
                let (sa, sb) = (v(a).shape(), v(b).shape());
                let d = kernels::matmul(v(a).data(), v(b).data(), sa[0], sa[1], sb[1]);
                Tensor::new(shape, d)
            }
            Op::Add(a, b) => zip(a, b, |x, y| x + y),
            Op::Sub(a, b) => zip(a, b, |x, y| x - y),
            Op::Mul(a, b) => zip(a, b, |x, y| x * y),
            Op::Div(a, b) => zip(a, b, |x, y| x / y),
            Op::AddRowBias(a, b) => {
                let mut d = v(a).data().to_vec();
                kernels::add_row_bias(&mut d, v(b).data());
                Tensor::new(shape, d)
            }
            Op::AddScalar(a, c) => map(a, &|x| x + *c),
            Op::MulScalar(a, c) => map(a, &|x| x * *c),
            Op::Transpose(a) => {
                let s = v(a).shape();
                Tensor::new(shape, transpose(v(a).data(), s[0], s[1]))
            }
            Op::Reshape(a) => Tensor::new(shape, v(a).data().to_vec()),
            Op::Gather(a, idx) => {
                let src = v(a).data();
                Tensor::new(shape, idx.iter().map(|&i| src[i]).collect())
            }
            Op::ScatterAdd(a, idx) => {
                let mut out = vec![S::zero(); numel(&shape)];
                for (&i, &x) in idx.iter().zip(v(a).data()) {
                    out[i] = out[i] + x;
                }
                Tensor::new(shape, out)
            }
            Op::Concat(a, b) => {
                let (na, nb) = (v(a).shape()[1], v(b).shape()[1]);
                let mut out = Vec::with_capacity(numel(&shape));
                for r in 0..shape[0] {
                    out.extend_from_slice(&v(a).data()[r * na..(r + 1) * na]);
                    out.extend_from_slice(&v(b).data()[r * nb..(r + 1) * nb]);
                }
                Tensor::new(shape, out)
            }
            Op::Softmax(a) => {
                let n = *shape.last().unwrap_or(&1);
                Tensor::new(shape.clone(), kernels::softmax(v(a).data(), n))
            }
            Op::MaskedSoftmax(a, m) => {
                let n = *shape.last().unwrap_or(&1);
                let mask = broadcast_mask(v(m).data(), v(a).len());
                Tensor::new(shape.clone(), kernels::masked_softmax(v(a).data(), &mask, n))
            }
            Op::Gelu(a) => map(a, &kernels::gelu),
            Op::LayerNorm(x, g, b) => {
                Tensor::new(shape, kernels::layer_norm(v(x).data(), v(g).data(), v(b).data()))
            }
            Op::Exp(a) => map(a, &|x| x.exp()),
            Op::Softplus(a) => map(a, &softplus),
            Op::Ln(a) => map(a, &|x| x.ln()),
            Op::NormalCdf(a) => map(a, &|x| x.normal_cdf()),
            Op::ClampMin(a, c) => map(a, &|x| x.max(*c)),
            Op::RoundSte(a) => map(a, &round_half_away),
            Op::Sum(a) => Ok(Tensor::scalar(v(a).sum())),
            Op::Mean(a) => {
                let n = S::of(v(a).len().max(1) as f64);
                Ok(Tensor::scalar(v(a).sum() / n))
            }
            Op::SumLastAxis(a) => {
                let n = *v(a).shape().last().unwrap_or(&1);
                let d = if n == 0 {
                    vec![S::zero(); numel(&shape)]
                } else {
                    v(a).data()
                        .chunks(n)
                        .map(|r| r.iter().fold(S::zero(), |s, &x| s + x))
                        .collect()
                };
                Tensor::new(shape, d)
            }
        }
    }

    /// Gradient of the scalar node `output` with respect to the named leaves.
    pub fn gradients(
        &self,
        eval: &Evaluation<S>,
        output: NodeId,
        wrt: &[&str],
    ) -> Result<HashMap<String, Tensor<S>>> {
        let out_shape = &self.nodes[output.0].shape;
        if numel(out_shape) != 1 {
            return Err(Error::NonScalarOutput(out_shape.clone()));
        }
        let mut targets = Vec::with_capacity(wrt.len());
        for &name in wrt {
            let id = *self
                .leaves
                .get(name)
                .ok_or_else(|| Error::NotALeaf(name.to_string()))?;
            targets.push((name, id));
        }

        let mut grads: Vec<Option<Vec<S>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![S::one()]);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Input { .. }) {
                grads[i] = Some(g);
                continue;
            }
            for (input, contrib) in self.backward(i, &g, eval) {
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, &c)| *a = *a + c),
                    slot => *slot = Some(contrib),
                }
            }
        }

        let mut out = HashMap::new();
        for (name, id) in targets {
            let shape = self.nodes[id.0].shape.clone();
            let data = grads
                .get_mut(id.0)
                .and_then(Option::take)
                .unwrap_or_else(|| vec![S::zero(); numel(&shape)]);
            out.insert(name.to_string(), Tensor::new(shape, data)?);
        }
        Ok(out)
    }

    fn backward(&self, i: usize, g: &[S], eval: &Evaluation<S>) -> Vec<(NodeId, Vec<S>)> {
        let node = &self.nodes[i];
        let val = |n: &NodeId| eval.value(*n);
        let shape_of = |n: &NodeId| self.nodes[n.0].shape.clone();
        let elementwise = |a: &NodeId, f: &dyn Fn(S, S) -> S| {
            val(a).data().iter().zip(g).map(|(&x, &gi)| f(x, gi)).collect::<Vec<S>>()
        };
        match &node.op {
            Op::Input { .. } | Op::Constant(_) => vec![],
            Op::MatMul(a, b) => {
                let (sa, sb) = (shape_of(a), shape_of(b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let bt = transpose(val(b).data(), k, n);
                let at = transpose(val(a).data(), m, k);
                vec![
                    (*a, kernels::matmul(g, &bt, m, n, k)),
                    (*b, kernels::matmul(&at, g, k, m, n)),
                ]
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|&x| -x).collect())],
            Op::Mul(a, b) => {
                let ga = g.iter().zip(val(b).data()).map(|(&gi, &y)| gi * y).collect();
                let gb = g.iter().zip(val(a).data()).map(|(&gi, &x)| gi * x).collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::Div(a, b) => {
                let (xa, xb) = (val(a).data(), val(b).data());
                let ga = g.iter().zip(xb).map(|(&gi, &y)| gi / y).collect();
                let gb = g
                    .iter()
                    .zip(xa.iter().zip(xb))
                    .map(|(&gi, (&x, &y))| -gi * x / (y * y))
                    .collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::AddRowBias(a, b) => {
                let n = shape_of(b)[0];
                let mut gb = vec![S::zero(); n];
                for row in g.chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(s, &x)| *s = *s + x);
                }
                vec![(*a, g.to_vec()), (*b, gb)]
            }
            Op::AddScalar(a, _) | Op::RoundSte(a) | Op::Reshape(a) => vec![(*a, g.to_vec())],
            Op::MulScalar(a, c) => vec![(*a, g.iter().map(|&x| x * *c).collect())],
            Op::Transpose(a) => {
                let s = shape_of(a);
                vec![(*a, transpose(g, s[1], s[0]))]
            }
            Op::Gather(a, idx) => {
                let mut ga = vec![S::zero(); numel(&shape_of(a))];
                for (&i, &gi) in idx.iter().zip(g) {
                    ga[i] = ga[i] + gi;
                }
                vec![(*a, ga)]
            }
            Op::ScatterAdd(a, idx) => vec![(*a, idx.iter().map(|&i| g[i]).collect())],
            Op::Concat(a, b) => {
                let (na, nb) = (shape_of(a)[1], shape_of(b)[1]);
                let rows = shape_of(a)[0];
                let mut ga = Vec::with_capacity(rows * na);
                let mut gb = Vec::with_capacity(rows * nb);
                for r in 0..rows {
                    let row = &g[r * (na + nb)..(r + 1) * (na + nb)];
                    ga.extend_from_slice(&row[..na]);
                    gb.extend_from_slice(&row[na..]);
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Softmax(a) | Op::MaskedSoftmax(a, _) => {
                let y = eval.values[i].data();
                let n = *node.shape.last().unwrap_or(&1);
                let mut gx = vec![S::zero(); y.len()];
                if n > 0 {
                    for ((yr, gr), or) in y.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                        let dotp = kernels::dot(yr, gr);
                        for ((o, &yi), &gi) in or.iter_mut().zip(yr).zip(gr) {
                            *o = yi * (gi - dotp);
                        }
                    }
                }
                vec![(*a, gx)]
            }
            Op::Gelu(a) => vec![(*a, elementwise(a, &|x, gi| gi * kernels::gelu_grad(x)))],
            Op::LayerNorm(x, gamma, beta) => {
                let n = shape_of(gamma)[0];
                let xs = val(x).data();
                let gam = val(gamma).data();
                let mut gx = vec![S::zero(); xs.len()];
                let mut gg = vec![S::zero(); n];
                let mut gbeta = vec![S::zero(); n];
                let nf = S::of(n as f64);
                for ((xr, gr), oxr) in xs.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                    let (mean, inv) = kernels::row_moments(xr);
                    let xhat: Vec<S> = xr.iter().map(|&v| (v - mean) * inv).collect();
                    let gxhat: Vec<S> = gr.iter().zip(gam).map(|(&a, &b)| a * b).collect();
                    let s1 = gxhat.iter().fold(S::zero(), |s, &v| s + v);
                    let s2 = kernels::dot(&gxhat, &xhat);
                    for j in 0..n {
                        gg[j] = gg[j] + gr[j] * xhat[j];
                        gbeta[j] = gbeta[j] + gr[j];
                        oxr[j] = inv / nf * (nf * gxhat[j] - s1 - xhat[j] * s2);
                    }
                }
                vec![(*x, gx), (*gamma, gg), (*beta, gbeta)]
            }
            Op::Exp(a) => {
                let y = eval.values[i].data();
                vec![(*a, y.iter().zip(g).map(|(&yi, &gi)| yi * gi).collect())]
            }
            Op::Softplus(a) => vec![(
                *a,
                elementwise(a, &|x, gi| gi / (S::one() + (-x).exp())),
            )],
            Op::Ln(a) => vec![(*a, elementwise(a, &|x, gi| gi / x))],
            Op::NormalCdf(a) => vec![(*a, elementwise(a, &|x, gi| gi * x.normal_pdf()))],
            Op::ClampMin(a, c) => vec![(
                *a,
                elementwise(a, &|x, gi| if x > *c { gi } else { S::zero() }),
            )],
            Op::Sum(a) => vec![(*a, vec![g[0]; numel(&shape_of(a))])],
            Op::Mean(a) => {
                let n = numel(&shape_of(a));
                vec![(*a, vec![g[0] / S::of(n.max(1) as f64); n])]
            }
            Op::SumLastAxis(a) => {
                let n = *shape_of(a).last().unwrap_or(&1);
                let mut ga = Vec::with_capacity(numel(&shape_of(a)));
                for &gi in g {
                    ga.extend(std::iter::repeat_n(gi, n));
                }
                vec![(*a, ga)]
            }
        }
    }

}

fn softplus<S: Scalar>(x: S) -> S {
    x.max(S::zero()) + (-x.abs()).exp().ln_1p()
}

fn transpose<S: Copy>(a: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(a.len());
    for c in 0..cols {
        for r in 0..rows {
            out.push(a[r * cols + c]);
        }
    }
    out
}

fn broadcast_mask<S: Scalar>(mask: &[S], n: usize) -> Vec<S> {
    if mask.len() == n {
        mask.to_vec()
    } else {
        mask.iter().copied().cycle().take(n).collect()
    }
}

/// Softmax over the last axis of `logits + mask` (eager form of the graph op).
///
/// Rows whose every entry is masked with `-inf` come out as all zeros.
pub fn masked_softmax<S: Scalar>(logits: &Tensor<S>, mask: &Tensor<S>) -> Result<Tensor<S>> {
    let (sl, sm) = (logits.shape(), mask.shape());
    if sm.is_empty() || sm.len() > sl.len() || sl[sl.len() - sm.len()..] != sm[..] {
        return Err(Error::shape("masked_softmax", format!("{sl:?} with mask {sm:?}")));
    }
    let n = *sl.last().unwrap_or(&1);
    let m = broadcast_mask(mask.data(), logits.len());
    Tensor::new(sl.to_vec(), kernels::masked_softmax(logits.data(), &m, n))
}
