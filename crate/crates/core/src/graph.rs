//! Reverse-mode automatic differentiation over a small set of primitives.
//!
//! A [`Graph`] is built symbolically: leaves are declared by name and shape,
//! ops check their shape rules as they are added. [`Graph::forward`] binds
//! tensors to the leaves and evaluates every node in insertion order (which is
//! a topological order by construction); [`Graph::backward`] then walks the
//! nodes in reverse and returns gradients for every leaf declared with
//! `requires_grad`. A graph serves one forward/backward pair; call
//! [`Graph::reset`] to reuse it.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::real::Real;
use crate::tensor::{volume, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    MatMul,
    Conv2d,
    MaxPool2d,
    Relu,
    Flatten,
    Dropout,
    LogSoftmax,
    Sum,
    Scale,
    CrossEntropy,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Leaf => "leaf",
            Self::Add => "add",
            Self::Sub => "sub",
            Self::Mul => "mul",
            Self::MatMul => "matmul",
            Self::Conv2d => "conv2d",
            Self::MaxPool2d => "maxpool2d",
            Self::Relu => "relu",
            Self::Flatten => "flatten",
            Self::Dropout => "dropout",
            Self::LogSoftmax => "log_softmax",
            Self::Sum => "sum",
            Self::Scale => "scale",
            Self::CrossEntropy => "cross_entropy",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf { name: String, requires_grad: bool },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Conv2d {
        input: NodeId,
        kernels: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    },
    MaxPool2d { input: NodeId, size: usize },
    Relu(NodeId),
    Flatten(NodeId),
    Dropout {
        input: NodeId,
        rate: f32,
        seed: u64,
        train: bool,
    },
    LogSoftmax(NodeId),
    Sum(NodeId),
    Scale(NodeId, f64),
    CrossEntropy { log_probs: NodeId, targets: NodeId },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf { .. } => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::MaxPool2d { .. } => OpKind::MaxPool2d,
            Op::Relu(_) => OpKind::Relu,
            Op::Flatten(_) => OpKind::Flatten,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::LogSoftmax(_) => OpKind::LogSoftmax,
            Op::Sum(_) => OpKind::Sum,
            Op::Scale(..) => OpKind::Scale,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match *self {
            Op::Leaf { .. } => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![a, b],
            Op::Conv2d {
                input,
                kernels,
                bias,
                ..
            } => {
                let mut v = vec![input, kernels];
                v.extend(bias);
                v
            }
            Op::MaxPool2d { input, .. } | Op::Dropout { input, .. } => vec![input],
            Op::Relu(a) | Op::Flatten(a) | Op::LogSoftmax(a) | Op::Sum(a) | Op::Scale(a, _) => {
                vec![a]
            }
            Op::CrossEntropy { log_probs, targets } => vec![log_probs, targets],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    needs_grad: bool,
}

/// Per-node state saved by forward for use in backward.
#[derive(Clone, Debug, Default)]
enum Saved<T> {
    #[default]
    None,
    Argmax(Vec<u32>),
    Mask(Vec<T>),
    Cols(Vec<T>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum State {
    Built,
    Forwarded(NodeId),
    Consumed,
}

/// Tensors bound to named leaves for one forward pass.
pub struct Bindings<'a, T: Real = f32> {
    map: BTreeMap<String, &'a Tensor<T>>,
}

impl<T: Real> Default for Bindings<'_, T> {
    fn default() -> Self {
        Self {
            map: BTreeMap::new(),
        }
    }
}

impl<'a, T: Real> Bindings<'a, T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, name: impl Into<String>, tensor: &'a Tensor<T>) -> &mut Self {
        self.map.insert(name.into(), tensor);
        self
    }

    pub fn with(mut self, name: impl Into<String>, tensor: &'a Tensor<T>) -> Self {
        self.bind(name, tensor);
        self
    }

    pub fn get(&self, name: &str) -> Option<&'a Tensor<T>> {
        self.map.get(name).copied()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }
}

/// Gradients keyed by leaf name.
pub type Gradients<T = f32> = BTreeMap<String, Tensor<T>>;

/// A single-use computation graph.
#[derive(Clone, Debug)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node>,
    values: Vec<Option<Vec<T>>>,
    saved: Vec<Saved<T>>,
    state: State,
    #[cfg(test)]
    corrupt: Option<NodeId>,
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
            values: Vec::new(),
            saved: Vec::new(),
            state: State::Built,
            #[cfg(test)]
            corrupt: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].op.kind()
    }

    /// Names, shapes and `requires_grad` flags of all leaves in declaration order.
    pub fn leaves(&self) -> Vec<(String, Vec<usize>, bool)> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Leaf {
                    name,
                    requires_grad,
                } => Some((name.clone(), n.shape.clone(), *requires_grad)),
                _ => None,
            })
            .collect()
    }

    /// Same structure with a different element type and no evaluated state.
    pub fn recast<U: Real>(&self) -> Graph<U> {
        Graph {
            nodes: self.nodes.clone(),
            values: Vec::new(),
            saved: Vec::new(),
            state: State::Built,
            #[cfg(test)]
            corrupt: self.corrupt,
        }
    }

    /// Drops evaluated values so the graph can run another forward pass.
    pub fn reset(&mut self) {
        self.values.clear();
        self.saved.clear();
        self.state = State::Built;
    }

    fn label(&self, id: usize) -> String {
        match &self.nodes[id].op {
            Op::Leaf { name, .. } => format!("leaf `{name}`"),
            op => format!("{}#{id}", op.kind()),
        }
    }

    fn check(&self, id: NodeId) -> Result<&Node> {
        self.nodes.get(id.0).ok_or(Error::UnknownNode(id.0))
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        let needs_grad = match &op {
            Op::Leaf { requires_grad, .. } => *requires_grad,
            other => other.inputs().iter().any(|i| self.nodes[i.0].needs_grad),
        };
        self.nodes.push(Node {
            op,
            shape,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn mismatch_at(&self, kind: OpKind, expected: &[usize], got: &[usize]) -> Error {
        Error::ShapeMismatch {
            node: format!("{kind}#{}", self.nodes.len()),
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }

    // ----- builders -------------------------------------------------------

    pub fn leaf(
        &mut self,
        name: impl Into<String>,
        shape: impl Into<Vec<usize>>,
        requires_grad: bool,
    ) -> Result<NodeId> {
        let name = name.into();
        let shape = shape.into();
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch {
                node: format!("leaf `{name}`"),
                expected: vec![1],
                got: shape,
            });
        }
        if self
            .nodes
            .iter()
            .any(|n| matches!(&n.op, Op::Leaf { name: other, .. } if *other == name))
        {
            return Err(Error::InvalidConfig(format!("duplicate leaf `{name}`")));
        }
        Ok(self.push(
            Op::Leaf {
                name,
                requires_grad,
            },
            shape,
        ))
    }

    /// Elementwise add; `b` may also be a suffix shape of `a` (row broadcast).
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.check(a)?.shape.clone();
        let sb = self.check(b)?.shape.clone();
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != sb[..] {
            return Err(self.mismatch_at(OpKind::Add, &sa, &sb));
        }
        Ok(self.push(Op::Add(a, b), sa))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.check(a)?.shape.clone();
        let sb = self.check(b)?.shape.clone();
        if sa != sb {
            return Err(self.mismatch_at(OpKind::Sub, &sa, &sb));
        }
        Ok(self.push(Op::Sub(a, b), sa))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.check(a)?.shape.clone();
        let sb = self.check(b)?.shape.clone();
        if sa != sb {
            return Err(self.mismatch_at(OpKind::Mul, &sa, &sb));
        }
        Ok(self.push(Op::Mul(a, b), sa))
    }

    /// `[m, k] × [k, n] → [m, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.check(a)?.shape.clone();
        let sb = self.check(b)?.shape.clone();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.mismatch_at(OpKind::MatMul, &sa, &sb));
        }
        Ok(self.push(Op::MatMul(a, b), vec![sa[0], sb[1]]))
    }

    /// Cross-correlation of a `B×C×H×W` input with `K×C×kh×kw` kernels.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernels: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let si = self.check(input)?.shape.clone();
        let sk = self.check(kernels)?.shape.clone();
        if si.len() != 4 || sk.len() != 4 || si[1] != sk[1] {
            return Err(self.mismatch_at(OpKind::Conv2d, &si, &sk));
        }
        if let Some(b) = bias {
            let sb = self.check(b)?.shape.clone();
            if sb != [sk[0]] {
                return Err(self.mismatch_at(OpKind::Conv2d, &[sk[0]], &sb));
            }
        }
        if stride == 0 {
            return Err(Error::InvalidConfig("conv2d stride must be >= 1".into()));
        }
        let (ph, pw) = (si[2] + 2 * pad, si[3] + 2 * pad);
        if sk[2] > ph || sk[3] > pw {
            return Err(Error::KernelTooLarge {
                node: format!("conv2d#{}", self.nodes.len()),
                kernel: (sk[2], sk[3]),
                input: (ph, pw),
            });
        }
        let oh = (ph - sk[2]) / stride + 1;
        let ow = (pw - sk[3]) / stride + 1;
        Ok(self.push(
            Op::Conv2d {
                input,
                kernels,
                bias,
                stride,
                pad,
            },
            vec![si[0], sk[0], oh, ow],
        ))
    }

    /// Non-overlapping `size×size` max pooling over a `B×C×H×W` input.
    pub fn maxpool2d(&mut self, input: NodeId, size: usize) -> Result<NodeId> {
        let si = self.check(input)?.shape.clone();
        if si.len() != 4 || size == 0 {
            return Err(self.mismatch_at(OpKind::MaxPool2d, &[0, 0, size, size], &si));
        }
        if size > si[2] || size > si[3] {
            return Err(Error::KernelTooLarge {
                node: format!("maxpool2d#{}", self.nodes.len()),
                kernel: (size, size),
                input: (si[2], si[3]),
            });
        }
        Ok(self.push(
            Op::MaxPool2d { input, size },
            vec![si[0], si[1], si[2] / size, si[3] / size],
        ))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.check(a)?.shape.clone();
        Ok(self.push(Op::Relu(a), s))
    }

    /// `B×…` → `B×(product of the rest)`.
    pub fn flatten(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.check(a)?.shape.clone();
        let rest = volume(&s[1..]);
        Ok(self.push(Op::Flatten(a), vec![s[0], rest]))
    }

    /// Inverted dropout in training mode; identity otherwise.
    pub fn dropout(&mut self, a: NodeId, rate: f32, seed: u64, train: bool) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidConfig(format!("dropout rate {rate} outside [0, 1)")));
        }
        let s = self.check(a)?.shape.clone();
        Ok(self.push(
            Op::Dropout {
                input: a,
                rate,
                seed,
                train,
            },
            s,
        ))
    }

    /// Row-wise log-softmax over a `B×K` input.
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.check(a)?.shape.clone();
        if s.len() != 2 {
            return Err(self.mismatch_at(OpKind::LogSoftmax, &[0, 0], &s));
        }
        Ok(self.push(Op::LogSoftmax(a), s))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        Ok(self.push(Op::Sum(a), vec![1]))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let s = self.check(a)?.shape.clone();
        Ok(self.push(Op::Scale(a, factor), s))
    }

    /// Mean over rows of `-Σₖ targets·log_probs`; a scalar.
    pub fn cross_entropy(&mut self, log_probs: NodeId, targets: NodeId) -> Result<NodeId> {
        let sl = self.check(log_probs)?.shape.clone();
        let st = self.check(targets)?.shape.clone();
        if sl.len() != 2 || sl != st {
            return Err(self.mismatch_at(OpKind::CrossEntropy, &sl, &st));
        }
        Ok(self.push(Op::CrossEntropy { log_probs, targets }, vec![1]))
    }

    #[cfg(test)]
    pub(crate) fn corrupt_backward(&mut self, node: NodeId) {
        self.corrupt = Some(node);
    }

    // ----- evaluation -----------------------------------------------------

    fn val(&self, id: NodeId) -> &[T] {
        self.values[id.0]
            .as_deref()
            .expect("inputs are evaluated before their consumers")
    }

    /// Evaluated value of a node after forward.
    pub fn value(&self, id: NodeId) -> Option<Tensor<T>> {
        let data = self.values.get(id.0)?.as_ref()?.clone();
        Tensor::new(self.nodes[id.0].shape.clone(), data).ok()
    }

    /// Evaluates every node up to and including `output`.
    pub fn forward(&mut self, bindings: &Bindings<'_, T>, output: NodeId) -> Result<Tensor<T>> {
        if self.state != State::Built {
            return Err(Error::GraphConsumed);
        }
        self.check(output)?;
        self.values = vec![None; self.nodes.len()];
        self.saved = vec![Saved::None; self.nodes.len()];
        for id in 0..=output.0 {
            let (value, saved) = self.eval_node(id, bindings)?;
            self.values[id] = Some(value);
            self.saved[id] = saved;
        }
        self.state = State::Forwarded(output);
        Ok(self.value(output).expect("output was just evaluated"))
    }

    fn eval_node(&self, id: usize, bindings: &Bindings<'_, T>) -> Result<(Vec<T>, Saved<T>)> {
        let node = &self.nodes[id];
        let out = match &node.op {
            Op::Leaf { name, .. } => {
                let t = bindings
                    .get(name)
                    .ok_or_else(|| Error::UnboundLeaf(name.clone()))?;
                if t.shape() != node.shape.as_slice() {
                    return Err(Error::ShapeMismatch {
                        node: self.label(id),
                        expected: node.shape.clone(),
                        got: t.shape().to_vec(),
                    });
                }
                t.data().to_vec()
            }
            &Op::Add(a, b) => {
                let (va, vb) = (self.val(a), self.val(b));
                let mut out = Vec::with_capacity(va.len());
                for chunk in va.chunks_exact(vb.len()) {
                    out.extend(chunk.iter().zip(vb).map(|(&x, &y)| x + y));
                }
                out
            }
            &Op::Sub(a, b) => zip_map(self.val(a), self.val(b), |x, y| x - y),
            &Op::Mul(a, b) => zip_map(self.val(a), self.val(b), |x, y| x * y),
            &Op::MatMul(a, b) => {
                let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
                let mut out = vec![T::ZERO; sa[0] * sb[1]];
                kernels::matmul(self.val(a), self.val(b), sa[0], sa[1], sb[1], &mut out);
                out
            }
            &Op::Conv2d {
                input,
                kernels: k,
                bias,
                stride,
                pad,
            } => return Ok(self.conv_forward(input, k, bias, stride, pad)),
            &Op::MaxPool2d { input, size } => {
                return Ok(self.pool_forward(id, input, size));
            }
            &Op::Relu(a) => self
                .val(a)
                .iter()
                .map(|&x| if x > T::ZERO { x } else { T::ZERO })
                .collect(),
            &Op::Flatten(a) => self.val(a).to_vec(),
            &Op::Dropout {
                input,
                rate,
                seed,
                train,
            } => {
                let v = self.val(input);
                if !train || rate == 0.0 {
                    v.to_vec()
                } else {
                    let keep = T::from_f64(1.0 / (1.0 - rate as f64));
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let mask: Vec<T> = (0..v.len())
                        .map(|_| {
                            if rng.gen::<f32>() < rate {
                                T::ZERO
                            } else {
                                keep
                            }
                        })
                        .collect();
                    let out = zip_map(v, &mask, |x, m| x * m);
                    return Ok((out, Saved::Mask(mask)));
                }
            }
            &Op::LogSoftmax(a) => {
                let k = node.shape[1];
                let v = self.val(a);
                let mut out = vec![T::ZERO; v.len()];
                for (row, dst) in v.chunks_exact(k).zip(out.chunks_exact_mut(k)) {
                    let max = row
                        .iter()
                        .map(|x| x.to_f64())
                        .fold(f64::NEG_INFINITY, f64::max);
                    let lse = libm::log(row.iter().map(|x| libm::exp(x.to_f64() - max)).sum());
                    for (d, &x) in dst.iter_mut().zip(row) {
                        *d = T::from_f64(x.to_f64() - max - lse);
                    }
                }
                out
            }
            &Op::Sum(a) => vec![T::from_f64(self.val(a).iter().map(|x| x.to_f64()).sum())],
            &Op::Scale(a, f) => self
                .val(a)
                .iter()
                .map(|&x| T::from_f64(x.to_f64() * f))
                .collect(),
            &Op::CrossEntropy { log_probs, targets } => {
                let k = node_shape(&self.nodes, log_probs)[1];
                let (lp, tg) = (self.val(log_probs), self.val(targets));
                let rows = lp.len() / k;
                let mut total = 0.0f64;
                for r in 0..rows {
                    let trow = &tg[r * k..(r + 1) * k];
                    let sum: f64 = trow.iter().map(|x| x.to_f64()).sum();
                    if trow.iter().any(|&x| !(x >= T::ZERO)) || libm::fabs(sum - 1.0) > 1e-5 {
                        return Err(Error::RowNotNormalized { row: r, sum });
                    }
                    for (t, l) in trow.iter().zip(&lp[r * k..(r + 1) * k]) {
                        if *t != T::ZERO {
                            total -= t.to_f64() * l.to_f64();
                        }
                    }
                }
                vec![T::from_f64(total / rows as f64)]
            }
        };
        Ok((out, Saved::None))
    }

    fn conv_forward(
        &self,
        input: NodeId,
        k: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> (Vec<T>, Saved<T>) {
        let (si, sk) = (&self.nodes[input.0].shape, &self.nodes[k.0].shape);
        let g = ConvGeom {
            channels: si[1],
            height: si[2],
            width: si[3],
            kh: sk[2],
            kw: sk[3],
            stride,
            pad,
        };
        let (batch, filters) = (si[0], sk[0]);
        let (plen, hw) = (g.patch_len(), g.out_len());
        let x = self.val(input);
        let w = self.val(k);
        let b = bias.map(|b| self.val(b));
        let nhw = batch * hw;
        let mut cols = vec![T::ZERO; plen * nhw];
        kernels::im2col_batch(x, batch, &g, &mut cols);
        let mut y = vec![T::ZERO; filters * nhw];
        kernels::matmul(w, &cols, filters, plen, nhw, &mut y);
        let mut out = vec![T::ZERO; batch * filters * hw];
        for (f, yrow) in y.chunks_exact(nhw).enumerate() {
            let bf = b.map_or(T::ZERO, |b| b[f]);
            for (n, src) in yrow.chunks_exact(hw).enumerate() {
                let dst = &mut out[(n * filters + f) * hw..(n * filters + f + 1) * hw];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = v + bf;
                }
            }
        }
        (out, Saved::Cols(cols))
    }

    fn pool_forward(&self, id: usize, input: NodeId, size: usize) -> (Vec<T>, Saved<T>) {
        let si = &self.nodes[input.0].shape;
        let so = &self.nodes[id].shape;
        let (h, w) = (si[2], si[3]);
        let (oh, ow) = (so[2], so[3]);
        let x = self.val(input);
        let planes = si[0] * si[1];
        let mut out = vec![T::ZERO; planes * oh * ow];
        let mut arg = vec![0u32; planes * oh * ow];
        for p in 0..planes {
            let plane = &x[p * h * w..(p + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = (oy * size) * w + ox * size;
                    for dy in 0..size {
                        for dx in 0..size {
                            let idx = (oy * size + dy) * w + ox * size + dx;
                            // strict comparison keeps the first maximum in scan order
                            if plane[idx] > plane[best] {
                                best = idx;
                            }
                        }
                    }
                    let o = p * oh * ow + oy * ow + ox;
                    out[o] = plane[best];
                    arg[o] = (p * h * w + best) as u32;
                }
            }
        }
        (out, Saved::Argmax(arg))
    }

    /// Gradients of a scalar `output` with respect to every leaf declared
    /// with `requires_grad`, summed over all paths.
    pub fn backward(&mut self, output: NodeId) -> Result<Gradients<T>> {
        let evaluated = match self.state {
            State::Built => return Err(Error::BackwardBeforeForward),
            State::Consumed => return Err(Error::GraphConsumed),
            State::Forwarded(o) => o,
        };
        self.check(output)?;
        if output.0 > evaluated.0 {
            return Err(Error::BackwardBeforeForward);
        }
        let shape = &self.nodes[output.0].shape;
        if volume(shape) != 1 {
            return Err(Error::NonScalarOutput {
                shape: shape.clone(),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![T::ONE]);
        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].needs_grad {
                continue;
            }
            #[cfg(test)]
            let g = if self.corrupt == Some(NodeId(id)) {
                g.iter().map(|&v| T::from_f64(v.to_f64() * 1.5)).collect()
            } else {
                g
            };
            if let Op::Leaf { .. } = self.nodes[id].op {
                grads[id] = Some(g);
                continue;
            }
            for (input, contrib) in self.node_backward(id, &g) {
                accumulate(&mut grads[input.0], contrib);
            }
        }
        let mut out = Gradients::new();
        for (id, node) in self.nodes.iter().enumerate().take(output.0 + 1) {
            if let Op::Leaf {
                name,
                requires_grad: true,
            } = &node.op
            {
                let g = grads[id]
                    .take()
                    .unwrap_or_else(|| vec![T::ZERO; volume(&node.shape)]);
                out.insert(name.clone(), Tensor::new(node.shape.clone(), g)?);
            }
        }
        self.state = State::Consumed;
        Ok(out)
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Gradient contributions of node `id` to its inputs, given its output gradient.
    fn node_backward(&self, id: usize, g: &[T]) -> Vec<(NodeId, Vec<T>)> {
        let mut out = Vec::new();
        match self.nodes[id].op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                if self.wants(a) {
                    out.push((a, g.to_vec()));
                }
                if self.wants(b) {
                    let n = volume(&self.nodes[b.0].shape);
                    let mut acc = vec![0.0f64; n];
                    for chunk in g.chunks_exact(n) {
                        for (a, &v) in acc.iter_mut().zip(chunk) {
                            *a += v.to_f64();
                        }
                    }
                    out.push((b, acc.into_iter().map(T::from_f64).collect()));
                }
            }
            Op::Sub(a, b) => {
                if self.wants(a) {
                    out.push((a, g.to_vec()));
                }
                if self.wants(b) {
                    out.push((b, g.iter().map(|&v| -v).collect()));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(a) {
                    out.push((a, zip_map(g, self.val(b), |x, y| x * y)));
                }
                if self.wants(b) {
                    out.push((b, zip_map(g, self.val(a), |x, y| x * y)));
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.wants(a) {
                    let bt = kernels::transpose(self.val(b), k, n);
                    let mut ga = vec![T::ZERO; m * k];
                    kernels::matmul(g, &bt, m, n, k, &mut ga);
                    out.push((a, ga));
                }
                if self.wants(b) {
                    let mut acc = vec![0.0f64; k * n];
                    kernels::matmul_at_acc(self.val(a), g, m, k, n, &mut acc);
                    out.push((b, acc.into_iter().map(T::from_f64).collect()));
                }
            }
            Op::Conv2d {
                input,
                kernels: k,
                bias,
                stride,
                pad,
            } => self.conv_backward(id, g, input, k, bias, stride, pad, &mut out),
            Op::MaxPool2d { input, .. } => {
                let Saved::Argmax(arg) = &self.saved[id] else {
                    unreachable!("maxpool saves argmax")
                };
                let mut acc = vec![T::ZERO; volume(&self.nodes[input.0].shape)];
                for (&a, &v) in arg.iter().zip(g) {
                    acc[a as usize] += v;
                }
                out.push((input, acc));
            }
            Op::Relu(a) => {
                let x = self.val(a);
                out.push((
                    a,
                    zip_map(g, x, |gv, xv| if xv > T::ZERO { gv } else { T::ZERO }),
                ));
            }
            Op::Flatten(a) => out.push((a, g.to_vec())),
            Op::Dropout { input, .. } => match &self.saved[id] {
                Saved::Mask(mask) => out.push((input, zip_map(g, mask, |x, m| x * m))),
                _ => out.push((input, g.to_vec())),
            },
            Op::LogSoftmax(a) => {
                let k = self.nodes[id].shape[1];
                let y = self.val(NodeId(id));
                let mut ga = vec![T::ZERO; y.len()];
                for ((yr, gr), dst) in y
                    .chunks_exact(k)
                    .zip(g.chunks_exact(k))
                    .zip(ga.chunks_exact_mut(k))
                {
                    let gsum: f64 = gr.iter().map(|v| v.to_f64()).sum();
                    for ((d, &yv), &gv) in dst.iter_mut().zip(yr).zip(gr) {
                        *d = T::from_f64(gv.to_f64() - libm::exp(yv.to_f64()) * gsum);
                    }
                }
                out.push((a, ga));
            }
            Op::Sum(a) => {
                let n = volume(&self.nodes[a.0].shape);
                out.push((a, vec![g[0]; n]));
            }
            Op::Scale(a, f) => {
                out.push((a, g.iter().map(|&v| T::from_f64(v.to_f64() * f)).collect()));
            }
            Op::CrossEntropy { log_probs, targets } => {
                let rows = self.nodes[log_probs.0].shape[0] as f64;
                let scale = -g[0].to_f64() / rows;
                if self.wants(log_probs) {
                    out.push((
                        log_probs,
                        self.val(targets)
                            .iter()
                            .map(|&t| T::from_f64(t.to_f64() * scale))
                            .collect(),
                    ));
                }
                if self.wants(targets) {
                    out.push((
                        targets,
                        self.val(log_probs)
                            .iter()
                            .map(|&l| T::from_f64(l.to_f64() * scale))
                            .collect(),
                    ));
                }
            }
        }
        out
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        id: usize,
        g: &[T],
        input: NodeId,
        k: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
        out: &mut Vec<(NodeId, Vec<T>)>,
    ) {
        let (si, sk) = (&self.nodes[input.0].shape, &self.nodes[k.0].shape);
        let geom = ConvGeom {
            channels: si[1],
            height: si[2],
            width: si[3],
            kh: sk[2],
            kw: sk[3],
            stride,
            pad,
        };
        let (batch, filters) = (si[0], sk[0]);
        let (plen, hw) = (geom.patch_len(), geom.out_len());
        let sample = geom.channels * geom.height * geom.width;
        let Saved::Cols(cols) = &self.saved[id] else {
            unreachable!("conv saves columns")
        };
        let nhw = batch * hw;
        // Gradient rearranged to F × (B·H'W'), matching the column layout.
        let mut gt = vec![T::ZERO; filters * nhw];
        for n in 0..batch {
            for f in 0..filters {
                let src = &g[(n * filters + f) * hw..(n * filters + f + 1) * hw];
                gt[f * nhw + n * hw..f * nhw + (n + 1) * hw].copy_from_slice(src);
            }
        }
        if self.wants(k) {
            let mut acc = vec![0.0f64; filters * plen];
            kernels::matmul_bt_acc(&gt, cols, filters, nhw, plen, &mut acc);
            out.push((k, acc.into_iter().map(T::from_f64).collect()));
        }
        if let Some(b) = bias.filter(|&b| self.wants(b)) {
            let acc: Vec<T> = gt
                .chunks_exact(nhw)
                .map(|row| T::from_f64(row.iter().map(|v| v.to_f64()).sum::<f64>()))
                .collect();
            out.push((b, acc));
        }
        if self.wants(input) {
            let wt = kernels::transpose(self.val(k), filters, plen);
            let mut dcols = vec![T::ZERO; plen * nhw];
            kernels::matmul(&wt, &gt, plen, filters, nhw, &mut dcols);
            let mut acc = vec![0.0f64; batch * sample];
            kernels::col2im_batch(&dcols, batch, &geom, &mut acc);
            let gin = acc.into_iter().map(T::from_f64).collect();
            out.push((input, gin));
        }
    }
}

fn node_shape(nodes: &[Node], id: NodeId) -> &[usize] {
    &nodes[id.0].shape
}

fn zip_map<T: Real>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, contrib: Vec<T>) {
    match slot {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contrib) {
                *e += c;
            }
        }
        None => *slot = Some(contrib),
    }
}

impl<T: Real> Graph<T> {
    /// Human-readable one-line-per-node dump, mainly for debugging.
    pub fn describe(&self) -> String {
        let mut s = String::new();
        for (i, n) in self.nodes.iter().enumerate() {
            let ins: Vec<String> = n.op.inputs().iter().map(|x| x.0.to_string()).collect();
            s.push_str(&format!(
                "{i}: {} {:?} <- [{}]\n",
                self.label(i),
                n.shape,
                ins.join(", ")
            ));
        }
        s
    }
}
