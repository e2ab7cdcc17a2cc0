//! Tape-style reverse-mode differentiation.
//!
//! Every operation evaluates eagerly and appends a node; node inputs always
//! have smaller ids, so the node list is already in topological order and
//! [`CompGraph::backward`] is a single reverse sweep.

use crate::error::{Error, Result};
use crate::tensor::{self, ConvGeom, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    /// Trainable leaf, with its slot in the gradient output.
    Param(usize),
    /// Leaf that receives no gradient.
    Constant,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRowBias(NodeId, NodeId),
    AddChannelBias(NodeId, NodeId),
    Conv2d {
        x: NodeId,
        k: NodeId,
        stride: usize,
        pad: usize,
    },
    Relu(NodeId),
    Log(NodeId),
    Exp(NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    Mean(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    /// Picks `x[r, idx[r]]` from each row of a `[b, c]` tensor.
    Gather(NodeId, Vec<usize>),
    Reshape(NodeId),
}

#[derive(Clone, Debug)]
struct Node<T> {
    op: Op,
    value: Tensor<T>,
    /// Whether any parameter is upstream of this node.
    tracked: bool,
}

#[derive(Clone, Debug)]
pub struct CompGraph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    n_params: usize,
}

/// Gradients indexed by the parameter slot returned from [`CompGraph::param`].
#[derive(Clone, Debug)]
pub struct Gradients<T: Real = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, slot: usize) -> Option<&Tensor<T>> {
        self.grads.get(slot).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Gradients for every slot; parameters that did not influence the loss
    /// get zeros shaped like `shapes[slot]`.
    pub fn into_dense(self, shapes: &[&[usize]]) -> Vec<Tensor<T>> {
        self.grads
            .into_iter()
            .zip(shapes)
            .map(|(g, s)| g.unwrap_or_else(|| Tensor::zeros(s)))
            .collect()
    }
}

impl<T: Real> Default for CompGraph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> CompGraph<T> {
    pub fn new() -> Self {
        CompGraph {
            nodes: Vec::new(),
            n_params: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor<T>, tracked: bool) -> NodeId {
        self.nodes.push(Node { op, value, tracked });
        NodeId(self.nodes.len() - 1)
    }

    fn tracked(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].tracked)
    }

    /// Registers a trainable tensor. Slots are assigned in call order.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        let slot = self.n_params;
        self.n_params += 1;
        self.push(Op::Param(slot), value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Constant, value, false)
    }

    /// A constant copy of `id`'s value: gradient stops here.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.nodes[id.0].value.clone();
        self.constant(v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), v, self.tracked(&[a, b])))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), v, self.tracked(&[a, b])))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub(a, b), v, self.tracked(&[a, b])))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(Op::Mul(a, b), v, self.tracked(&[a, b])))
    }

    pub fn add_row_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = self.value(x).add_row_bias(self.value(bias))?;
        Ok(self.push(Op::AddRowBias(x, bias), v, self.tracked(&[x, bias])))
    }

    pub fn add_channel_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = self.value(x).add_channel_bias(self.value(bias))?;
        Ok(self.push(Op::AddChannelBias(x, bias), v, self.tracked(&[x, bias])))
    }

    pub fn conv2d(&mut self, x: NodeId, k: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let v = tensor::conv2d(self.value(x), self.value(k), stride, pad)?;
        Ok(self.push(Op::Conv2d { x, k, stride, pad }, v, self.tracked(&[x, k])))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).relu();
        self.push(Op::Relu(a), v, self.tracked(&[a]))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).log()?;
        Ok(self.push(Op::Log(a), v, self.tracked(&[a])))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).exp();
        self.push(Op::Exp(a), v, self.tracked(&[a]))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).scale(T::of_f64(c));
        self.push(Op::Scale(a, c), v, self.tracked(&[a]))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), v, self.tracked(&[a]))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(a).mean()?);
        Ok(self.push(Op::Mean(a), v, self.tracked(&[a])))
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let v = tensor::softmax(self.value(a))?;
        Ok(self.push(Op::Softmax(a), v, self.tracked(&[a])))
    }

    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let v = tensor::log_softmax(self.value(a))?;
        Ok(self.push(Op::LogSoftmax(a), v, self.tracked(&[a])))
    }

    pub fn gather(&mut self, a: NodeId, idx: Vec<usize>) -> Result<NodeId> {
        let x = self.value(a);
        let [rows, cols] = *x.shape() else {
            return Err(Error::dim("gather", x.shape(), &[idx.len()]));
        };
        if rows != idx.len() {
            return Err(Error::dim("gather", x.shape(), &[idx.len()]));
        }
        if let Some(&bad) = idx.iter().find(|&&c| c >= cols) {
            return Err(Error::Label {
                label: bad,
                num_classes: cols,
            });
        }
        let v = Tensor::vector(idx.iter().enumerate().map(|(r, &c)| x.values()[r * cols + c]).collect());
        Ok(self.push(Op::Gather(a, idx), v, self.tracked(&[a])))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(Op::Reshape(a), v, self.tracked(&[a])))
    }

    /// Reverse sweep from a scalar `loss` node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut adj: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        let mut grads = vec![None; self.n_params];

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.tracked {
                continue;
            }
            let Some(g) = adj[id].take() else { continue };
            let mut send = |to: NodeId, d: Tensor<T>| accumulate(&mut adj[to.0], d);
            match &node.op {
                Op::Param(slot) => grads[*slot] = Some(g),
                Op::Constant => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    send(*a, tensor::matmul(&g, &bv.transpose()?)?);
                    send(*b, tensor::matmul(&av.transpose()?, &g)?);
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Sub(a, b) => {
                    send(*a, g.clone());
                    send(*b, g.scale(-T::one()));
                }
                Op::Mul(a, b) => {
                    send(*a, g.mul(self.value(*b))?);
                    send(*b, g.mul(self.value(*a))?);
                }
                Op::AddRowBias(x, b) => {
                    let width = self.value(*b).len();
                    let mut db = vec![T::zero(); width];
                    for row in g.values().chunks(width) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    send(*b, Tensor::vector(db));
                    send(*x, g);
                }
                Op::AddChannelBias(x, b) => {
                    let c = self.value(*b).len();
                    let plane = g.len() / c / batch_of(g.shape());
                    let mut db = vec![T::zero(); c];
                    for (i, chunk) in g.values().chunks(plane).enumerate() {
                        db[i % c] += chunk.iter().copied().sum();
                    }
                    send(*b, Tensor::vector(db));
                    send(*x, g);
                }
                Op::Conv2d { x, k, stride, pad } => {
                    let (xv, kv) = (self.value(*x), self.value(*k));
                    let geom = ConvGeom::new(xv.shape(), kv.shape(), *stride, *pad)?;
                    let mut dx = vec![T::zero(); xv.len()];
                    let mut dk = vec![T::zero(); kv.len()];
                    let gv = g.values();
                    geom.for_each_tap(|xi, ki, o| {
                        dx[xi] += gv[o] * kv.values()[ki];
                        dk[ki] += gv[o] * xv.values()[xi];
                    });
                    send(*x, Tensor::new(xv.shape().to_vec(), dx)?);
                    send(*k, Tensor::new(kv.shape().to_vec(), dk)?);
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    send(*a, zip(&g, x, |g, x| if x > T::zero() { g } else { T::zero() }));
                }
                Op::Log(a) => send(*a, zip(&g, self.value(*a), |g, x| g / x)),
                Op::Exp(a) => send(*a, zip(&g, &node.value, |g, y| g * y)),
                Op::Scale(a, c) => send(*a, g.scale(T::of_f64(*c))),
                Op::Sum(a) => {
                    let gv = g.values()[0];
                    send(*a, Tensor::full(self.value(*a).shape(), gv));
                }
                Op::Mean(a) => {
                    let x = self.value(*a);
                    let gv = g.values()[0] / T::of_usize(x.len());
                    send(*a, Tensor::full(x.shape(), gv));
                }
                Op::Softmax(a) => {
                    // dz = s * (g - <g, s>) per row
                    let s = &node.value;
                    let c = *s.shape().last().unwrap_or(&1);
                    let mut dz = Vec::with_capacity(s.len());
                    for (sr, gr) in s.values().chunks(c).zip(g.values().chunks(c)) {
                        let dot: T = sr.iter().zip(gr).map(|(&s, &g)| s * g).sum();
                        dz.extend(sr.iter().zip(gr).map(|(&s, &g)| s * (g - dot)));
                    }
                    send(*a, Tensor::new(s.shape().to_vec(), dz)?);
                }
                Op::LogSoftmax(a) => {
                    // dz = g - softmax * sum(g) per row
                    let y = &node.value;
                    let c = *y.shape().last().unwrap_or(&1);
                    let mut dz = Vec::with_capacity(y.len());
                    for (yr, gr) in y.values().chunks(c).zip(g.values().chunks(c)) {
                        let total: T = gr.iter().copied().sum();
                        dz.extend(yr.iter().zip(gr).map(|(&y, &g)| g - y.exp() * total));
                    }
                    send(*a, Tensor::new(y.shape().to_vec(), dz)?);
                }
                Op::Gather(a, idx) => {
                    let x = self.value(*a);
                    let cols = x.shape()[1];
                    let mut dx = vec![T::zero(); x.len()];
                    for (r, (&c, &gv)) in idx.iter().zip(g.values()).enumerate() {
                        dx[r * cols + c] += gv;
                    }
                    send(*a, Tensor::new(x.shape().to_vec(), dx)?);
                }
                Op::Reshape(a) => send(*a, g.reshape(self.value(*a).shape())?),
            }
        }
        Ok(Gradients { grads })
    }
}

fn batch_of(shape: &[usize]) -> usize {
    if shape.len() == 4 {
        shape[0]
    } else {
        1
    }
}

fn zip<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let v = a.values().iter().zip(b.values()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), v).expect("operands share a shape")
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, d: Tensor<T>) {
    match slot {
        Some(acc) => acc.values_mut().iter_mut().zip(d.values()).for_each(|(a, &b)| *a += b),
        None => *slot = Some(d),
    }
}
