//! Reverse-mode differentiation on an eager tape.
//!
//! Every operation appends a node holding its computed value plus whatever
//! context its backward pass needs. The tape is topologically ordered by
//! construction, so `backward` walks it once in reverse, accumulating
//! gradients into the leaves. One graph serves one forward/backward pass;
//! data-parallel callers build one graph per thread.

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{Element, Tensor};

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug)]
pub(crate) struct Node<E: Element> {
    pub(crate) value: Tensor<E>,
    pub(crate) op: Op<E>,
    pub(crate) needs_grad: bool,
}

#[derive(Debug)]
pub(crate) enum Op<E: Element> {
    Leaf,
    Pointwise(ops::pointwise::PointwiseCtx<E>),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MeanAll(NodeId),
    Mse(NodeId, NodeId),
    Reshape(NodeId),
    Softmax(NodeId),
    MatMul(NodeId, NodeId),
    CosineRows(ops::linalg::CosineCtx<E>),
    ConcatChannels(NodeId, NodeId),
    Conv2d(ops::conv::Conv2dCtx),
    ConvTranspose2d(ops::conv::ConvTransposeCtx),
    MaxPool2d(ops::pool::MaxPoolCtx),
    BatchNorm2d(ops::batchnorm::BatchNormCtx<E>),
    DivideBlocks(ops::blocks::DivideCtx),
    AssembleBlocks(ops::blocks::AssembleCtx),
    ShrinkRows(ops::blocks::ShrinkCtx),
}

/// Gradients produced by [`Graph::backward`], indexed by node id.
pub struct Gradients<E: Element> {
    pub(crate) grads: Vec<Option<Tensor<E>>>,
}

impl<E: Element> Gradients<E> {
    /// Gradient accumulated at `id`, if any path reached it.
    pub fn get(&self, id: NodeId) -> Option<&Tensor<E>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient at `id`, or zeros shaped like `like` when the node did not
    /// participate in the objective.
    pub fn get_or_zeros(&self, id: NodeId, like: &Tensor<E>) -> Tensor<E> {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(like.shape().to_vec()),
        }
    }
}

/// Recording tape. Operations evaluate eagerly and append one node each.
pub struct Graph<E: Element = f32> {
    pub(crate) nodes: Vec<Node<E>>,
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    /// Register a leaf. It receives gradients iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<E>) -> NodeId {
        let needs = tensor.requires_grad();
        self.push(tensor, Op::Leaf, needs)
    }

    /// Register a non-differentiable input.
    pub fn constant(&mut self, tensor: Tensor<E>) -> NodeId {
        self.push(tensor, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<E> {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, value: Tensor<E>, op: Op<E>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub(crate) fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub(crate) fn any_needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.needs(*id))
    }

    /// Reverse pass from a scalar root. Visits each tape node at most once,
    /// in reverse topological order; returns gradients for the leaves.
    pub fn backward(&self, root: NodeId) -> Result<Gradients<E>> {
        if self.value(root).numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!(
                    "root must be a scalar, got shape {:?}",
                    self.value(root).shape()
                ),
            ));
        }
        let mut grads: Vec<Option<Tensor<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(
            self.value(root).shape().to_vec(),
            E::one(),
        ));

        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue; // keep accumulated gradient for the caller
            }
            let upstream = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let mut contrib: Vec<(NodeId, Tensor<E>)> = Vec::with_capacity(2);
            self.backward_step(&self.nodes[i].op, &self.nodes[i].value, &upstream, &mut contrib)?;
            for (id, tensor) in contrib {
                if !self.nodes[id.0].needs_grad {
                    continue;
                }
                match &mut grads[id.0] {
                    Some(existing) => {
                        debug_assert_eq!(existing.shape(), tensor.shape());
                        for (dst, src) in existing.data_mut().iter_mut().zip(tensor.data()) {
                            *dst += *src;
                        }
                    }
                    slot @ None => *slot = Some(tensor),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn backward_step(
        &self,
        op: &Op<E>,
        value: &Tensor<E>,
        upstream: &Tensor<E>,
        out: &mut Vec<(NodeId, Tensor<E>)>,
    ) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Pointwise(ctx) => ops::pointwise::backward(self, ctx, value, upstream, out),
            Op::Add(a, b) => {
                if self.needs(*a) {
                    out.push((*a, upstream.clone()));
                }
                if self.needs(*b) {
                    out.push((*b, upstream.clone()));
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    out.push((*a, upstream.clone()));
                }
                if self.needs(*b) {
                    out.push((*b, upstream.map(|v| -v)));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let mut g = upstream.clone();
                    for (dst, src) in g.data_mut().iter_mut().zip(self.value(*b).data()) {
                        *dst *= *src;
                    }
                    out.push((*a, g));
                }
                if self.needs(*b) {
                    let mut g = upstream.clone();
                    for (dst, src) in g.data_mut().iter_mut().zip(self.value(*a).data()) {
                        *dst *= *src;
                    }
                    out.push((*b, g));
                }
            }
            Op::MeanAll(x) => {
                let n = self.value(*x).numel();
                let scale = upstream.item() / E::from_f64(n as f64);
                out.push((*x, Tensor::full(self.value(*x).shape().to_vec(), scale)));
            }
            Op::Mse(a, b) => ops::pointwise::mse_backward(self, *a, *b, upstream, out),
            Op::Reshape(x) => {
                let g = upstream
                    .clone()
                    .reshaped(self.value(*x).shape().to_vec())?;
                out.push((*x, g));
            }
            Op::Softmax(x) => ops::pointwise::softmax_backward(value, upstream, *x, out),
            Op::MatMul(a, b) => ops::linalg::matmul_backward(self, *a, *b, upstream, out),
            Op::CosineRows(ctx) => ops::linalg::cosine_backward(self, ctx, value, upstream, out),
            Op::ConcatChannels(a, b) => {
                ops::linalg::concat_backward(self, *a, *b, upstream, out)?
            }
            Op::Conv2d(ctx) => ops::conv::conv2d_backward(self, ctx, upstream, out)?,
            Op::ConvTranspose2d(ctx) => {
                ops::conv::conv_transpose2d_backward(self, ctx, upstream, out)?
            }
            Op::MaxPool2d(ctx) => ops::pool::maxpool_backward(self, ctx, upstream, out),
            Op::BatchNorm2d(ctx) => ops::batchnorm::backward(self, ctx, upstream, out),
            Op::DivideBlocks(ctx) => ops::blocks::divide_backward(self, ctx, upstream, out),
            Op::AssembleBlocks(ctx) => ops::blocks::assemble_backward(self, ctx, upstream, out),
            Op::ShrinkRows(ctx) => ops::blocks::shrink_backward(self, ctx, value, upstream, out),
        }
        Ok(())
    }
}
