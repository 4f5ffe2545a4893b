//! Pointwise activations, scalar arithmetic, reductions and softmax.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, Op};
use crate::tensor::{Element, Tensor};

/// Pointwise nonlinearity applied by [`Graph::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    /// Negative-side slope, e.g. 0.2 for the discriminator stack.
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
}

#[derive(Debug)]
pub(crate) enum PointwiseCtx<E: Element> {
    Activation { x: NodeId, kind: Activation },
    Scale { x: NodeId, factor: E },
    Neg { x: NodeId },
    OneMinus { x: NodeId },
    /// ln(max(x, floor)); zero gradient in the clamped region.
    LnClamped { x: NodeId, floor: E },
}

impl<E: Element> Graph<E> {
    pub fn elementwise(&mut self, x: NodeId, kind: Activation) -> NodeId {
        let value = self.value(x).map(|v| apply(kind, v));
        let needs = self.needs(x);
        self.push(
            value,
            Op::Pointwise(PointwiseCtx::Activation { x, kind }),
            needs,
        )
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.elementwise(x, Activation::Relu)
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        self.elementwise(x, Activation::LeakyRelu(slope))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.elementwise(x, Activation::Sigmoid)
    }

    pub fn tanh_act(&mut self, x: NodeId) -> NodeId {
        self.elementwise(x, Activation::Tanh)
    }

    pub fn scale(&mut self, x: NodeId, factor: E) -> NodeId {
        let value = self.value(x).map(|v| v * factor);
        let needs = self.needs(x);
        self.push(value, Op::Pointwise(PointwiseCtx::Scale { x, factor }), needs)
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| -v);
        let needs = self.needs(x);
        self.push(value, Op::Pointwise(PointwiseCtx::Neg { x }), needs)
    }

    pub fn one_minus(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| E::one() - v);
        let needs = self.needs(x);
        self.push(value, Op::Pointwise(PointwiseCtx::OneMinus { x }), needs)
    }

    /// ln(max(x, floor)). The floor keeps log-of-probability losses finite
    /// when a sigmoid saturates to exactly zero in f32.
    pub fn ln_clamped(&mut self, x: NodeId, floor: E) -> NodeId {
        let value = self.value(x).map(|v| v.max(floor).ln());
        let needs = self.needs(x);
        self.push(
            value,
            Op::Pointwise(PointwiseCtx::LnClamped { x, floor }),
            needs,
        )
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_op("add", a, b, |x, y| x + y, |a, b| Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_op("sub", a, b, |x, y| x - y, |a, b| Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_op("mul", a, b, |x, y| x * y, |a, b| Op::Mul(a, b))
    }

    fn zip_op(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(E, E) -> E,
        make: impl Fn(NodeId, NodeId) -> Op<E>,
    ) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(
                name,
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.any_needs(&[a, b]);
        Ok(self.push(value, make(a, b), needs))
    }

    /// Mean of all elements, accumulated in f64.
    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let mean = t.sum_f64() / t.numel() as f64;
        let needs = self.needs(x);
        self.push(Tensor::scalar(E::from_f64(mean)), Op::MeanAll(x), needs)
    }

    /// Mean squared difference over all elements, accumulated in f64.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(
                "mse",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let mut acc = 0.0f64;
        for (&x, &y) in ta.data().iter().zip(tb.data()) {
            let d = x.as_f64() - y.as_f64();
            acc += d * d;
        }
        let value = Tensor::scalar(E::from_f64(acc / ta.numel() as f64));
        let needs = self.any_needs(&[a, b]);
        Ok(self.push(value, Op::Mse(a, b), needs))
    }

    pub fn reshape(&mut self, x: NodeId, shape: impl Into<Vec<usize>>) -> Result<NodeId> {
        let value = self.value(x).clone().reshaped(shape)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Reshape(x), needs))
    }

    /// Softmax over the last dimension of a 1-d or 2-d tensor, stabilized by
    /// max subtraction. Exponentials and the normalizer accumulate in f64 so
    /// each row sums to 1 within one ulp-scale error even in f32 mode.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        let (rows, cols) = match t.shape() {
            [n] => (1usize, *n),
            [r, n] => (*r, *n),
            other => {
                return Err(Error::shape(
                    "softmax",
                    format!("expected 1-d or 2-d tensor, got {other:?}"),
                ))
            }
        };
        if cols == 0 {
            return Err(Error::invalid("softmax", "empty vector"));
        }
        let mut data = vec![E::zero(); rows * cols];
        for r in 0..rows {
            let row = &t.data()[r * cols..(r + 1) * cols];
            let max = row
                .iter()
                .fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
            let mut denom = 0.0f64;
            let mut exps = vec![0.0f64; cols];
            for (e, v) in exps.iter_mut().zip(row) {
                *e = (v.as_f64() - max).exp();
                denom += *e;
            }
            for (dst, e) in data[r * cols..(r + 1) * cols].iter_mut().zip(&exps) {
                *dst = E::from_f64(e / denom);
            }
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Softmax(x), needs))
    }
}

fn apply<E: Element>(kind: Activation, v: E) -> E {
    match kind {
        Activation::Relu => {
            if v > E::zero() {
                v
            } else {
                E::zero()
            }
        }
        Activation::LeakyRelu(slope) => {
            if v > E::zero() {
                v
            } else {
                v * E::from_f64(slope)
            }
        }
        Activation::Sigmoid => E::one() / (E::one() + (-v).exp()),
        Activation::Tanh => v.tanh(),
    }
}

pub(crate) fn backward<E: Element>(
    graph: &Graph<E>,
    ctx: &PointwiseCtx<E>,
    value: &Tensor<E>,
    upstream: &Tensor<E>,
    out: &mut Vec<(NodeId, Tensor<E>)>,
) {
    match ctx {
        PointwiseCtx::Activation { x, kind } => {
            let input = graph.value(*x);
            let mut g = upstream.clone();
            match kind {
                Activation::Relu => {
                    for (dst, &xv) in g.data_mut().iter_mut().zip(input.data()) {
                        if xv <= E::zero() {
                            *dst = E::zero();
                        }
                    }
                }
                Activation::LeakyRelu(slope) => {
                    let s = E::from_f64(*slope);
                    for (dst, &xv) in g.data_mut().iter_mut().zip(input.data()) {
                        if xv <= E::zero() {
                            *dst *= s;
                        }
                    }
                }
                Activation::Sigmoid => {
                    for (dst, &y) in g.data_mut().iter_mut().zip(value.data()) {
                        *dst *= y * (E::one() - y);
                    }
                }
                Activation::Tanh => {
                    for (dst, &y) in g.data_mut().iter_mut().zip(value.data()) {
                        *dst *= E::one() - y * y;
                    }
                }
            }
            out.push((*x, g));
        }
        PointwiseCtx::Scale { x, factor } => {
            out.push((*x, upstream.map(|v| v * *factor)));
        }
        PointwiseCtx::Neg { x } => out.push((*x, upstream.map(|v| -v))),
        PointwiseCtx::OneMinus { x } => out.push((*x, upstream.map(|v| -v))),
        PointwiseCtx::LnClamped { x, floor } => {
            let input = graph.value(*x);
            let mut g = upstream.clone();
            for (dst, &xv) in g.data_mut().iter_mut().zip(input.data()) {
                *dst = if xv > *floor { *dst / xv } else { E::zero() };
            }
            out.push((*x, g));
        }
    }
}

pub(crate) fn mse_backward<E: Element>(
    graph: &Graph<E>,
    a: NodeId,
    b: NodeId,
    upstream: &Tensor<E>,
    out: &mut Vec<(NodeId, Tensor<E>)>,
) {
    let (ta, tb) = (graph.value(a), graph.value(b));
    let scale = upstream.item() * E::from_f64(2.0 / ta.numel() as f64);
    if graph.needs(a) {
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| (x - y) * scale)
            .collect();
        out.push((a, Tensor::new(ta.shape().to_vec(), data).unwrap()));
    }
    if graph.needs(b) {
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| (y - x) * scale)
            .collect();
        out.push((b, Tensor::new(tb.shape().to_vec(), data).unwrap()));
    }
}

pub(crate) fn softmax_backward<E: Element>(
    value: &Tensor<E>,
    upstream: &Tensor<E>,
    x: NodeId,
    out: &mut Vec<(NodeId, Tensor<E>)>,
) {
    let cols = *value.shape().last().unwrap();
    let rows = value.numel() / cols;
    let mut g = vec![E::zero(); value.numel()];
    for r in 0..rows {
        let y = &value.data()[r * cols..(r + 1) * cols];
        let up = &upstream.data()[r * cols..(r + 1) * cols];
        let dot: f64 = y
            .iter()
            .zip(up)
            .map(|(&yv, &uv)| yv.as_f64() * uv.as_f64())
            .sum();
        let dot = E::from_f64(dot);
        for ((dst, &yv), &uv) in g[r * cols..(r + 1) * cols].iter_mut().zip(y).zip(up) {
            *dst = yv * (uv - dot);
        }
    }
    out.push((x, Tensor::new(value.shape().to_vec(), g).unwrap()));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_and_leaky_definitions() {
        let mut g: Graph<f32> = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![-1.0, 2.0]));
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 2.0]);
        let l = g.leaky_relu(x, 0.2);
        assert_eq!(g.value(l).data(), &[-0.2, 2.0]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(Tensor::scalar(0.0));
        let s = g.sigmoid(x);
        assert_eq!(g.value(s).item(), 0.5);
    }

    #[test]
    fn softmax_uniform_and_singleton() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![3.0, 3.0, 3.0, 3.0]));
        let s = g.softmax(x).unwrap();
        for &v in g.value(s).data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
        let one = g.constant(Tensor::from_vec(vec![42.0]));
        let s1 = g.softmax(one).unwrap();
        assert_eq!(g.value(s1).data(), &[1.0]);
    }

    #[test]
    fn softmax_two_logits_reference_value() {
        // exp(1)/(exp(1)+exp(0)) evaluated independently.
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![1.0, 0.0]));
        let s = g.softmax(x).unwrap();
        assert!((g.value(s).data()[0] - 0.73106).abs() < 1e-4);
        assert!((g.value(s).data()[1] - 0.26894).abs() < 1e-4);
    }

    #[test]
    fn softmax_rejects_empty() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(Tensor::new(vec![0usize], vec![]).unwrap());
        assert!(g.softmax(x).is_err());
    }

    #[test]
    fn softmax_stable_at_large_magnitude() {
        let mut g: Graph<f32> = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![1e4, -1e4, 9.9e3]));
        let s = g.softmax(x).unwrap();
        let sum = g.value(s).sum_f64();
        assert!((sum - 1.0).abs() <= 1e-6);
        assert!(g.value(s).data().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn mse_of_uniform_difference() {
        let mut g: Graph<f32> = Graph::new();
        let a = g.constant(Tensor::full(vec![2, 5], 0.6));
        let b = g.constant(Tensor::full(vec![2, 5], 0.5));
        let m = g.mse(a, b).unwrap();
        assert!((g.value(m).item() - 0.01).abs() < 1e-7);
    }

    #[test]
    fn ln_clamped_floors_zero_probability() {
        let mut g: Graph<f32> = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![0.0, 0.5]));
        let l = g.ln_clamped(x, 1e-12);
        assert!(g.value(l).data()[0].is_finite());
        assert!((g.value(l).data()[1] - 0.5f32.ln()).abs() < 1e-6);
    }
}
