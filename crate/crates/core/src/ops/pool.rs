//! Max pooling with argmax-routed gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, Op};
use crate::tensor::{Element, Tensor};

#[derive(Debug)]
pub(crate) struct MaxPoolCtx {
    pub x: NodeId,
    /// Flat input index of the winner for every output element. Ties break
    /// to the first index in row-major scan order.
    pub argmax: Vec<u32>,
}

impl<E: Element> Graph<E> {
    /// Non-overlapping max pooling (`window == stride`), the only form the
    /// encoder uses. Spatial extents must divide evenly.
    pub fn maxpool2d(&mut self, x: NodeId, window: usize, stride: usize) -> Result<NodeId> {
        let (b, c, h, w) = self.value(x).dims4("maxpool2d")?;
        if window != stride {
            return Err(Error::invalid(
                "maxpool2d",
                format!("window {window} must equal stride {stride}"),
            ));
        }
        if window == 0 {
            return Err(Error::invalid("maxpool2d", "window must be positive"));
        }
        if h % stride != 0 || w % stride != 0 {
            return Err(Error::shape(
                "maxpool2d",
                format!("spatial dims {h}x{w} not divisible by stride {stride}"),
            ));
        }
        let (oh, ow) = (h / stride, w / stride);
        let mut out = vec![E::zero(); b * c * oh * ow];
        let mut argmax = vec![0u32; out.len()];
        let data = self.value(x).data();
        let mut oi = 0usize;
        for n in 0..b {
            for ch in 0..c {
                let base = (n * c + ch) * h * w;
                for gh in 0..oh {
                    for gw in 0..ow {
                        let mut best = E::neg_infinity();
                        let mut best_idx = 0usize;
                        for ki in 0..window {
                            let row = base + (gh * stride + ki) * w + gw * stride;
                            for kj in 0..window {
                                let v = data[row + kj];
                                if v > best {
                                    best = v;
                                    best_idx = row + kj;
                                }
                            }
                        }
                        out[oi] = best;
                        argmax[oi] = best_idx as u32;
                        oi += 1;
                    }
                }
            }
        }
        let value = Tensor::new(vec![b, c, oh, ow], out)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::MaxPool2d(MaxPoolCtx { x, argmax }), needs))
    }
}

pub(crate) fn maxpool_backward<E: Element>(
    graph: &Graph<E>,
    ctx: &MaxPoolCtx,
    upstream: &Tensor<E>,
    out: &mut Vec<(NodeId, Tensor<E>)>,
) {
    let mut dx = Tensor::zeros(graph.value(ctx.x).shape().to_vec());
    for (i, &src) in ctx.argmax.iter().enumerate() {
        dx.data_mut()[src as usize] += upstream.data()[i];
    }
    out.push((ctx.x, dx));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_input_stays_constant() {
        let mut g: Graph<f32> = Graph::new();
        let x = g.constant(Tensor::full(vec![1, 1, 4, 4], 2.5));
        let y = g.maxpool2d(x, 2, 2).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 2, 2]);
        assert!(g.value(y).data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn single_window_max() {
        let mut g: Graph<f32> = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = g.maxpool2d(x, 2, 2).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);
    }

    #[test]
    fn halves_extent() {
        let mut g: Graph<f32> = Graph::new();
        let x = g.constant(Tensor::zeros(vec![1, 64, 256, 256]));
        let y = g.maxpool2d(x, 2, 2).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 64, 128, 128]);
    }

    #[test]
    fn rejects_non_divisible_extent() {
        let mut g: Graph<f32> = Graph::new();
        let x = g.constant(Tensor::zeros(vec![1, 1, 5, 4]));
        let err = g.maxpool2d(x, 2, 2).unwrap_err();
        assert!(err.to_string().contains("5x4"));
    }

    #[test]
    fn gradient_routes_to_first_max_on_ties() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(
            Tensor::new(vec![1, 1, 2, 2], vec![7.0, 7.0, 7.0, 7.0])
                .unwrap()
                .with_grad(),
        );
        let y = g.maxpool2d(x, 2, 2).unwrap();
        let ym = g.mean_all(y);
        let grads = g.backward(ym).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }
}
