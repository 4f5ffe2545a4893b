//! Batch normalization over NCHW inputs.
//!
//! Train mode normalizes each channel by statistics over batch and spatial
//! positions (so batch size 1 still normalizes over the spatial plane) and
//! updates running statistics; eval mode applies the stored running stats.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, Op};
use crate::tensor::{Element, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug)]
pub(crate) struct BatchNormCtx<E: Element> {
    pub x: NodeId,
    pub gamma: NodeId,
    pub beta: NodeId,
    pub train: bool,
    /// Mean and 1/sqrt(var + eps) actually used by the forward pass.
    pub mean: Vec<E>,
    pub invstd: Vec<E>,
}

impl<E: Element> Graph<E> {
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm2d(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &mut [E],
        running_var: &mut [E],
        train: bool,
        momentum: E,
        eps: E,
    ) -> Result<NodeId> {
        let (b, c, h, w) = self.value(x).dims4("batchnorm2d")?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::shape(
                "batchnorm2d",
                format!(
                    "gamma/beta must have {c} entries, got {}/{}",
                    self.value(gamma).numel(),
                    self.value(beta).numel()
                ),
            ));
        }
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape(
                "batchnorm2d",
                format!("running stats must have {c} entries"),
            ));
        }
        let plane = h * w;
        let m = b * plane;
        let (mean, invstd) = if train {
            let mut mean = vec![E::zero(); c];
            let mut invstd = vec![E::zero(); c];
            for ch in 0..c {
                let mut sum = 0.0f64;
                let mut sumsq = 0.0f64;
                for n in 0..b {
                    for &v in
                        &self.value(x).data()[(n * c + ch) * plane..(n * c + ch + 1) * plane]
                    {
                        let v = v.as_f64();
                        sum += v;
                        sumsq += v * v;
                    }
                }
                let mu = sum / m as f64;
                let var = (sumsq / m as f64 - mu * mu).max(0.0);
                mean[ch] = E::from_f64(mu);
                invstd[ch] = E::from_f64(1.0 / (var + eps.as_f64()).sqrt());
                // Running stats use the unbiased variance, as is conventional.
                let var_unbiased = if m > 1 {
                    var * m as f64 / (m - 1) as f64
                } else {
                    var
                };
                running_mean[ch] =
                    (E::one() - momentum) * running_mean[ch] + momentum * E::from_f64(mu);
                running_var[ch] = (E::one() - momentum) * running_var[ch]
                    + momentum * E::from_f64(var_unbiased);
            }
            (mean, invstd)
        } else {
            let mean = running_mean.to_vec();
            let invstd = running_var
                .iter()
                .map(|&v| E::from_f64(1.0 / (v.as_f64() + eps.as_f64()).sqrt()))
                .collect();
            (mean, invstd)
        };

        let mut out = vec![E::zero(); self.value(x).numel()];
        let gamma_d = self.value(gamma).data();
        let beta_d = self.value(beta).data();
        for n in 0..b {
            for ch in 0..c {
                let base = (n * c + ch) * plane;
                let (mu, is) = (mean[ch], invstd[ch]);
                let (gm, bt) = (gamma_d[ch], beta_d[ch]);
                for (dst, &v) in out[base..base + plane]
                    .iter_mut()
                    .zip(&self.value(x).data()[base..base + plane])
                {
                    *dst = (v - mu) * is * gm + bt;
                }
            }
        }
        let value = Tensor::new(vec![b, c, h, w], out)?;
        let needs = self.any_needs(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::BatchNorm2d(BatchNormCtx {
                x,
                gamma,
                beta,
                train,
                mean,
                invstd,
            }),
            needs,
        ))
    }
}

pub(crate) fn backward<E: Element>(
    graph: &Graph<E>,
    ctx: &BatchNormCtx<E>,
    upstream: &Tensor<E>,
    out: &mut Vec<(NodeId, Tensor<E>)>,
) {
    let (b, c, h, w) = graph.value(ctx.x).dims4("batchnorm2d").unwrap();
    let plane = h * w;
    let m = (b * plane) as f64;
    let xd = graph.value(ctx.x).data();
    let gd = upstream.data();
    let gamma_d = graph.value(ctx.gamma).data();

    // Per-channel reductions over the upstream gradient.
    let mut sum_g = vec![0.0f64; c];
    let mut sum_gx = vec![0.0f64; c]; // sum of g * xhat
    for n in 0..b {
        for ch in 0..c {
            let base = (n * c + ch) * plane;
            let (mu, is) = (ctx.mean[ch].as_f64(), ctx.invstd[ch].as_f64());
            for i in base..base + plane {
                let g = gd[i].as_f64();
                sum_g[ch] += g;
                sum_gx[ch] += g * (xd[i].as_f64() - mu) * is;
            }
        }
    }

    if graph.needs(ctx.beta) {
        let dbeta: Vec<E> = sum_g.iter().map(|&v| E::from_f64(v)).collect();
        out.push((ctx.beta, Tensor::new(vec![c], dbeta).unwrap()));
    }
    if graph.needs(ctx.gamma) {
        let dgamma: Vec<E> = sum_gx.iter().map(|&v| E::from_f64(v)).collect();
        out.push((ctx.gamma, Tensor::new(vec![c], dgamma).unwrap()));
    }
    if graph.needs(ctx.x) {
        let mut dx = vec![E::zero(); xd.len()];
        for n in 0..b {
            for ch in 0..c {
                let base = (n * c + ch) * plane;
                let (mu, is) = (ctx.mean[ch].as_f64(), ctx.invstd[ch].as_f64());
                let scale = gamma_d[ch].as_f64() * is;
                if ctx.train {
                    let mg = sum_g[ch] / m;
                    let mgx = sum_gx[ch] / m;
                    for i in base..base + plane {
                        let g = gd[i].as_f64();
                        let xhat = (xd[i].as_f64() - mu) * is;
                        dx[i] = E::from_f64(scale * (g - mg - xhat * mgx));
                    }
                } else {
                    for i in base..base + plane {
                        dx[i] = E::from_f64(scale * gd[i].as_f64());
                    }
                }
            }
        }
        out.push((ctx.x, Tensor::new(vec![b, c, h, w], dx).unwrap()));
    }
}
