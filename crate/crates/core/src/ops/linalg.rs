//! Matrix product, cosine-similarity rows and channel concatenation.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, Op};
use crate::tensor::{Element, Tensor};

#[derive(Debug)]
pub(crate) struct CosineCtx<E: Element> {
    pub q: NodeId,
    pub m: NodeId,
    pub eps: E,
    /// Guarded row norms max(‖q_k‖, eps) and max(‖m_i‖, eps).
    pub q_norms: Vec<E>,
    pub m_norms: Vec<E>,
}

impl<E: Element> Graph<E> {
    /// `[m, k] x [k, n] -> [m, n]` dense product.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.value(a).dims2("matmul")?;
        let (kb, n) = self.value(b).dims2("matmul")?;
        if ka != kb {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions differ: {ka} vs {kb}"),
            ));
        }
        let mut c = vec![E::zero(); m * n];
        E::gemm(
            m,
            ka,
            n,
            E::one(),
            self.value(a).data(),
            ka as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            E::zero(),
            &mut c,
            n as isize,
            1,
        );
        let value = Tensor::new(vec![m, n], c)?;
        let needs = self.any_needs(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), needs))
    }

    /// Cosine similarity of every query row against every bank row:
    /// `[Q, D] x [N, D] -> [Q, N]`. Row norms below `eps` are replaced by
    /// `eps`, so zero vectors yield similarity 0 instead of NaN.
    pub fn cosine_rows(&mut self, q: NodeId, m: NodeId, eps: E) -> Result<NodeId> {
        let (rows_q, dq) = self.value(q).dims2("cosine_rows")?;
        let (rows_m, dm) = self.value(m).dims2("cosine_rows")?;
        if dq != dm {
            return Err(Error::shape(
                "cosine_rows",
                format!("query dimension {dq} does not match bank item dimension {dm}"),
            ));
        }
        let q_norms = guarded_row_norms(self.value(q), eps);
        let m_norms = guarded_row_norms(self.value(m), eps);

        // Raw dot products, then divide by the guarded norm product.
        let mut sims = vec![E::zero(); rows_q * rows_m];
        E::gemm(
            rows_q,
            dq,
            rows_m,
            E::one(),
            self.value(q).data(),
            dq as isize,
            1,
            self.value(m).data(),
            1,
            dm as isize,
            E::zero(),
            &mut sims,
            rows_m as isize,
            1,
        );
        for k in 0..rows_q {
            for i in 0..rows_m {
                sims[k * rows_m + i] = sims[k * rows_m + i] / (q_norms[k] * m_norms[i]);
            }
        }
        let value = Tensor::new(vec![rows_q, rows_m], sims)?;
        let needs = self.any_needs(&[q, m]);
        Ok(self.push(
            value,
            Op::CosineRows(CosineCtx {
                q,
                m,
                eps,
                q_norms,
                m_norms,
            }),
            needs,
        ))
    }

    /// Cosine similarity of two equal-length vectors, as a scalar node.
    pub fn cosine_similarity(&mut self, a: NodeId, b: NodeId, eps: E) -> Result<NodeId> {
        let da = self.value(a).numel();
        let db = self.value(b).numel();
        if da != db {
            return Err(Error::shape(
                "cosine_similarity",
                format!("vector lengths differ: {da} vs {db}"),
            ));
        }
        let ra = self.reshape(a, vec![1, da])?;
        let rb = self.reshape(b, vec![1, db])?;
        let sims = self.cosine_rows(ra, rb, eps)?;
        self.reshape(sims, vec![1])
    }

    /// Concatenate two NCHW tensors along the channel axis. A zero-channel
    /// side passes the other through unchanged.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (na, ca, ha, wa) = self.value(a).dims4("concat_channels")?;
        let (nb, cb, hb, wb) = self.value(b).dims4("concat_channels")?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(Error::shape(
                "concat_channels",
                format!(
                    "batch/spatial dims differ: {}x{}x{} vs {}x{}x{}",
                    na, ha, wa, nb, hb, wb
                ),
            ));
        }
        let plane = ha * wa;
        let mut data = vec![E::zero(); na * (ca + cb) * plane];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for n in 0..na {
            let dst = &mut data[n * (ca + cb) * plane..(n + 1) * (ca + cb) * plane];
            dst[..ca * plane].copy_from_slice(&da[n * ca * plane..(n + 1) * ca * plane]);
            dst[ca * plane..].copy_from_slice(&db[n * cb * plane..(n + 1) * cb * plane]);
        }
        let value = Tensor::new(vec![na, ca + cb, ha, wa], data)?;
        let needs = self.any_needs(&[a, b]);
        Ok(self.push(value, Op::ConcatChannels(a, b), needs))
    }
}

fn guarded_row_norms<E: Element>(t: &Tensor<E>, eps: E) -> Vec<E> {
    let (rows, d) = (t.shape()[0], t.shape()[1]);
    (0..rows)
        .map(|r| {
            let norm: f64 = t.data()[r * d..(r + 1) * d]
                .iter()
                .map(|v| {
                    let x = v.as_f64();
                    x * x
                })
                .sum::<f64>()
                .sqrt();
            E::from_f64(norm).max(eps)
        })
        .collect()
}

pub(crate) fn matmul_backward<E: Element>(
    graph: &Graph<E>,
    a: NodeId,
    b: NodeId,
    upstream: &Tensor<E>,
    out: &mut Vec<(NodeId, Tensor<E>)>,
) {
    let (m, k) = (graph.value(a).shape()[0], graph.value(a).shape()[1]);
    let n = graph.value(b).shape()[1];
    if graph.needs(a) {
        // dA = g @ B^T
        let mut da = vec![E::zero(); m * k];
        E::gemm(
            m,
            n,
            k,
            E::one(),
            upstream.data(),
            n as isize,
            1,
            graph.value(b).data(),
            1,
            n as isize,
            E::zero(),
            &mut da,
            k as isize,
            1,
        );
        out.push((a, Tensor::new(vec![m, k], da).unwrap()));
    }
    if graph.needs(b) {
        // dB = A^T @ g
        let mut db = vec![E::zero(); k * n];
        E::gemm(
            k,
            m,
            n,
            E::one(),
            graph.value(a).data(),
            1,
            k as isize,
            upstream.data(),
            n as isize,
            1,
            E::zero(),
            &mut db,
            n as isize,
            1,
        );
        out.push((b, Tensor::new(vec![k, n], db).unwrap()));
    }
}

pub(crate) fn cosine_backward<E: Element>(
    graph: &Graph<E>,
    ctx: &CosineCtx<E>,
    value: &Tensor<E>,
    upstream: &Tensor<E>,
    out: &mut Vec<(NodeId, Tensor<E>)>,
) {
    let (rows_q, rows_m) = (value.shape()[0], value.shape()[1]);
    let d = graph.value(ctx.q).shape()[1];
    let qd = graph.value(ctx.q).data();
    let md = graph.value(ctx.m).data();
    let sims = value.data();
    let g = upstream.data();

    // Whether the norm itself contributes gradient (guard inactive).
    let q_live: Vec<bool> = ctx.q_norms.iter().map(|&n| n > ctx.eps).collect();
    let m_live: Vec<bool> = ctx.m_norms.iter().map(|&n| n > ctx.eps).collect();

    if graph.needs(ctx.q) {
        let mut dq = vec![E::zero(); rows_q * d];
        // First term: sum_i g_ki / (a_k b_i) * m_i  via gemm on g scaled by 1/b_i.
        let mut scaled = vec![E::zero(); rows_q * rows_m];
        for k in 0..rows_q {
            for i in 0..rows_m {
                scaled[k * rows_m + i] =
                    g[k * rows_m + i] / (ctx.q_norms[k] * ctx.m_norms[i]);
            }
        }
        E::gemm(
            rows_q,
            rows_m,
            d,
            E::one(),
            &scaled,
            rows_m as isize,
            1,
            md,
            d as isize,
            1,
            E::zero(),
            &mut dq,
            d as isize,
            1,
        );
        // Second term: - (sum_i g_ki s_ki) * q_k / a_k^2.
        for k in 0..rows_q {
            if !q_live[k] {
                continue;
            }
            let mut dot = 0.0f64;
            for i in 0..rows_m {
                dot += g[k * rows_m + i].as_f64() * sims[k * rows_m + i].as_f64();
            }
            let coef = E::from_f64(dot) / (ctx.q_norms[k] * ctx.q_norms[k]);
            for j in 0..d {
                dq[k * d + j] -= coef * qd[k * d + j];
            }
        }
        out.push((ctx.q, Tensor::new(vec![rows_q, d], dq).unwrap()));
    }

    if graph.needs(ctx.m) {
        let mut dm = vec![E::zero(); rows_m * d];
        // First term: sum_k g_ki / (a_k b_i) * q_k  via gemm on scaled^T.
        let mut scaled = vec![E::zero(); rows_q * rows_m];
        for k in 0..rows_q {
            for i in 0..rows_m {
                scaled[k * rows_m + i] =
                    g[k * rows_m + i] / (ctx.q_norms[k] * ctx.m_norms[i]);
            }
        }
        E::gemm(
            rows_m,
            rows_q,
            d,
            E::one(),
            &scaled,
            1,
            rows_m as isize,
            qd,
            d as isize,
            1,
            E::zero(),
            &mut dm,
            d as isize,
            1,
        );
        // Second term: - (sum_k g_ki s_ki) * m_i / b_i^2.
        for i in 0..rows_m {
            if !m_live[i] {
                continue;
            }
            let mut dot = 0.0f64;
            for k in 0..rows_q {
                dot += g[k * rows_m + i].as_f64() * sims[k * rows_m + i].as_f64();
            }
            let coef = E::from_f64(dot) / (ctx.m_norms[i] * ctx.m_norms[i]);
            for j in 0..d {
                dm[i * d + j] -= coef * md[i * d + j];
            }
        }
        out.push((ctx.m, Tensor::new(vec![rows_m, d], dm).unwrap()));
    }
}

pub(crate) fn concat_backward<E: Element>(
    graph: &Graph<E>,
    a: NodeId,
    b: NodeId,
    upstream: &Tensor<E>,
    out: &mut Vec<(NodeId, Tensor<E>)>,
) -> Result<()> {
    let (n, ca, h, w) = graph.value(a).dims4("concat_channels")?;
    let cb = graph.value(b).shape()[1];
    let plane = h * w;
    let up = upstream.data();
    if graph.needs(a) {
        let mut da = vec![E::zero(); n * ca * plane];
        for i in 0..n {
            da[i * ca * plane..(i + 1) * ca * plane]
                .copy_from_slice(&up[i * (ca + cb) * plane..i * (ca + cb) * plane + ca * plane]);
        }
        out.push((a, Tensor::new(vec![n, ca, h, w], da)?));
    }
    if graph.needs(b) {
        let mut db = vec![E::zero(); n * cb * plane];
        for i in 0..n {
            db[i * cb * plane..(i + 1) * cb * plane].copy_from_slice(
                &up[i * (ca + cb) * plane + ca * plane..(i + 1) * (ca + cb) * plane],
            );
        }
        out.push((b, Tensor::new(vec![n, cb, h, w], db)?));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_2x2() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.constant(Tensor::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn cosine_identity_orthogonal_and_angle() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.constant(Tensor::from_vec(vec![2.0, 1.0, -3.0]));
        let same = g.cosine_similarity(a, a, 1e-8).unwrap();
        assert!((g.value(same).item() - 1.0).abs() < 1e-12);

        let e1 = g.constant(Tensor::from_vec(vec![1.0, 0.0]));
        let e2 = g.constant(Tensor::from_vec(vec![0.0, 1.0]));
        let orth = g.cosine_similarity(e1, e2, 1e-8).unwrap();
        assert_eq!(g.value(orth).item(), 0.0);

        let v = g.constant(Tensor::from_vec(vec![1.0, 1.0]));
        let c = g.cosine_similarity(v, e1, 1e-8).unwrap();
        assert!((g.value(c).item() - 0.70711).abs() < 1e-5);
    }

    #[test]
    fn cosine_zero_vector_yields_zero() {
        let mut g: Graph<f64> = Graph::new();
        let z = g.constant(Tensor::from_vec(vec![0.0, 0.0]));
        let v = g.constant(Tensor::from_vec(vec![1.0, 2.0]));
        let c = g.cosine_similarity(z, v, 1e-8).unwrap();
        assert_eq!(g.value(c).item(), 0.0);
    }

    #[test]
    fn concat_channel_counts_add() {
        let mut g: Graph<f32> = Graph::new();
        let a = g.constant(Tensor::zeros(vec![1, 512, 32, 32]));
        let b = g.constant(Tensor::zeros(vec![1, 512, 32, 32]));
        let c = g.concat_channels(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[1, 1024, 32, 32]);
    }

    #[test]
    fn concat_with_empty_is_identity() {
        let mut g: Graph<f32> = Graph::new();
        let a = g.constant(Tensor::new(vec![1, 2, 2, 2], (0..8).map(|v| v as f32).collect()).unwrap());
        let empty = g.constant(Tensor::new(vec![1, 0, 2, 2], vec![]).unwrap());
        let c = g.concat_channels(a, empty).unwrap();
        assert_eq!(g.value(c).shape(), &[1, 2, 2, 2]);
        assert_eq!(g.value(c).data(), g.value(a).data());
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let mut g: Graph<f32> = Graph::new();
        let a = g.constant(Tensor::zeros(vec![1, 2, 4, 4]));
        let b = g.constant(Tensor::zeros(vec![1, 2, 8, 8]));
        assert!(g.concat_channels(a, b).is_err());
    }

    #[test]
    fn concat_gradient_splits_back() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.leaf(Tensor::full(vec![1, 1, 1, 2], 1.0).with_grad());
        let b = g.leaf(Tensor::full(vec![1, 2, 1, 2], 2.0).with_grad());
        let c = g.concat_channels(a, b).unwrap();
        let target = g.constant(Tensor::zeros(vec![1, 3, 1, 2]));
        let loss = g.mse(c, target).unwrap();
        let grads = g.backward(loss).unwrap();
        // d/da mean((cat)^2) = 2*a/6
        for v in grads.get(a).unwrap().data() {
            assert!((v - 2.0 * 1.0 / 6.0).abs() < 1e-12);
        }
        for v in grads.get(b).unwrap().data() {
            assert!((v - 2.0 * 2.0 / 6.0).abs() < 1e-12);
        }
    }
}
