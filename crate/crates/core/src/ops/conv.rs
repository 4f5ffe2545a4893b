//! 2-d convolution and transposed convolution via im2col + GEMM.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, Op};
use crate::tensor::{Element, Tensor};

#[derive(Debug)]
pub(crate) struct Conv2dCtx {
    pub x: NodeId,
    pub w: NodeId,
    pub bias: Option<NodeId>,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug)]
pub(crate) struct ConvTransposeCtx {
    pub x: NodeId,
    pub w: NodeId,
    pub stride: usize,
}

/// Unfold one image `[C, H, W]` into columns `[C*K*K, out_h*out_w]` for a
/// convolution with the given kernel/stride/padding.
#[allow(clippy::too_many_arguments)]
fn im2col<E: Element>(
    img: &[E],
    c_dim: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
    col: &mut [E],
) {
    debug_assert_eq!(col.len(), c_dim * k * k * out_h * out_w);
    let plane = out_h * out_w;
    for c in 0..c_dim {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst_row = &mut col[row * plane..(row + 1) * plane];
                for oh in 0..out_h {
                    let ih = (oh * stride + ki) as isize - pad as isize;
                    let dst = &mut dst_row[oh * out_w..(oh + 1) * out_w];
                    if ih < 0 || ih >= h as isize {
                        dst.iter_mut().for_each(|v| *v = E::zero());
                        continue;
                    }
                    let src_base = c * h * w + ih as usize * w;
                    if stride == 1 {
                        // Contiguous copy with zero fringes at the borders.
                        let iw0 = kj as isize - pad as isize;
                        let lead = (-iw0).max(0) as usize;
                        let tail_start =
                            ((w as isize - iw0).max(0) as usize).min(out_w);
                        dst[..lead.min(out_w)].iter_mut().for_each(|v| *v = E::zero());
                        if tail_start > lead {
                            let src0 = (iw0 + lead as isize) as usize;
                            dst[lead..tail_start].copy_from_slice(
                                &img[src_base + src0..src_base + src0 + (tail_start - lead)],
                            );
                        }
                        dst[tail_start..].iter_mut().for_each(|v| *v = E::zero());
                    } else {
                        for (ow, v) in dst.iter_mut().enumerate() {
                            let iw = (ow * stride + kj) as isize - pad as isize;
                            *v = if iw >= 0 && iw < w as isize {
                                img[src_base + iw as usize]
                            } else {
                                E::zero()
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Fold columns back onto an image, accumulating overlaps. Exact adjoint of
/// [`im2col`] with the same geometry.
#[allow(clippy::too_many_arguments)]
fn col2im<E: Element>(
    col: &[E],
    c_dim: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
    img: &mut [E],
) {
    let plane = out_h * out_w;
    for c in 0..c_dim {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src_row = &col[row * plane..(row + 1) * plane];
                for oh in 0..out_h {
                    let ih = (oh * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let dst_base = c * h * w + ih as usize * w;
                    for ow in 0..out_w {
                        let iw = (ow * stride + kj) as isize - pad as isize;
                        if iw >= 0 && iw < w as isize {
                            img[dst_base + iw as usize] += src_row[oh * out_w + ow];
                        }
                    }
                }
            }
        }
    }
}

impl<E: Element> Graph<E> {
    /// Convolution of NCHW `x` with OIKK `w` plus optional per-channel bias.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let (b, ci, h, wd) = self.value(x).dims4("conv2d")?;
        let wt = self.value(w);
        let (co, wi, kh, kw) = wt.dims4("conv2d")?;
        if kh != kw {
            return Err(Error::invalid("conv2d", "only square kernels supported"));
        }
        let k = kh;
        if wi != ci {
            return Err(Error::shape(
                "conv2d",
                format!("input has {ci} channels but weight expects {wi}"),
            ));
        }
        if h + 2 * padding < k || wd + 2 * padding < k {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "spatial dims {h}x{wd} with padding {padding} smaller than kernel {k}"
                ),
            ));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        if let Some(bid) = bias {
            let bl = self.value(bid).numel();
            if bl != co {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias has {bl} entries but weight has {co} output channels"),
                ));
            }
        }
        let out_h = (h + 2 * padding - k) / stride + 1;
        let out_w = (wd + 2 * padding - k) / stride + 1;
        let plane = out_h * out_w;
        let ckk = ci * k * k;

        let mut out = vec![E::zero(); b * co * plane];
        let mut col = vec![E::zero(); ckk * plane];
        for n in 0..b {
            let img = &self.value(x).data()[n * ci * h * wd..(n + 1) * ci * h * wd];
            im2col(img, ci, h, wd, k, stride, padding, out_h, out_w, &mut col);
            E::gemm(
                co,
                ckk,
                plane,
                E::one(),
                self.value(w).data(),
                ckk as isize,
                1,
                &col,
                plane as isize,
                1,
                E::zero(),
                &mut out[n * co * plane..(n + 1) * co * plane],
                plane as isize,
                1,
            );
            if let Some(bid) = bias {
                let bdata = self.value(bid).data();
                for o in 0..co {
                    let bv = bdata[o];
                    for v in &mut out[n * co * plane + o * plane..n * co * plane + (o + 1) * plane]
                    {
                        *v += bv;
                    }
                }
            }
        }
        let value = Tensor::new(vec![b, co, out_h, out_w], out)?;
        let mut parents = vec![x, w];
        if let Some(bid) = bias {
            parents.push(bid);
        }
        let needs = self.any_needs(&parents);
        Ok(self.push(
            value,
            Op::Conv2d(Conv2dCtx {
                x,
                w,
                bias,
                stride,
                padding,
            }),
            needs,
        ))
    }

    /// Transposed convolution of NCHW `x` with `w` of shape
    /// `[in_channels, out_channels, K, K]`. No padding; the paper's up-path
    /// uses kernel 2, stride 2, which exactly doubles spatial extent.
    pub fn conv_transpose2d(&mut self, x: NodeId, w: NodeId, stride: usize) -> Result<NodeId> {
        let (b, ci, h, wd) = self.value(x).dims4("conv_transpose2d")?;
        let (wi, co, kh, kw) = self.value(w).dims4("conv_transpose2d")?;
        if kh != kw {
            return Err(Error::invalid(
                "conv_transpose2d",
                "only square kernels supported",
            ));
        }
        let k = kh;
        if wi != ci {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("input has {ci} channels but weight expects {wi}"),
            ));
        }
        if stride == 0 {
            return Err(Error::invalid("conv_transpose2d", "stride must be positive"));
        }
        let out_h = (h - 1) * stride + k;
        let out_w = (wd - 1) * stride + k;
        let okk = co * k * k;
        let plane = h * wd;

        let mut out = vec![E::zero(); b * co * out_h * out_w];
        let mut cols = vec![E::zero(); okk * plane];
        for n in 0..b {
            // cols = W^T(viewed [OKK, I]) @ x_b, then fold onto the output.
            E::gemm(
                okk,
                ci,
                plane,
                E::one(),
                self.value(w).data(),
                1,
                okk as isize,
                &self.value(x).data()[n * ci * plane..(n + 1) * ci * plane],
                plane as isize,
                1,
                E::zero(),
                &mut cols,
                plane as isize,
                1,
            );
            col2im(
                &cols,
                co,
                out_h,
                out_w,
                k,
                stride,
                0,
                h,
                wd,
                &mut out[n * co * out_h * out_w..(n + 1) * co * out_h * out_w],
            );
        }
        let value = Tensor::new(vec![b, co, out_h, out_w], out)?;
        let needs = self.any_needs(&[x, w]);
        Ok(self.push(
            value,
            Op::ConvTranspose2d(ConvTransposeCtx { x, w, stride }),
            needs,
        ))
    }
}

pub(crate) fn conv2d_backward<E: Element>(
    graph: &Graph<E>,
    ctx: &Conv2dCtx,
    upstream: &Tensor<E>,
    out: &mut Vec<(NodeId, Tensor<E>)>,
) -> Result<()> {
    let (b, ci, h, wd) = graph.value(ctx.x).dims4("conv2d")?;
    let (co, _, k, _) = graph.value(ctx.w).dims4("conv2d")?;
    let (_, _, out_h, out_w) = upstream.dims4("conv2d")?;
    let plane = out_h * out_w;
    let ckk = ci * k * k;

    if let Some(bid) = ctx.bias {
        if graph.needs(bid) {
            let mut db = vec![0.0f64; co];
            for n in 0..b {
                for o in 0..co {
                    let s: f64 = upstream.data()
                        [n * co * plane + o * plane..n * co * plane + (o + 1) * plane]
                        .iter()
                        .map(|v| v.as_f64())
                        .sum();
                    db[o] += s;
                }
            }
            let db: Vec<E> = db.into_iter().map(E::from_f64).collect();
            out.push((bid, Tensor::new(vec![co], db)?));
        }
    }

    let need_w = graph.needs(ctx.w);
    let need_x = graph.needs(ctx.x);
    let mut dw = if need_w {
        vec![E::zero(); co * ckk]
    } else {
        Vec::new()
    };
    let mut dx = if need_x {
        vec![E::zero(); b * ci * h * wd]
    } else {
        Vec::new()
    };
    let mut col = vec![E::zero(); ckk * plane];
    let mut dcol = if need_x {
        vec![E::zero(); ckk * plane]
    } else {
        Vec::new()
    };
    for n in 0..b {
        let g_b = &upstream.data()[n * co * plane..(n + 1) * co * plane];
        if need_w {
            let img = &graph.value(ctx.x).data()[n * ci * h * wd..(n + 1) * ci * h * wd];
            im2col(img, ci, h, wd, k, ctx.stride, ctx.padding, out_h, out_w, &mut col);
            // dW += g_b @ col^T
            E::gemm(
                co,
                plane,
                ckk,
                E::one(),
                g_b,
                plane as isize,
                1,
                &col,
                1,
                plane as isize,
                E::one(),
                &mut dw,
                ckk as isize,
                1,
            );
        }
        if need_x {
            // dcol = W^T @ g_b, folded back onto the input image.
            E::gemm(
                ckk,
                co,
                plane,
                E::one(),
                graph.value(ctx.w).data(),
                1,
                ckk as isize,
                g_b,
                plane as isize,
                1,
                E::zero(),
                &mut dcol,
                plane as isize,
                1,
            );
            col2im(
                &dcol,
                ci,
                h,
                wd,
                k,
                ctx.stride,
                ctx.padding,
                out_h,
                out_w,
                &mut dx[n * ci * h * wd..(n + 1) * ci * h * wd],
            );
        }
    }
    if need_w {
        out.push((ctx.w, Tensor::new(vec![co, ci, k, k], dw)?));
    }
    if need_x {
        out.push((ctx.x, Tensor::new(vec![b, ci, h, wd], dx)?));
    }
    Ok(())
}

pub(crate) fn conv_transpose2d_backward<E: Element>(
    graph: &Graph<E>,
    ctx: &ConvTransposeCtx,
    upstream: &Tensor<E>,
    out: &mut Vec<(NodeId, Tensor<E>)>,
) -> Result<()> {
    let (b, ci, h, wd) = graph.value(ctx.x).dims4("conv_transpose2d")?;
    let (_, co, k, _) = graph.value(ctx.w).dims4("conv_transpose2d")?;
    let (_, _, out_h, out_w) = upstream.dims4("conv_transpose2d")?;
    let okk = co * k * k;
    let plane = h * wd;

    let need_w = graph.needs(ctx.w);
    let need_x = graph.needs(ctx.x);
    let mut dw = if need_w {
        vec![E::zero(); ci * okk]
    } else {
        Vec::new()
    };
    let mut dx = if need_x {
        vec![E::zero(); b * ci * plane]
    } else {
        Vec::new()
    };
    let mut colg = vec![E::zero(); okk * plane];
    for n in 0..b {
        let g_b = &upstream.data()[n * co * out_h * out_w..(n + 1) * co * out_h * out_w];
        // Unfold the upstream gradient with the forward geometry.
        im2col(g_b, co, out_h, out_w, k, ctx.stride, 0, h, wd, &mut colg);
        if need_x {
            // dx_b = W(viewed [I, OKK]) @ colg
            E::gemm(
                ci,
                okk,
                plane,
                E::one(),
                graph.value(ctx.w).data(),
                okk as isize,
                1,
                &colg,
                plane as isize,
                1,
                E::zero(),
                &mut dx[n * ci * plane..(n + 1) * ci * plane],
                plane as isize,
                1,
            );
        }
        if need_w {
            // dW += x_b @ colg^T
            E::gemm(
                ci,
                plane,
                okk,
                E::one(),
                &graph.value(ctx.x).data()[n * ci * plane..(n + 1) * ci * plane],
                plane as isize,
                1,
                &colg,
                1,
                plane as isize,
                E::one(),
                &mut dw,
                okk as isize,
                1,
            );
        }
    }
    if need_w {
        out.push((ctx.w, Tensor::new(vec![ci, co, k, k], dw)?));
    }
    if need_x {
        out.push((ctx.x, Tensor::new(vec![b, ci, h, wd], dx)?));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct convolution sum, kept independent of the im2col path.
    pub(crate) fn conv2d_reference(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        bias: Option<&Tensor<f64>>,
        stride: usize,
        pad: usize,
    ) -> Tensor<f64> {
        let (b, ci, h, wd) = x.dims4("ref").unwrap();
        let (co, _, k, _) = w.dims4("ref").unwrap();
        let out_h = (h + 2 * pad - k) / stride + 1;
        let out_w = (wd + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros(vec![b, co, out_h, out_w]);
        for n in 0..b {
            for o in 0..co {
                for oh in 0..out_h {
                    for ow in 0..out_w {
                        let mut acc = bias.map(|t| t.data()[o]).unwrap_or(0.0);
                        for c in 0..ci {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let ih = (oh * stride + ki) as isize - pad as isize;
                                    let iw = (ow * stride + kj) as isize - pad as isize;
                                    if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < wd
                                    {
                                        acc += x.data()[((n * ci + c) * h + ih as usize) * wd
                                            + iw as usize]
                                            * w.data()[((o * ci + c) * k + ki) * k + kj];
                                    }
                                }
                            }
                        }
                        out.data_mut()[((n * co + o) * out_h + oh) * out_w + ow] = acc;
                    }
                }
            }
        }
        out
    }

    /// Brute-force transposed convolution: scatter each input pixel.
    pub(crate) fn conv_transpose2d_reference(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        stride: usize,
    ) -> Tensor<f64> {
        let (b, ci, h, wd) = x.dims4("ref").unwrap();
        let (_, co, k, _) = w.dims4("ref").unwrap();
        let out_h = (h - 1) * stride + k;
        let out_w = (wd - 1) * stride + k;
        let mut out = Tensor::zeros(vec![b, co, out_h, out_w]);
        for n in 0..b {
            for c in 0..ci {
                for i in 0..h {
                    for j in 0..wd {
                        let xv = x.data()[((n * ci + c) * h + i) * wd + j];
                        for o in 0..co {
                            for ki in 0..k {
                                for kj in 0..k {
                                    out.data_mut()[((n * co + o) * out_h + i * stride + ki)
                                        * out_w
                                        + j * stride
                                        + kj] +=
                                        xv * w.data()[((c * co + o) * k + ki) * k + kj];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn rand_tensor(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
        // Small deterministic LCG keeps the reference tests dependency-free.
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 33) as f64 / (1u64 << 31) as f64) - 1.0
            })
            .collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(rand_tensor(vec![1, 3, 5, 5], 3));
        let mut w = Tensor::zeros(vec![3, 3, 1, 1]);
        for c in 0..3 {
            w.data_mut()[c * 3 + c] = 1.0;
        }
        let w = g.constant(w);
        let b = g.constant(Tensor::zeros(vec![3]));
        let y = g.conv2d(x, w, Some(b), 1, 0).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn ones_kernel_sums_neighborhood() {
        let mut g: Graph<f64> = Graph::new();
        let c = 0.7;
        let x = g.constant(Tensor::full(vec![1, 1, 6, 6], c));
        let w = g.constant(Tensor::full(vec![1, 1, 3, 3], 1.0));
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        // Interior pixels see the full 3x3 window.
        let v = g.value(y);
        for i in 1..5 {
            for j in 1..5 {
                assert!((v.data()[i * 6 + j] - 9.0 * c).abs() < 1e-12);
            }
        }
        // The corner only sees 4 in-bounds taps.
        assert!((v.data()[0] - 4.0 * c).abs() < 1e-12);
    }

    #[test]
    fn matches_reference_on_random_inputs() {
        for (seed, stride, pad) in [(1u64, 1usize, 1usize), (2, 2, 1), (3, 1, 0), (4, 2, 0)] {
            let x = rand_tensor(vec![2, 3, 7, 6], seed);
            let w = rand_tensor(vec![4, 3, 3, 3], seed + 10);
            let bias = rand_tensor(vec![4], seed + 20);
            let expect = conv2d_reference(&x, &w, Some(&bias), stride, pad);
            let mut g: Graph<f64> = Graph::new();
            let (xi, wi, bi) = (g.constant(x), g.constant(w), g.constant(bias));
            let y = g.conv2d(xi, wi, Some(bi), stride, pad).unwrap();
            assert_eq!(g.value(y).shape(), expect.shape());
            for (a, b) in g.value(y).data().iter().zip(expect.data()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(Tensor::zeros(vec![1, 3, 4, 4]));
        let w = g.constant(Tensor::zeros(vec![8, 4, 3, 3]));
        let err = g.conv2d(x, w, None, 1, 1).unwrap_err();
        assert!(err.to_string().contains("3 channels"));
    }

    #[test]
    fn transpose_ones_kernel_keeps_constant() {
        // Kernel 2 stride 2: every output pixel is touched exactly once.
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(Tensor::full(vec![1, 2, 3, 3], 0.4));
        let mut w = Tensor::zeros(vec![2, 1, 2, 2]);
        w.data_mut().iter_mut().for_each(|v| *v = 0.5);
        let w = g.constant(w);
        let y = g.conv_transpose2d(x, w, 2).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 6, 6]);
        for &v in g.value(y).data() {
            // Two input channels each contribute 0.4 * 0.5.
            assert!((v - 0.4).abs() < 1e-12);
        }
    }

    #[test]
    fn transpose_matches_reference_and_doubles_extent() {
        let x = rand_tensor(vec![1, 4, 5, 5], 9);
        let w = rand_tensor(vec![4, 3, 2, 2], 11);
        let expect = conv_transpose2d_reference(&x, &w, 2);
        let mut g: Graph<f64> = Graph::new();
        let (xi, wi) = (g.constant(x), g.constant(w));
        let y = g.conv_transpose2d(xi, wi, 2).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 3, 10, 10]);
        for (a, b) in g.value(y).data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn transpose_zero_input_gives_zero() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(Tensor::zeros(vec![1, 2, 4, 4]));
        let w = g.constant(rand_tensor(vec![2, 2, 2, 2], 5));
        let y = g.conv_transpose2d(x, w, 2).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn transpose_rejects_channel_mismatch() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(Tensor::zeros(vec![1, 3, 4, 4]));
        let w = g.constant(Tensor::zeros(vec![2, 4, 2, 2]));
        assert!(g.conv_transpose2d(x, w, 2).is_err());
    }
}
