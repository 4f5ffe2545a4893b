//! Graph-level block division/assembly and hard shrinkage of attention rows.
//!
//! Block order is row-major over the (height, width, channel) grid; within a
//! block, elements are laid out row-major over (channel, height, width).
//! This order is part of the checkpoint contract: memory banks are stored
//! against it.

use crate::blockmem::DivisionRates;
use crate::error::Result;
use crate::graph::{Graph, NodeId, Op};
use crate::tensor::{Element, Tensor};

#[derive(Debug)]
pub(crate) struct DivideCtx {
    pub x: NodeId,
    pub rates: DivisionRates,
}

#[derive(Debug)]
pub(crate) struct AssembleCtx {
    pub x: NodeId,
    pub rates: DivisionRates,
}

#[derive(Debug)]
pub(crate) struct ShrinkCtx {
    pub x: NodeId,
    pub renormalize: bool,
    pub mask: Vec<bool>,
}

/// Drive row-wise copies between NCHW map layout and `[B*Q, D]` block
/// layout; the closure receives (map offset, block offset, run length).
fn block_copy(
    map_len: usize,
    dims: (usize, usize, usize, usize),
    rates: DivisionRates,
    mut copy_row: impl FnMut(usize, usize, usize),
) {
    let (b, c, h, w) = dims;
    let (bc, bh, bw) = (c / rates.r_c, h / rates.r_h, w / rates.r_w);
    let q = rates.block_count();
    let d = bc * bh * bw;
    debug_assert_eq!(map_len, b * c * h * w);
    for n in 0..b {
        for gh in 0..rates.r_h {
            for gw in 0..rates.r_w {
                for gc in 0..rates.r_c {
                    let k = (gh * rates.r_w + gw) * rates.r_c + gc;
                    let row_base = (n * q + k) * d;
                    for ci in 0..bc {
                        let c_abs = gc * bc + ci;
                        for hi in 0..bh {
                            let h_abs = gh * bh + hi;
                            let map_off = ((n * c + c_abs) * h + h_abs) * w + gw * bw;
                            let block_off = row_base + (ci * bh + hi) * bw;
                            copy_row(map_off, block_off, bw);
                        }
                    }
                }
            }
        }
    }
}

/// Map -> `[B*Q, D]` block rows (plain, non-graph).
pub(crate) fn divide_data<E: Element>(
    map: &Tensor<E>,
    dims: (usize, usize, usize, usize),
    rates: DivisionRates,
) -> Vec<E> {
    let mut out = vec![E::zero(); map.numel()];
    block_copy(map.numel(), dims, rates, |map_off, block_off, len| {
        out[block_off..block_off + len].copy_from_slice(&map.data()[map_off..map_off + len]);
    });
    out
}

/// `[B*Q, D]` block rows -> map (plain, non-graph).
pub(crate) fn assemble_data<E: Element>(
    blocks: &Tensor<E>,
    dims: (usize, usize, usize, usize),
    rates: DivisionRates,
) -> Vec<E> {
    let mut out = vec![E::zero(); blocks.numel()];
    block_copy(blocks.numel(), dims, rates, |map_off, block_off, len| {
        out[map_off..map_off + len].copy_from_slice(&blocks.data()[block_off..block_off + len]);
    });
    out
}

impl<E: Element> Graph<E> {
    /// Divide an NCHW map into `B*Q` flattened query blocks of length D.
    pub fn divide_blocks(&mut self, x: NodeId, rates: DivisionRates) -> Result<NodeId> {
        let dims = self.value(x).dims4("divide")?;
        let (_, c, h, w) = dims;
        rates.validate(h, w, c)?;
        let q = rates.block_count();
        let d = (c / rates.r_c) * (h / rates.r_h) * (w / rates.r_w);
        let data = divide_data(self.value(x), dims, rates);
        let value = Tensor::new(vec![dims.0 * q, d], data)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::DivideBlocks(DivideCtx { x, rates }), needs))
    }

    /// Exact inverse of [`Graph::divide_blocks`] for the given output dims.
    pub fn assemble_blocks(
        &mut self,
        x: NodeId,
        rates: DivisionRates,
        dims: (usize, usize, usize, usize),
    ) -> Result<NodeId> {
        let (b, c, h, w) = dims;
        rates.validate(h, w, c)?;
        let q = rates.block_count();
        let d = (c / rates.r_c) * (h / rates.r_h) * (w / rates.r_w);
        let got = self.value(x).shape().to_vec();
        if got != [b * q, d] {
            return Err(crate::error::Error::shape(
                "assemble",
                format!("expected {} blocks of dimension {d}, got shape {got:?}", b * q),
            ));
        }
        let data = assemble_data(self.value(x), dims, rates);
        let value = Tensor::new(vec![b, c, h, w], data)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::AssembleBlocks(AssembleCtx { x, rates }), needs))
    }

    /// Hard shrinkage of attention rows: entries strictly below 1/N are
    /// zeroed; survivors are optionally renormalized to sum to one. The
    /// survivor mask is treated as a constant in the backward pass.
    pub fn shrink_rows(&mut self, x: NodeId, renormalize: bool) -> Result<NodeId> {
        let (rows, n) = self.value(x).dims2("shrink")?;
        let thr = E::one() / E::from_f64(n as f64);
        let mut mask = vec![false; rows * n];
        let mut out = vec![E::zero(); rows * n];
        for r in 0..rows {
            let row = &self.value(x).data()[r * n..(r + 1) * n];
            let mrow = &mut mask[r * n..(r + 1) * n];
            let mut sum = 0.0f64;
            for (i, &v) in row.iter().enumerate() {
                if v >= thr {
                    mrow[i] = true;
                    sum += v.as_f64();
                }
            }
            if sum == 0.0 {
                // A proper attention row always keeps its maximum; guard
                // non-simplex inputs by keeping the largest entry.
                let (mut best, mut best_v) = (0usize, f64::NEG_INFINITY);
                for (i, &v) in row.iter().enumerate() {
                    if v.as_f64() > best_v {
                        best_v = v.as_f64();
                        best = i;
                    }
                }
                mrow[best] = true;
                sum = best_v;
            }
            let inv = E::from_f64(1.0 / sum);
            for i in 0..n {
                if mrow[i] {
                    out[r * n + i] = if renormalize { row[i] * inv } else { row[i] };
                }
            }
        }
        let value = Tensor::new(vec![rows, n], out)?;
        let needs = self.needs(x);
        Ok(self.push(
            value,
            Op::ShrinkRows(ShrinkCtx {
                x,
                renormalize,
                mask,
            }),
            needs,
        ))
    }
}

pub(crate) fn divide_backward<E: Element>(
    graph: &Graph<E>,
    ctx: &DivideCtx,
    upstream: &Tensor<E>,
    out: &mut Vec<(NodeId, Tensor<E>)>,
) {
    let dims = graph.value(ctx.x).dims4("divide").unwrap();
    let data = assemble_data(upstream, dims, ctx.rates);
    out.push((
        ctx.x,
        Tensor::new(graph.value(ctx.x).shape().to_vec(), data).unwrap(),
    ));
}

pub(crate) fn assemble_backward<E: Element>(
    graph: &Graph<E>,
    ctx: &AssembleCtx,
    upstream: &Tensor<E>,
    out: &mut Vec<(NodeId, Tensor<E>)>,
) {
    let dims = upstream.dims4("assemble").unwrap();
    let data = divide_data(upstream, dims, ctx.rates);
    out.push((
        ctx.x,
        Tensor::new(graph.value(ctx.x).shape().to_vec(), data).unwrap(),
    ));
}

pub(crate) fn shrink_backward<E: Element>(
    graph: &Graph<E>,
    ctx: &ShrinkCtx,
    value: &Tensor<E>,
    upstream: &Tensor<E>,
    out: &mut Vec<(NodeId, Tensor<E>)>,
) {
    let (rows, n) = value.dims2("shrink").unwrap();
    let xd = graph.value(ctx.x).data();
    let mut dx = vec![E::zero(); rows * n];
    for r in 0..rows {
        let g = &upstream.data()[r * n..(r + 1) * n];
        let y = &value.data()[r * n..(r + 1) * n];
        let mrow = &ctx.mask[r * n..(r + 1) * n];
        if ctx.renormalize {
            let mut sigma = 0.0f64;
            for i in 0..n {
                if mrow[i] {
                    sigma += xd[r * n + i].as_f64();
                }
            }
            let mut gy = 0.0f64;
            for i in 0..n {
                gy += g[i].as_f64() * y[i].as_f64();
            }
            let inv_sigma = E::from_f64(1.0 / sigma);
            let gy = E::from_f64(gy);
            for i in 0..n {
                if mrow[i] {
                    dx[r * n + i] = (g[i] - gy) * inv_sigma;
                }
            }
        } else {
            for i in 0..n {
                if mrow[i] {
                    dx[r * n + i] = g[i];
                }
            }
        }
    }
    out.push((ctx.x, Tensor::new(vec![rows, n], dx).unwrap()));
}
