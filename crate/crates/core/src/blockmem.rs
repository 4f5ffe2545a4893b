//! Block-wise memory: divide a feature map into a grid of blocks, address a
//! per-scale memory bank with each flattened block, hard-shrink and
//! re-aggregate, then assemble the transformed map.
//!
//! Each block is a query; attention over the bank uses softmax of cosine
//! similarities, entries strictly below 1/N are dropped, survivors are
//! renormalized (switchable), and the aggregated rows are reassembled in
//! place of the original blocks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::ops::blocks::{assemble_data, divide_data};
use crate::tensor::{Element, Tensor};

/// Division counts along height, width and channels. `Q = r_h * r_w * r_c`
/// blocks per map; each rate must divide its dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DivisionRates {
    pub r_h: usize,
    pub r_w: usize,
    pub r_c: usize,
}

impl DivisionRates {
    pub fn new(r_h: usize, r_w: usize, r_c: usize) -> Self {
        DivisionRates { r_h, r_w, r_c }
    }

    pub fn block_count(&self) -> usize {
        self.r_h * self.r_w * self.r_c
    }

    /// Flattened block dimension for a map of the given size.
    pub fn block_dim(&self, h: usize, w: usize, c: usize) -> usize {
        (h / self.r_h) * (w / self.r_w) * (c / self.r_c)
    }

    pub fn validate(&self, h: usize, w: usize, c: usize) -> Result<()> {
        if self.r_h == 0 || self.r_w == 0 || self.r_c == 0 {
            return Err(Error::invalid("divide", "division rates must be positive"));
        }
        for (name, dim, rate) in [("height", h, self.r_h), ("width", w, self.r_w), ("channels", c, self.r_c)]
        {
            if rate > dim || dim % rate != 0 {
                return Err(Error::shape(
                    "divide",
                    format!("{name} extent {dim} is not divisible by rate {rate}"),
                ));
            }
        }
        Ok(())
    }
}

/// N learned prototype rows of fixed dimension D, one bank per scale.
#[derive(Debug, Clone)]
pub struct MemoryBank<E: Element = f32> {
    pub items: Tensor<E>,
}

impl<E: Element> MemoryBank<E> {
    pub fn new(items: Tensor<E>) -> Result<Self> {
        items.dims2("memory_bank")?;
        Ok(MemoryBank { items })
    }

    pub fn len(&self) -> usize {
        self.items.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.items.shape()[1]
    }
}

/// Rows drawn from a standard normal and L2-normalized to unit norm.
/// Deterministic for a given seed.
pub fn init_bank<E: Element>(n: usize, d: usize, seed: u64) -> MemoryBank<E> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_bank_with(n, d, &mut rng)
}

pub fn init_bank_with<E: Element>(n: usize, d: usize, rng: &mut impl Rng) -> MemoryBank<E> {
    assert!(n >= 1 && d >= 1, "bank needs at least one row and dimension");
    let mut data = vec![E::zero(); n * d];
    for row in data.chunks_mut(d) {
        let mut norm = 0.0f64;
        for v in row.iter_mut() {
            let s: f64 = rng.sample(StandardNormal);
            *v = E::from_f64(s);
            norm += s * s;
        }
        let inv = E::from_f64(1.0 / norm.sqrt().max(1e-12));
        for v in row.iter_mut() {
            *v = *v * inv;
        }
    }
    MemoryBank {
        items: Tensor::new(vec![n, d], data).unwrap(),
    }
}

/// Attention weights for one query with the survivor mask from shrinkage.
#[derive(Debug, Clone)]
pub struct AttentionWeights<E: Element = f32> {
    pub w: Vec<E>,
    pub survivor_mask: Vec<bool>,
}

/// Plain (non-graph) division of a map into `Q` flattened blocks,
/// row-major over the (height, width, channel) grid.
pub fn divide<E: Element>(map: &Tensor<E>, rates: DivisionRates) -> Result<Tensor<E>> {
    let dims = as_batched(map)?;
    rates.validate(dims.2, dims.3, dims.1)?;
    let q = dims.0 * rates.block_count();
    let d = rates.block_dim(dims.2, dims.3, dims.1);
    Tensor::new(vec![q, d], divide_data(map, dims, rates))
}

/// Exact inverse of [`divide`] back onto a map of `shape` (CHW or NCHW).
pub fn assemble<E: Element>(
    blocks: &Tensor<E>,
    shape: &[usize],
    rates: DivisionRates,
) -> Result<Tensor<E>> {
    let tmp = Tensor::<E>::zeros(shape.to_vec());
    let dims = as_batched(&tmp)?;
    rates.validate(dims.2, dims.3, dims.1)?;
    let q = dims.0 * rates.block_count();
    let d = rates.block_dim(dims.2, dims.3, dims.1);
    if blocks.shape() != [q, d] {
        return Err(Error::shape(
            "assemble",
            format!("expected [{q}, {d}] blocks, got {:?}", blocks.shape()),
        ));
    }
    Tensor::new(shape.to_vec(), assemble_data(blocks, dims, rates))
}

fn as_batched<E: Element>(t: &Tensor<E>) -> Result<(usize, usize, usize, usize)> {
    match t.shape()[..] {
        [c, h, w] => Ok((1, c, h, w)),
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::shape(
            "divide",
            format!("expected CHW or NCHW map, got {:?}", t.shape()),
        )),
    }
}

/// Pre-shrink attention of one query against a bank: softmax over cosine
/// similarities (Eq. weights are non-negative and sum to one).
pub fn address<E: Element>(query: &Tensor<E>, bank: &MemoryBank<E>) -> Result<AttentionWeights<E>> {
    if query.numel() != bank.dim() {
        return Err(Error::shape(
            "address",
            format!(
                "query dimension {} does not match bank item dimension {}",
                query.numel(),
                bank.dim()
            ),
        ));
    }
    let mut g: Graph<E> = Graph::new();
    let q = g.constant(query.clone().reshaped(vec![1, bank.dim()])?);
    let m = g.constant(bank.items.clone());
    let sims = g.cosine_rows(q, m, E::from_f64(1e-8))?;
    let soft = g.softmax(sims)?;
    Ok(AttentionWeights {
        w: g.value(soft).data().to_vec(),
        survivor_mask: vec![true; bank.len()],
    })
}

/// Zero entries strictly below 1/N and renormalize survivors to sum one.
/// The maximum weight always survives, so the survivor set is nonempty.
pub fn shrink<E: Element>(weights: &AttentionWeights<E>, renormalize: bool) -> AttentionWeights<E> {
    let n = weights.w.len();
    let mut g: Graph<E> = Graph::new();
    let x = g.constant(Tensor::new(vec![1, n], weights.w.clone()).unwrap());
    let s = g.shrink_rows(x, renormalize).unwrap();
    let out = g.value(s).data().to_vec();
    let mask = out.iter().map(|&v| v > E::zero()).collect();
    AttentionWeights {
        w: out,
        survivor_mask: mask,
    }
}

/// Weighted sum of bank rows; with post-shrink weights the result stays in
/// the convex hull of the memory items.
pub fn aggregate<E: Element>(weights: &AttentionWeights<E>, bank: &MemoryBank<E>) -> Tensor<E> {
    let (n, d) = (bank.len(), bank.dim());
    assert_eq!(weights.w.len(), n, "weight/bank length mismatch");
    let mut out = vec![E::zero(); d];
    for (i, &wi) in weights.w.iter().enumerate() {
        if wi == E::zero() {
            continue;
        }
        for (dst, &m) in out.iter_mut().zip(&bank.items.data()[i * d..(i + 1) * d]) {
            *dst += wi * m;
        }
    }
    Tensor::from_vec(out)
}

/// Full differentiable pipeline on a graph: divide, address, shrink,
/// aggregate, assemble. Gradients flow to both the feature map and the
/// bank items node.
pub fn memory_forward_on_graph<E: Element>(
    g: &mut Graph<E>,
    feature_map: NodeId,
    bank_items: NodeId,
    rates: DivisionRates,
    renormalize: bool,
) -> Result<NodeId> {
    let dims = g.value(feature_map).dims4("memory_forward")?;
    let d_expected = rates.block_dim(dims.2, dims.3, dims.1);
    let bank_dim = g.value(bank_items).dims2("memory_forward")?.1;
    if bank_dim != d_expected {
        return Err(Error::shape(
            "memory_forward",
            format!("bank item dimension {bank_dim} does not match block dimension {d_expected}"),
        ));
    }
    let queries = g.divide_blocks(feature_map, rates)?;
    let sims = g.cosine_rows(queries, bank_items, E::from_f64(1e-8))?;
    let weights = g.softmax(sims)?;
    let kept = g.shrink_rows(weights, renormalize)?;
    let aggregated = g.matmul(kept, bank_items)?;
    g.assemble_blocks(aggregated, rates, dims)
}

/// Convenience non-graph wrapper: transform a map through a bank.
pub fn memory_forward<E: Element>(
    map: &Tensor<E>,
    bank: &MemoryBank<E>,
    rates: DivisionRates,
    renormalize: bool,
) -> Result<Tensor<E>> {
    let mut g: Graph<E> = Graph::new();
    let batched = match map.shape().len() {
        3 => {
            let mut s = vec![1usize];
            s.extend_from_slice(map.shape());
            map.clone().reshaped(s)?
        }
        _ => map.clone(),
    };
    let f = g.constant(batched);
    let items = g.constant(bank.items.clone());
    let out = memory_forward_on_graph(&mut g, f, items, rates, renormalize)?;
    g.value(out).clone().reshaped(map.shape().to_vec())
}
