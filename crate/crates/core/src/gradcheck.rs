//! Central finite-difference gradient checking.
//!
//! The checker rebuilds the computation from scratch for every probe, so it
//! stays independent of the backward implementation it verifies. Errors are
//! reported per input tensor as `‖analytic − numeric‖₂ / (‖analytic‖₂ +
//! ‖numeric‖₂)`, which tolerates isolated kink crossings while still
//! catching any wrong backward rule.

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::tensor::{Element, Tensor};

/// Builds a scalar objective from leaves registered by the harness.
/// Invoked many times with perturbed inputs; must be deterministic.
pub trait LossBuilder<E: Element> {
    fn build(&mut self, g: &mut Graph<E>, inputs: &[NodeId]) -> Result<NodeId>;
}

impl<E: Element, F: FnMut(&mut Graph<E>, &[NodeId]) -> Result<NodeId>> LossBuilder<E> for F {
    fn build(&mut self, g: &mut Graph<E>, inputs: &[NodeId]) -> Result<NodeId> {
        self(g, inputs)
    }
}

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Relative error per differentiable input, in registration order.
    pub rel_errors: Vec<f64>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().cloned().fold(0.0, f64::max)
    }
}

/// Step size for central differences: `base * (1 + |x|)` per element.
/// f64 checks want ~1e-5; f32 checks need a coarser ~5e-3 to stay above
/// rounding noise in the loss evaluation.
pub fn default_step<E: Element>() -> f64 {
    if E::DTYPE == "f64" {
        1e-5
    } else {
        5e-3
    }
}

/// Compare analytic gradients of `builder` against central finite
/// differences around `inputs`. Every input tensor is treated as
/// differentiable.
pub fn check<E: Element>(
    mut builder: impl LossBuilder<E>,
    inputs: &[Tensor<E>],
    step_base: f64,
) -> Result<GradCheckReport> {
    // Analytic pass.
    let mut g: Graph<E> = Graph::new();
    let ids: Vec<NodeId> = inputs
        .iter()
        .map(|t| g.leaf(t.clone().with_grad()))
        .collect();
    let loss = builder.build(&mut g, &ids)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor<E>> = ids
        .iter()
        .zip(inputs)
        .map(|(id, t)| grads.get_or_zeros(*id, t))
        .collect();
    drop(g);

    let mut eval = |probe: &[Tensor<E>]| -> Result<f64> {
        let mut g: Graph<E> = Graph::new();
        let ids: Vec<NodeId> = probe.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = builder.build(&mut g, &ids)?;
        Ok(g.value(loss).item().as_f64())
    };

    let mut rel_errors = Vec::with_capacity(inputs.len());
    let mut probe: Vec<Tensor<E>> = inputs.to_vec();
    for (ti, tensor) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0f64; tensor.numel()];
        for ei in 0..tensor.numel() {
            let x0 = tensor.data()[ei].as_f64();
            let h = step_base * (1.0 + x0.abs());
            probe[ti].data_mut()[ei] = E::from_f64(x0 + h);
            let plus = eval(&probe)?;
            probe[ti].data_mut()[ei] = E::from_f64(x0 - h);
            let minus = eval(&probe)?;
            probe[ti].data_mut()[ei] = E::from_f64(x0);
            numeric[ei] = (plus - minus) / (2.0 * h);
        }
        let a = &analytic[ti];
        let mut diff_sq = 0.0f64;
        let mut a_sq = 0.0f64;
        let mut n_sq = 0.0f64;
        for (av, nv) in a.data().iter().zip(&numeric) {
            let av = av.as_f64();
            diff_sq += (av - nv) * (av - nv);
            a_sq += av * av;
            n_sq += nv * nv;
        }
        let denom = (a_sq.sqrt() + n_sq.sqrt()).max(1e-10);
        rel_errors.push(diff_sq.sqrt() / denom);
    }
    Ok(GradCheckReport { rel_errors })
}
