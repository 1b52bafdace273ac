//! Training objective: hard-assignment Gaussian NLL and mode cross-entropy
//! per decoder layer, plus a masked L2 on the dense agent futures.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::decoder::{mode_gaussians, mode_logits};
use crate::model::ForwardOutput;
use crate::scene::SceneSample;
use crate::tensor::Tensor;

/// Scalar values of each loss term, for logging and diagnostics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub nll: f64,
    pub ce: f64,
    pub dense: f64,
    pub total: f64,
}

/// Index of the intention point nearest to `endpoint` (lowest index on ties).
pub fn nearest_intention(intentions: &Tensor, endpoint: [f64; 2]) -> usize {
    let (k, _) = intentions.dims2().expect("intentions are K × 2");
    (0..k)
        .map(|i| {
            let r = intentions.row(i);
            (i, (r[0] - endpoint[0]).powi(2) + (r[1] - endpoint[1]).powi(2))
        })
        .fold((0, f64::INFINITY), |best, (i, d)| if d < best.1 { (i, d) } else { best })
        .0
}

/// NLL of `target [T × 2]` under `gauss [T × 5]`, averaged over steps.
pub fn mean_step_nll(g: &mut Graph, gauss: Var, target: &Tensor) -> Result<Var> {
    let t = target.shape()[0] as f64;
    let nll = g.gaussian_nll(gauss, target)?;
    g.scale(nll, 1.0 / t)
}

/// Cross-entropy of a `1 × K` logit row against class `k`.
pub fn cross_entropy(g: &mut Graph, logits: Var, k: usize) -> Result<Var> {
    let lsm = g.log_softmax_rows(logits)?;
    let picked = g.pick(lsm, k)?;
    g.scale(picked, -1.0)
}

/// Mean squared error over valid dense-future entries, or `None` when no agent has a valid future.
pub fn dense_future_l2(g: &mut Graph, dense: Var, sample: &SceneSample) -> Result<Option<Var>> {
    let (n, cols) = g.value(dense).dims2()?;
    let t = sample.horizon();
    if cols != t * 4 || sample.agent_future.numel() != n * t * 4 {
        return Err(crate::error::dim_err(
            "dense_future_l2",
            format!("prediction {n}×{cols}, target {:?}", sample.agent_future.shape()),
        ));
    }
    let mut mask = Vec::with_capacity(n * t * 4);
    for valid in &sample.agent_future_mask {
        mask.extend([if *valid { 1.0 } else { 0.0 }; 4]);
    }
    let count = mask.iter().sum::<f64>();
    if count == 0.0 {
        return Ok(None);
    }
    let target: Vec<f64> = sample.agent_future.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
    let target = g.constant(Tensor::new(&[n, cols], target)?)?;
    let mask = g.constant(Tensor::new(&[n, cols], mask)?)?;
    let diff = g.sub(dense, target)?;
    let diff = g.mul(diff, mask)?;
    let sq = g.square(diff)?;
    let total = g.sum(sq)?;
    Ok(Some(g.scale(total, 1.0 / count)?))
}

/// Builds the full objective on `g`, returning the loss node and its term values.
pub fn training_loss(
    g: &mut Graph,
    out: &ForwardOutput,
    sample: &SceneSample,
    intentions: &Tensor,
) -> Result<(Var, LossBreakdown)> {
    let future = sample.horizon();
    let k = nearest_intention(intentions, sample.endpoint());
    let mut terms = Vec::with_capacity(out.layers.len() * 2 + 1);
    let mut bd = LossBreakdown::default();
    for &layer in &out.layers {
        let gauss = mode_gaussians(g, layer, k, future)?;
        let nll = mean_step_nll(g, gauss, &sample.gt)?;
        let logits = mode_logits(g, layer, future)?;
        let ce = cross_entropy(g, logits, k)?;
        bd.nll += g.value(nll).data()[0];
        bd.ce += g.value(ce).data()[0];
        terms.push(nll);
        terms.push(ce);
    }
    if let Some(dense) = dense_future_l2(g, out.dense, sample)? {
        bd.dense = g.value(dense).data()[0];
        terms.push(dense);
    }
    let total = g.sum_scalars(&terms)?;
    bd.total = g.value(total).data()[0];
    if !bd.total.is_finite() {
        return Err(Error::Numeric {
            op: "training_loss",
            detail: format!("scenario {}: nll={} ce={} dense={}", sample.id, bd.nll, bd.ce, bd.dense),
        });
    }
    Ok((total, bd))
}
