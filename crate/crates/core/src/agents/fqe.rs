use ndarray::{Array1, Axis};
use rand::RngCore;

use super::{column, ensure_finite, q_input, Batch, GaussianPolicy};
use crate::error::Result;
use crate::nn::{Gradients, Mlp};

#[derive(Clone, Debug)]
pub struct FqeLoss {
    pub loss: f64,
    pub grads: Gradients,
    pub targets: Array1<f64>,
}

/// Squared Bellman error of `q` toward `r + γ(1−done)·Q̄(s′, a′)`, `a′ ~ π`.
/// No entropy bonus, no conservative term; the policy is only read.
pub fn fqe_update<P: GaussianPolicy + ?Sized>(
    policy: &P,
    q: &Mlp,
    q_target: &Mlp,
    gamma: f64,
    batch: &Batch,
    rng: &mut dyn RngCore,
) -> Result<FqeLoss> {
    let next = policy.sample(batch.next_states.view(), rng)?;
    let q_next = column(q_target.forward_batch(q_input(batch.next_states.view(), next.action.view()).view())?);
    let n = batch.len();
    let mut y = Array1::zeros(n);
    for i in 0..n {
        y[i] = if batch.dones[i] != 0.0 {
            batch.rewards[i]
        } else {
            batch.rewards[i] + gamma * q_next[i]
        };
    }
    ensure_finite(&y, "FQE target")?;
    let (out, tape) = q.forward_tape(q_input(batch.states.view(), batch.actions.view()).view())?;
    let diff = column(out) - &y;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n as f64;
    let upstream = diff.mapv(|d| 2.0 * d / n as f64);
    let mut grads = q.gradients();
    q.backward(&tape, upstream.view().insert_axis(Axis(1)), &mut grads)?;
    Ok(FqeLoss { loss, grads, targets: y })
}
