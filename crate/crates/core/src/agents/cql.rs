use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::actor_critic::{backprop_critic, bellman_part, bellman_targets, ActorCritic, ActorLoss, CriticLoss, LearningRates};
use super::{column, sac_actor_loss, Batch, GaussianPolicy};
use crate::error::{Error, Result};
use crate::nn::{Gradients, Mlp};

/// Which action sets feed the sampled log-sum-exp.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleSources {
    pub uniform: bool,
    pub current_policy: bool,
    /// Actions drawn at `s′` but scored at `s`.
    pub next_policy: bool,
}

impl Default for SampleSources {
    fn default() -> Self {
        SampleSources {
            uniform: true,
            current_policy: true,
            next_policy: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CqlParams {
    pub alpha0: f64,
    pub num_sampled_actions: usize,
    pub sample_sources: SampleSources,
}

impl Default for CqlParams {
    fn default() -> Self {
        CqlParams {
            alpha0: 1.0,
            num_sampled_actions: 10,
            sample_sources: SampleSources::default(),
        }
    }
}

impl CqlParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha0 >= 0.0 && self.alpha0.is_finite()) {
            return Err(Error::config("cql.alpha0", "must be a nonnegative finite number"));
        }
        if self.num_sampled_actions == 0 {
            return Err(Error::config("cql.num_sampled_actions", "must be at least 1"));
        }
        let s = self.sample_sources;
        if !(s.uniform || s.current_policy || s.next_policy) {
            return Err(Error::config("cql.sample_sources", "enable at least one source"));
        }
        Ok(())
    }
}

/// Sampled actions for the log-sum-exp, laid out row `i·m + j` for state `i`.
struct LseSamples {
    per_state: usize,
    inputs: Array2<f64>,
    /// `log q(a)` of the proposal that produced each action.
    log_density: Array1<f64>,
}

fn draw_samples(agent: &ActorCritic, params: &CqlParams, batch: &Batch, rng: &mut dyn RngCore) -> Result<LseSamples> {
    let b = batch.len();
    let k = params.num_sampled_actions;
    let d = agent.act_dim;
    let src = params.sample_sources;
    let mut blocks: Vec<(Array2<f64>, Array1<f64>)> = Vec::new();
    if src.uniform {
        let acts = Array2::from_shape_fn((b * k, d), |_| rng.random_range(-1.0..1.0));
        let lq = Array1::from_elem(b * k, -(d as f64) * std::f64::consts::LN_2);
        blocks.push((acts, lq));
    }
    for (enabled, source) in [(src.current_policy, &batch.states), (src.next_policy, &batch.next_states)] {
        if enabled {
            let rep = repeat_rows(source.view(), k);
            let s = agent.policy.sample(rep.view(), rng)?;
            blocks.push((s.action, s.log_prob));
        }
    }
    let m = k * blocks.len();
    let obs = batch.states.ncols();
    let mut inputs = Array2::zeros((b * m, obs + d));
    let mut log_density = Array1::zeros(b * m);
    for i in 0..b {
        for (bi, (acts, lq)) in blocks.iter().enumerate() {
            for j in 0..k {
                let row = i * m + bi * k + j;
                let src_row = i * k + j;
                inputs.row_mut(row).slice_mut(ndarray::s![..obs]).assign(&batch.states.row(i));
                inputs.row_mut(row).slice_mut(ndarray::s![obs..]).assign(&acts.row(src_row));
                log_density[row] = lq[src_row];
            }
        }
    }
    Ok(LseSamples {
        per_state: m,
        inputs,
        log_density,
    })
}

fn repeat_rows(x: ArrayView2<f64>, k: usize) -> Array2<f64> {
    let mut out = Array2::zeros((x.nrows() * k, x.ncols()));
    for (i, row) in x.rows().into_iter().enumerate() {
        for j in 0..k {
            out.row_mut(i * k + j).assign(&row);
        }
    }
    out
}

/// `mean_i [log((1/m) Σ_j exp(Q(s_i, a_ij) − log q_ij)) − Q(s_i, a_i)]` for
/// one critic, accumulating `alpha0 ×` its gradient into `grads`.
fn regularizer(
    q: &Mlp,
    samples: &LseSamples,
    data_values: ArrayView1<f64>,
    alpha0: f64,
    data_upstream: &mut Array1<f64>,
    grads: &mut Gradients,
) -> Result<f64> {
    let b = data_values.len();
    let m = samples.per_state;
    let (out, tape) = q.forward_tape(samples.inputs.view())?;
    let z = column(out) - &samples.log_density;
    let mut d_z = Array1::zeros(z.len());
    let mut total = 0.0;
    for i in 0..b {
        let zi = z.slice(ndarray::s![i * m..(i + 1) * m]);
        let top = zi.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        if !top.is_finite() {
            return Err(Error::Divergence("non-finite value in CQL log-sum-exp".into()));
        }
        let denom: f64 = zi.iter().map(|v| (v - top).exp()).sum();
        total += top + (denom / m as f64).ln() - data_values[i];
        for j in 0..m {
            d_z[i * m + j] = alpha0 * (zi[j] - top).exp() / denom / b as f64;
        }
        data_upstream[i] -= alpha0 / b as f64;
    }
    backprop_critic(q, &tape, &d_z, grads)?;
    Ok(total / b as f64)
}

/// Bellman error plus `alpha0 · (logsumexp_a Q(s, a) − Q(s, a_data))` per critic.
/// With `alpha0 = 0` this is exactly the SAC critic, RNG draws included.
pub fn cql_critic_loss(agent: &ActorCritic, params: &CqlParams, batch: &Batch, rng: &mut dyn RngCore) -> Result<CriticLoss> {
    let next = agent.policy.sample(batch.next_states.view(), rng)?;
    cql_loss_given_next(agent, params, batch, next.action.view(), next.log_prob.view(), agent.alpha(), rng)
}

pub(crate) fn cql_loss_given_next(
    agent: &ActorCritic,
    params: &CqlParams,
    batch: &Batch,
    next_actions: ArrayView2<f64>,
    next_log_prob: ArrayView1<f64>,
    alpha: f64,
    rng: &mut dyn RngCore,
) -> Result<CriticLoss> {
    params.validate()?;
    let y = bellman_targets(agent, batch, next_actions, next_log_prob, alpha)?;
    let mut part = bellman_part(agent, batch, &y)?;
    if params.alpha0 == 0.0 {
        return super::actor_critic::finish_bellman(agent, &part, y);
    }
    let samples = draw_samples(agent, params, batch, rng)?;
    let critics: Vec<&Mlp> = std::iter::once(&agent.q1).chain(agent.q2.as_ref()).collect();
    let mut all_grads = Vec::with_capacity(critics.len());
    let mut reg_total = 0.0;
    for (idx, q) in critics.iter().enumerate() {
        let mut g = q.gradients();
        let values = part.values[idx].clone();
        reg_total += regularizer(q, &samples, values.view(), params.alpha0, &mut part.upstream[idx], &mut g)?;
        backprop_critic(q, &part.tapes[idx], &part.upstream[idx], &mut g)?;
        all_grads.push(g);
    }
    let q2_grads = if all_grads.len() > 1 { all_grads.pop() } else { None };
    let q1_grads = all_grads.pop().expect("first critic");
    let loss = part.mse + params.alpha0 * reg_total;
    if !loss.is_finite() {
        return Err(Error::Divergence("non-finite CQL loss".into()));
    }
    Ok(CriticLoss {
        loss,
        bellman: part.mse,
        regularizer: reg_total,
        q1_grads,
        q2_grads,
        targets: y,
    })
}

impl ActorCritic {
    /// One offline CQL update: conservative critic, SAC actor, temperature, targets.
    pub fn cql_step(
        &mut self,
        params: &CqlParams,
        batch: &Batch,
        lrs: &LearningRates,
        rng: &mut dyn RngCore,
    ) -> Result<(CriticLoss, ActorLoss)> {
        let critic = cql_critic_loss(self, params, batch, rng)?;
        self.apply_critic(&critic, lrs.value)?;
        let actor = sac_actor_loss(self, batch.states.view(), rng)?;
        self.policy.adam_step(&actor.grads, lrs.policy)?;
        self.temperature.update(actor.mean_log_prob, lrs.alpha)?;
        self.update_targets()?;
        Ok((critic, actor))
    }
}

/// Mean `Q(s, a)` minus mean `Q(s, uniform)` over a batch; positive after
/// conservative training on narrow data.
pub fn seen_minus_uniform_gap(agent: &ActorCritic, batch: &Batch, rng: &mut dyn RngCore) -> Result<f64> {
    let seen = agent.q_value(batch.states.view(), batch.actions.view())?;
    let uniform = Array2::from_shape_fn(batch.actions.dim(), |_| rng.random_range(-1.0..1.0));
    let unseen = agent.q_value(batch.states.view(), uniform.view())?;
    Ok(seen.mean().unwrap_or(0.0) - unseen.mean().unwrap_or(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::actor_critic::tests::{random_batch, tiny_agent};
    use crate::agents::sac_critic_loss;
    use crate::nn::{Dense, Head};
    use ndarray::{array, Axis};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_alpha_reduces_to_sac_bit_for_bit() {
        let agent = tiny_agent(20, true);
        let batch = random_batch(21, 8, 3, 2);
        let params = CqlParams { alpha0: 0.0, ..CqlParams::default() };
        let a = cql_critic_loss(&agent, &params, &batch, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = sac_critic_loss(&agent, &batch, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        assert_eq!(a.q1_grads, b.q1_grads);
        assert_eq!(a.q2_grads, b.q2_grads);
    }

    #[test]
    fn constant_critic_has_zero_regularizer_gradient() {
        let mut agent = tiny_agent(22, false);
        // Constant in the action: the softmax-weighted gradient of the
        // log-sum-exp equals the data-action gradient for every parameter the
        // value actually depends on. The action-weight entries (3, 4) see the
        // action inputs themselves and are excluded.
        let w = array![[0.5], [-0.2], [0.3], [0.0], [0.0]];
        agent.q1 = Mlp::from_layers(vec![Dense { weight: w, bias: array![1.5] }], Head::Linear).unwrap();
        let batch = random_batch(23, 8, 3, 2);
        let with = cql_critic_loss(&agent, &CqlParams { alpha0: 3.0, ..CqlParams::default() }, &batch, &mut ChaCha8Rng::seed_from_u64(1))
            .unwrap();
        let without = cql_critic_loss(&agent, &CqlParams { alpha0: 0.0, ..CqlParams::default() }, &batch, &mut ChaCha8Rng::seed_from_u64(1))
            .unwrap();
        let diff: f64 = with
            .q1_grads
            .to_vec()
            .iter()
            .zip(without.q1_grads.to_vec())
            .enumerate()
            .filter(|(i, _)| *i != 3 && *i != 4)
            .map(|(_, (a, b))| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12, "regularizer gradient {diff}");
    }

    #[test]
    fn logsumexp_does_not_overflow() {
        let mut agent = tiny_agent(24, false);
        let w = Array2::from_elem((5, 1), 300.0);
        agent.q1 = Mlp::from_layers(vec![Dense { weight: w, bias: array![800.0] }], Head::Linear).unwrap();
        agent.q1_target = agent.q1.clone();
        agent.gamma = 0.0;
        let batch = random_batch(25, 4, 3, 2);
        let out = cql_critic_loss(&agent, &CqlParams::default(), &batch, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(out.loss.is_finite() && out.regularizer.is_finite());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let agent = tiny_agent(26, true);
        let batch = random_batch(27, 5, 3, 2);
        let params = CqlParams {
            alpha0: 2.0,
            num_sampled_actions: 3,
            sample_sources: SampleSources { uniform: true, current_policy: true, next_policy: true },
        };
        let out = cql_critic_loss(&agent, &params, &batch, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let analytic = out.q1_grads.to_vec();
        let eps = 1e-5;
        let base = agent.q1.params_vec();
        for (i, g) in analytic.iter().enumerate() {
            let mut probe = agent.clone();
            let mut p = base.clone();
            p[i] += eps;
            probe.q1.set_params_vec(&p).unwrap();
            let up = cql_critic_loss(&probe, &params, &batch, &mut ChaCha8Rng::seed_from_u64(6)).unwrap().loss;
            p[i] -= 2.0 * eps;
            probe.q1.set_params_vec(&p).unwrap();
            let down = cql_critic_loss(&probe, &params, &batch, &mut ChaCha8Rng::seed_from_u64(6)).unwrap().loss;
            let fd = (up - down) / (2.0 * eps);
            let denom = fd.abs().max(g.abs()).max(1e-6);
            assert!((fd - g).abs() / denom < 1e-4, "param {i}: {g} vs {fd}");
        }
    }

    #[test]
    fn invalid_params_are_rejected() {
        let bad = CqlParams { num_sampled_actions: 0, ..CqlParams::default() };
        assert!(bad.validate().is_err());
        let none = CqlParams {
            sample_sources: SampleSources { uniform: false, current_policy: false, next_policy: false },
            ..CqlParams::default()
        };
        assert!(none.validate().is_err());
    }

    #[test]
    fn offline_training_on_narrow_data_favours_seen_actions() {
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let mut agent = tiny_agent(29, true);
        agent.q1_target = agent.q1.clone();
        agent.q2_target = agent.q2.clone();
        // Narrow behaviour: actions clustered near (0.5, -0.5); reward ignores the action.
        let n = 256;
        let states = Array2::from_shape_fn((n, 3), |_| rng.random_range(-1.0..1.0));
        let actions = Array2::from_shape_fn((n, 2), |(_, j)| {
            let c = if j == 0 { 0.5 } else { -0.5 };
            c + rng.random_range(-0.05..0.05)
        });
        let next_states = Array2::from_shape_fn((n, 3), |_| rng.random_range(-1.0..1.0));
        let rewards = states.column(0).to_owned();
        let data = Batch { states, actions, rewards, next_states, dones: Array1::zeros(n) };
        let params = CqlParams::default();
        let lrs = LearningRates::default();
        for step in 0..2000 {
            let idx: Vec<usize> = (0..32).map(|k| (step * 32 + k * 7) % n).collect();
            let mb = Batch {
                states: data.states.select(Axis(0), &idx),
                actions: data.actions.select(Axis(0), &idx),
                rewards: data.rewards.select(Axis(0), &idx),
                next_states: data.next_states.select(Axis(0), &idx),
                dones: data.dones.select(Axis(0), &idx),
            };
            agent.cql_step(&params, &mb, &lrs, &mut rng).unwrap();
        }
        let gap = seen_minus_uniform_gap(&agent, &data, &mut rng).unwrap();
        assert!(gap > 0.0, "gap {gap}");
    }
}
