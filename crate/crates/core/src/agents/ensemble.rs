use ndarray::{Array1, Array2, ArrayView2};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::actor_critic::{act_with, actor_objective, critic_loss_given_next, ActorCritic, CriticLoss, LearningRates};
use super::cql::{cql_loss_given_next, CqlParams};
use super::{split_head, Batch, GaussianPolicy};
use crate::envs::Policy;
use crate::error::{Error, Result};
use crate::nn::{squashed_sample, standard_normal, SquashedSample, LOG_STD_MAX, LOG_STD_MIN};

/// Floor on the mixture variance; `½ ln` of it equals the log-std floor.
pub const VARIANCE_MIN: f64 = 4.248_354_255_291_589e-18;

/// Moment-matched Gaussian of an equally weighted mixture of Gaussians.
#[derive(Clone, Debug)]
pub struct MixtureMoments {
    pub mean: Array2<f64>,
    pub log_std: Array2<f64>,
    pub variance: Array2<f64>,
    members: Vec<(Array2<f64>, Array2<f64>, Array2<f64>)>,
    /// 1 where the variance floor was inactive.
    var_live: Array2<f64>,
}

/// Mean `(1/N)Σμᵢ`, variance `(1/N)Σ(σᵢ² + μᵢ²) − mean²`. With one member
/// the inputs pass through untouched.
pub fn mixture_moments(means: &[ArrayView2<f64>], log_stds: &[ArrayView2<f64>]) -> MixtureMoments {
    assert!(!means.is_empty() && means.len() == log_stds.len(), "mixture needs matching members");
    let n = means.len();
    let shape = means[0].dim();
    if n == 1 {
        let log_std = log_stds[0].to_owned();
        let variance = log_std.mapv(|l| (2.0 * l).exp());
        return MixtureMoments {
            mean: means[0].to_owned(),
            log_std,
            variance,
            members: Vec::new(),
            var_live: Array2::ones(shape),
        };
    }
    let nf = n as f64;
    let mut members = Vec::with_capacity(n);
    let mut mean = Array2::<f64>::zeros(shape);
    let mut second = Array2::<f64>::zeros(shape);
    for (m, l) in means.iter().zip(log_stds) {
        let live = l.mapv(|v| if (LOG_STD_MIN..=LOG_STD_MAX).contains(&v) { 1.0 } else { 0.0 });
        let var = l.mapv(|v| (2.0 * v.clamp(LOG_STD_MIN, LOG_STD_MAX)).exp());
        mean += m;
        second += &(&var + &m.mapv(|v| v * v));
        members.push((m.to_owned(), var, live));
    }
    mean /= nf;
    second /= nf;
    let mut variance = &second - &mean.mapv(|v| v * v);
    let var_live = variance.mapv(|v| if v >= VARIANCE_MIN { 1.0 } else { 0.0 });
    variance.mapv_inplace(|v| v.max(VARIANCE_MIN));
    let log_std = variance.mapv(|v| 0.5 * v.ln());
    MixtureMoments {
        mean,
        log_std,
        variance,
        members,
        var_live,
    }
}

impl MixtureMoments {
    pub fn len(&self) -> usize {
        self.members.len().max(1)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Per-member `(∂L/∂μᵢ, ∂L/∂log σᵢ)` from gradients on the mixture moments.
    pub fn backward(&self, d_mean: ArrayView2<f64>, d_log_std: ArrayView2<f64>) -> Vec<(Array2<f64>, Array2<f64>)> {
        if self.members.is_empty() {
            return vec![(d_mean.to_owned(), d_log_std.to_owned())];
        }
        let nf = self.members.len() as f64;
        let d_var = ndarray::Zip::from(&d_log_std)
            .and(&self.variance)
            .and(&self.var_live)
            .map_collect(|&g, &v, &live| live * g / (2.0 * v));
        self.members
            .iter()
            .map(|(mu, var, live)| {
                let mut dm = d_mean.to_owned() / nf;
                ndarray::Zip::from(&mut dm)
                    .and(mu)
                    .and(&self.mean)
                    .and(&d_var)
                    .for_each(|d, &m, &mbar, &dv| *d += dv * 2.0 * (m - mbar) / nf);
                let dl = ndarray::Zip::from(&d_var)
                    .and(var)
                    .and(live)
                    .map_collect(|&dv, &s2, &lv| dv * 2.0 * s2 / nf * lv);
                (dm, dl)
            })
            .collect()
    }
}

/// Which critic update fine-tuning applies to each member.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CriticObjective {
    Sac,
    Cql(CqlParams),
}

/// N independently trained actor-critics combined into one agent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleAgent {
    pub members: Vec<ActorCritic>,
}

impl EnsembleAgent {
    pub fn new(members: Vec<ActorCritic>) -> Result<Self> {
        let ens = EnsembleAgent { members };
        ens.validate()?;
        Ok(ens)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .members
            .first()
            .ok_or_else(|| Error::Contract("ensemble needs at least one member".into()))?;
        for (i, m) in self.members.iter().enumerate() {
            if m.obs_dim != first.obs_dim
                || m.act_dim != first.act_dim
                || m.policy.dims() != first.policy.dims()
                || m.q1.dims() != first.q1.dims()
                || m.twin() != first.twin()
            {
                return Err(Error::Contract(format!("ensemble member {i} is not congruent with member 0")));
            }
            for net in [&m.policy, &m.q1, &m.q1_target].into_iter().chain(m.q2.as_ref()).chain(m.q2_target.as_ref()) {
                net.validate()?;
            }
        }
        Ok(())
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn obs_dim(&self) -> usize {
        self.members[0].obs_dim
    }

    /// Mean over members of each member's min-critic. Per row the member values
    /// are summed in sorted order, so member order cannot change the result.
    pub fn ensemble_q(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Array1<f64>> {
        let per: Vec<Array1<f64>> = self
            .members
            .iter()
            .map(|m| m.q_value(states, actions))
            .collect::<Result<_>>()?;
        if per.len() == 1 {
            return Ok(per.into_iter().next().expect("one member"));
        }
        let n = per.len();
        let mut out = Array1::zeros(states.nrows());
        let mut row = vec![0.0; n];
        for i in 0..states.nrows() {
            for (k, v) in per.iter().enumerate() {
                row[k] = v[i];
            }
            row.sort_by(f64::total_cmp);
            out[i] = row.iter().sum::<f64>() / n as f64;
        }
        Ok(out)
    }

    /// Pre-squash mixture `(mean, variance)` per action dimension.
    pub fn policy_moments(&self, states: ArrayView2<f64>) -> Result<MixtureMoments> {
        let heads: Vec<(Array2<f64>, Array2<f64>)> = self
            .members
            .iter()
            .map(|m| m.policy.forward_batch(states).map(|o| split_head(&o)))
            .collect::<Result<_>>()?;
        let means: Vec<ArrayView2<f64>> = heads.iter().map(|h| h.0.view()).collect();
        let log_stds: Vec<ArrayView2<f64>> = heads.iter().map(|h| h.1.view()).collect();
        Ok(mixture_moments(&means, &log_stds))
    }

    /// Reset every member's optimiser state (before fine-tuning).
    pub fn reset_optimizers(&mut self) {
        for m in &mut self.members {
            m.policy.reset_optimizer();
            m.q1.reset_optimizer();
            if let Some(q2) = &mut m.q2 {
                q2.reset_optimizer();
            }
        }
    }
}

impl GaussianPolicy for EnsembleAgent {
    fn act_dim(&self) -> usize {
        self.members[0].act_dim
    }

    fn moments(&self, states: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let m = self.policy_moments(states)?;
        Ok((m.mean, m.log_std))
    }
}

impl Policy for EnsembleAgent {
    fn act(&self, obs: &[f64], deterministic: bool, rng: &mut dyn RngCore) -> Vec<f64> {
        act_with(self, obs, deterministic, rng)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct FinetuneLosses {
    /// Mean over members.
    pub critic: f64,
    pub bellman: f64,
    pub regularizer: f64,
    pub actor: f64,
    pub mean_log_prob: f64,
    pub alpha: f64,
}

/// One fine-tuning update of every member from a shared minibatch.
///
/// Critics regress onto targets whose `a′` comes from the mixture policy; the
/// actor objective is taken against the ensemble Q. With a single member this
/// is the plain SAC step draw-for-draw.
pub fn ensemble_finetune_step(
    ens: &mut EnsembleAgent,
    batch: &Batch,
    objective: &CriticObjective,
    lrs: &LearningRates,
    rng: &mut dyn RngCore,
) -> Result<FinetuneLosses> {
    let n = ens.size() as f64;
    let next: SquashedSample = ens.sample(batch.next_states.view(), rng)?;
    let mut losses = FinetuneLosses::default();
    let mut critic_losses: Vec<CriticLoss> = Vec::with_capacity(ens.size());
    for m in &ens.members {
        let alpha = m.alpha();
        let loss = match objective {
            CriticObjective::Sac => critic_loss_given_next(m, batch, next.action.view(), next.log_prob.view(), alpha)?,
            CriticObjective::Cql(p) => cql_loss_given_next(m, p, batch, next.action.view(), next.log_prob.view(), alpha, rng)?,
        };
        critic_losses.push(loss);
    }
    for (m, loss) in ens.members.iter_mut().zip(&critic_losses) {
        m.apply_critic(loss, lrs.value)?;
        losses.critic += loss.loss;
        losses.bellman += loss.bellman;
        losses.regularizer += loss.regularizer;
    }

    let noise = standard_normal(rng, batch.len(), ens.act_dim());
    let alpha = ens.members.iter().map(|m| m.alpha()).sum::<f64>() / n;
    let (actor_loss, mean_log_prob, grads) = {
        let policies: Vec<_> = ens.members.iter().map(|m| &m.policy).collect();
        let critics: Vec<_> = ens.members.iter().map(|m| (&m.q1, m.q2.as_ref())).collect();
        actor_objective(&policies, &critics, alpha, batch.states.view(), noise.view())?
    };
    for (m, g) in ens.members.iter_mut().zip(&grads) {
        m.policy.adam_step(g, lrs.policy)?;
        m.temperature.update(mean_log_prob, lrs.alpha)?;
        m.update_targets()?;
    }
    losses.critic /= n;
    losses.bellman /= n;
    losses.regularizer /= n;
    losses.actor = actor_loss;
    losses.mean_log_prob = mean_log_prob;
    losses.alpha = alpha;
    Ok(losses)
}

/// Mixture sample with explicit noise, for callers that manage their own draws.
pub fn mixture_sample(ens: &EnsembleAgent, states: ArrayView2<f64>, noise: ArrayView2<f64>) -> Result<SquashedSample> {
    let m = ens.policy_moments(states)?;
    Ok(squashed_sample(m.mean.view(), m.log_std.view(), noise))
}
