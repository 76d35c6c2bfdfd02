//! Actor-critic agents: SAC and CQL critics, the SAC actor, fitted Q
//! evaluation, target-network maintenance and the pessimistic Q-ensemble.

mod actor_critic;
mod cql;
mod ensemble;
mod fqe;

pub use actor_critic::{
    actor_objective, polyak_update, sac_actor_loss, sac_critic_loss, ActorCritic, ActorLoss,
    AgentConfig, CriticLoss, LearningRates, Temperature,
};
pub use cql::{cql_critic_loss, seen_minus_uniform_gap, CqlParams, SampleSources};
pub use ensemble::{
    ensemble_finetune_step, mixture_moments, mixture_sample, CriticObjective, EnsembleAgent, FinetuneLosses,
    MixtureMoments, VARIANCE_MIN,
};
pub use fqe::{fqe_update, FqeLoss};

use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis};
use rand::RngCore;

use crate::envs::Transition;
use crate::error::{Error, Result};
use crate::nn::{squashed_sample, standard_normal, Mlp, SquashedSample};

/// Column-stacked minibatch of transitions.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Array1<f64>,
    pub next_states: Array2<f64>,
    /// 1.0 for genuine terminals, 0.0 otherwise.
    pub dones: Array1<f64>,
}

impl Batch {
    pub fn from_transitions<'a, I>(items: I) -> Result<Batch>
    where
        I: IntoIterator<Item = &'a Transition>,
    {
        let items: Vec<&Transition> = items.into_iter().collect();
        let first = items
            .first()
            .ok_or_else(|| Error::Contract("empty minibatch".into()))?;
        let (obs, act) = (first.state.len(), first.action.len());
        let n = items.len();
        let mut b = Batch {
            states: Array2::zeros((n, obs)),
            actions: Array2::zeros((n, act)),
            rewards: Array1::zeros(n),
            next_states: Array2::zeros((n, obs)),
            dones: Array1::zeros(n),
        };
        for (i, t) in items.iter().enumerate() {
            if t.state.len() != obs || t.action.len() != act || t.next_state.len() != obs {
                return Err(Error::Contract(format!("transition {i} has mismatched dimensions")));
            }
            for j in 0..obs {
                b.states[[i, j]] = t.state[j];
                b.next_states[[i, j]] = t.next_state[j];
            }
            for j in 0..act {
                b.actions[[i, j]] = t.action[j];
            }
            b.rewards[i] = t.reward;
            b.dones[i] = if t.done { 1.0 } else { 0.0 };
        }
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// A policy that emits the (pre-squash) Gaussian moments per state.
pub trait GaussianPolicy {
    fn act_dim(&self) -> usize;

    /// `(mean, log_std)`, each `(batch, act_dim)`.
    fn moments(&self, states: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)>;

    fn sample(&self, states: ArrayView2<f64>, rng: &mut dyn RngCore) -> Result<SquashedSample> {
        let (mean, log_std) = self.moments(states)?;
        let noise = standard_normal(rng, states.nrows(), self.act_dim());
        Ok(squashed_sample(mean.view(), log_std.view(), noise.view()))
    }
}

impl GaussianPolicy for Mlp {
    fn act_dim(&self) -> usize {
        self.output_dim() / 2
    }

    fn moments(&self, states: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let out = self.forward_batch(states)?;
        Ok(split_head(&out))
    }
}

pub(crate) fn split_head(out: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let half = out.ncols() / 2;
    (
        out.slice(ndarray::s![.., ..half]).to_owned(),
        out.slice(ndarray::s![.., half..]).to_owned(),
    )
}

pub(crate) fn q_input(states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Array2<f64> {
    concatenate(Axis(1), &[states, actions]).expect("state/action rows agree")
}

pub(crate) fn column(out: Array2<f64>) -> Array1<f64> {
    out.index_axis_move(Axis(1), 0)
}

pub(crate) fn ensure_finite(values: &Array1<f64>, what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Divergence(format!("non-finite {what}")))
    }
}
