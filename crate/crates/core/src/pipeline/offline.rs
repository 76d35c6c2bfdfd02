use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{OfflineConfig, RunConfig};
use crate::agents::{fqe_update, ActorCritic, AgentConfig, Batch, EnsembleAgent, LearningRates};
use crate::envs::{Dataset, Transition};
use crate::error::{Error, Result};
use crate::nn::{Head, Mlp};

/// RNG stream for ensemble member `i`, independent of the ensemble size so
/// the first `k` members of a larger ensemble are a valid size-`k` ensemble.
pub(crate) fn member_rng(seed: u64, member: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1000 + member as u64);
    rng
}

pub(crate) fn minibatch<R: Rng + ?Sized>(data: &[Transition], size: usize, rng: &mut R) -> Result<Batch> {
    Batch::from_transitions((0..size).map(|_| &data[rng.random_range(0..data.len())]))
}

/// Trains one conservative actor-critic on the offline data.
pub fn train_offline_member(
    dataset: &Dataset,
    agent_cfg: &AgentConfig,
    lrs: &LearningRates,
    offline: &OfflineConfig,
    seed: u64,
    member: usize,
) -> Result<ActorCritic> {
    let mut rng = member_rng(seed, member);
    let mut agent = ActorCritic::new(dataset.obs_dim, dataset.act_dim, agent_cfg, &mut rng)?;
    for _ in 0..offline.steps {
        let batch = minibatch(&dataset.transitions, offline.batch_size, &mut rng)?;
        agent.cql_step(&offline.cql, &batch, lrs, &mut rng)?;
    }
    Ok(agent)
}

/// N independent conservative agents assembled into one ensemble.
pub fn train_offline_ensemble(cfg: &RunConfig, dataset: &Dataset) -> Result<EnsembleAgent> {
    train_offline_ensemble_parallel(cfg, dataset, 1)
}

/// As [`train_offline_ensemble`], spreading members over up to `threads`
/// workers. Each member owns its RNG stream, so the result does not depend
/// on the thread count.
pub fn train_offline_ensemble_parallel(cfg: &RunConfig, dataset: &Dataset, threads: usize) -> Result<EnsembleAgent> {
    check_dataset(cfg, dataset)?;
    let train = |i| train_offline_member(dataset, &cfg.agent, &cfg.learning_rates, &cfg.offline, cfg.seed, i);
    let n = cfg.ensemble_size;
    let workers = threads.clamp(1, n.max(1));
    let members = if workers == 1 {
        (0..n).map(train).collect::<Result<Vec<_>>>()?
    } else {
        let mut slots: Vec<Option<Result<ActorCritic>>> = (0..n).map(|_| None).collect();
        std::thread::scope(|scope| {
            for (w, chunk) in slots.chunks_mut(n.div_ceil(workers)).enumerate() {
                let train = &train;
                let first = w * n.div_ceil(workers);
                scope.spawn(move || {
                    for (k, slot) in chunk.iter_mut().enumerate() {
                        *slot = Some(train(first + k));
                    }
                });
            }
        });
        slots.into_iter().map(|s| s.expect("every member trained")).collect::<Result<Vec<_>>>()?
    };
    EnsembleAgent::new(members)
}

pub fn check_dataset(cfg: &RunConfig, dataset: &Dataset) -> Result<()> {
    if dataset.env_id != cfg.env_id {
        return Err(Error::config(
            "env_id",
            format!("dataset was generated on `{}` but the run targets `{}`", dataset.env_id, cfg.env_id),
        ));
    }
    if dataset.is_empty() {
        return Err(Error::config("dataset", "dataset is empty"));
    }
    Ok(())
}

/// Replaces every member's critics with fresh networks fitted by FQE to the
/// ensemble's current policy (no entropy, no conservative term).
pub fn fqe_initialize(ens: &mut EnsembleAgent, dataset: &Dataset, cfg: &RunConfig) -> Result<()> {
    let frozen = ens.clone();
    let lr = cfg.learning_rates.value;
    for (i, m) in ens.members.iter_mut().enumerate() {
        let mut rng = member_rng(cfg.seed, i);
        rng.set_stream(2000 + i as u64);
        let mut q1 = Mlp::new(m.q1.dims(), Head::Linear, &mut rng)?;
        let mut q2 = match &m.q2 {
            Some(q) => Some(Mlp::new(q.dims(), Head::Linear, &mut rng)?),
            None => None,
        };
        let mut t1 = q1.clone();
        let mut t2 = q2.clone();
        for _ in 0..cfg.offline.fqe_steps {
            let batch = minibatch(&dataset.transitions, cfg.offline.batch_size, &mut rng)?;
            let l1 = fqe_update(&frozen, &q1, &t1, m.gamma, &batch, &mut rng)?;
            q1.adam_step(&l1.grads, lr)?;
            t1.soft_update_from(&q1, m.tau)?;
            if let (Some(q2), Some(t2)) = (&mut q2, &mut t2) {
                let l2 = fqe_update(&frozen, q2, t2, m.gamma, &batch, &mut rng)?;
                q2.adam_step(&l2.grads, lr)?;
                t2.soft_update_from(q2, m.tau)?;
            }
        }
        q1.reset_optimizer();
        if let Some(q) = &mut q2 {
            q.reset_optimizer();
        }
        m.q1 = q1;
        m.q2 = q2;
        m.q1_target = t1;
        m.q2_target = t2;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::CqlParams;
    use crate::envs::{EnvId, Provenance, Tier};
    use ndarray::Array2;

    fn toy_dataset(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let transitions = (0..n)
            .map(|_| {
                let s: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
                let a: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
                Transition {
                    reward: 0.5 * s[0] - a[1],
                    next_state: s.iter().map(|v| v * 0.9).collect(),
                    state: s,
                    action: a,
                    done: false,
                }
            })
            .collect();
        Dataset::new(EnvId::PointMassDense, transitions, Provenance { tier: Tier::Random, seed, meta: Default::default() }).unwrap()
    }

    #[test]
    fn reductions_give_reward_regression() {
        let data = toy_dataset(512, 1);
        let cfg = RunConfig {
            ensemble_size: 1,
            agent: AgentConfig { gamma: 0.0, hidden: vec![32], ..AgentConfig::default() },
            learning_rates: LearningRates { policy: 1e-3, value: 3e-3, alpha: 0.0 },
            offline: OfflineConfig {
                steps: 3000,
                batch_size: 64,
                cql: CqlParams { alpha0: 0.0, ..CqlParams::default() },
                fqe_steps: 0,
            },
            ..RunConfig::default()
        };
        let ens = train_offline_ensemble(&cfg, &data).unwrap();
        let b = Batch::from_transitions(&data.transitions).unwrap();
        let q = ens.ensemble_q(b.states.view(), b.actions.view()).unwrap();
        let mae = (&q - &b.rewards).mapv(f64::abs).mean().unwrap();
        assert!(mae < 0.05, "mean |Q − r| = {mae}");
    }

    #[test]
    fn env_mismatch_is_a_config_error() {
        let data = toy_dataset(8, 2);
        let cfg = RunConfig { env_id: EnvId::PointMassSparse, ..RunConfig::default() };
        assert!(matches!(train_offline_ensemble(&cfg, &data), Err(Error::Config { .. })));
    }

    #[test]
    fn members_do_not_depend_on_ensemble_size() {
        let data = toy_dataset(64, 3);
        let mut cfg = RunConfig {
            ensemble_size: 3,
            agent: AgentConfig { hidden: vec![8], ..AgentConfig::default() },
            offline: OfflineConfig { steps: 5, batch_size: 8, ..OfflineConfig::default() },
            ..RunConfig::default()
        };
        let three = train_offline_ensemble(&cfg, &data).unwrap();
        cfg.ensemble_size = 1;
        let one = train_offline_ensemble(&cfg, &data).unwrap();
        assert_eq!(one.members[0], three.members[0]);
        assert_ne!(three.members[0].q1, three.members[1].q1);
        cfg.ensemble_size = 3;
        assert_eq!(train_offline_ensemble_parallel(&cfg, &data, 2).unwrap(), three);
    }

    #[test]
    fn fqe_replaces_critics_and_keeps_policy() {
        let data = toy_dataset(64, 4);
        let cfg = RunConfig {
            ensemble_size: 2,
            agent: AgentConfig { hidden: vec![8], ..AgentConfig::default() },
            offline: OfflineConfig { steps: 5, batch_size: 8, fqe_steps: 20, ..OfflineConfig::default() },
            ..RunConfig::default()
        };
        let mut ens = train_offline_ensemble(&cfg, &data).unwrap();
        let before = ens.clone();
        fqe_initialize(&mut ens, &data, &cfg).unwrap();
        for (a, b) in ens.members.iter().zip(&before.members) {
            assert_eq!(a.policy, b.policy);
            assert_ne!(a.q1, b.q1);
        }
        let s = Array2::zeros((1, 4));
        let a = Array2::zeros((1, 2));
        assert!(ens.ensemble_q(s.view(), a.view()).unwrap()[0].is_finite());
    }
}
