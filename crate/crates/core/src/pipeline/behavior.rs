//! Behaviour policies for the medium tiers: one SAC run from scratch, with the
//! medium checkpoint taken when the evaluated score first enters the medium
//! band and the expert checkpoint when it clears the expert threshold.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::eval::evaluate_policy;
use crate::agents::{ActorCritic, AgentConfig, Batch, LearningRates};
use crate::checkpoint;
use crate::envs::{generate_dataset, BehaviorPolicy, BehaviorSources, Dataset, EnvConfig, EnvId, Policy, PointMass, ReturnScale, Tier, Transition};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BehaviorConfig {
    pub max_steps: usize,
    /// Uniform-action steps before the first update.
    pub start_steps: usize,
    pub batch_size: usize,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    /// Normalised-score band for the medium checkpoint.
    pub medium_band: [f64; 2],
    pub expert_threshold: f64,
    pub agent: AgentConfig,
    pub learning_rates: LearningRates,
}

impl Default for BehaviorConfig {
    fn default() -> Self {
        BehaviorConfig {
            max_steps: 60_000,
            start_steps: 1_000,
            batch_size: 128,
            eval_interval: 500,
            eval_episodes: 10,
            medium_band: [35.0, 45.0],
            expert_threshold: 90.0,
            agent: AgentConfig::default(),
            learning_rates: LearningRates::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub agent: ActorCritic,
    pub step: usize,
    pub score: f64,
}

#[derive(Clone, Debug)]
pub struct BehaviorRun {
    pub medium: Checkpoint,
    /// `None` when the run never reached the expert threshold.
    pub expert: Option<Checkpoint>,
    /// Every transition collected up to the medium checkpoint, rewards in the
    /// task's own reward.
    pub replay: Vec<Transition>,
    pub scale: ReturnScale,
    /// `(env step, normalised score)` at every evaluation.
    pub curve: Vec<(usize, f64)>,
}

/// Sparse-task transitions are collected under the dense distance reward
/// (no termination); this maps them back to the 0/1 task reward, ending the
/// episode at the first success.
fn relabel_sparse(cfg: &EnvConfig, episode: &[Transition]) -> Vec<Transition> {
    let mut out = Vec::with_capacity(episode.len());
    for t in episode {
        let s = &t.next_state;
        let success = (s[0] - s[4]).hypot(s[1] - s[5]) < cfg.r_goal;
        out.push(Transition {
            reward: if success { 1.0 } else { 0.0 },
            done: success,
            ..t.clone()
        });
        if success {
            break;
        }
    }
    out
}

pub fn train_behavior(env_id: EnvId, env_cfg: &EnvConfig, cfg: &BehaviorConfig, seed: u64) -> Result<BehaviorRun> {
    if cfg.batch_size == 0 || cfg.eval_interval == 0 || cfg.eval_episodes == 0 {
        return Err(Error::config("behavior", "batch_size, eval_interval and eval_episodes must be positive"));
    }
    let scale = ReturnScale::for_env(env_id, env_cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut eval_rng = ChaCha8Rng::seed_from_u64(seed);
    eval_rng.set_stream(1);
    let mut agent = ActorCritic::new(env_id.obs_dim(), env_id.act_dim(), &cfg.agent, &mut rng)?;
    let mut train_env = match env_id {
        EnvId::PointMassDense => PointMass::new(env_id, env_cfg.clone()),
        EnvId::PointMassSparse => PointMass::shaped(env_id, env_cfg.clone()),
    };
    let mut eval_env = PointMass::new(env_id, env_cfg.clone());

    let mut buffer: Vec<Transition> = Vec::with_capacity(cfg.max_steps);
    let mut replay: Vec<Transition> = Vec::new();
    let mut episode: Vec<Transition> = Vec::new();
    let mut curve = Vec::new();
    let mut medium: Option<Checkpoint> = None;
    let mut closest: Option<Checkpoint> = None;
    let mut expert: Option<Checkpoint> = None;
    let target = 0.5 * (cfg.medium_band[0] + cfg.medium_band[1]);

    let mut obs = train_env.reset(&mut rng);
    for step in 1..=cfg.max_steps {
        let action = if step <= cfg.start_steps {
            (0..env_id.act_dim()).map(|_| rng.random_range(-1.0..=1.0)).collect()
        } else {
            agent.act(&obs, false, &mut rng)
        };
        let out = train_env.step(&action)?;
        let t = Transition {
            state: obs,
            action,
            reward: out.reward,
            next_state: out.next_state.clone(),
            done: out.done,
        };
        buffer.push(t.clone());
        episode.push(t);
        if out.episode_over() {
            if medium.is_none() {
                flush_episode(env_id, env_cfg, &mut episode, &mut replay);
            }
            episode.clear();
            obs = train_env.reset(&mut rng);
        } else {
            obs = out.next_state;
        }

        if step > cfg.start_steps {
            let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..buffer.len())).collect();
            let batch = Batch::from_transitions(idx.iter().map(|&i| &buffer[i]))?;
            agent.sac_step(&batch, &cfg.learning_rates, &mut rng)?;
        }

        if step % cfg.eval_interval == 0 && step > cfg.start_steps {
            let (ret, _) = evaluate_policy(&mut eval_env, &agent, cfg.eval_episodes, false, &mut eval_rng)?;
            let score = scale.normalize(ret);
            curve.push((step, score));
            let snapshot = || Checkpoint {
                agent: agent.clone(),
                step,
                score,
            };
            if medium.is_none() {
                if (cfg.medium_band[0]..=cfg.medium_band[1]).contains(&score) {
                    medium = Some(snapshot());
                } else if closest.as_ref().is_none_or(|c| (c.score - target).abs() > (score - target).abs()) {
                    closest = Some(snapshot());
                }
            }
            if score >= cfg.expert_threshold {
                expert = Some(snapshot());
                if medium.is_some() {
                    break;
                }
            }
        }
    }
    let medium = match medium {
        Some(m) => m,
        None => {
            // Nothing landed in the band: use the closest checkpoint and cut
            // the replay stream at its step.
            let c = closest.ok_or_else(|| Error::Divergence("behaviour training produced no evaluation".into()))?;
            replay = stream_until(env_id, env_cfg, &buffer[..c.step.min(buffer.len())]);
            c
        }
    };
    Ok(BehaviorRun {
        medium,
        expert,
        replay,
        scale,
        curve,
    })
}

impl Checkpoint {
    /// Fingerprint recorded in dataset metadata.
    pub fn hash(&self) -> Result<String> {
        Ok(checkpoint::content_hash(checkpoint::to_string("off2on-actor-critic", &self.agent)?.as_bytes()))
    }
}

/// Builds a dataset tier, taking behaviour policies from `run` for the
/// medium tiers.
pub fn dataset_from_behavior(
    env_id: EnvId,
    env_cfg: &EnvConfig,
    tier: Tier,
    size: usize,
    seed: u64,
    run: Option<&BehaviorRun>,
) -> Result<Dataset> {
    let need = |what: &str| Error::config("behavior", format!("tier `{tier}` needs a {what} behaviour policy"));
    let mut sources = BehaviorSources::default();
    if tier != Tier::Random {
        let run = run.ok_or_else(|| need("medium"))?;
        sources.medium = Some(BehaviorPolicy {
            policy: &run.medium.agent,
            hash: run.medium.hash()?,
            score: run.medium.score,
        });
        sources.medium_replay = Some(&run.replay);
        if let Some(e) = &run.expert {
            sources.expert = Some(BehaviorPolicy {
                policy: &e.agent,
                hash: e.hash()?,
                score: e.score,
            });
        } else if tier == Tier::MediumExpert {
            return Err(Error::config(
                "behavior.max_steps",
                "behaviour training never reached the expert threshold; allow more steps",
            ));
        }
    }
    generate_dataset(env_id, env_cfg, tier, size, seed, &sources)
}

fn flush_episode(env_id: EnvId, cfg: &EnvConfig, episode: &mut Vec<Transition>, replay: &mut Vec<Transition>) {
    match env_id {
        EnvId::PointMassDense => replay.append(episode),
        EnvId::PointMassSparse => replay.extend(relabel_sparse(cfg, episode)),
    }
}

fn stream_until(env_id: EnvId, cfg: &EnvConfig, raw: &[Transition]) -> Vec<Transition> {
    let ep_len = cfg.episode_length(env_id);
    let mut out = Vec::new();
    for chunk in raw.chunks(ep_len) {
        let mut ep = chunk.to_vec();
        flush_episode(env_id, cfg, &mut ep, &mut out);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sparse_relabel_stops_at_first_success() {
        let cfg = EnvConfig::default();
        let mk = |x: f64| Transition {
            state: vec![0.0; 6],
            action: vec![0.0, 0.0],
            reward: -1.0,
            next_state: vec![x, 0.0, 0.0, 0.0, 0.5, 0.0],
            done: false,
        };
        let ep = vec![mk(0.0), mk(0.45), mk(0.5), mk(0.6)];
        let out = relabel_sparse(&cfg, &ep);
        assert_eq!(out.len(), 2);
        assert_eq!((out[0].reward, out[0].done), (0.0, false));
        assert_eq!((out[1].reward, out[1].done), (1.0, true));
    }
}
