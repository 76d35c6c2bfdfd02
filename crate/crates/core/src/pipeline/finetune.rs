use std::time::Instant;

use ndarray::Array2;
use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{FinetuneObjective, QInit, RunConfig};
use super::eval::{auroc_analysis, mean_std, rollout_returns};
use super::metrics::MetricsRecord;
use super::offline::{check_dataset, fqe_initialize};
use crate::agents::{ensemble_finetune_step, CriticObjective, EnsembleAgent, FinetuneLosses, GaussianPolicy};
use crate::envs::{Dataset, Policy, PointMass, ReturnScale, Transition};
use crate::error::{Error, Result};
use crate::replay::{features, DenominatorMode, DensityRatioEstimator, PriorityBuffer, SamplingStrategy};

const STREAM_ACT: u64 = 10;
const STREAM_EVAL: u64 = 11;
const STREAM_RATIO: u64 = 12;

#[derive(Default)]
struct Accum {
    n: usize,
    critic: f64,
    bellman: f64,
    regularizer: f64,
    actor: f64,
    mean_log_prob: f64,
    alpha: f64,
    dr_n: usize,
    dr_bound: f64,
    rows: usize,
    offline_rows: usize,
}

impl Accum {
    fn add(&mut self, l: &FinetuneLosses) {
        self.n += 1;
        self.critic += l.critic;
        self.bellman += l.bellman;
        self.regularizer += l.regularizer;
        self.actor += l.actor;
        self.mean_log_prob += l.mean_log_prob;
        self.alpha += l.alpha;
    }

    fn mean(&self, v: f64) -> Option<f64> {
        (self.n > 0).then(|| v / self.n as f64)
    }
}

/// State of one online fine-tuning run. Fields stay public so a caller can
/// checkpoint the agent after a failed run.
pub struct Finetune {
    pub cfg: RunConfig,
    pub ens: EnsembleAgent,
    pub estimator: Option<DensityRatioEstimator>,
    pub buffer: PriorityBuffer,
    pub scale: ReturnScale,
    pub step: usize,
    pub updates: usize,
    env: PointMass,
    eval_env: PointMass,
    obs: Vec<f64>,
    rng: ChaCha8Rng,
    eval_rng: ChaCha8Rng,
    objective: CriticObjective,
    acc: Accum,
    started: Instant,
}

impl Finetune {
    /// Sets up the buffer (offline data at priority 1, then `p₀ ← P₀`), the
    /// estimator for balanced replay and, for `q_init = fqe`, FQE critics.
    pub fn new(cfg: &RunConfig, mut ens: EnsembleAgent, dataset: &Dataset) -> Result<Self> {
        cfg.validate()?;
        check_dataset(cfg, dataset)?;
        if ens.obs_dim() != dataset.obs_dim || ens.act_dim() != dataset.act_dim {
            return Err(Error::config("ckpt", "agent dimensions do not match the dataset"));
        }
        if cfg.q_init == QInit::Fqe {
            fqe_initialize(&mut ens, dataset, cfg)?;
        }
        let env_cfg = cfg.env_config()?;
        let scale = ReturnScale::for_env(cfg.env_id, &env_cfg)?;
        let online = cfg.buffer_capacity.unwrap_or(cfg.total_steps).max(1);
        let mut buffer = PriorityBuffer::new(dataset.len() + online)?;
        buffer.init_priorities(&dataset.transitions, cfg.rho)?;

        let stream = |s: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
            r.set_stream(s);
            r
        };
        let estimator = match cfg.sampling_strategy {
            SamplingStrategy::Balanced => Some(DensityRatioEstimator::new(
                dataset.obs_dim + dataset.act_dim,
                &cfg.density_ratio.hidden,
                cfg.temperature(),
                cfg.density_ratio.mode,
                &mut stream(STREAM_RATIO),
            )?),
            _ => None,
        };
        let objective = match cfg.finetune_objective {
            FinetuneObjective::Sac => CriticObjective::Sac,
            FinetuneObjective::CqlReg => CriticObjective::Cql(cfg.offline.cql),
        };
        let mut rng = stream(STREAM_ACT);
        let mut env = PointMass::new(cfg.env_id, env_cfg.clone());
        let obs = env.reset(&mut rng);
        Ok(Finetune {
            cfg: cfg.clone(),
            ens,
            estimator,
            buffer,
            scale,
            step: 0,
            updates: 0,
            env,
            eval_env: PointMass::new(cfg.env_id, env_cfg),
            obs,
            rng,
            eval_rng: stream(STREAM_EVAL),
            objective,
            acc: Accum::default(),
            started: Instant::now(),
        })
    }

    /// Runs to `total_steps`, handing each record to `sink` as it is made.
    /// The first record is the offline starting point at step 0.
    pub fn run(&mut self, mut sink: impl FnMut(&MetricsRecord) -> Result<()>) -> Result<()> {
        if self.step == 0 {
            let rec = self.evaluate()?;
            sink(&rec)?;
        }
        while self.step < self.cfg.total_steps {
            self.env_step()?;
            let updates = if self.step < self.cfg.warmup_steps {
                0
            } else if self.step == self.cfg.warmup_steps {
                self.cfg.warmup_multiplier * self.cfg.warmup_steps
            } else {
                1
            };
            for _ in 0..updates {
                self.update()?;
            }
            if self.step.is_multiple_of(self.cfg.eval_interval) || self.step == self.cfg.total_steps {
                let rec = self.evaluate()?;
                sink(&rec)?;
            }
        }
        Ok(())
    }

    fn env_step(&mut self) -> Result<()> {
        let action = self.ens.act(&self.obs, false, &mut self.rng);
        let out = self.env.step(&action)?;
        let over = out.episode_over();
        let next = out.next_state.clone();
        self.buffer.insert_online(Transition {
            state: std::mem::replace(&mut self.obs, next),
            action,
            reward: out.reward,
            next_state: out.next_state,
            done: out.done,
        });
        if over {
            self.obs = self.env.reset(&mut self.rng);
        }
        self.step += 1;
        Ok(())
    }

    fn update(&mut self) -> Result<()> {
        let b = self.cfg.batch_size;
        if let Some(est) = &mut self.estimator {
            let online = self.buffer.sample(b, SamplingStrategy::OnlineOnly, &mut self.rng)?;
            let denominator = match est.mode {
                DenominatorMode::Offline => self.buffer.sample_offline(b, &mut self.rng)?,
                DenominatorMode::Union => self.buffer.sample(b, SamplingStrategy::Uniform, &mut self.rng)?,
            };
            let bound = est.train_step(
                features(&online.batch).view(),
                features(&denominator.batch).view(),
                self.cfg.density_ratio.learning_rate,
            )?;
            let reference = match est.mode {
                DenominatorMode::Offline => denominator,
                DenominatorMode::Union => self.buffer.sample_offline(b, &mut self.rng)?,
            };
            est.refresh_normalizer(features(&reference.batch).view())?;
            self.acc.dr_n += 1;
            self.acc.dr_bound += bound;
        }
        let sampled = self.buffer.sample(b, self.cfg.sampling_strategy, &mut self.rng)?;
        let losses = ensemble_finetune_step(
            &mut self.ens,
            &sampled.batch,
            &self.objective,
            &self.cfg.learning_rates,
            &mut self.rng,
        )?;
        if ![losses.critic, losses.actor, losses.alpha].iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence(format!("non-finite loss at update {}", self.updates + 1)));
        }
        if let Some(est) = &self.estimator {
            let p = est.priorities(features(&sampled.batch).view())?;
            self.buffer.update_priorities(&sampled.indices, &p)?;
        }
        self.acc.add(&losses);
        self.acc.rows += sampled.indices.len();
        self.acc.offline_rows += sampled.offline_count;
        self.updates += 1;
        Ok(())
    }

    /// Offline share of the current sampling distribution.
    fn expected_offline_fraction(&self) -> Option<f64> {
        let buf = &self.buffer;
        match self.cfg.sampling_strategy {
            SamplingStrategy::Balanced => Some(1.0 - buf.online_mass()),
            SamplingStrategy::Uniform => Some(buf.offline_len() as f64 / buf.len() as f64),
            SamplingStrategy::OnlineOnly => (buf.online_len() > 0).then_some(0.0),
        }
    }

    fn evaluate(&mut self) -> Result<MetricsRecord> {
        let (returns, pairs) =
            rollout_returns(&mut self.eval_env, &self.ens, self.cfg.eval_episodes, true, &mut self.eval_rng)?;
        let (mean, std) = mean_std(&returns);
        let auroc = if self.cfg.auroc_pairs > 0 {
            let k = self.cfg.auroc_pairs.min(pairs.len());
            let mut idx = sample_indices(&mut self.eval_rng, pairs.len(), k).into_vec();
            idx.sort_unstable();
            let states = Array2::from_shape_fn((k, self.ens.obs_dim()), |(i, j)| pairs[idx[i]].0[j]);
            let actions = Array2::from_shape_fn((k, self.ens.act_dim()), |(i, j)| pairs[idx[i]].1[j]);
            Some(auroc_analysis(&self.ens, &states, &actions, &mut self.eval_rng)?)
        } else {
            None
        };
        let acc = std::mem::take(&mut self.acc);
        let offline_fraction = if acc.rows > 0 {
            Some(acc.offline_rows as f64 / acc.rows as f64)
        } else {
            self.expected_offline_fraction()
        };
        Ok(MetricsRecord {
            step: self.step,
            updates: self.updates,
            eval_return_mean: mean,
            eval_return_std: std,
            normalized_score: self.scale.normalize(mean),
            critic_loss: acc.mean(acc.critic),
            bellman_loss: acc.mean(acc.bellman),
            regularizer: acc.mean(acc.regularizer),
            actor_loss: acc.mean(acc.actor),
            mean_log_prob: acc.mean(acc.mean_log_prob),
            alpha: acc.mean(acc.alpha),
            dr_bound: (acc.dr_n > 0).then(|| acc.dr_bound / acc.dr_n as f64),
            offline_fraction,
            auroc,
            default_priority: self.buffer.default_priority(),
            online_mass: self.buffer.online_mass(),
            buffer_online: self.buffer.online_len(),
            wall_clock_s: self.cfg.record_wall_clock.then(|| self.started.elapsed().as_secs_f64()),
        })
    }
}

/// Online fine-tuning with the configured strategy; returns the tuned
/// ensemble and every record.
pub fn finetune_online(cfg: &RunConfig, ens: EnsembleAgent, dataset: &Dataset) -> Result<(EnsembleAgent, Vec<MetricsRecord>)> {
    let mut run = Finetune::new(cfg, ens, dataset)?;
    let mut records = Vec::new();
    run.run(|r| {
        records.push(r.clone());
        Ok(())
    })?;
    Ok((run.ens, records))
}

/// Same loop with the conservative regulariser kept on during fine-tuning.
pub fn finetune_cql_regularized(
    cfg: &RunConfig,
    ens: EnsembleAgent,
    dataset: &Dataset,
) -> Result<(EnsembleAgent, Vec<MetricsRecord>)> {
    let cfg = RunConfig {
        finetune_objective: FinetuneObjective::CqlReg,
        ..cfg.clone()
    };
    finetune_online(&cfg, ens, dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::{AgentConfig, CqlParams};
    use crate::envs::{generate_dataset, BehaviorSources, EnvConfig, EnvId, Tier};
    use crate::pipeline::config::OfflineConfig;
    use crate::pipeline::offline::train_offline_ensemble;

    fn small_cfg() -> RunConfig {
        RunConfig {
            ensemble_size: 2,
            agent: AgentConfig { hidden: vec![16, 16], ..AgentConfig::default() },
            batch_size: 16,
            density_ratio: crate::pipeline::DensityRatioConfig { hidden: vec![16], ..Default::default() },
            warmup_steps: 20,
            warmup_multiplier: 2,
            total_steps: 60,
            eval_interval: 20,
            eval_episodes: 2,
            auroc_pairs: 10,
            offline: OfflineConfig { steps: 20, batch_size: 16, cql: CqlParams::default(), fqe_steps: 10 },
            ..RunConfig::default()
        }
    }

    fn setup(cfg: &RunConfig) -> (Dataset, EnsembleAgent) {
        let data = generate_dataset(EnvId::PointMassDense, &EnvConfig::default(), Tier::Random, 300, 5, &BehaviorSources::default()).unwrap();
        let ens = train_offline_ensemble(cfg, &data).unwrap();
        (data, ens)
    }

    #[test]
    fn zero_steps_yields_only_the_starting_point() {
        let cfg = RunConfig { total_steps: 0, ..small_cfg() };
        let (data, ens) = setup(&cfg);
        let (tuned, recs) = finetune_online(&cfg, ens.clone(), &data).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!((recs[0].step, recs[0].updates), (0, 0));
        assert_eq!(recs[0].offline_fraction, Some(1.0));
        assert_eq!(tuned, ens);
    }

    #[test]
    fn records_land_on_the_interval_with_warmup_updates() {
        let cfg = small_cfg();
        let (data, ens) = setup(&cfg);
        let (_, recs) = finetune_online(&cfg, ens, &data).unwrap();
        let steps: Vec<_> = recs.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![0, 20, 40, 60]);
        // 40 warm-up updates at step 20, then one per step.
        assert_eq!(recs[1].updates, 40);
        assert_eq!(recs[3].updates, 80);
        for r in &recs[1..] {
            assert!(r.critic_loss.unwrap().is_finite());
            assert!(r.dr_bound.is_some());
            let a = r.auroc.unwrap();
            assert!((0.0..=1.0).contains(&a));
        }
        assert!(recs[1].default_priority >= 300.0 / 1000.0);
    }

    #[test]
    fn identical_config_gives_identical_stream() {
        for strategy in SamplingStrategy::ALL {
            let cfg = RunConfig { sampling_strategy: strategy, ..small_cfg() };
            let (data, ens) = setup(&cfg);
            let a = finetune_online(&cfg, ens.clone(), &data).unwrap();
            let b = finetune_online(&cfg, ens, &data).unwrap();
            assert_eq!(a, b, "{strategy:?}");
        }
    }

    #[test]
    fn regularised_run_with_zero_weight_matches_plain_run() {
        let mut cfg = small_cfg();
        cfg.offline.cql.alpha0 = 0.0;
        let (data, ens) = setup(&cfg);
        let plain = finetune_online(&cfg, ens.clone(), &data).unwrap();
        let reg = finetune_cql_regularized(&cfg, ens, &data).unwrap();
        assert_eq!(plain, reg);
    }

    #[test]
    fn online_only_samples_no_offline_rows() {
        let cfg = RunConfig { sampling_strategy: SamplingStrategy::OnlineOnly, ..small_cfg() };
        let (data, ens) = setup(&cfg);
        let (_, recs) = finetune_online(&cfg, ens, &data).unwrap();
        assert_eq!(recs[0].offline_fraction, None);
        assert!(recs[1..].iter().all(|r| r.offline_fraction == Some(0.0) && r.dr_bound.is_none()));
    }

    #[test]
    fn fqe_start_runs() {
        let cfg = RunConfig { q_init: QInit::Fqe, total_steps: 0, ..small_cfg() };
        let (data, ens) = setup(&cfg);
        let (tuned, _) = finetune_online(&cfg, ens.clone(), &data).unwrap();
        assert_ne!(tuned.members[0].q1, ens.members[0].q1);
    }

    #[test]
    fn wrong_env_is_rejected() {
        let cfg = small_cfg();
        let (data, ens) = setup(&cfg);
        let bad = RunConfig { env_id: EnvId::PointMassSparse, ..cfg };
        assert!(matches!(Finetune::new(&bad, ens, &data), Err(Error::Config { .. })));
    }
}
