use ndarray::Array2;
use rand::{Rng, RngCore};

use crate::agents::EnsembleAgent;
use crate::envs::{Policy, PointMass};
use crate::error::{Error, Result};

/// Undiscounted returns of `episodes` rollouts plus every visited `(s, a)`.
pub fn rollout_returns(
    env: &mut PointMass,
    policy: &dyn Policy,
    episodes: usize,
    deterministic: bool,
    rng: &mut dyn RngCore,
) -> Result<(Vec<f64>, Vec<(Vec<f64>, Vec<f64>)>)> {
    if episodes == 0 {
        return Err(Error::Contract("evaluation needs at least one episode".into()));
    }
    let mut returns = Vec::with_capacity(episodes);
    let mut pairs = Vec::new();
    for _ in 0..episodes {
        let mut obs = env.reset(rng);
        let mut total = 0.0;
        loop {
            let action = policy.act(&obs, deterministic, rng);
            let out = env.step(&action)?;
            total += out.reward;
            pairs.push((obs, action));
            if out.episode_over() {
                break;
            }
            obs = out.next_state;
        }
        returns.push(total);
    }
    Ok((returns, pairs))
}

/// `(mean, std)` of episode returns; the std of a single episode is 0.
pub fn evaluate_policy(
    env: &mut PointMass,
    policy: &dyn Policy,
    episodes: usize,
    deterministic: bool,
    rng: &mut dyn RngCore,
) -> Result<(f64, f64)> {
    let (returns, _) = rollout_returns(env, policy, episodes, deterministic, rng)?;
    Ok(mean_std(&returns))
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half (Mann-Whitney U over average ranks).
pub fn auroc(positives: &[f64], negatives: &[f64]) -> Result<f64> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::Contract("AUROC needs both classes".into()));
    }
    let mut all: Vec<(f64, bool)> = positives
        .iter()
        .map(|&v| (v, true))
        .chain(negatives.iter().map(|&v| (v, false)))
        .collect();
    if all.iter().any(|(v, _)| v.is_nan()) {
        return Err(Error::Divergence("NaN score in AUROC".into()));
    }
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // Ranks i+1 ..= j+1 share their average.
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * all[i..=j].iter().filter(|e| e.1).count() as f64;
        i = j + 1;
    }
    let (np, nn) = (positives.len() as f64, negatives.len() as f64);
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

/// Fake actions drawn per real pair.
pub const FAKE_PER_REAL: usize = 50;

/// AUROC of the ensemble Q separating real `(s, a)` pairs from the same
/// states paired with uniform actions.
pub fn auroc_analysis(
    ens: &EnsembleAgent,
    states: &Array2<f64>,
    actions: &Array2<f64>,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    if states.nrows() == 0 {
        return Err(Error::Contract("AUROC needs at least one real pair".into()));
    }
    let real = ens.ensemble_q(states.view(), actions.view())?;
    let n = states.nrows();
    let d = actions.ncols();
    let mut fake_states = Array2::zeros((n * FAKE_PER_REAL, states.ncols()));
    for i in 0..n {
        for k in 0..FAKE_PER_REAL {
            fake_states.row_mut(i * FAKE_PER_REAL + k).assign(&states.row(i));
        }
    }
    let fake_actions = Array2::from_shape_fn((n * FAKE_PER_REAL, d), |_| rng.random_range(-1.0..1.0));
    let fake = ens.ensemble_q(fake_states.view(), fake_actions.view())?;
    auroc(real.as_slice().expect("contiguous"), fake.as_slice().expect("contiguous"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{EnvConfig, EnvId, ReturnScale, ScriptedPolicy};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn brute_force(p: &[f64], n: &[f64]) -> f64 {
        let mut s = 0.0;
        for a in p {
            for b in n {
                s += if a > b {
                    1.0
                } else if a == b {
                    0.5
                } else {
                    0.0
                };
            }
        }
        s / (p.len() * n.len()) as f64
    }

    #[test]
    fn auroc_hand_cases() {
        assert_eq!(auroc(&[3.0, 2.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(auroc(&[2.0, 0.0], &[3.0, 1.0]).unwrap(), 0.25);
        assert_eq!(auroc(&[1.0; 4], &[1.0; 7]).unwrap(), 0.5);
    }

    #[test]
    fn auroc_matches_pair_counting_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let p: Vec<f64> = (0..13).map(|_| rng.random_range(0..6) as f64).collect();
            let n: Vec<f64> = (0..17).map(|_| rng.random_range(0..6) as f64).collect();
            assert!((auroc(&p, &n).unwrap() - brute_force(&p, &n)).abs() < 1e-12);
        }
    }

    #[test]
    fn single_episode_has_zero_std() {
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
    }

    struct Still;
    impl Policy for Still {
        fn act(&self, _: &[f64], _: bool, _: &mut dyn RngCore) -> Vec<f64> {
            vec![0.0, 0.0]
        }
    }

    #[test]
    fn zero_reward_environment_gives_zero_return() {
        // Sparse task with the goal out of reach of a motionless agent.
        let mut cfg = EnvConfig::default();
        cfg.sparse.start_noise = 0.0;
        let mut env = PointMass::new(EnvId::PointMassSparse, cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert_eq!(evaluate_policy(&mut env, &Still, 5, true, &mut rng).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn scripted_controller_matches_analytic_rollout() {
        // Zero start noise makes the closed-loop trajectory deterministic;
        // integrate it independently and compare returns.
        let mut cfg = EnvConfig::default();
        cfg.dense.start_noise = 0.0;
        let mut env = PointMass::new(EnvId::PointMassDense, cfg.clone());
        let policy = ScriptedPolicy { env_id: EnvId::PointMassDense, cfg: cfg.clone() };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (ret, _) = evaluate_policy(&mut env, &policy, 1, true, &mut rng).unwrap();

        let (mut p, mut v) = ([0.0f64; 2], [0.0f64; 2]);
        let goal = cfg.dense.goal;
        let mut expected = 0.0;
        for _ in 0..cfg.dense.episode_length {
            let a: Vec<f64> = (0..2).map(|i| (4.0 * (goal[i] - p[i]) - 3.0 * v[i]).clamp(-1.0, 1.0)).collect();
            for i in 0..2 {
                v[i] = (v[i] + cfg.dt * a[i]).clamp(-cfg.v_max, cfg.v_max);
                p[i] += cfg.dt * v[i];
            }
            expected += -(p[0] - goal[0]).hypot(p[1] - goal[1]) - cfg.c_ctrl * (a[0] * a[0] + a[1] * a[1]);
        }
        assert!((ret - expected).abs() <= 0.02 * expected.abs(), "{ret} vs {expected}");
        let scale = ReturnScale::for_env(EnvId::PointMassDense, &EnvConfig::default()).unwrap();
        assert!(scale.expert > scale.random);
    }
}
