//! 2-D point mass with clipped velocity.
//!
//! Dynamics per step (elementwise):
//! `velocity ← clip(velocity + dt·action, ±v_max)`, `position ← position + dt·velocity`.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const DEFAULT_CONFIG: &str = include_str!("../../configs/point_mass.toml");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvId {
    /// Fixed goal, dense distance reward, state = (position, velocity).
    PointMassDense,
    /// Goal resampled per episode and appended to the state; 0/1 reward,
    /// terminal on success.
    PointMassSparse,
}

impl EnvId {
    pub const ALL: [EnvId; 2] = [EnvId::PointMassDense, EnvId::PointMassSparse];

    pub fn as_str(self) -> &'static str {
        match self {
            EnvId::PointMassDense => "point_mass_dense",
            EnvId::PointMassSparse => "point_mass_sparse",
        }
    }

    pub fn obs_dim(self) -> usize {
        match self {
            EnvId::PointMassDense => 4,
            EnvId::PointMassSparse => 6,
        }
    }

    pub fn act_dim(self) -> usize {
        2
    }
}

impl fmt::Display for EnvId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnvId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EnvId::ALL
            .into_iter()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| Error::config("env", format!("unknown environment `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenseTaskConfig {
    pub episode_length: usize,
    pub start_pos: [f64; 2],
    pub start_noise: f64,
    pub goal: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparseTaskConfig {
    pub episode_length: usize,
    pub start_pos: [f64; 2],
    pub start_noise: f64,
    pub goal_radius_min: f64,
    pub goal_radius_max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub version: u32,
    pub dt: f64,
    pub v_max: f64,
    pub c_ctrl: f64,
    pub r_goal: f64,
    pub dense: DenseTaskConfig,
    pub sparse: SparseTaskConfig,
}

impl Default for EnvConfig {
    fn default() -> Self {
        toml::from_str(DEFAULT_CONFIG).expect("bundled point_mass.toml is valid")
    }
}

impl EnvConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: EnvConfig =
            toml::from_str(text).map_err(|e| Error::config("env_config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dt", self.dt),
            ("v_max", self.v_max),
            ("r_goal", self.r_goal),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(k, "must be positive"));
            }
        }
        if self.c_ctrl < 0.0 {
            return Err(Error::config("c_ctrl", "must be nonnegative"));
        }
        if self.dense.episode_length == 0 || self.sparse.episode_length == 0 {
            return Err(Error::config("episode_length", "must be positive"));
        }
        if self.dense.start_noise < 0.0 || self.sparse.start_noise < 0.0 {
            return Err(Error::config("start_noise", "must be nonnegative"));
        }
        if !(0.0 <= self.sparse.goal_radius_min
            && self.sparse.goal_radius_min <= self.sparse.goal_radius_max)
        {
            return Err(Error::config("sparse.goal_radius_min", "must be in [0, goal_radius_max]"));
        }
        Ok(())
    }

    pub fn episode_length(&self, id: EnvId) -> usize {
        match id {
            EnvId::PointMassDense => self.dense.episode_length,
            EnvId::PointMassSparse => self.sparse.episode_length,
        }
    }
}

/// How rewards are computed. The sparse task can be run with the dense
/// distance reward to train scripted-free behaviour policies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RewardMode {
    Dense,
    Sparse,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub position: [f64; 2],
    pub velocity: [f64; 2],
    pub goal: [f64; 2],
    pub step: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub next_state: Vec<f64>,
    pub reward: f64,
    /// Genuine terminal (sparse success). Never set by the time limit.
    pub done: bool,
    /// Episode hit its length limit.
    pub truncated: bool,
}

impl StepOutcome {
    pub fn episode_over(&self) -> bool {
        self.done || self.truncated
    }
}

#[derive(Clone, Debug)]
pub struct PointMass {
    id: EnvId,
    cfg: EnvConfig,
    reward_mode: RewardMode,
    state: EnvState,
    finished: bool,
}

impl PointMass {
    pub fn new(id: EnvId, cfg: EnvConfig) -> Self {
        let reward_mode = match id {
            EnvId::PointMassDense => RewardMode::Dense,
            EnvId::PointMassSparse => RewardMode::Sparse,
        };
        let goal = match id {
            EnvId::PointMassDense => cfg.dense.goal,
            EnvId::PointMassSparse => [0.0, 0.0],
        };
        PointMass {
            id,
            reward_mode,
            state: EnvState {
                position: [0.0; 2],
                velocity: [0.0; 2],
                goal,
                step: 0,
            },
            cfg,
            finished: true,
        }
    }

    /// The sparse task's dynamics and goals with a dense distance reward and
    /// no success termination.
    pub fn shaped(id: EnvId, cfg: EnvConfig) -> Self {
        let mut env = PointMass::new(id, cfg);
        env.reward_mode = RewardMode::Dense;
        env
    }

    pub fn id(&self) -> EnvId {
        self.id
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn obs_dim(&self) -> usize {
        self.id.obs_dim()
    }

    pub fn act_dim(&self) -> usize {
        self.id.act_dim()
    }

    pub fn episode_length(&self) -> usize {
        self.cfg.episode_length(self.id)
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    /// Largest |reward| the dense variant can produce within one episode.
    pub fn dense_reward_bound(&self) -> f64 {
        let (start, noise) = match self.id {
            EnvId::PointMassDense => (self.cfg.dense.start_pos, self.cfg.dense.start_noise),
            EnvId::PointMassSparse => (self.cfg.sparse.start_pos, self.cfg.sparse.start_noise),
        };
        let goal_far = match self.id {
            EnvId::PointMassDense => {
                let g = self.cfg.dense.goal;
                ((g[0] - start[0]).abs() + noise).hypot((g[1] - start[1]).abs() + noise)
            }
            EnvId::PointMassSparse => {
                self.cfg.sparse.goal_radius_max + start[0].hypot(start[1]) + noise * 2f64.sqrt()
            }
        };
        let travel = self.episode_length() as f64 * self.cfg.dt * self.cfg.v_max * 2f64.sqrt();
        goal_far + travel + self.cfg.c_ctrl * self.act_dim() as f64
    }

    pub fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Vec<f64> {
        let (start, noise) = match self.id {
            EnvId::PointMassDense => (self.cfg.dense.start_pos, self.cfg.dense.start_noise),
            EnvId::PointMassSparse => (self.cfg.sparse.start_pos, self.cfg.sparse.start_noise),
        };
        let mut position = start;
        if noise > 0.0 {
            for p in &mut position {
                *p += rng.random_range(-noise..=noise);
            }
        }
        let goal = match self.id {
            EnvId::PointMassDense => self.cfg.dense.goal,
            EnvId::PointMassSparse => {
                let s = &self.cfg.sparse;
                let theta = rng.random_range(0.0..2.0 * PI);
                let r = if s.goal_radius_max > s.goal_radius_min {
                    rng.random_range(s.goal_radius_min..s.goal_radius_max)
                } else {
                    s.goal_radius_min
                };
                [r * theta.cos(), r * theta.sin()]
            }
        };
        self.state = EnvState {
            position,
            velocity: [0.0; 2],
            goal,
            step: 0,
        };
        self.finished = false;
        self.observe()
    }

    pub fn observe(&self) -> Vec<f64> {
        let s = &self.state;
        let mut obs = vec![s.position[0], s.position[1], s.velocity[0], s.velocity[1]];
        if self.id == EnvId::PointMassSparse {
            obs.extend_from_slice(&s.goal);
        }
        obs
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        if self.finished {
            return Err(Error::Contract("step called on a finished episode; reset first".into()));
        }
        if action.len() != self.act_dim() {
            return Err(Error::DimensionMismatch {
                context: "action",
                expected: self.act_dim(),
                got: action.len(),
            });
        }
        if action.iter().any(|a| !(-1.0..=1.0).contains(a)) {
            return Err(Error::Contract(format!("action {action:?} outside [-1, 1]")));
        }
        let (dt, v_max) = (self.cfg.dt, self.cfg.v_max);
        let s = &mut self.state;
        for i in 0..2 {
            s.velocity[i] = (s.velocity[i] + dt * action[i]).clamp(-v_max, v_max);
            s.position[i] += dt * s.velocity[i];
        }
        s.step += 1;
        let dist = (s.position[0] - s.goal[0]).hypot(s.position[1] - s.goal[1]);
        let (reward, done) = match self.reward_mode {
            RewardMode::Dense => {
                let ctrl: f64 = action.iter().map(|a| a * a).sum();
                (-dist - self.cfg.c_ctrl * ctrl, false)
            }
            RewardMode::Sparse => {
                let success = dist < self.cfg.r_goal;
                (if success { 1.0 } else { 0.0 }, success)
            }
        };
        let truncated = !done && s.step >= self.episode_length();
        self.finished = done || truncated;
        Ok(StepOutcome {
            next_state: self.observe(),
            reward,
            done,
            truncated,
        })
    }
}

/// Hand-written goal-reaching controller: PD toward the goal, saturated to the
/// action box. Used as the reference "expert" when normalising returns.
pub fn scripted_action(id: EnvId, cfg: &EnvConfig, obs: &[f64]) -> Vec<f64> {
    let goal = match id {
        EnvId::PointMassDense => cfg.dense.goal,
        EnvId::PointMassSparse => [obs[4], obs[5]],
    };
    (0..2)
        .map(|i| (4.0 * (goal[i] - obs[i]) - 3.0 * obs[2 + i]).clamp(-1.0, 1.0))
        .collect()
}
