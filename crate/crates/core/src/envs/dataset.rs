//! Transitions, offline datasets, their generators and the binary file format.
//!
//! File layout (all integers and floats little-endian):
//!
//! ```text
//! magic      8 bytes   "O2ODATA\0"
//! version    u32       1
//! env_id     u32 length + UTF-8 bytes
//! obs_dim    u32
//! act_dim    u32
//! count      u64
//! tier       u8        0 random, 1 medium, 2 medium_replay, 3 medium_expert
//! seed       u64
//! metadata   u32 length + UTF-8 JSON (generator metadata)
//! records    count × (obs_dim + act_dim + 1 + obs_dim + 1) f64
//!            state, action, reward, next_state, done (0.0 / 1.0)
//! ```

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::point_mass::{scripted_action, EnvConfig, EnvId, PointMass};
use crate::error::{DatasetError, Error, Result};

pub const MAGIC: &[u8; 8] = b"O2ODATA\0";
pub const FORMAT_VERSION: u32 = 1;
/// Default transitions per tier at desk scale.
pub const DEFAULT_DATASET_SIZE: usize = 100_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Random,
    Medium,
    MediumReplay,
    MediumExpert,
}

impl Tier {
    pub const ALL: [Tier; 4] = [Tier::Random, Tier::Medium, Tier::MediumReplay, Tier::MediumExpert];

    pub fn as_str(self) -> &'static str {
        match self {
            Tier::Random => "random",
            Tier::Medium => "medium",
            Tier::MediumReplay => "medium_replay",
            Tier::MediumExpert => "medium_expert",
        }
    }

    fn tag(self) -> u8 {
        self as u8
    }

    fn from_tag(tag: u8) -> Option<Tier> {
        Tier::ALL.get(tag as usize).copied()
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Tier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        Tier::ALL
            .into_iter()
            .find(|t| t.as_str() == norm)
            .ok_or_else(|| Error::config("tier", format!("unknown dataset tier `{s}`")))
    }
}

/// Generator metadata carried in the file header.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GeneratorMeta {
    /// Hash of the behaviour checkpoint (medium tiers).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub behavior_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expert_hash: Option<String>,
    /// Index of the first expert transition in a medium-expert dataset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expert_split: Option<u64>,
    /// Normalised score of the behaviour checkpoint (0 random, 100 scripted expert).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub behavior_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expert_score: Option<f64>,
    /// Mean undiscounted return of the complete episodes in the file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub behavior_return: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tier: Tier,
    pub seed: u64,
    pub meta: GeneratorMeta,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub env_id: EnvId,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub transitions: Vec<Transition>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(env_id: EnvId, transitions: Vec<Transition>, provenance: Provenance) -> Result<Self> {
        let ds = Dataset {
            env_id,
            obs_dim: env_id.obs_dim(),
            act_dim: env_id.act_dim(),
            transitions,
            provenance,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.transitions.is_empty() {
            return Err(Error::Contract("dataset must be nonempty".into()));
        }
        for (i, t) in self.transitions.iter().enumerate() {
            if t.state.len() != self.obs_dim
                || t.next_state.len() != self.obs_dim
                || t.action.len() != self.act_dim
            {
                return Err(Error::Contract(format!("transition {i} has inconsistent dimensions")));
            }
            if !t.reward.is_finite() {
                return Err(Error::Contract(format!("transition {i} has non-finite reward")));
            }
            if t.action.iter().any(|a| !(-1.0..=1.0).contains(a)) {
                return Err(Error::Contract(format!("transition {i} action outside the box")));
            }
        }
        Ok(())
    }
}

/// Anything that maps observations to actions in `[-1, 1]^d`.
pub trait Policy {
    fn act(&self, obs: &[f64], deterministic: bool, rng: &mut dyn RngCore) -> Vec<f64>;
}

pub struct UniformPolicy {
    pub act_dim: usize,
}

impl Policy for UniformPolicy {
    fn act(&self, _obs: &[f64], _deterministic: bool, rng: &mut dyn RngCore) -> Vec<f64> {
        (0..self.act_dim).map(|_| rng.random_range(-1.0..=1.0)).collect()
    }
}

pub struct ScriptedPolicy {
    pub env_id: EnvId,
    pub cfg: EnvConfig,
}

impl Policy for ScriptedPolicy {
    fn act(&self, obs: &[f64], _deterministic: bool, _rng: &mut dyn RngCore) -> Vec<f64> {
        scripted_action(self.env_id, &self.cfg, obs)
    }
}

/// Rolls `policy` until `size` transitions are collected. Returns the
/// transitions and the returns of the episodes that finished.
pub fn collect_rollouts(
    env: &mut PointMass,
    policy: &dyn Policy,
    size: usize,
    deterministic: bool,
    rng: &mut dyn RngCore,
) -> Result<(Vec<Transition>, Vec<f64>)> {
    let mut out = Vec::with_capacity(size);
    let mut returns = Vec::new();
    let mut obs = env.reset(rng);
    let mut ep_return = 0.0;
    while out.len() < size {
        let action = policy.act(&obs, deterministic, rng);
        let step = env.step(&action)?;
        ep_return += step.reward;
        out.push(Transition {
            state: obs,
            action,
            reward: step.reward,
            next_state: step.next_state.clone(),
            done: step.done,
        });
        if step.episode_over() {
            returns.push(ep_return);
            ep_return = 0.0;
            obs = env.reset(rng);
        } else {
            obs = step.next_state;
        }
    }
    Ok((out, returns))
}

/// Mean undiscounted return of `episodes` rollouts.
pub fn average_return(
    env: &mut PointMass,
    policy: &dyn Policy,
    episodes: usize,
    deterministic: bool,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    let mut total = 0.0;
    for _ in 0..episodes {
        let mut obs = env.reset(rng);
        loop {
            let step = env.step(&policy.act(&obs, deterministic, rng))?;
            total += step.reward;
            if step.episode_over() {
                break;
            }
            obs = step.next_state;
        }
    }
    Ok(total / episodes as f64)
}

/// Returns of the uniform-random and scripted policies, used to express
/// returns on a 0 (random) to 100 (scripted expert) scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReturnScale {
    pub random: f64,
    pub expert: f64,
}

impl ReturnScale {
    pub fn for_env(id: EnvId, cfg: &EnvConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(0x05ee_d0f5_ca1e);
        let mut env = PointMass::new(id, cfg.clone());
        let random = average_return(&mut env, &UniformPolicy { act_dim: id.act_dim() }, 200, false, &mut rng)?;
        let scripted = ScriptedPolicy { env_id: id, cfg: cfg.clone() };
        let expert = average_return(&mut env, &scripted, 200, true, &mut rng)?;
        Ok(ReturnScale { random, expert })
    }

    pub fn normalize(&self, ret: f64) -> f64 {
        100.0 * (ret - self.random) / (self.expert - self.random)
    }
}

/// A behaviour policy plus the fingerprint recorded in dataset metadata.
pub struct BehaviorPolicy<'a> {
    pub policy: &'a dyn Policy,
    pub hash: String,
    pub score: f64,
}

#[derive(Default)]
pub struct BehaviorSources<'a> {
    pub medium: Option<BehaviorPolicy<'a>>,
    pub expert: Option<BehaviorPolicy<'a>>,
    /// Replay stream recorded while training the medium policy.
    pub medium_replay: Option<&'a [Transition]>,
}

fn missing(what: &str, tier: Tier) -> Error {
    Error::config("behavior", format!("tier `{tier}` needs a {what} checkpoint"))
}

/// Builds one of the four dataset tiers. Medium tiers roll out the
/// (stochastic) behaviour policies; `medium_replay` takes the chronological
/// prefix of the recorded training stream, capped at `size`.
pub fn generate_dataset(
    env_id: EnvId,
    cfg: &EnvConfig,
    tier: Tier,
    size: usize,
    seed: u64,
    sources: &BehaviorSources<'_>,
) -> Result<Dataset> {
    if size == 0 {
        return Err(Error::config("size", "dataset size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut env = PointMass::new(env_id, cfg.clone());
    let mut meta = GeneratorMeta::default();
    let (transitions, returns) = match tier {
        Tier::Random => {
            let policy = UniformPolicy { act_dim: env_id.act_dim() };
            collect_rollouts(&mut env, &policy, size, false, &mut rng)?
        }
        Tier::Medium => {
            let medium = sources.medium.as_ref().ok_or_else(|| missing("medium", tier))?;
            meta.behavior_hash = Some(medium.hash.clone());
            meta.behavior_score = Some(medium.score);
            collect_rollouts(&mut env, medium.policy, size, false, &mut rng)?
        }
        Tier::MediumReplay => {
            let stream = sources.medium_replay.ok_or_else(|| missing("medium-replay stream of a", tier))?;
            if let Some(m) = &sources.medium {
                meta.behavior_hash = Some(m.hash.clone());
                meta.behavior_score = Some(m.score);
            }
            let take = stream.len().min(size);
            let mut returns = Vec::new();
            let mut acc = 0.0;
            let mut len = 0;
            for t in &stream[..take] {
                acc += t.reward;
                len += 1;
                if t.done || len == env.episode_length() {
                    returns.push(acc);
                    acc = 0.0;
                    len = 0;
                }
            }
            (stream[..take].to_vec(), returns)
        }
        Tier::MediumExpert => {
            let medium = sources.medium.as_ref().ok_or_else(|| missing("medium", tier))?;
            let expert = sources.expert.as_ref().ok_or_else(|| missing("expert", tier))?;
            let half = size / 2;
            let (mut first, mut r1) = collect_rollouts(&mut env, medium.policy, half, false, &mut rng)?;
            let (second, r2) = collect_rollouts(&mut env, expert.policy, size - half, false, &mut rng)?;
            meta.behavior_hash = Some(medium.hash.clone());
            meta.behavior_score = Some(medium.score);
            meta.expert_hash = Some(expert.hash.clone());
            meta.expert_score = Some(expert.score);
            meta.expert_split = Some(half as u64);
            first.extend(second);
            r1.extend(r2);
            (first, r1)
        }
    };
    if !returns.is_empty() {
        meta.behavior_return = Some(returns.iter().sum::<f64>() / returns.len() as f64);
    }
    Dataset::new(env_id, transitions, Provenance { tier, seed, meta })
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    ds.validate()?;
    let record = 2 * ds.obs_dim + ds.act_dim + 2;
    let mut buf = Vec::with_capacity(128 + ds.len() * record * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_str(&mut buf, ds.env_id.as_str());
    buf.extend_from_slice(&(ds.obs_dim as u32).to_le_bytes());
    buf.extend_from_slice(&(ds.act_dim as u32).to_le_bytes());
    buf.extend_from_slice(&(ds.len() as u64).to_le_bytes());
    buf.push(ds.provenance.tier.tag());
    buf.extend_from_slice(&ds.provenance.seed.to_le_bytes());
    put_str(&mut buf, &serde_json::to_string(&ds.provenance.meta)?);
    for t in &ds.transitions {
        let done = if t.done { 1.0 } else { 0.0 };
        let fields = t
            .state
            .iter()
            .chain(&t.action)
            .chain(std::iter::once(&t.reward))
            .chain(&t.next_state)
            .chain(std::iter::once(&done));
        for v in fields {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], DatasetError> {
        if self.pos + n > self.bytes.len() {
            return Err(DatasetError::CorruptHeader("header ends early".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, DatasetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, DatasetError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> std::result::Result<String, DatasetError> {
        let len = self.u32()? as usize;
        if len > 1 << 20 {
            return Err(DatasetError::CorruptHeader(format!("string length {len}")));
        }
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| DatasetError::CorruptHeader("invalid UTF-8".into()))
    }
}

pub fn decode_dataset(bytes: &[u8]) -> std::result::Result<Dataset, DatasetError> {
    let mut r = Reader { bytes, pos: 0 };
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(DatasetError::BadMagic);
    }
    r.pos = MAGIC.len();
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(DatasetError::UnsupportedVersion(version));
    }
    let env_name = r.string()?;
    let env_id = EnvId::from_str(&env_name)
        .map_err(|_| DatasetError::CorruptHeader(format!("unknown env_id `{env_name}`")))?;
    let obs_dim = r.u32()? as usize;
    let act_dim = r.u32()? as usize;
    for (field, expected, got) in [
        ("obs_dim", env_id.obs_dim(), obs_dim),
        ("act_dim", env_id.act_dim(), act_dim),
    ] {
        if expected != got {
            return Err(DatasetError::DimensionMismatch {
                env_id: env_name.clone(),
                field,
                expected,
                got,
            });
        }
    }
    let count = r.u64()?;
    if count == 0 {
        return Err(DatasetError::CorruptHeader("count is zero".into()));
    }
    let tag = r.take(1)?[0];
    let tier = Tier::from_tag(tag).ok_or_else(|| DatasetError::CorruptHeader(format!("tier tag {tag}")))?;
    let seed = r.u64()?;
    let meta: GeneratorMeta = serde_json::from_str(&r.string()?)
        .map_err(|e| DatasetError::CorruptHeader(format!("metadata: {e}")))?;

    let record = 2 * obs_dim + act_dim + 2;
    let expected = count.saturating_mul(record as u64 * 8);
    let found = (bytes.len() - r.pos) as u64;
    if found < expected {
        return Err(DatasetError::Truncated { expected, found });
    }
    if found > expected {
        return Err(DatasetError::CorruptHeader(format!("{} trailing bytes", found - expected)));
    }
    let mut values = bytes[r.pos..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut take = |n: usize| -> Vec<f64> { values.by_ref().take(n).collect() };
    let transitions = (0..count)
        .map(|_| {
            let state = take(obs_dim);
            let action = take(act_dim);
            let reward = take(1)[0];
            let next_state = take(obs_dim);
            let done = take(1)[0] != 0.0;
            Transition {
                state,
                action,
                reward,
                next_state,
                done,
            }
        })
        .collect();
    Ok(Dataset {
        env_id,
        obs_dim,
        act_dim,
        transitions,
        provenance: Provenance { tier, seed, meta },
    })
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, encode_dataset(ds)?)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    decode_dataset(&bytes).map_err(|kind| Error::Dataset {
        path: path.to_path_buf(),
        kind,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::Instant;

    fn random_ds(size: usize, seed: u64) -> Dataset {
        generate_dataset(
            EnvId::PointMassDense,
            &EnvConfig::default(),
            Tier::Random,
            size,
            seed,
            &BehaviorSources::default(),
        )
        .unwrap()
    }

    #[test]
    fn random_tier_actions_are_uniform() {
        let ds = random_ds(1000, 3);
        assert_eq!(ds.len(), 1000);
        for dim in 0..2 {
            let mut xs: Vec<f64> = ds.transitions.iter().map(|t| t.action[dim]).collect();
            xs.sort_by(f64::total_cmp);
            // Kolmogorov-Smirnov against U(-1, 1); 1% critical value 1.628/√n.
            let n = xs.len() as f64;
            let d = xs
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    let cdf = (x + 1.0) / 2.0;
                    (cdf - i as f64 / n).abs().max(((i + 1) as f64 / n - cdf).abs())
                })
                .fold(0.0, f64::max);
            assert!(d < 1.628 / n.sqrt(), "KS statistic {d}");
        }
    }

    #[test]
    fn generation_is_reproducible() {
        assert_eq!(random_ds(300, 8), random_ds(300, 8));
        assert_ne!(random_ds(300, 8), random_ds(300, 9));
    }

    #[test]
    fn medium_tiers_need_a_checkpoint() {
        for tier in [Tier::Medium, Tier::MediumReplay, Tier::MediumExpert] {
            let err = generate_dataset(
                EnvId::PointMassDense,
                &EnvConfig::default(),
                tier,
                10,
                0,
                &BehaviorSources::default(),
            )
            .unwrap_err();
            assert!(matches!(err, Error::Config { .. }), "{err}");
        }
    }

    #[test]
    fn medium_expert_splits_in_half() {
        let cfg = EnvConfig::default();
        let uniform = UniformPolicy { act_dim: 2 };
        let scripted = ScriptedPolicy { env_id: EnvId::PointMassDense, cfg: cfg.clone() };
        let sources = BehaviorSources {
            medium: Some(BehaviorPolicy { policy: &uniform, hash: "m".into(), score: 40.0 }),
            expert: Some(BehaviorPolicy { policy: &scripted, hash: "e".into(), score: 100.0 }),
            medium_replay: None,
        };
        let ds = generate_dataset(EnvId::PointMassDense, &cfg, Tier::MediumExpert, 400, 1, &sources).unwrap();
        assert_eq!(ds.len(), 400);
        assert_eq!(ds.provenance.meta.expert_split, Some(200));
        // The second half follows the deterministic scripted controller.
        for t in &ds.transitions[200..] {
            assert_eq!(t.action, scripted_action(EnvId::PointMassDense, &cfg, &t.state));
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        let ds = random_ds(500, 4);
        save_dataset(&ds, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), ds);
    }

    #[test]
    fn load_errors_are_distinct() {
        let ds = random_ds(50, 4);
        let good = encode_dataset(&ds).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert_eq!(decode_dataset(&bad_magic).unwrap_err(), DatasetError::BadMagic);

        let mut bad_version = good.clone();
        bad_version[8] = 9;
        assert_eq!(decode_dataset(&bad_version).unwrap_err(), DatasetError::UnsupportedVersion(9));

        // obs_dim lives right after the env_id string.
        let obs_at = 8 + 4 + 4 + "point_mass_dense".len();
        let mut bad_dim = good.clone();
        bad_dim[obs_at] = 6;
        assert!(matches!(
            decode_dataset(&bad_dim).unwrap_err(),
            DatasetError::DimensionMismatch { field: "obs_dim", expected: 4, got: 6, .. }
        ));

        let truncated = &good[..good.len() - 9];
        assert!(matches!(decode_dataset(truncated).unwrap_err(), DatasetError::Truncated { .. }));

        let header_cut = &good[..20];
        assert!(matches!(decode_dataset(header_cut).unwrap_err(), DatasetError::CorruptHeader(_)));
    }

    #[test]
    fn hundred_thousand_transitions_load_quickly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("big.bin");
        save_dataset(&random_ds(DEFAULT_DATASET_SIZE, 1), &path).unwrap();
        let t = Instant::now();
        let ds = load_dataset(&path).unwrap();
        assert_eq!(ds.len(), DEFAULT_DATASET_SIZE);
        assert!(t.elapsed().as_secs_f64() < 1.0, "load took {:?}", t.elapsed());
    }

    #[test]
    fn return_scale_orders_random_below_expert() {
        for id in EnvId::ALL {
            let s = ReturnScale::for_env(id, &EnvConfig::default()).unwrap();
            assert!(s.expert > s.random, "{id}: {s:?}");
            assert!((s.normalize(s.expert) - 100.0).abs() < 1e-9);
        }
    }
}
