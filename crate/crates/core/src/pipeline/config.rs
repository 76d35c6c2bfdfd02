use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::agents::{AgentConfig, CqlParams, LearningRates};
use crate::envs::{EnvConfig, EnvId};
use crate::error::{Error, Result};
use crate::replay::{DenominatorMode, SamplingStrategy};

/// Where the fine-tuning critics start from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QInit {
    /// The conservative critics trained offline.
    Cql,
    /// Fresh critics fitted to the offline policy by FQE.
    Fqe,
}

/// Critic objective during fine-tuning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneObjective {
    Sac,
    /// Keep the conservative regulariser on during fine-tuning.
    CqlReg,
}

macro_rules! string_enum {
    ($ty:ty, $key:literal, $($variant:path => $name:literal),+) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self { $($variant => $name),+ }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s.replace('-', "_").as_str() {
                    $($name => Ok($variant),)+
                    _ => Err(Error::config($key, format!("unknown value `{s}`"))),
                }
            }
        }
    };
}

string_enum!(QInit, "q_init", QInit::Cql => "cql", QInit::Fqe => "fqe");
string_enum!(FinetuneObjective, "finetune_objective", FinetuneObjective::Sac => "sac", FinetuneObjective::CqlReg => "cql_reg");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OfflineConfig {
    /// Gradient steps per member (epochs × steps per epoch).
    pub steps: usize,
    pub batch_size: usize,
    pub cql: CqlParams,
    /// FQE steps when `q_init = fqe`.
    pub fqe_steps: usize,
}

impl Default for OfflineConfig {
    fn default() -> Self {
        OfflineConfig {
            steps: 50_000,
            batch_size: 256,
            cql: CqlParams::default(),
            fqe_steps: 25_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DensityRatioConfig {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    /// Self-normalisation temperature; defaults to 5 (dense) or 2.5 (sparse).
    pub temperature: Option<f64>,
    pub mode: DenominatorMode,
}

impl Default for DensityRatioConfig {
    fn default() -> Self {
        DensityRatioConfig {
            hidden: vec![64, 64],
            learning_rate: 3e-4,
            temperature: None,
            mode: DenominatorMode::Offline,
        }
    }
}

/// Everything a run needs besides the dataset contents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub env_id: EnvId,
    pub dataset: Option<PathBuf>,
    pub ensemble_size: usize,
    pub sampling_strategy: SamplingStrategy,
    pub q_init: QInit,
    pub finetune_objective: FinetuneObjective,
    pub agent: AgentConfig,
    pub learning_rates: LearningRates,
    pub batch_size: usize,
    /// Target online share of the priority mass right after warm-up.
    pub rho: f64,
    pub density_ratio: DensityRatioConfig,
    /// Collect-only steps before the first update.
    pub warmup_steps: usize,
    /// Updates run at the end of warm-up, as a multiple of `warmup_steps`.
    pub warmup_multiplier: usize,
    pub total_steps: usize,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    /// Real pairs scored at each evaluation for the AUROC metric (0 disables).
    pub auroc_pairs: usize,
    /// Online capacity beyond the offline data; defaults to `total_steps`.
    pub buffer_capacity: Option<usize>,
    pub offline: OfflineConfig,
    pub seed: u64,
    /// Adds elapsed seconds to every record; off by default so streams stay
    /// bit-identical across runs.
    pub record_wall_clock: bool,
    /// Partial overrides of the bundled environment constants.
    pub env: toml::Table,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            env_id: EnvId::PointMassDense,
            dataset: None,
            ensemble_size: 5,
            sampling_strategy: SamplingStrategy::Balanced,
            q_init: QInit::Cql,
            finetune_objective: FinetuneObjective::Sac,
            agent: AgentConfig::default(),
            learning_rates: LearningRates::default(),
            batch_size: 256,
            rho: 0.5,
            density_ratio: DensityRatioConfig::default(),
            warmup_steps: 1000,
            warmup_multiplier: 5,
            total_steps: 50_000,
            eval_interval: 1000,
            eval_episodes: 10,
            auroc_pairs: 100,
            buffer_capacity: None,
            offline: OfflineConfig::default(),
            seed: 0,
            record_wall_clock: false,
            env: toml::Table::new(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let key = e
                .span()
                .map(|s| text[s].trim().to_string())
                .filter(|k| !k.is_empty() && k.len() < 80)
                .unwrap_or_else(|| "<document>".into());
            Error::config(key, msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("<document>", e.to_string()))
    }

    /// Bundled environment constants with `env` overrides applied.
    pub fn env_config(&self) -> Result<EnvConfig> {
        let mut base = toml::Table::try_from(EnvConfig::default()).expect("env config serialises");
        merge(&mut base, &self.env);
        let cfg: EnvConfig = base
            .try_into()
            .map_err(|e: toml::de::Error| Error::config("env", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn temperature(&self) -> f64 {
        self.density_ratio.temperature.unwrap_or(match self.env_id {
            EnvId::PointMassDense => 5.0,
            EnvId::PointMassSparse => 2.5,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("ensemble_size", self.ensemble_size),
            ("batch_size", self.batch_size),
            ("eval_interval", self.eval_interval),
            ("eval_episodes", self.eval_episodes),
            ("offline.batch_size", self.offline.batch_size),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::config("rho", "must lie strictly between 0 and 1"));
        }
        self.agent.validate()?;
        for (key, lr) in [
            ("learning_rates.policy", self.learning_rates.policy),
            ("learning_rates.value", self.learning_rates.value),
            ("learning_rates.alpha", self.learning_rates.alpha),
            ("density_ratio.learning_rate", self.density_ratio.learning_rate),
        ] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::config(key, "must be a nonnegative number"));
            }
        }
        if let Some(t) = self.density_ratio.temperature {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::config("density_ratio.temperature", "must be positive"));
            }
        }
        if self.density_ratio.hidden.contains(&0) {
            return Err(Error::config("density_ratio.hidden", "layer widths must be positive"));
        }
        self.offline.cql.validate()?;
        self.env_config()?;
        Ok(())
    }

    /// Fingerprint of the resolved configuration.
    pub fn hash(&self) -> String {
        crate::checkpoint::content_hash(serde_json::to_string(self).expect("config serialises").as_bytes())
    }
}

fn merge(base: &mut toml::Table, overrides: &toml::Table) {
    for (k, v) in overrides {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_quick_config_parses() {
        let cfg = RunConfig::from_toml(include_str!("../../configs/quick.toml")).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.ensemble_size, 2);
        assert_eq!(cfg.agent.hidden, vec![64, 64]);
    }

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.ensemble_size, 5);
        assert_eq!(cfg.rho, 0.5);
        assert_eq!(cfg.temperature(), 5.0);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("ensemble_sise = 3").is_err());
        assert!(RunConfig::from_toml("[agent]\nwidth = 3").is_err());
        assert!(RunConfig::from_toml("[env]\nbogus = 1.0").is_err());
    }

    #[test]
    fn invalid_values_name_their_key() {
        match RunConfig::from_toml("[agent]\ngamma = -0.5") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "agent.gamma"),
            other => panic!("{other:?}"),
        }
        match RunConfig::from_toml("rho = 1.0") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "rho"),
            other => panic!("{other:?}"),
        }
        assert!(RunConfig::from_toml("ensemble_size = \"five\"").is_err());
    }

    #[test]
    fn env_overrides_merge_onto_bundled_constants() {
        let cfg = RunConfig::from_toml("[env]\ndt = 0.05\n[env.dense]\ngoal = [0.5, 0.5]").unwrap();
        let env = cfg.env_config().unwrap();
        assert_eq!(env.dt, 0.05);
        assert_eq!(env.dense.goal, [0.5, 0.5]);
        assert_eq!(env.dense.episode_length, 50);
    }

    #[test]
    fn echo_round_trips() {
        let cfg = RunConfig {
            ensemble_size: 2,
            sampling_strategy: SamplingStrategy::OnlineOnly,
            q_init: QInit::Fqe,
            dataset: Some("d.bin".into()),
            env: toml::from_str("[dense]\nstart_noise = 0.0").unwrap(),
            ..RunConfig::default()
        };
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&json).unwrap(), cfg);
    }

    #[test]
    fn enum_names_parse() {
        assert_eq!("cql-reg".parse::<FinetuneObjective>().unwrap(), FinetuneObjective::CqlReg);
        assert_eq!("fqe".parse::<QInit>().unwrap(), QInit::Fqe);
        assert!("sarsa".parse::<QInit>().is_err());
    }
}
