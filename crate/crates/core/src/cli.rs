//! The `off2on` command line: argument parsing, config resolution
//! (flags over file over defaults), run directories and exit codes.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agents::EnsembleAgent;
use crate::checkpoint::{self, content_hash};
use crate::envs::{load_dataset, save_dataset, Dataset, EnvId, PointMass, ReturnScale, Tier, DEFAULT_DATASET_SIZE};
use crate::error::{Error, Result};
use crate::pipeline::{
    dataset_from_behavior, evaluate_policy, train_behavior, train_offline_ensemble_parallel, write_report,
    BehaviorConfig, BehaviorRun, Checkpoint, FinetuneObjective, Finetune, MetricsWriter, QInit, RunConfig,
    METRICS_FILE,
};
use crate::replay::{DenominatorMode, DensityRatioEstimator, SamplingStrategy};

pub const AGENT_FORMAT: &str = "off2on-agent";
pub const BEHAVIOR_FORMAT: &str = "off2on-behavior";
pub const THREADS_VAR: &str = "OFF2ON_THREADS";

pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const FINAL_CHECKPOINT: &str = "final.json";
pub const DIVERGED_CHECKPOINT: &str = "diverged.json";

/// Everything needed to resume or evaluate an agent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentCheckpoint {
    pub config: RunConfig,
    pub config_hash: String,
    /// Content hash of the dataset file the agent was trained on.
    pub dataset_hash: Option<String>,
    /// Online steps taken; 0 for an offline checkpoint.
    pub step: usize,
    pub ensemble: EnsembleAgent,
    pub estimator: Option<DensityRatioEstimator>,
}

/// Medium and expert behaviour policies written next to a generated dataset.
#[derive(Serialize, Deserialize)]
pub struct BehaviorBundle {
    pub medium: Checkpoint,
    pub expert: Option<Checkpoint>,
    pub curve: Vec<(usize, f64)>,
}

#[derive(Parser, Debug)]
#[command(name = "off2on", version, about = "Offline-to-online RL with balanced replay and pessimistic Q-ensembles")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate an offline dataset tier.
    GenData(GenDataArgs),
    /// Train a conservative ensemble on a dataset.
    TrainOffline(TrainOfflineArgs),
    /// Fine-tune an offline checkpoint online.
    Finetune(FinetuneArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Aggregate run directories into a CSV report.
    Analyze(AnalyzeArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub env: Option<EnvId>,
    #[arg(long)]
    pub tier: Tier,
    #[arg(long, default_value_t = DEFAULT_DATASET_SIZE)]
    pub size: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Run config supplying `env_id`, `seed` and `[env]` overrides.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Step budget for training the behaviour policies (medium tiers).
    #[arg(long)]
    pub behavior_steps: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainOfflineArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub ensemble_size: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Gradient steps per member.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub alpha0: Option<f64>,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Defaults to the dataset recorded in the checkpoint.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub strategy: Option<SamplingStrategy>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Replaces the config stored in the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Keep only the first N members of the checkpoint's ensemble.
    #[arg(long)]
    pub ensemble_size: Option<usize>,
    #[arg(long)]
    pub q_init: Option<QInit>,
    #[arg(long)]
    pub objective: Option<FinetuneObjective>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub denominator: Option<DenominatorMode>,
    #[arg(long)]
    pub eval_interval: Option<usize>,
    #[arg(long)]
    pub warmup_steps: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub episodes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Sample actions instead of taking the mean action.
    #[arg(long)]
    pub stochastic: bool,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    /// Run directories, or parents of run directories.
    #[arg(long, num_args = 1.., required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub report: PathBuf,
}

/// Worker cap from `OFF2ON_THREADS`, else the machine's parallelism.
pub fn worker_threads() -> Result<usize> {
    match std::env::var(THREADS_VAR) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::config(THREADS_VAR, format!("expected a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Reads a TOML run config and reports whether it names an environment.
pub fn load_config(path: &Path) -> Result<(RunConfig, bool)> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
    let cfg = RunConfig::from_toml(&text)?;
    let names_env = text.parse::<toml::Table>().map(|t| t.contains_key("env_id")).unwrap_or(false);
    Ok((cfg, names_env))
}

/// Missing inputs are usage problems, reported against the flag.
fn require_file(path: &Path, flag: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::config(flag, format!("no such file: {}", path.display())))
    }
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(content_hash(&fs::read(path)?))
}

pub fn gen_data(a: &GenDataArgs) -> Result<Dataset> {
    let mut cfg = match &a.config {
        Some(p) => load_config(p)?.0,
        None => RunConfig::default(),
    };
    if let Some(env) = a.env {
        cfg.env_id = env;
    } else if a.config.is_none() {
        return Err(Error::config("env", "pass --env or a config naming env_id"));
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let env_cfg = cfg.env_config()?;
    let run: Option<BehaviorRun> = if a.tier == Tier::Random {
        None
    } else {
        let mut bcfg = BehaviorConfig::default();
        if let Some(n) = a.behavior_steps {
            bcfg.max_steps = n;
        }
        let run = train_behavior(cfg.env_id, &env_cfg, &bcfg, cfg.seed)?;
        let bundle = BehaviorBundle {
            medium: run.medium.clone(),
            expert: run.expert.clone(),
            curve: run.curve.clone(),
        };
        checkpoint::save(&behavior_path(&a.out), BEHAVIOR_FORMAT, &bundle)?;
        Some(run)
    };
    let ds = dataset_from_behavior(cfg.env_id, &env_cfg, a.tier, a.size, cfg.seed, run.as_ref())?;
    save_dataset(&ds, &a.out)?;
    Ok(ds)
}

fn behavior_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(OsString::from).unwrap_or_default();
    name.push(".behavior.json");
    out.with_file_name(name)
}

pub fn train_offline(a: &TrainOfflineArgs) -> Result<AgentCheckpoint> {
    require_file(&a.dataset, "dataset")?;
    let dataset = load_dataset(&a.dataset)?;
    let (mut cfg, names_env) = match &a.config {
        Some(p) => load_config(p)?,
        None => (RunConfig::default(), false),
    };
    if !names_env {
        cfg.env_id = dataset.env_id;
    }
    cfg.dataset = Some(a.dataset.clone());
    if let Some(n) = a.ensemble_size {
        cfg.ensemble_size = n;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(s) = a.steps {
        cfg.offline.steps = s;
    }
    if let Some(x) = a.alpha0 {
        cfg.offline.cql.alpha0 = x;
    }
    cfg.validate()?;
    let ensemble = train_offline_ensemble_parallel(&cfg, &dataset, worker_threads()?)?;
    let ckpt = AgentCheckpoint {
        config_hash: cfg.hash(),
        dataset_hash: Some(file_hash(&a.dataset)?),
        config: cfg,
        step: 0,
        ensemble,
        estimator: None,
    };
    checkpoint::save(&a.out, AGENT_FORMAT, &ckpt)?;
    Ok(ckpt)
}

/// Resolves the fine-tuning config: flags over `--config` (or the config
/// stored in the checkpoint) over defaults.
pub fn finetune_config(a: &FinetuneArgs, ckpt: &AgentCheckpoint) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => load_config(p)?.0,
        None => ckpt.config.clone(),
    };
    if let Some(d) = &a.dataset {
        cfg.dataset = Some(d.clone());
    }
    if let Some(s) = a.strategy {
        cfg.sampling_strategy = s;
    }
    if let Some(s) = a.steps {
        cfg.total_steps = s;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(q) = a.q_init {
        cfg.q_init = q;
    }
    if let Some(o) = a.objective {
        cfg.finetune_objective = o;
    }
    if let Some(r) = a.rho {
        cfg.rho = r;
    }
    if let Some(t) = a.temperature {
        cfg.density_ratio.temperature = Some(t);
    }
    if let Some(m) = a.denominator {
        cfg.density_ratio.mode = m;
    }
    if let Some(i) = a.eval_interval {
        cfg.eval_interval = i;
    }
    if let Some(w) = a.warmup_steps {
        cfg.warmup_steps = w;
    }
    cfg.ensemble_size = a.ensemble_size.unwrap_or(ckpt.ensemble.size());
    if cfg.ensemble_size > ckpt.ensemble.size() {
        return Err(Error::config(
            "ensemble_size",
            format!("checkpoint holds {} members, {} requested", ckpt.ensemble.size(), cfg.ensemble_size),
        ));
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn finetune(a: &FinetuneArgs) -> Result<AgentCheckpoint> {
    require_file(&a.ckpt, "ckpt")?;
    let ckpt: AgentCheckpoint = checkpoint::load(&a.ckpt, AGENT_FORMAT)?;
    let cfg = finetune_config(a, &ckpt)?;
    let data_path = cfg
        .dataset
        .clone()
        .ok_or_else(|| Error::config("dataset", "no dataset given and none recorded in the checkpoint"))?;
    require_file(&data_path, "dataset")?;
    let dataset = load_dataset(&data_path)?;
    let data_hash = file_hash(&data_path)?;
    if ckpt.dataset_hash.as_ref().is_some_and(|h| *h != data_hash) {
        return Err(Error::config("dataset", format!("{} is not the dataset the checkpoint was trained on", data_path.display())));
    }
    if a.out.join(METRICS_FILE).exists() {
        return Err(Error::config("out", format!("{} already holds a run", a.out.display())));
    }
    fs::create_dir_all(a.out.join(CHECKPOINT_DIR))?;
    fs::write(a.out.join(CONFIG_FILE), cfg.to_toml()?)?;

    let mut ens = ckpt.ensemble;
    ens.members.truncate(cfg.ensemble_size);
    let mut run = Finetune::new(&cfg, ens, &dataset)?;
    let mut writer = MetricsWriter::create(&a.out.join(METRICS_FILE), &cfg)?;
    let outcome = run.run(|r| writer.write(r));
    let bundle = AgentCheckpoint {
        config_hash: cfg.hash(),
        dataset_hash: Some(data_hash),
        config: cfg,
        step: run.step,
        ensemble: run.ens.clone(),
        estimator: run.estimator.clone(),
    };
    let name = if outcome.is_ok() { FINAL_CHECKPOINT } else { DIVERGED_CHECKPOINT };
    checkpoint::save(&a.out.join(CHECKPOINT_DIR).join(name), AGENT_FORMAT, &bundle)?;
    outcome.map(|_| bundle)
}

#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub env_id: EnvId,
    pub episodes: usize,
    pub deterministic: bool,
    pub mean: f64,
    pub std: f64,
    pub normalized_score: f64,
}

pub fn eval(a: &EvalArgs) -> Result<EvalReport> {
    require_file(&a.ckpt, "ckpt")?;
    let ckpt: AgentCheckpoint = checkpoint::load(&a.ckpt, AGENT_FORMAT)?;
    if a.episodes == 0 {
        return Err(Error::config("episodes", "must be positive"));
    }
    let env_cfg = ckpt.config.env_config()?;
    let mut env = PointMass::new(ckpt.config.env_id, env_cfg.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let (mean, std) = evaluate_policy(&mut env, &ckpt.ensemble, a.episodes, !a.stochastic, &mut rng)?;
    let scale = ReturnScale::for_env(ckpt.config.env_id, &env_cfg)?;
    Ok(EvalReport {
        env_id: ckpt.config.env_id,
        episodes: a.episodes,
        deterministic: !a.stochastic,
        mean,
        std,
        normalized_score: scale.normalize(mean),
    })
}

fn dispatch(cli: Cli) -> Result<String> {
    Ok(match cli.command {
        Command::GenData(a) => {
            let ds = gen_data(&a)?;
            format!("wrote {} transitions ({}, {}) to {}", ds.len(), ds.env_id, ds.provenance.tier, a.out.display())
        }
        Command::TrainOffline(a) => {
            let c = train_offline(&a)?;
            format!("wrote {}-member ensemble to {}", c.ensemble.size(), a.out.display())
        }
        Command::Finetune(a) => {
            let c = finetune(&a)?;
            format!("fine-tuned {} steps; run directory {}", c.step, a.out.display())
        }
        Command::Eval(a) => serde_json::to_string(&eval(&a)?)?,
        Command::Analyze(a) => {
            let n = write_report(&a.runs, &a.report)?;
            format!("aggregated {n} runs into {}", a.report.display())
        }
    })
}

/// Exit code for an error: 2 for usage and configuration problems, 1 for
/// everything that went wrong while running.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } => 2,
        _ => 1,
    }
}

/// One line: `error[<category>]: <message>`.
pub fn error_line(category: &str, message: &str) -> String {
    format!("error[{category}]: {}", message.split_whitespace().collect::<Vec<_>>().join(" "))
}

/// Parses `args`, runs the subcommand and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            if code != 0 {
                let text = e.to_string();
                let first = text.lines().next().unwrap_or("invalid usage").trim_start_matches("error: ");
                eprintln!("{}", error_line("usage", first));
                return 2;
            }
            return 0;
        }
    };
    match dispatch(cli) {
        Ok(msg) => {
            println!("{msg}");
            0
        }
        Err(e) => {
            eprintln!("{}", error_line(e.category(), &e.to_string()));
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run(["off2on", "finetune", "--out", "x"]), 2);
        assert_eq!(run(["off2on", "frobnicate"]), 2);
        assert_eq!(run(["off2on", "gen-data", "--tier", "bogus", "--out", "x"]), 2);
        assert_eq!(run(["off2on", "--help"]), 0);
    }

    #[test]
    fn error_line_is_single_line() {
        let l = error_line("config", "bad\nthing  here");
        assert_eq!(l, "error[config]: bad thing here");
    }

    #[test]
    fn flags_override_file_and_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, "ensemble_size = 5\nrho = 0.75\n").unwrap();
        let (file_cfg, names_env) = load_config(&path).unwrap();
        assert!(!names_env);
        let members = (0..5)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(i);
                crate::agents::ActorCritic::new(4, 2, &crate::agents::AgentConfig { hidden: vec![4], ..Default::default() }, &mut rng).unwrap()
            })
            .collect();
        let ckpt = AgentCheckpoint {
            config: RunConfig { seed: 3, ..RunConfig::default() },
            config_hash: String::new(),
            dataset_hash: None,
            step: 0,
            ensemble: EnsembleAgent::new(members).unwrap(),
            estimator: None,
        };
        let mut args = FinetuneArgs {
            ckpt: "unused".into(),
            dataset: None,
            strategy: Some(SamplingStrategy::Uniform),
            steps: None,
            seed: None,
            out: "unused".into(),
            config: Some(path),
            ensemble_size: Some(2),
            q_init: None,
            objective: None,
            rho: None,
            temperature: None,
            denominator: None,
            eval_interval: None,
            warmup_steps: None,
        };
        let cfg = finetune_config(&args, &ckpt).unwrap();
        assert_eq!(file_cfg.ensemble_size, 5);
        assert_eq!(cfg.ensemble_size, 2);
        assert_eq!(cfg.rho, 0.75);
        assert_eq!(cfg.seed, 0);
        assert_eq!(cfg.sampling_strategy, SamplingStrategy::Uniform);
        args.config = None;
        args.ensemble_size = None;
        let cfg = finetune_config(&args, &ckpt).unwrap();
        assert_eq!((cfg.seed, cfg.ensemble_size, cfg.rho), (3, 5, 0.5));
        args.ensemble_size = Some(6);
        assert!(matches!(finetune_config(&args, &ckpt), Err(Error::Config { .. })));
    }

    #[test]
    fn bad_thread_count_is_a_config_error() {
        // Only this test touches the variable.
        std::env::set_var(THREADS_VAR, "zero");
        let r = worker_threads();
        std::env::set_var(THREADS_VAR, "3");
        let ok = worker_threads().unwrap();
        std::env::remove_var(THREADS_VAR);
        assert!(matches!(r, Err(Error::Config { .. })));
        assert_eq!(ok, 3);
    }
}
