use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::config::RunConfig;
use super::eval::mean_std;
use super::metrics::{read_metrics, MetricsRecord};
use crate::error::{Error, Result};

pub const METRICS_FILE: &str = "metrics.jsonl";

/// `(step, offline fraction of sampled rows)` at every record that has one.
pub fn buffer_composition_analysis(records: &[MetricsRecord]) -> Vec<(usize, f64)> {
    records.iter().filter_map(|r| r.offline_fraction.map(|f| (r.step, f))).collect()
}

/// Runs sharing everything but the seed.
pub fn group_label(cfg: &RunConfig) -> String {
    let data = cfg
        .dataset
        .as_ref()
        .and_then(|p| p.file_stem())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "-".into());
    format!(
        "{}/{}/{}/{}/{}/n{}",
        cfg.env_id.as_str(),
        data,
        cfg.sampling_strategy.as_str(),
        cfg.q_init,
        cfg.finetune_objective,
        cfg.ensemble_size
    )
}

/// Finds run directories: each argument is either a run directory itself or a
/// parent whose immediate children are.
pub fn discover_runs(roots: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut runs = Vec::new();
    for root in roots {
        if root.join(METRICS_FILE).is_file() {
            runs.push(root.clone());
            continue;
        }
        if !root.is_dir() {
            return Err(Error::config("runs", format!("{} is not a directory", root.display())));
        }
        let mut children: Vec<PathBuf> = std::fs::read_dir(root)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(METRICS_FILE).is_file())
            .collect();
        if children.is_empty() {
            return Err(Error::config("runs", format!("no {METRICS_FILE} under {}", root.display())));
        }
        children.sort();
        runs.append(&mut children);
    }
    Ok(runs)
}

fn stat(values: &[f64]) -> (String, String) {
    if values.is_empty() {
        return (String::new(), String::new());
    }
    let (m, s) = mean_std(values);
    (format!("{m}"), format!("{s}"))
}

/// Mean/std curves per group and step as CSV.
pub fn aggregate_csv(runs: &[(RunConfig, Vec<MetricsRecord>)]) -> String {
    let mut groups: BTreeMap<String, BTreeMap<usize, Vec<&MetricsRecord>>> = BTreeMap::new();
    for (cfg, recs) in runs {
        let g = groups.entry(group_label(cfg)).or_default();
        for r in recs {
            g.entry(r.step).or_default().push(r);
        }
    }
    let mut out = String::from(
        "group,step,runs,score_mean,score_std,return_mean,return_std,offline_fraction_mean,offline_fraction_std,auroc_mean,auroc_std,critic_loss_mean,critic_loss_std\n",
    );
    for (label, steps) in &groups {
        for (step, recs) in steps {
            let col = |f: &dyn Fn(&MetricsRecord) -> Option<f64>| stat(&recs.iter().filter_map(|r| f(r)).collect::<Vec<_>>());
            let score = col(&|r| Some(r.normalized_score));
            let ret = col(&|r| Some(r.eval_return_mean));
            let off = col(&|r| r.offline_fraction);
            let auc = col(&|r| r.auroc);
            let critic = col(&|r| r.critic_loss);
            writeln!(
                out,
                "{label},{step},{},{},{},{},{},{},{},{},{},{},{}",
                recs.len(),
                score.0,
                score.1,
                ret.0,
                ret.1,
                off.0,
                off.1,
                auc.0,
                auc.1,
                critic.0,
                critic.1
            )
            .expect("writing to a String");
        }
    }
    out
}

pub fn load_runs(dirs: &[PathBuf]) -> Result<Vec<(RunConfig, Vec<MetricsRecord>)>> {
    dirs.iter().map(|d| read_metrics(&d.join(METRICS_FILE))).collect()
}

/// Per-run composition curve as CSV.
pub fn composition_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from("step,offline_fraction\n");
    for (s, f) in buffer_composition_analysis(records) {
        writeln!(out, "{s},{f}").expect("writing to a String");
    }
    out
}

pub fn write_report(roots: &[PathBuf], report: &Path) -> Result<usize> {
    let dirs = discover_runs(roots)?;
    let runs = load_runs(&dirs)?;
    std::fs::write(report, aggregate_csv(&runs))?;
    for (dir, (_, recs)) in dirs.iter().zip(&runs) {
        let analysis = dir.join("analysis");
        std::fs::create_dir_all(&analysis)?;
        std::fs::write(analysis.join("composition.csv"), composition_csv(recs))?;
    }
    Ok(dirs.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::metrics::MetricsWriter;
    use crate::replay::SamplingStrategy;

    fn rec(step: usize, score: f64, off: Option<f64>) -> MetricsRecord {
        MetricsRecord {
            step,
            updates: 0,
            eval_return_mean: score,
            eval_return_std: 0.0,
            normalized_score: score,
            critic_loss: None,
            bellman_loss: None,
            regularizer: None,
            actor_loss: None,
            mean_log_prob: None,
            alpha: None,
            dr_bound: None,
            offline_fraction: off,
            auroc: None,
            default_priority: 1.0,
            online_mass: 0.0,
            buffer_online: 0,
            wall_clock_s: None,
        }
    }

    #[test]
    fn composition_skips_missing_points() {
        let recs = vec![rec(0, 0.0, Some(1.0)), rec(10, 0.0, None), rec(20, 0.0, Some(0.4))];
        assert_eq!(buffer_composition_analysis(&recs), vec![(0, 1.0), (20, 0.4)]);
    }

    #[test]
    fn seeds_are_pooled_per_group() {
        let a = RunConfig { seed: 1, ..RunConfig::default() };
        let b = RunConfig { seed: 2, ..RunConfig::default() };
        let c = RunConfig { sampling_strategy: SamplingStrategy::Uniform, ..RunConfig::default() };
        let runs = vec![
            (a, vec![rec(0, 10.0, Some(1.0)), rec(5, 20.0, Some(0.5))]),
            (b, vec![rec(0, 20.0, Some(1.0)), rec(5, 40.0, None)]),
            (c, vec![rec(0, 7.0, None)]),
        ];
        let csv = aggregate_csv(&runs);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        let balanced0: Vec<&str> = lines.iter().find(|l| l.contains("/balanced/") && l.contains(",0,")).unwrap().split(',').collect();
        assert_eq!(&balanced0[2..5], &["2", "15", &format!("{}", 50f64.sqrt())]);
        let balanced5: Vec<&str> = lines.iter().find(|l| l.contains("/balanced/") && l.contains(",5,")).unwrap().split(',').collect();
        assert_eq!(&balanced5[7..9], &["0.5", "0"]);
        assert!(csv.contains("/uniform/"));
    }

    #[test]
    fn report_covers_parent_and_run_dirs() {
        let root = tempfile::tempdir().unwrap();
        for seed in 0..2 {
            let dir = root.path().join(format!("seed{seed}"));
            std::fs::create_dir_all(&dir).unwrap();
            let cfg = RunConfig { seed, ..RunConfig::default() };
            let mut w = MetricsWriter::create(&dir.join(METRICS_FILE), &cfg).unwrap();
            w.write(&rec(0, 1.0, Some(1.0))).unwrap();
        }
        let report = root.path().join("report.csv");
        assert_eq!(write_report(&[root.path().to_path_buf()], &report).unwrap(), 2);
        assert_eq!(write_report(&[root.path().join("seed0")], &report).unwrap(), 1);
        assert!(root.path().join("seed1/analysis/composition.csv").is_file());
        assert!(write_report(&[root.path().join("nope")], &report).is_err());
    }
}
