use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::error::{Error, Result};

pub const METRICS_FORMAT: &str = "off2on-metrics";
pub const METRICS_VERSION: u32 = 1;

/// One evaluation point of a fine-tuning run. Loss fields average the updates
/// since the previous record and are `None` when there were none.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// Environment steps collected so far.
    pub step: usize,
    /// Gradient updates applied so far.
    pub updates: usize,
    pub eval_return_mean: f64,
    pub eval_return_std: f64,
    pub normalized_score: f64,
    pub critic_loss: Option<f64>,
    pub bellman_loss: Option<f64>,
    pub regularizer: Option<f64>,
    pub actor_loss: Option<f64>,
    pub mean_log_prob: Option<f64>,
    pub alpha: Option<f64>,
    pub dr_bound: Option<f64>,
    /// Offline share of the rows sampled for updates since the previous
    /// record; with no updates in between, the offline share of the current
    /// sampling distribution.
    pub offline_fraction: Option<f64>,
    pub auroc: Option<f64>,
    pub default_priority: f64,
    pub online_mass: f64,
    pub buffer_online: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_s: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Line {
    Header { format: String, version: u32, config: Box<RunConfig> },
    Record(Box<MetricsRecord>),
}

/// Append-only JSONL writer; the first line carries the resolved config.
pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path, cfg: &RunConfig) -> Result<Self> {
        let mut w = MetricsWriter {
            out: BufWriter::new(File::create(path)?),
        };
        w.line(&Line::Header {
            format: METRICS_FORMAT.into(),
            version: METRICS_VERSION,
            config: Box::new(cfg.clone()),
        })?;
        Ok(w)
    }

    pub fn write(&mut self, rec: &MetricsRecord) -> Result<()> {
        self.line(&Line::Record(Box::new(rec.clone())))
    }

    fn line(&mut self, line: &Line) -> Result<()> {
        serde_json::to_writer(&mut self.out, line)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

pub fn header_line(cfg: &RunConfig) -> Result<String> {
    Ok(serde_json::to_string(&Line::Header {
        format: METRICS_FORMAT.into(),
        version: METRICS_VERSION,
        config: Box::new(cfg.clone()),
    })?)
}

pub fn record_line(rec: &MetricsRecord) -> Result<String> {
    Ok(serde_json::to_string(&Line::Record(Box::new(rec.clone())))?)
}

pub fn read_metrics(path: &Path) -> Result<(RunConfig, Vec<MetricsRecord>)> {
    let reader = BufReader::new(File::open(path)?);
    let mut cfg = None;
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Line>(&line)? {
            Line::Header { format, version, config } => {
                if i != 0 || format != METRICS_FORMAT || version != METRICS_VERSION {
                    return Err(Error::Checkpoint(format!(
                        "{}: unexpected header `{format}` v{version} on line {}",
                        path.display(),
                        i + 1
                    )));
                }
                cfg = Some(*config);
            }
            Line::Record(r) => {
                if cfg.is_none() {
                    return Err(Error::Checkpoint(format!("{}: metrics stream lacks a header", path.display())));
                }
                if records.last().is_some_and(|p: &MetricsRecord| p.step > r.step) {
                    return Err(Error::Checkpoint(format!("{}: steps go backwards on line {}", path.display(), i + 1)));
                }
                records.push(*r);
            }
        }
    }
    let cfg = cfg.ok_or_else(|| Error::Checkpoint(format!("{}: empty metrics stream", path.display())))?;
    Ok((cfg, records))
}
