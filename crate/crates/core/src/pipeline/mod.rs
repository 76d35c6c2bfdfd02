mod analyze;
mod behavior;
mod config;
mod eval;
mod finetune;
mod metrics;
mod offline;

pub use behavior::{dataset_from_behavior, train_behavior, BehaviorConfig, BehaviorRun, Checkpoint};
pub use config::{DensityRatioConfig, FinetuneObjective, OfflineConfig, QInit, RunConfig};
pub use eval::{auroc, auroc_analysis, evaluate_policy, mean_std, rollout_returns, FAKE_PER_REAL};
pub use offline::{check_dataset, fqe_initialize, train_offline_ensemble, train_offline_ensemble_parallel, train_offline_member};
pub use finetune::{finetune_cql_regularized, finetune_online, Finetune};
pub use metrics::{header_line, read_metrics, record_line, MetricsRecord, MetricsWriter, METRICS_FORMAT, METRICS_VERSION};
pub use analyze::{aggregate_csv, buffer_composition_analysis, composition_csv, discover_runs, group_label, load_runs, write_report, METRICS_FILE};
