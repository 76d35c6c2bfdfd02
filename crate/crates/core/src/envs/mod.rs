//! Desk-scale point-mass environments and offline datasets.

mod dataset;
mod point_mass;

pub use dataset::{
    average_return, collect_rollouts, decode_dataset, encode_dataset, generate_dataset,
    load_dataset, save_dataset, BehaviorPolicy, BehaviorSources, Dataset, GeneratorMeta, Policy,
    Provenance, ReturnScale, ScriptedPolicy, Tier, Transition, UniformPolicy,
    DEFAULT_DATASET_SIZE, FORMAT_VERSION, MAGIC,
};
pub use point_mass::{
    scripted_action, DenseTaskConfig, EnvConfig, EnvId, EnvState, PointMass, RewardMode,
    SparseTaskConfig, StepOutcome,
};
