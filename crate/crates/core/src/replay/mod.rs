//! Balanced replay: a sum-tree priority buffer over offline and online
//! transitions, and the density-ratio estimator that sets the priorities.

mod buffer;
mod density_ratio;
mod sum_tree;

pub use buffer::{default_priority, Origin, PriorityBuffer, SampledBatch, SamplingStrategy};
pub use density_ratio::{
    conjugate_at, dr_objective, dr_objective_gan, f_prime, features, self_normalize, DenominatorMode,
    DensityRatioEstimator,
};
pub use sum_tree::{SumTree, PRIORITY_FLOOR};
