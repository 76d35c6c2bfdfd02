//! Minimal differentiable MLP engine: forward/backward passes, Adam, and the
//! squashed Gaussian used by policies.

mod gaussian;
mod mlp;

pub use gaussian::{
    gaussian_sample, log_one_minus_tanh_sq, squash, squashed_log_prob, squashed_sample,
    standard_normal, SquashedSample,
};
pub use mlp::{
    sigmoid, softplus, AdamState, Dense, Gradients, Head, Mlp, ScalarAdam, Tape, ADAM_BETA1,
    ADAM_BETA2, ADAM_EPS, LOG_STD_MAX, LOG_STD_MIN, NONNEG_EPS,
};

use std::path::Path;

use crate::checkpoint;
use crate::error::Result;

pub const NETWORK_FORMAT: &str = "off2on-mlp";

pub fn save_network(net: &Mlp, path: &Path) -> Result<()> {
    checkpoint::save(path, NETWORK_FORMAT, net)
}

pub fn load_network(path: &Path) -> Result<Mlp> {
    let net: Mlp = checkpoint::load(path, NETWORK_FORMAT)?;
    net.validate()?;
    Ok(net)
}
