//! Reparameterised tanh-squashed Gaussian used by every policy.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Zip};
use rand::Rng;
use rand_distr::StandardNormal;

use super::mlp::{softplus, LOG_STD_MAX, LOG_STD_MIN};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// `ln(1 − tanh²(u))` without cancellation for large |u|.
pub fn log_one_minus_tanh_sq(u: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - u - softplus(-2.0 * u))
}

/// A batch of squashed samples together with what is needed to differentiate
/// them w.r.t. the mean and log-std that produced them.
#[derive(Clone, Debug)]
pub struct SquashedSample {
    pub action: Array2<f64>,
    pub log_prob: Array1<f64>,
    std: Array2<f64>,
    noise: Array2<f64>,
    /// 1 where the supplied log-std was inside the clamp range.
    log_std_live: Array2<f64>,
}

/// `action = tanh(mean + exp(log_std)·noise)`; `log_prob` includes the tanh
/// Jacobian. Log-std is clamped to `[LOG_STD_MIN, LOG_STD_MAX]`.
pub fn squashed_sample(
    mean: ArrayView2<f64>,
    log_std: ArrayView2<f64>,
    noise: ArrayView2<f64>,
) -> SquashedSample {
    assert_eq!(mean.dim(), log_std.dim(), "mean/log_std shape");
    assert_eq!(mean.dim(), noise.dim(), "mean/noise shape");
    let (rows, cols) = mean.dim();
    let mut action = Array2::zeros((rows, cols));
    let mut std = Array2::zeros((rows, cols));
    let mut live = Array2::zeros((rows, cols));
    let mut log_prob = Array1::zeros(rows);
    for r in 0..rows {
        let mut lp = 0.0;
        for c in 0..cols {
            let raw = log_std[[r, c]];
            let ls = raw.clamp(LOG_STD_MIN, LOG_STD_MAX);
            live[[r, c]] = if ls == raw { 1.0 } else { 0.0 };
            let s = ls.exp();
            let e = noise[[r, c]];
            let u = mean[[r, c]] + s * e;
            action[[r, c]] = u.tanh();
            std[[r, c]] = s;
            lp += -0.5 * e * e - ls - HALF_LN_2PI - log_one_minus_tanh_sq(u);
        }
        log_prob[r] = lp;
    }
    SquashedSample {
        action,
        log_prob,
        std,
        noise: noise.to_owned(),
        log_std_live: live,
    }
}

impl SquashedSample {
    /// Chain rule from `(∂L/∂action, ∂L/∂log_prob)` to `(∂L/∂mean, ∂L/∂log_std)`,
    /// holding the noise fixed.
    pub fn backward(
        &self,
        d_action: Option<ArrayView2<f64>>,
        d_log_prob: Option<ArrayView1<f64>>,
    ) -> (Array2<f64>, Array2<f64>) {
        let (rows, cols) = self.action.dim();
        let mut d_mean = Array2::zeros((rows, cols));
        let mut d_log_std = Array2::zeros((rows, cols));
        for r in 0..rows {
            let dlp = d_log_prob.map_or(0.0, |d| d[r]);
            for c in 0..cols {
                let a = self.action[[r, c]];
                let s_eps = self.std[[r, c]] * self.noise[[r, c]];
                let da = d_action.map_or(0.0, |d| d[[r, c]]);
                let jac = 1.0 - a * a;
                d_mean[[r, c]] = da * jac + dlp * 2.0 * a;
                d_log_std[[r, c]] =
                    (da * jac * s_eps + dlp * (2.0 * a * s_eps - 1.0)) * self.log_std_live[[r, c]];
            }
        }
        (d_mean, d_log_std)
    }
}

/// Single-sample form: returns `(action, log_prob)`.
pub fn gaussian_sample(mean: &[f64], log_std: &[f64], noise: &[f64]) -> (Vec<f64>, f64) {
    let d = mean.len();
    let m = ArrayView2::from_shape((1, d), mean).expect("mean");
    let l = ArrayView2::from_shape((1, d), log_std).expect("log_std");
    let n = ArrayView2::from_shape((1, d), noise).expect("noise");
    let s = squashed_sample(m, l, n);
    (s.action.into_raw_vec_and_offset().0, s.log_prob[0])
}

/// Density of a given squashed action (inverse of [`gaussian_sample`]).
pub fn squashed_log_prob(mean: &[f64], log_std: &[f64], action: &[f64]) -> f64 {
    let mut lp = 0.0;
    for ((&m, &ls), &a) in mean.iter().zip(log_std).zip(action) {
        let ls = ls.clamp(LOG_STD_MIN, LOG_STD_MAX);
        let a = a.clamp(-1.0 + 1e-15, 1.0 - 1e-15);
        let u = a.atanh();
        let e = (u - m) / ls.exp();
        lp += -0.5 * e * e - ls - HALF_LN_2PI - log_one_minus_tanh_sq(u);
    }
    lp
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    let mut out = Array2::zeros((rows, cols));
    out.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
    out
}

/// Deterministic action: squashed mean.
pub fn squash(mean: ArrayView2<f64>) -> Array2<f64> {
    let mut a = mean.to_owned();
    Zip::from(&mut a).for_each(|v| *v = v.tanh());
    a
}
