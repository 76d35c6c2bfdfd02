//! Browser demo: three small pieces of balanced replay running client-side.
//!
//! Each operation has a plain Rust entry point (tested natively) and a
//! `wasm_bindgen` wrapper that returns JSON for the page to plot.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use wasm_bindgen::prelude::*;

use off2on::agents::mixture_moments;
use off2on::envs::Transition;
use off2on::replay::{DenominatorMode, DensityRatioEstimator, PriorityBuffer, SamplingStrategy};

#[derive(Debug, Serialize)]
pub struct RatioCurve {
    pub xs: Vec<f64>,
    pub learned: Vec<f64>,
    pub analytic: Vec<f64>,
    pub mean_abs_error: f64,
}

/// Fits `w = p/q` for `P = N(shift, 1)`, `Q = N(0, 1)` and compares the
/// learned log-ratio with the exact `shift·x − shift²/2` on [−3, 3].
pub fn density_ratio(shift: f64, steps: usize, seed: u64) -> Result<RatioCurve, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut est = DensityRatioEstimator::new(1, &[32, 32], 1.0, DenominatorMode::Offline, &mut rng).map_err(|e| e.to_string())?;
    for _ in 0..steps {
        let p = Array2::from_shape_fn((128, 1), |_| shift + rng.sample::<f64, _>(StandardNormal));
        let q = Array2::from_shape_fn((128, 1), |_| rng.sample::<f64, _>(StandardNormal));
        est.train_step(p.view(), q.view(), 1e-3).map_err(|e| e.to_string())?;
    }
    let xs: Vec<f64> = (0..=60).map(|i| -3.0 + 0.1 * i as f64).collect();
    let grid = Array2::from_shape_vec((xs.len(), 1), xs.clone()).expect("column");
    let learned: Vec<f64> = est.ratios(grid.view()).map_err(|e| e.to_string())?.iter().map(|w| w.ln()).collect();
    let analytic: Vec<f64> = xs.iter().map(|x| shift * x - 0.5 * shift * shift).collect();
    let mean_abs_error = learned.iter().zip(&analytic).map(|(a, b)| (a - b).abs()).sum::<f64>() / xs.len() as f64;
    Ok(RatioCurve { xs, learned, analytic, mean_abs_error })
}

#[derive(Debug, Serialize)]
pub struct MixtureView {
    pub mean: f64,
    pub std: f64,
    pub xs: Vec<f64>,
    /// Density of the equally weighted mixture.
    pub mixture: Vec<f64>,
    /// Density of the moment-matched Gaussian.
    pub matched: Vec<f64>,
}

fn normal_pdf(x: f64, mean: f64, std: f64) -> f64 {
    let z = (x - mean) / std;
    (-0.5 * z * z).exp() / (std * (2.0 * std::f64::consts::PI).sqrt())
}

/// One-dimensional ensemble policy: members `N(means[i], exp(log_stds[i])²)`.
pub fn mixture(means: &[f64], log_stds: &[f64]) -> Result<MixtureView, String> {
    if means.is_empty() || means.len() != log_stds.len() {
        return Err("need one log-std per mean".into());
    }
    let m: Vec<Array2<f64>> = means.iter().map(|&v| Array2::from_elem((1, 1), v)).collect();
    let l: Vec<Array2<f64>> = log_stds.iter().map(|&v| Array2::from_elem((1, 1), v)).collect();
    let mv: Vec<_> = m.iter().map(|a| a.view()).collect();
    let lv: Vec<_> = l.iter().map(|a| a.view()).collect();
    let mm = mixture_moments(&mv, &lv);
    let (mean, std) = (mm.mean[[0, 0]], mm.log_std[[0, 0]].exp());
    let lo = means.iter().zip(log_stds).map(|(m, l)| m - 3.5 * l.exp()).fold(f64::INFINITY, f64::min);
    let hi = means.iter().zip(log_stds).map(|(m, l)| m + 3.5 * l.exp()).fold(f64::NEG_INFINITY, f64::max);
    let xs: Vec<f64> = (0..=200).map(|i| lo + (hi - lo) * i as f64 / 200.0).collect();
    let n = means.len() as f64;
    let mixture = xs
        .iter()
        .map(|&x| means.iter().zip(log_stds).map(|(&m, &l)| normal_pdf(x, m, l.exp())).sum::<f64>() / n)
        .collect();
    let matched = xs.iter().map(|&x| normal_pdf(x, mean, std)).collect();
    Ok(MixtureView { mean, std, xs, mixture, matched })
}

#[derive(Debug, Serialize)]
pub struct ReplayView {
    pub default_priority: f64,
    /// Share of the total priority held by online rows.
    pub online_mass: f64,
    pub balanced_online_share: f64,
    pub uniform_online_share: f64,
}

fn row(v: f64) -> Transition {
    Transition { state: vec![v], action: vec![0.0], reward: 0.0, next_state: vec![v], done: false }
}

/// Inserts `online` rows after `offline` ones at the default priority and
/// compares the online share of balanced and uniform batches.
pub fn replay(offline: usize, online: usize, rho: f64, draws: usize, seed: u64) -> Result<ReplayView, String> {
    let mut buf = PriorityBuffer::new(offline + online).map_err(|e| e.to_string())?;
    let rows: Vec<Transition> = (0..offline).map(|i| row(i as f64)).collect();
    buf.init_priorities(&rows, rho).map_err(|e| e.to_string())?;
    for i in 0..online {
        buf.insert_online(row(-(i as f64) - 1.0));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let share = |strategy, rng: &mut ChaCha8Rng| -> Result<f64, String> {
        let b = buf.sample(draws, strategy, rng).map_err(|e| e.to_string())?;
        Ok(1.0 - b.offline_fraction())
    };
    Ok(ReplayView {
        default_priority: buf.default_priority(),
        online_mass: buf.online_mass(),
        balanced_online_share: share(SamplingStrategy::Balanced, &mut rng)?,
        uniform_online_share: share(SamplingStrategy::Uniform, &mut rng)?,
    })
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsValue> {
    r.and_then(|v| serde_json::to_string(&v).map_err(|e| e.to_string())).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = densityRatio)]
pub fn density_ratio_js(shift: f64, steps: u32, seed: u32) -> Result<String, JsValue> {
    to_js(density_ratio(shift, steps as usize, seed as u64))
}

#[wasm_bindgen(js_name = mixture)]
pub fn mixture_js(means: Vec<f64>, log_stds: Vec<f64>) -> Result<String, JsValue> {
    to_js(mixture(&means, &log_stds))
}

#[wasm_bindgen(js_name = replay)]
pub fn replay_js(offline: u32, online: u32, rho: f64, draws: u32, seed: u32) -> Result<String, JsValue> {
    to_js(replay(offline as usize, online as usize, rho, draws as usize, seed as u64))
}
