use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agents::Batch;
use crate::error::{Error, Result};
use crate::nn::{Gradients, Head, Mlp};

const LN_2: f64 = std::f64::consts::LN_2;

/// What the ratio's denominator distribution is.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenominatorMode {
    /// `d_on / d_off`
    Offline,
    /// `d_on / d_(off ∪ on)`
    Union,
}

impl DenominatorMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DenominatorMode::Offline => "offline",
            DenominatorMode::Union => "union",
        }
    }
}

impl fmt::Display for DenominatorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DenominatorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "offline" => Ok(DenominatorMode::Offline),
            "union" => Ok(DenominatorMode::Union),
            _ => Err(Error::config("denominator_mode", format!("unknown mode `{s}` (offline, union)"))),
        }
    }
}

/// `f′(w) = log(2w/(w+1))`.
pub fn f_prime(w: f64) -> f64 {
    (2.0 * w / (w + 1.0)).ln()
}

/// `f*(f′(w)) = log((w+1)/2)`.
pub fn conjugate_at(w: f64) -> f64 {
    ((w + 1.0) / 2.0).ln()
}

/// Variational lower bound `E_P f′(w) − E_Q f*(f′(w))` (to be maximised).
pub fn dr_objective(w_p: ArrayView1<f64>, w_q: ArrayView1<f64>) -> Result<f64> {
    check_positive(w_p)?;
    check_positive(w_q)?;
    let p = w_p.iter().map(|&w| f_prime(w)).sum::<f64>() / w_p.len() as f64;
    let q = w_q.iter().map(|&w| conjugate_at(w)).sum::<f64>() / w_q.len() as f64;
    Ok(p - q)
}

/// The same bound written as a discriminator game with `D = w/(w+1)`:
/// `2 log 2 + E_P log D + E_Q log(1 − D)`.
pub fn dr_objective_gan(w_p: ArrayView1<f64>, w_q: ArrayView1<f64>) -> Result<f64> {
    check_positive(w_p)?;
    check_positive(w_q)?;
    let p = w_p.iter().map(|&w| (w / (w + 1.0)).ln()).sum::<f64>() / w_p.len() as f64;
    let q = w_q.iter().map(|&w| (1.0 / (w + 1.0)).ln()).sum::<f64>() / w_q.len() as f64;
    Ok(2.0 * LN_2 + p + q)
}

fn check_positive(w: ArrayView1<f64>) -> Result<()> {
    if w.is_empty() {
        return Err(Error::Contract("density-ratio batch is empty".into()));
    }
    if let Some(bad) = w.iter().find(|&&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::Contract(format!("density ratio must be positive and finite, got {bad}")));
    }
    Ok(())
}

/// `w^{1/T} / mean_ref(w^{1/T})`.
pub fn self_normalize(raw: &[f64], reference: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if reference.is_empty() {
        return Err(Error::Contract("self-normalisation needs a reference batch".into()));
    }
    let z = normalizer(reference.iter().copied(), temperature)?;
    Ok(raw.iter().map(|w| w.powf(1.0 / temperature) / z).collect())
}

fn normalizer(reference: impl Iterator<Item = f64>, temperature: f64) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for w in reference {
        sum += w.powf(1.0 / temperature);
        n += 1;
    }
    let z = sum / n as f64;
    if !(z > 0.0 && z.is_finite()) {
        return Err(Error::Divergence(format!("self-normalisation constant {z}")));
    }
    Ok(z)
}

/// Likelihood-free estimator of `w(s, a) = d_on(s, a) / d_den(s, a)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityRatioEstimator {
    pub net: Mlp,
    pub temperature: f64,
    pub mode: DenominatorMode,
    /// `mean(w^{1/T})` over the latest offline reference batch.
    normalizer: Option<f64>,
}

impl DensityRatioEstimator {
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        temperature: f64,
        mode: DenominatorMode,
        rng: &mut R,
    ) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::config("temperature", "must be positive"));
        }
        let mut dims = vec![input_dim];
        dims.extend(hidden);
        dims.push(1);
        Ok(DensityRatioEstimator {
            net: Mlp::new(&dims, Head::NonNeg, rng)?,
            temperature,
            mode,
            normalizer: None,
        })
    }

    pub fn ratios(&self, inputs: ArrayView2<f64>) -> Result<Array1<f64>> {
        Ok(self.net.forward_batch(inputs)?.index_axis_move(Axis(1), 0))
    }

    pub fn batch_ratios(&self, batch: &Batch) -> Result<Array1<f64>> {
        self.ratios(features(batch).view())
    }

    /// The bound and its gradient for descent on `−bound`, with `P` =
    /// numerator rows and `Q` = denominator rows.
    pub fn bound_gradients(&self, numerator: ArrayView2<f64>, denominator: ArrayView2<f64>) -> Result<(f64, Gradients)> {
        let (out_p, tape_p) = self.net.forward_tape(numerator)?;
        let (out_q, tape_q) = self.net.forward_tape(denominator)?;
        let w_p = out_p.column(0);
        let w_q = out_q.column(0);
        let bound = dr_objective(w_p, w_q)?;
        let (np, nq) = (w_p.len() as f64, w_q.len() as f64);
        let d_p: Array2<f64> = w_p.mapv(|w| -1.0 / (w * (w + 1.0)) / np).insert_axis(Axis(1));
        let d_q: Array2<f64> = w_q.mapv(|w| 1.0 / (w + 1.0) / nq).insert_axis(Axis(1));
        let mut grads = self.net.gradients();
        self.net.backward(&tape_p, d_p.view(), &mut grads)?;
        self.net.backward(&tape_q, d_q.view(), &mut grads)?;
        Ok((bound, grads))
    }

    /// One Adam step ascending the bound. Returns the bound before the step.
    pub fn train_step(&mut self, numerator: ArrayView2<f64>, denominator: ArrayView2<f64>, lr: f64) -> Result<f64> {
        let (bound, grads) = self.bound_gradients(numerator, denominator)?;
        self.net.adam_step(&grads, lr)?;
        Ok(bound)
    }

    /// Recomputes the cached `mean(w^{1/T})` from an offline reference batch.
    pub fn refresh_normalizer(&mut self, offline_inputs: ArrayView2<f64>) -> Result<f64> {
        let w = self.ratios(offline_inputs)?;
        let z = normalizer(w.iter().copied(), self.temperature)?;
        self.normalizer = Some(z);
        Ok(z)
    }

    pub fn normalizer(&self) -> Option<f64> {
        self.normalizer
    }

    /// Self-normalised priorities `w̃` for the given rows, using the cached
    /// normaliser.
    pub fn priorities(&self, inputs: ArrayView2<f64>) -> Result<Vec<f64>> {
        let z = self
            .normalizer
            .ok_or_else(|| Error::Contract("priorities requested before the normaliser was estimated".into()))?;
        let w = self.ratios(inputs)?;
        Ok(w.iter().map(|w| w.powf(1.0 / self.temperature) / z).collect())
    }
}

/// `[state | action]` rows of a batch.
pub fn features(batch: &Batch) -> Array2<f64> {
    ndarray::concatenate(Axis(1), &[batch.states.view(), batch.actions.view()]).expect("batch rows agree")
}
