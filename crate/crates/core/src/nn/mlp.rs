//! Dense feed-forward networks with hand-written reverse-mode gradients.
//!
//! Batches are row-major `(batch, features)` matrices. A forward pass that
//! will be differentiated returns a [`Tape`] holding the per-layer inputs;
//! [`Mlp::backward`] consumes the tape together with the upstream gradient of
//! the head output and accumulates parameter gradients into a [`Gradients`].

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;
/// Added after the softplus so the non-negative head never returns zero.
pub const NONNEG_EPS: f64 = 1e-6;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Output transformation applied after the last affine layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Linear,
    /// First half of the outputs is the mean, second half the log-std,
    /// clamped to `[LOG_STD_MIN, LOG_STD_MAX]`.
    Gaussian,
    /// `softplus(z) + NONNEG_EPS`, strictly positive.
    NonNeg,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `(in, out)` so that a batch maps as `x · W + b`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Dense {
            weight: Array2::zeros((input, output)),
            bias: Array1::zeros(output),
        }
    }

    fn same_shape(&self, other: &Dense) -> bool {
        self.weight.dim() == other.weight.dim() && self.bias.len() == other.bias.len()
    }
}

/// Parameter-congruent gradient accumulator (one minibatch worth).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gradients {
    layers: Vec<Dense>,
}

impl Gradients {
    pub fn zeros_like(layers: &[Dense]) -> Self {
        Gradients {
            layers: layers
                .iter()
                .map(|l| Dense::zeros(l.weight.nrows(), l.weight.ncols()))
                .collect(),
        }
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn zero(&mut self) {
        for l in &mut self.layers {
            l.weight.fill(0.0);
            l.bias.fill(0.0);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    pub fn is_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|&v| v == 0.0))
    }

    /// Flattened view in parameter order (weights then bias, layer by layer).
    pub fn to_vec(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weight *= factor;
            l.bias *= factor;
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    fn congruent(&self, layers: &[Dense]) -> bool {
        self.layers.len() == layers.len()
            && self.layers.iter().zip(layers).all(|(a, b)| a.same_shape(b))
    }
}

/// First/second moment estimates and step counter for Adam.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first: Gradients,
    pub second: Gradients,
    pub step: u64,
}

impl AdamState {
    fn new(layers: &[Dense]) -> Self {
        AdamState {
            first: Gradients::zeros_like(layers),
            second: Gradients::zeros_like(layers),
            step: 0,
        }
    }
}

/// Scalar Adam used for learnable scalars such as log-temperature.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScalarAdam {
    pub first: f64,
    pub second: f64,
    pub step: u64,
}

impl ScalarAdam {
    pub fn step(&mut self, param: &mut f64, grad: f64, lr: f64) -> Result<()> {
        if !grad.is_finite() {
            return Err(Error::Divergence(format!("non-finite scalar gradient {grad}")));
        }
        self.step += 1;
        let (bc1, bc2) = bias_corrections(self.step);
        adam_update(
            std::slice::from_mut(param),
            &[grad],
            std::slice::from_mut(&mut self.first),
            std::slice::from_mut(&mut self.second),
            lr,
            bc1,
            bc2,
        );
        Ok(())
    }
}

fn bias_corrections(step: u64) -> (f64, f64) {
    let t = step.min(i32::MAX as u64) as i32;
    (1.0 - ADAM_BETA1.powi(t), 1.0 - ADAM_BETA2.powi(t))
}

fn adam_update(
    param: &mut [f64],
    grad: &[f64],
    first: &mut [f64],
    second: &mut [f64],
    lr: f64,
    bc1: f64,
    bc2: f64,
) {
    for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(first).zip(second) {
        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

/// Activations recorded by a differentiable forward pass.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    inputs: Vec<Array2<f64>>,
    raw: Array2<f64>,
}

impl Tape {
    pub fn batch_size(&self) -> usize {
        self.raw.nrows()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    dims: Vec<usize>,
    head: Head,
    layers: Vec<Dense>,
    adam: AdamState,
}

impl Mlp {
    /// Uniform(±1/√fan_in) initialisation for weights and biases.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], head: Head, rng: &mut R) -> Result<Self> {
        let mut net = Mlp::zeros(dims, head)?;
        for layer in &mut net.layers {
            let bound = 1.0 / (layer.weight.nrows() as f64).sqrt();
            layer
                .weight
                .mapv_inplace(|_| rng.random_range(-bound..bound));
            layer.bias.mapv_inplace(|_| rng.random_range(-bound..bound));
        }
        Ok(net)
    }

    pub fn zeros(dims: &[usize], head: Head) -> Result<Self> {
        validate_dims(dims, head)?;
        let layers: Vec<Dense> = dims.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        Ok(Mlp {
            dims: dims.to_vec(),
            head,
            adam: AdamState::new(&layers),
            layers,
        })
    }

    pub fn from_layers(layers: Vec<Dense>, head: Head) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Contract("network needs at least one layer".into()));
        }
        let mut dims = vec![layers[0].weight.nrows()];
        for (i, l) in layers.iter().enumerate() {
            if l.weight.nrows() != *dims.last().unwrap() {
                return Err(Error::DimensionMismatch {
                    context: "layer chaining",
                    expected: *dims.last().unwrap(),
                    got: l.weight.nrows(),
                });
            }
            if l.bias.len() != l.weight.ncols() {
                return Err(Error::Contract(format!("layer {i}: bias length != fan-out")));
            }
            dims.push(l.weight.ncols());
        }
        validate_dims(&dims, head)?;
        Ok(Mlp {
            dims,
            head,
            adam: AdamState::new(&layers),
            layers,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn params_vec(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn set_params_vec(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::DimensionMismatch {
                context: "parameter vector",
                expected: self.num_params(),
                got: values.len(),
            });
        }
        let mut it = values.iter().copied();
        for l in &mut self.layers {
            l.weight.iter_mut().for_each(|w| *w = it.next().unwrap());
            l.bias.iter_mut().for_each(|b| *b = it.next().unwrap());
        }
        Ok(())
    }

    pub fn gradients(&self) -> Gradients {
        Gradients::zeros_like(&self.layers)
    }

    /// Structural and numeric sanity check, used after deserialisation.
    pub fn validate(&self) -> Result<()> {
        validate_dims(&self.dims, self.head)?;
        let rebuilt = Mlp::from_layers(self.layers.clone(), self.head)?;
        if rebuilt.dims != self.dims {
            return Err(Error::Checkpoint("layer_dims do not match weights".into()));
        }
        if !self.adam.first.congruent(&self.layers) || !self.adam.second.congruent(&self.layers)
        {
            return Err(Error::Checkpoint("adam moments not congruent with parameters".into()));
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|e| Error::Contract(e.to_string()))?;
        Ok(self.forward_batch(x)?.into_raw_vec_and_offset().0)
    }

    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let (raw, _) = self.run(x, false)?;
        Ok(apply_head(self.head, &raw))
    }

    pub fn forward_tape(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, Tape)> {
        let (raw, inputs) = self.run(x, true)?;
        let out = apply_head(self.head, &raw);
        Ok((out, Tape { inputs, raw }))
    }

    fn run(&self, x: ArrayView2<f64>, keep: bool) -> Result<(Array2<f64>, Vec<Array2<f64>>)> {
        if x.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "network input",
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(if keep { self.layers.len() } else { 0 });
        let mut h = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = h.dot(&layer.weight);
            z += &layer.bias;
            if i < last {
                z.mapv_inplace(|v| v.max(0.0));
            }
            if keep {
                inputs.push(h);
            }
            h = z;
        }
        Ok((h, inputs))
    }

    /// Accumulates `∂loss/∂θ` into `grads` given `∂loss/∂output`.
    pub fn backward(&self, tape: &Tape, d_out: ArrayView2<f64>, grads: &mut Gradients) -> Result<()> {
        self.backprop(tape, d_out, Some(grads), false).map(|_| ())
    }

    /// Like [`Mlp::backward`] but also returns `∂loss/∂input`. Pass `None` to
    /// skip parameter gradients (e.g. differentiating a critic w.r.t. actions).
    pub fn backward_input(
        &self,
        tape: &Tape,
        d_out: ArrayView2<f64>,
        grads: Option<&mut Gradients>,
    ) -> Result<Array2<f64>> {
        self.backprop(tape, d_out, grads, true)
            .map(|d| d.expect("input gradient requested"))
    }

    fn backprop(
        &self,
        tape: &Tape,
        d_out: ArrayView2<f64>,
        mut grads: Option<&mut Gradients>,
        want_input: bool,
    ) -> Result<Option<Array2<f64>>> {
        if tape.inputs.len() != self.layers.len()
            || tape.inputs[0].ncols() != self.input_dim()
            || tape.raw.ncols() != self.output_dim()
        {
            return Err(Error::MissingCache);
        }
        if d_out.dim() != tape.raw.dim() {
            return Err(Error::DimensionMismatch {
                context: "upstream gradient rows",
                expected: tape.raw.nrows(),
                got: d_out.nrows(),
            });
        }
        if let Some(g) = grads.as_deref() {
            if !g.congruent(&self.layers) {
                return Err(Error::Contract("gradient buffer not congruent with network".into()));
            }
        }
        let mut delta = head_backward(self.head, &tape.raw, d_out);
        for l in (0..self.layers.len()).rev() {
            let input = &tape.inputs[l];
            if let Some(g) = grads.as_deref_mut() {
                let gl = &mut g.layers[l];
                general_mat_mul(1.0, &input.t(), &delta, 1.0, &mut gl.weight);
                gl.bias += &delta.sum_axis(Axis(0));
            }
            if l == 0 && !want_input {
                return Ok(None);
            }
            let mut d_in = delta.dot(&self.layers[l].weight.t());
            if l > 0 {
                Zip::from(&mut d_in).and(input).for_each(|d, &a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
            }
            delta = d_in;
        }
        Ok(Some(delta))
    }

    pub fn adam_step(&mut self, grads: &Gradients, lr: f64) -> Result<()> {
        if !grads.congruent(&self.layers) {
            return Err(Error::Contract("gradient buffer not congruent with network".into()));
        }
        if !grads.is_finite() {
            return Err(Error::Divergence("non-finite gradient in adam_step".into()));
        }
        self.adam.step += 1;
        let (bc1, bc2) = bias_corrections(self.adam.step);
        let AdamState { first, second, .. } = &mut self.adam;
        for (((p, g), m), v) in self
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut first.layers)
            .zip(&mut second.layers)
        {
            adam_update(
                p.weight.as_slice_mut().expect("standard layout"),
                g.weight.as_slice().expect("standard layout"),
                m.weight.as_slice_mut().expect("standard layout"),
                v.weight.as_slice_mut().expect("standard layout"),
                lr,
                bc1,
                bc2,
            );
            adam_update(
                p.bias.as_slice_mut().expect("standard layout"),
                g.bias.as_slice().expect("standard layout"),
                m.bias.as_slice_mut().expect("standard layout"),
                v.bias.as_slice_mut().expect("standard layout"),
                lr,
                bc1,
                bc2,
            );
        }
        Ok(())
    }

    /// `self ← (1 − tau)·self + tau·live`, parameters only.
    pub fn soft_update_from(&mut self, live: &Mlp, tau: f64) -> Result<()> {
        if self.dims != live.dims {
            return Err(Error::Contract("soft update between incongruent networks".into()));
        }
        for (t, l) in self.layers.iter_mut().zip(&live.layers) {
            Zip::from(&mut t.weight)
                .and(&l.weight)
                .for_each(|t, &l| *t = (1.0 - tau) * *t + tau * l);
            Zip::from(&mut t.bias)
                .and(&l.bias)
                .for_each(|t, &l| *t = (1.0 - tau) * *t + tau * l);
        }
        Ok(())
    }

    /// Copies parameters (not optimiser state) from `other`.
    pub fn copy_params_from(&mut self, other: &Mlp) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::Contract("copy between incongruent networks".into()));
        }
        for (t, o) in self.layers.iter_mut().zip(&other.layers) {
            t.weight.assign(&o.weight);
            t.bias.assign(&o.bias);
        }
        Ok(())
    }

    pub fn reset_optimizer(&mut self) {
        self.adam = AdamState::new(&self.layers);
    }
}

fn validate_dims(dims: &[usize], head: Head) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::Contract("layer_dims needs an input and an output size".into()));
    }
    if dims.contains(&0) {
        return Err(Error::Contract("layer_dims must be positive".into()));
    }
    if head == Head::Gaussian && !dims[dims.len() - 1].is_multiple_of(2) {
        return Err(Error::Contract("gaussian head needs an even output width".into()));
    }
    Ok(())
}

fn flatten(layers: &[Dense]) -> Vec<f64> {
    layers
        .iter()
        .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied())
        .collect()
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn apply_head(head: Head, raw: &Array2<f64>) -> Array2<f64> {
    match head {
        Head::Linear => raw.clone(),
        Head::NonNeg => raw.mapv(|z| softplus(z) + NONNEG_EPS),
        Head::Gaussian => {
            let half = raw.ncols() / 2;
            let mut out = raw.clone();
            out.slice_mut(ndarray::s![.., half..])
                .mapv_inplace(|z| z.clamp(LOG_STD_MIN, LOG_STD_MAX));
            out
        }
    }
}

fn head_backward(head: Head, raw: &Array2<f64>, d_out: ArrayView2<f64>) -> Array2<f64> {
    match head {
        Head::Linear => d_out.to_owned(),
        Head::NonNeg => {
            let mut d = d_out.to_owned();
            Zip::from(&mut d).and(raw).for_each(|d, &z| *d *= sigmoid(z));
            d
        }
        Head::Gaussian => {
            let half = raw.ncols() / 2;
            let mut d = d_out.to_owned();
            Zip::from(d.slice_mut(ndarray::s![.., half..]))
                .and(raw.slice(ndarray::s![.., half..]))
                .for_each(|d, &z| {
                    if !(LOG_STD_MIN..=LOG_STD_MAX).contains(&z) {
                        *d = 0.0;
                    }
                });
            d
        }
    }
}
