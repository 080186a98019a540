//! Minimal multilayer perceptron with exact gradients.
//!
//! Parameters of every model live in one flat [`ParamVec`]. Layer `l` maps
//! `dims[l] -> dims[l + 1]` and stores its weight matrix row-major
//! (`out x in`) followed by its bias vector. Hidden layers use ReLU, the
//! final layer emits raw logits.

use std::borrow::Borrow;
use std::ops::{Index, IndexMut, Range};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{self, Error, Result};
use crate::rng;

/// Flat vector of model parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVec(Vec<f64>);

impl ParamVec {
    pub fn zeros(len: usize) -> Self {
        ParamVec(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    pub fn l2_norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// `self - other`, coordinate-wise.
    pub fn sub(&self, other: &ParamVec) -> ParamVec {
        ParamVec(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn distance(&self, other: &ParamVec) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

impl From<Vec<f64>> for ParamVec {
    fn from(v: Vec<f64>) -> Self {
        ParamVec(v)
    }
}

impl Index<usize> for ParamVec {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for ParamVec {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Activation {
    #[default]
    Relu,
}

/// Architecture of a feed-forward classifier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl ModelSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, num_classes: usize) -> Self {
        ModelSpec {
            input_dim,
            hidden_dims,
            num_classes,
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return error::config(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.input_dim == 0 || self.hidden_dims.iter().any(|&d| d == 0) {
            return error::config("all layer dimensions must be >= 1");
        }
        Ok(())
    }

    /// Layer widths from input to output.
    pub fn dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.num_classes);
        dims
    }

    pub fn num_layers(&self) -> usize {
        self.hidden_dims.len() + 1
    }

    pub fn param_count(&self) -> usize {
        self.dims().windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Parameter index ranges `(weights, bias)` of every layer.
    pub fn layer_ranges(&self) -> Vec<(Range<usize>, Range<usize>)> {
        let mut offset = 0;
        self.dims()
            .windows(2)
            .map(|w| {
                let weights = offset..offset + w[0] * w[1];
                let bias = weights.end..weights.end + w[1];
                offset = bias.end;
                (weights, bias)
            })
            .collect()
    }

    /// Parameter range of the final (output) layer, weights and bias.
    pub fn output_layer_range(&self) -> Range<usize> {
        let ranges = self.layer_ranges();
        let (w, b) = ranges.last().expect("at least one layer");
        w.start..b.end
    }
}

/// An architecture together with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub spec: ModelSpec,
    pub params: ParamVec,
}

impl ModelState {
    pub fn new(spec: ModelSpec, params: ParamVec) -> Result<Self> {
        spec.validate()?;
        if params.len() != spec.param_count() {
            return error::input(format!(
                "parameter vector has length {}, architecture needs {}",
                params.len(),
                spec.param_count()
            ));
        }
        Ok(ModelState { spec, params })
    }

    pub fn zeros(spec: ModelSpec) -> Result<Self> {
        let n = spec.param_count();
        ModelState::new(spec, ParamVec::zeros(n))
    }
}

/// A labeled feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub features: Vec<f64>,
    pub label: usize,
}

impl Example {
    pub fn new(features: Vec<f64>, label: usize) -> Self {
        Example { features, label }
    }
}

/// Training objective.
#[derive(Debug, Clone, Copy)]
pub enum LossSpec<'a> {
    CrossEntropy,
    /// Cross-entropy plus `sum_i lambda/2 * fisher_i * (theta_i - anchor_i)^2`.
    Ewc {
        lambda: f64,
        fisher: &'a ParamVec,
        anchor: &'a ParamVec,
    },
    /// `alpha * K^2 * CE + (1 - alpha) * KL(softmax(teacher/K) || softmax(student/K))`.
    Kd {
        alpha: f64,
        temperature: f64,
        teacher: &'a ModelState,
    },
}

impl LossSpec<'_> {
    fn validate(&self, model: &ModelState) -> Result<()> {
        let n = model.params.len();
        match *self {
            LossSpec::CrossEntropy => Ok(()),
            LossSpec::Ewc {
                lambda,
                fisher,
                anchor,
            } => {
                if !(lambda >= 0.0 && lambda.is_finite()) {
                    return error::config(format!("EWC lambda must be finite and >= 0, got {lambda}"));
                }
                if fisher.len() != n || anchor.len() != n {
                    return error::input("EWC fisher/anchor length differs from the model");
                }
                if fisher.iter().any(|&f| !(f >= 0.0)) {
                    return error::input("Fisher coordinates must be >= 0");
                }
                Ok(())
            }
            LossSpec::Kd {
                alpha,
                temperature,
                teacher,
            } => {
                if !(0.0..=1.0).contains(&alpha) {
                    return error::config(format!("KD alpha must lie in [0, 1], got {alpha}"));
                }
                if !(temperature > 0.0 && temperature.is_finite()) {
                    return error::config(format!("KD temperature must be > 0, got {temperature}"));
                }
                if teacher.spec != model.spec {
                    return error::input("KD teacher architecture differs from the student");
                }
                Ok(())
            }
        }
    }
}

/// Optimizer hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

impl SgdConfig {
    pub fn plain(lr: f64) -> Self {
        SgdConfig {
            lr,
            momentum: 0.0,
            weight_decay: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return error::config(format!("learning rate must be finite and >= 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return error::config(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return error::config("weight decay must be finite and >= 0");
        }
        Ok(())
    }
}

/// Creates a model with weights drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
/// and zero biases.
pub fn init_model(spec: &ModelSpec, seed: u64) -> Result<ModelState> {
    spec.validate()?;
    let mut rng = rng::rng_from_seed(seed);
    let mut params = ParamVec::zeros(spec.param_count());
    let dims = spec.dims();
    for (layer, (weights, _bias)) in spec.layer_ranges().into_iter().enumerate() {
        let bound = 1.0 / (dims[layer] as f64).sqrt();
        for w in &mut params.as_mut_slice()[weights] {
            *w = rng.random_range(-bound..bound);
        }
    }
    ModelState::new(spec.clone(), params)
}

/// Reusable activation buffers for one forward/backward pass.
#[derive(Debug, Default)]
pub(crate) struct Scratch {
    /// `acts[0]` is the input, `acts[l + 1]` the post-activation output of layer `l`
    /// (the last entry holds the logits).
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
    dims: Vec<usize>,
    ranges: Vec<(Range<usize>, Range<usize>)>,
}

impl Scratch {
    pub(crate) fn new(spec: &ModelSpec) -> Self {
        Scratch {
            acts: spec.dims().into_iter().map(|d| vec![0.0; d]).collect(),
            delta: Vec::new(),
            delta_prev: Vec::new(),
            dims: spec.dims(),
            ranges: spec.layer_ranges(),
        }
    }

    pub(crate) fn logits(&self) -> &[f64] {
        self.acts.last().expect("output layer")
    }
}

fn check_features(spec: &ModelSpec, x: &[f64]) -> Result<()> {
    if x.len() != spec.input_dim {
        return error::input(format!(
            "feature vector has length {}, model expects {}",
            x.len(),
            spec.input_dim
        ));
    }
    Ok(())
}

pub(crate) fn forward_into(params: &[f64], x: &[f64], scratch: &mut Scratch) {
    let num_layers = scratch.dims.len() - 1;
    scratch.acts[0].copy_from_slice(x);
    for l in 0..num_layers {
        let (n_in, n_out) = (scratch.dims[l], scratch.dims[l + 1]);
        let (wr, br) = scratch.ranges[l].clone();
        let w = &params[wr];
        let b = &params[br];
        let (head, tail) = scratch.acts.split_at_mut(l + 1);
        let input = &head[l];
        let out = &mut tail[0];
        for o in 0..n_out {
            let row = &w[o * n_in..(o + 1) * n_in];
            let mut z = b[o];
            for (wi, xi) in row.iter().zip(input.iter()) {
                z += wi * xi;
            }
            out[o] = if l + 1 < num_layers { z.max(0.0) } else { z };
        }
    }
}

/// Accumulates `scale * d(loss)/d(params)` into `grad`, given `d(loss)/d(logits)`
/// in `scratch.delta` and activations from the last [`forward_into`].
pub(crate) fn backward_into(params: &[f64], scratch: &mut Scratch, grad: &mut [f64], scale: f64) {
    for l in (0..scratch.dims.len() - 1).rev() {
        let (n_in, n_out) = (scratch.dims[l], scratch.dims[l + 1]);
        let (wr, br) = scratch.ranges[l].clone();
        let input = &scratch.acts[l];
        {
            let gw = &mut grad[wr.clone()];
            for o in 0..n_out {
                let d = scratch.delta[o] * scale;
                if d == 0.0 {
                    continue;
                }
                for (g, xi) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(input.iter()) {
                    *g += d * xi;
                }
            }
        }
        for (g, d) in grad[br].iter_mut().zip(&scratch.delta) {
            *g += d * scale;
        }
        if l == 0 {
            break;
        }
        let w = &params[wr];
        scratch.delta_prev.clear();
        scratch.delta_prev.resize(n_in, 0.0);
        for o in 0..n_out {
            let d = scratch.delta[o];
            if d == 0.0 {
                continue;
            }
            for (dp, wi) in scratch.delta_prev.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                *dp += d * wi;
            }
        }
        // ReLU derivative; acts[l] is the post-activation of layer l - 1.
        for (dp, a) in scratch.delta_prev.iter_mut().zip(&scratch.acts[l]) {
            if *a <= 0.0 {
                *dp = 0.0;
            }
        }
        std::mem::swap(&mut scratch.delta, &mut scratch.delta_prev);
    }
}

/// Pre-softmax outputs of `model` for one input.
pub fn forward_logits(model: &ModelState, x: &[f64]) -> Result<Vec<f64>> {
    check_features(&model.spec, x)?;
    let mut scratch = Scratch::new(&model.spec);
    forward_into(model.params.as_slice(), x, &mut scratch);
    let logits = scratch.logits().to_vec();
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    Ok(logits)
}

/// Index of the largest logit; ties go to the lowest class index.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable log-softmax of `logits / temperature`.
pub(crate) fn log_softmax(logits: &[f64], temperature: f64, out: &mut Vec<f64>) {
    out.clear();
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v)) / temperature;
    let sum: f64 = logits.iter().map(|&v| (v / temperature - max).exp()).sum();
    let log_norm = max + sum.ln();
    out.extend(logits.iter().map(|&v| v / temperature - log_norm));
}

/// Writes `softmax(logits) - onehot(label)` into `out`, returns the
/// cross-entropy of this example.
fn cross_entropy_delta(logits: &[f64], label: usize, logp: &mut Vec<f64>, out: &mut Vec<f64>) -> f64 {
    log_softmax(logits, 1.0, logp);
    out.clear();
    out.extend(logp.iter().map(|lp| lp.exp()));
    out[label] -= 1.0;
    -logp[label]
}

/// Mean loss over `batch` and its gradient with respect to the parameters.
pub fn loss_and_grad<E: Borrow<Example>>(model: &ModelState, batch: &[E], loss: &LossSpec<'_>) -> Result<(f64, ParamVec)> {
    if batch.is_empty() {
        return error::input("empty batch");
    }
    loss.validate(model)?;
    let spec = &model.spec;
    let params = model.params.as_slice();
    let n = batch.len() as f64;
    let mut grad = ParamVec::zeros(params.len());
    let mut scratch = Scratch::new(spec);
    let mut teacher_scratch = match loss {
        LossSpec::Kd { .. } => Some(Scratch::new(spec)),
        _ => None,
    };
    let mut logp = Vec::with_capacity(spec.num_classes);
    let mut logq = Vec::with_capacity(spec.num_classes);
    let mut total = 0.0;

    for ex in batch {
        let ex = ex.borrow();
        check_features(spec, &ex.features)?;
        if ex.label >= spec.num_classes {
            return error::input(format!(
                "label {} out of range for {} classes",
                ex.label, spec.num_classes
            ));
        }
        forward_into(params, &ex.features, &mut scratch);
        let mut delta = std::mem::take(&mut scratch.delta);
        let ce = cross_entropy_delta(scratch.logits(), ex.label, &mut logp, &mut delta);
        let example_loss = match *loss {
            LossSpec::CrossEntropy | LossSpec::Ewc { .. } => ce,
            LossSpec::Kd {
                alpha,
                temperature,
                teacher,
            } => {
                let ts = teacher_scratch.as_mut().expect("teacher scratch");
                forward_into(teacher.params.as_slice(), &ex.features, ts);
                log_softmax(ts.logits(), temperature, &mut logq);
                let teacher_logp = logq.clone();
                log_softmax(scratch.logits(), temperature, &mut logp);
                let mut kl = 0.0;
                let ce_weight = alpha * temperature * temperature;
                for c in 0..delta.len() {
                    let pt = teacher_logp[c].exp();
                    let ps = logp[c].exp();
                    kl += pt * (teacher_logp[c] - logp[c]);
                    delta[c] = ce_weight * delta[c] + (1.0 - alpha) * (ps - pt) / temperature;
                }
                ce_weight * ce + (1.0 - alpha) * kl
            }
        };
        total += example_loss;
        scratch.delta = delta;
        backward_into(params, &mut scratch, grad.as_mut_slice(), 1.0 / n);
    }

    let mut value = total / n;
    if let LossSpec::Ewc {
        lambda,
        fisher,
        anchor,
    } = *loss
    {
        let g = grad.as_mut_slice();
        for i in 0..params.len() {
            let diff = params[i] - anchor[i];
            value += 0.5 * lambda * fisher[i] * diff * diff;
            g[i] += lambda * fisher[i] * diff;
        }
    }

    if !value.is_finite() || !grad.is_finite() {
        return Err(Error::Numeric("non-finite loss or gradient".into()));
    }
    Ok((value, grad))
}

/// Per-example cross-entropy gradient, used by the Fisher estimator.
pub(crate) fn example_ce_grad(model: &ModelState, ex: &Example, label: usize, scratch: &mut Scratch, grad: &mut [f64]) -> Result<()> {
    let spec = &model.spec;
    check_features(spec, &ex.features)?;
    if label >= spec.num_classes {
        return error::input(format!("label {label} out of range"));
    }
    forward_into(model.params.as_slice(), &ex.features, scratch);
    let mut delta = std::mem::take(&mut scratch.delta);
    let mut logp = Vec::with_capacity(spec.num_classes);
    cross_entropy_delta(scratch.logits(), label, &mut logp, &mut delta);
    scratch.delta = delta;
    grad.iter_mut().for_each(|g| *g = 0.0);
    backward_into(model.params.as_slice(), scratch, grad, 1.0);
    Ok(())
}

/// One momentum-SGD update:
/// `buf <- momentum * buf + grad + weight_decay * params`, `params <- params - lr * buf`.
pub fn sgd_step(model: &mut ModelState, grad: &ParamVec, cfg: &SgdConfig, momentum_buf: &mut ParamVec) -> Result<()> {
    let n = model.params.len();
    sgd_step_range(model, grad, cfg, momentum_buf, 0..n)
}

/// As [`sgd_step`], but only parameters in `trainable` change; the momentum
/// buffer outside the range is left untouched.
pub fn sgd_step_range(
    model: &mut ModelState,
    grad: &ParamVec,
    cfg: &SgdConfig,
    momentum_buf: &mut ParamVec,
    trainable: Range<usize>,
) -> Result<()> {
    let n = model.params.len();
    if grad.len() != n || momentum_buf.len() != n {
        return error::input("gradient/momentum length differs from the model");
    }
    if trainable.end > n || trainable.start > trainable.end {
        return error::input("trainable range out of bounds");
    }
    if !grad.is_finite() {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    let params = model.params.as_mut_slice();
    let buf = momentum_buf.as_mut_slice();
    for i in trainable {
        buf[i] = cfg.momentum * buf[i] + grad[i] + cfg.weight_decay * params[i];
        params[i] -= cfg.lr * buf[i];
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> ModelSpec {
        ModelSpec::new(2, vec![3], 2)
    }

    #[test]
    fn param_count_matches_hand_count() {
        assert_eq!(tiny_spec().param_count(), 17);
        assert_eq!(ModelSpec::new(4, vec![5, 3], 2).param_count(), 4 * 5 + 5 + 5 * 3 + 3 + 3 * 2 + 2);
    }

    #[test]
    fn init_is_deterministic_and_scaled() {
        let a = init_model(&tiny_spec(), 7).unwrap();
        let b = init_model(&tiny_spec(), 7).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, init_model(&tiny_spec(), 8).unwrap().params);
        let ranges = tiny_spec().layer_ranges();
        for (l, (w, bias)) in ranges.into_iter().enumerate() {
            let bound = 1.0 / (tiny_spec().dims()[l] as f64).sqrt();
            assert!(a.params.as_slice()[w].iter().all(|v| v.abs() <= bound));
            assert!(a.params.as_slice()[bias].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn single_class_spec_is_rejected() {
        let err = init_model(&ModelSpec::new(2, vec![3], 1), 0).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(matches!(init_model(&ModelSpec::new(2, vec![0], 3), 0), Err(Error::Config(_))));
    }

    #[test]
    fn zero_model_gives_zero_logits() {
        let m = ModelState::zeros(tiny_spec()).unwrap();
        assert_eq!(forward_logits(&m, &[0.3, -2.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn single_layer_selects_first_weight_column() {
        // W = [[1, 2], [3, 4]] (row-major out x in), b = [0.5, -0.5]
        let spec = ModelSpec::new(2, vec![], 2);
        let m = ModelState::new(spec, vec![1.0, 2.0, 3.0, 4.0, 0.5, -0.5].into()).unwrap();
        assert_eq!(forward_logits(&m, &[1.0, 0.0]).unwrap(), vec![1.5, 2.5]);
        assert_eq!(forward_logits(&m, &[1.0, 0.0]).unwrap(), forward_logits(&m, &[1.0, 0.0]).unwrap());
    }

    #[test]
    fn forward_rejects_wrong_dimension() {
        let m = init_model(&tiny_spec(), 1).unwrap();
        assert!(matches!(forward_logits(&m, &[1.0]), Err(Error::Input(_))));
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.0, 0.0, 0.0]), 0);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }

    #[test]
    fn label_out_of_range_is_input_error() {
        let m = init_model(&tiny_spec(), 1).unwrap();
        let batch = [Example::new(vec![1.0, 1.0], 2)];
        assert!(matches!(
            loss_and_grad(&m, &batch, &LossSpec::CrossEntropy),
            Err(Error::Input(_))
        ));
        let empty: [Example; 0] = [];
        assert!(loss_and_grad(&m, &empty, &LossSpec::CrossEntropy).is_err());
    }

    #[test]
    fn plain_sgd_step() {
        let spec = ModelSpec::new(1, vec![], 2);
        let mut m = ModelState::zeros(spec).unwrap();
        m.params[0] = 1.0;
        let mut grad = ParamVec::zeros(4);
        grad[0] = 0.5;
        let mut buf = ParamVec::zeros(4);
        sgd_step(&mut m, &grad, &SgdConfig::plain(1.0), &mut buf).unwrap();
        assert_eq!(m.params[0], 0.5);
    }

    #[test]
    fn momentum_weight_decay_step() {
        let spec = ModelSpec::new(1, vec![], 2);
        let mut m = ModelState::zeros(spec).unwrap();
        m.params[0] = 1.0;
        let mut grad = ParamVec::zeros(4);
        grad[0] = 1.0;
        let mut buf = ParamVec::zeros(4);
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0005,
        };
        sgd_step(&mut m, &grad, &cfg, &mut buf).unwrap();
        assert!((buf[0] - 1.0005).abs() < 1e-15);
        assert!((m.params[0] - 0.89995).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_scales_buffer_only() {
        let spec = ModelSpec::new(1, vec![], 2);
        let mut m = init_model(&spec, 3).unwrap();
        let before = m.params.clone();
        let mut buf: ParamVec = vec![1.0, -2.0, 0.5, 4.0].into();
        let cfg = SgdConfig {
            lr: 0.0,
            momentum: 0.5,
            weight_decay: 0.0,
        };
        sgd_step(&mut m, &ParamVec::zeros(4), &cfg, &mut buf).unwrap();
        assert_eq!(m.params, before);
        assert_eq!(buf.as_slice(), &[0.5, -1.0, 0.25, 2.0]);
    }

    #[test]
    fn non_finite_gradient_is_numeric_error() {
        let spec = ModelSpec::new(1, vec![], 2);
        let mut m = ModelState::zeros(spec).unwrap();
        let mut grad = ParamVec::zeros(4);
        grad[2] = f64::NAN;
        let mut buf = ParamVec::zeros(4);
        assert!(matches!(
            sgd_step(&mut m, &grad, &SgdConfig::plain(0.1), &mut buf),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn ewc_with_zero_lambda_matches_cross_entropy() {
        let m = init_model(&tiny_spec(), 5).unwrap();
        let batch = vec![Example::new(vec![0.2, -1.0], 1), Example::new(vec![1.5, 0.3], 0)];
        let fisher = ParamVec::from(vec![1.0; 17]);
        let anchor = ParamVec::zeros(17);
        let ce = loss_and_grad(&m, &batch, &LossSpec::CrossEntropy).unwrap();
        let ewc = loss_and_grad(
            &m,
            &batch,
            &LossSpec::Ewc {
                lambda: 0.0,
                fisher: &fisher,
                anchor: &anchor,
            },
        )
        .unwrap();
        assert_eq!(ce, ewc);
        let at_anchor = loss_and_grad(
            &m,
            &batch,
            &LossSpec::Ewc {
                lambda: 10.0,
                fisher: &fisher,
                anchor: &m.params,
            },
        )
        .unwrap();
        assert_eq!(at_anchor.0, ce.0);
    }

    #[test]
    fn kd_degenerate_cases() {
        let m = init_model(&tiny_spec(), 5).unwrap();
        let other = init_model(&tiny_spec(), 6).unwrap();
        let batch = vec![Example::new(vec![0.2, -1.0], 1), Example::new(vec![1.5, 0.3], 0)];
        let (ce, ce_grad) = loss_and_grad(&m, &batch, &LossSpec::CrossEntropy).unwrap();
        let k = 6.0;
        let (kd, kd_grad) = loss_and_grad(
            &m,
            &batch,
            &LossSpec::Kd {
                alpha: 1.0,
                temperature: k,
                teacher: &other,
            },
        )
        .unwrap();
        assert!((kd - k * k * ce).abs() < 1e-12);
        for (a, b) in kd_grad.iter().zip(ce_grad.iter()) {
            assert!((a - k * k * b).abs() < 1e-9);
        }
        let (self_kd, _) = loss_and_grad(
            &m,
            &batch,
            &LossSpec::Kd {
                alpha: 0.0,
                temperature: k,
                teacher: &m,
            },
        )
        .unwrap();
        assert!(self_kd.abs() < 1e-15);
    }

    #[test]
    fn output_layer_range_is_last_block() {
        let spec = ModelSpec::new(2, vec![3], 2);
        assert_eq!(spec.output_layer_range(), 9..17);
    }
}
