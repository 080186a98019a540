//! Participant-side training: the per-round local update and the
//! trained-from-scratch local baseline.

use std::ops::Range;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::ParticipantData;
use crate::error::{self, Error, Result};
use crate::nn::{init_model, loss_and_grad, sgd_step_range, Example, LossSpec, ModelSpec, ModelState, ParamVec, SgdConfig};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    #[serde(default)]
    pub shuffle_seed: u64,
}

impl LocalTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return error::config("epochs must be >= 1");
        }
        if self.batch_size == 0 {
            return error::config("batch_size must be >= 1");
        }
        self.sgd.validate()
    }

    pub fn with_seed(mut self, shuffle_seed: u64) -> Self {
        self.shuffle_seed = shuffle_seed;
        self
    }
}

/// Options for the generic mini-batch loop shared by local training and
/// adaptation.
pub(crate) struct TrainLoop<'a> {
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    pub shuffle_seed: u64,
    pub loss: LossSpec<'a>,
    /// Parameters allowed to change; everything else stays bit-identical.
    pub trainable: Option<Range<usize>>,
}

/// Per-epoch mean training loss of a run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub epoch_losses: Vec<f64>,
}

pub(crate) fn run_train_loop(start: &ModelState, train: &[Example], opts: &TrainLoop<'_>) -> Result<(ModelState, TrainHistory)> {
    if train.is_empty() {
        return error::input("empty training set");
    }
    opts.sgd.validate()?;
    let mut model = start.clone();
    let n = model.params.len();
    let trainable = opts.trainable.clone().unwrap_or(0..n);
    let mut momentum = ParamVec::zeros(n);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = rng::rng_from_seed(opts.shuffle_seed);
    let mut history = TrainHistory::default();
    // A plain gradient step on the EWC quadratic diverges once
    // lr * lambda * F_i > 2. Instead the penalty is applied as an exact
    // proximal step after the cross-entropy update, which is stable for any
    // lambda and leaves lambda = 0 identical to plain cross-entropy.
    let prox = match opts.loss {
        LossSpec::Ewc { lambda, fisher, anchor } if lambda > 0.0 => {
            if fisher.len() != n || anchor.len() != n {
                return error::input("EWC fisher/anchor length differs from the model");
            }
            Some((lambda, fisher, anchor))
        }
        _ => None,
    };

    for epoch in 0..opts.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(opts.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            let diverged = |reason: String| Error::Training { epoch, reason };
            let (loss, grad) = match prox {
                Some(_) => loss_and_grad(&model, &batch, &LossSpec::CrossEntropy),
                None => loss_and_grad(&model, &batch, &opts.loss),
            }
            .map_err(|e| match e {
                Error::Numeric(msg) => diverged(msg),
                other => other,
            })?;
            let loss = match prox {
                Some((lambda, fisher, anchor)) => loss + ewc_penalty(&model.params, lambda, fisher, anchor),
                None => loss,
            };
            sgd_step_range(&mut model, &grad, &opts.sgd, &mut momentum, trainable.clone()).map_err(|e| match e {
                Error::Numeric(msg) => diverged(msg),
                other => other,
            })?;
            if let Some((lambda, fisher, anchor)) = prox {
                let params = model.params.as_mut_slice();
                for i in trainable.clone() {
                    let k = opts.sgd.lr * lambda * fisher[i];
                    params[i] = (params[i] + k * anchor[i]) / (1.0 + k);
                }
            }
            if !model.params.is_finite() {
                return Err(diverged("parameters became non-finite".into()));
            }
            loss_sum += loss;
            batches += 1;
        }
        let mean = loss_sum / batches as f64;
        if !mean.is_finite() {
            return Err(Error::Training {
                epoch,
                reason: "non-finite loss".into(),
            });
        }
        history.epoch_losses.push(mean);
    }
    Ok((model, history))
}

fn ewc_penalty(params: &ParamVec, lambda: f64, fisher: &ParamVec, anchor: &ParamVec) -> f64 {
    params
        .iter()
        .zip(fisher.iter().zip(anchor.iter()))
        .map(|(p, (f, a))| 0.5 * lambda * f * (p - a) * (p - a))
        .sum()
}

/// Trains a copy of `global` on the participant's training split with
/// cross-entropy mini-batch SGD. The batch order is reshuffled every epoch.
pub fn local_train(global: &ModelState, data: &ParticipantData, cfg: &LocalTrainConfig) -> Result<ModelState> {
    local_train_with_history(global, data, cfg).map(|(m, _)| m)
}

pub fn local_train_with_history(global: &ModelState, data: &ParticipantData, cfg: &LocalTrainConfig) -> Result<(ModelState, TrainHistory)> {
    cfg.validate()?;
    run_train_loop(
        global,
        &data.train,
        &TrainLoop {
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            sgd: cfg.sgd,
            shuffle_seed: cfg.shuffle_seed,
            loss: LossSpec::CrossEntropy,
            trainable: None,
        },
    )
}

/// A model trained from scratch on one participant's data only.
pub fn train_local_baseline(spec: &ModelSpec, data: &ParticipantData, cfg: &LocalTrainConfig, init_seed: u64) -> Result<ModelState> {
    let init = init_model(spec, init_seed)?;
    local_train(&init, data, cfg)
}
