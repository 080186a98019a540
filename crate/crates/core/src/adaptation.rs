//! Local adaptation of a trained federated model to one participant.
//!
//! Four strategies are supported:
//!
//! - `FT`: fine-tune every parameter with cross-entropy.
//! - `FB`: freeze the base and fine-tune only the output layer.
//! - `MTL`: fine-tune with an elastic-weight-consolidation penalty that
//!   anchors each parameter to the federated model, weighted by its
//!   diagonal Fisher information.
//! - `KD`: distill from the frozen federated model (teacher) into a copy of
//!   itself (student) while also fitting the local labels.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{participant_accuracy, AccuracyMetric, ParticipantData};
use crate::error::{self, Error, Result};
use crate::nn::{example_ce_grad, ModelState, ParamVec, Scratch, SgdConfig};
use crate::nn::{log_softmax, LossSpec};
use crate::rng;
use crate::training::{run_train_loop, TrainHistory, TrainLoop};

/// Adaptation strategies, in tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum AdaptationStrategy {
    Ft,
    Fb,
    Mtl,
    Kd,
}

impl AdaptationStrategy {
    pub const ALL: [AdaptationStrategy; 4] = [
        AdaptationStrategy::Ft,
        AdaptationStrategy::Fb,
        AdaptationStrategy::Mtl,
        AdaptationStrategy::Kd,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            AdaptationStrategy::Ft => "FT",
            AdaptationStrategy::Fb => "FB",
            AdaptationStrategy::Mtl => "MTL",
            AdaptationStrategy::Kd => "KD",
        }
    }
}

impl fmt::Display for AdaptationStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for AdaptationStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AdaptationStrategy::ALL
            .into_iter()
            .find(|a| a.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Input(format!("unknown adaptation strategy {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptationConfig {
    pub strategy: AdaptationStrategy,
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    /// EWC penalty weight (MTL).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    /// Cross-entropy weight (KD).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    /// Softmax temperature (KD).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    /// Estimate the Fisher diagonal with labels sampled from the model's own
    /// predictive distribution instead of the true labels (MTL).
    #[serde(default)]
    pub fisher_sampled_labels: bool,
}

impl AdaptationConfig {
    fn base(strategy: AdaptationStrategy, epochs: usize, batch_size: usize, sgd: SgdConfig) -> Self {
        AdaptationConfig {
            strategy,
            epochs,
            batch_size,
            sgd,
            lambda: None,
            alpha: None,
            temperature: None,
            fisher_sampled_labels: false,
        }
    }

    pub fn fine_tune(epochs: usize, batch_size: usize, sgd: SgdConfig) -> Self {
        Self::base(AdaptationStrategy::Ft, epochs, batch_size, sgd)
    }

    pub fn freeze_base(epochs: usize, batch_size: usize, sgd: SgdConfig) -> Self {
        Self::base(AdaptationStrategy::Fb, epochs, batch_size, sgd)
    }

    pub fn multi_task(epochs: usize, batch_size: usize, sgd: SgdConfig, lambda: f64) -> Self {
        AdaptationConfig {
            lambda: Some(lambda),
            ..Self::base(AdaptationStrategy::Mtl, epochs, batch_size, sgd)
        }
    }

    pub fn distill(epochs: usize, batch_size: usize, sgd: SgdConfig, alpha: f64, temperature: f64) -> Self {
        AdaptationConfig {
            alpha: Some(alpha),
            temperature: Some(temperature),
            ..Self::base(AdaptationStrategy::Kd, epochs, batch_size, sgd)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return error::config("adaptation epochs and batch_size must be >= 1");
        }
        self.sgd.validate()?;
        match self.strategy {
            AdaptationStrategy::Mtl => match self.lambda {
                Some(l) if l >= 0.0 && l.is_finite() => Ok(()),
                _ => error::config("MTL adaptation needs a finite lambda >= 0"),
            },
            AdaptationStrategy::Kd => match (self.alpha, self.temperature) {
                (Some(a), Some(k)) if (0.0..=1.0).contains(&a) && k > 0.0 && k.is_finite() => Ok(()),
                _ => error::config("KD adaptation needs alpha in [0, 1] and temperature > 0"),
            },
            _ => Ok(()),
        }
    }
}

/// Diagonal of the empirical Fisher information.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherDiag {
    pub values: ParamVec,
}

fn fisher_from_labels(model: &ModelState, data: &ParticipantData, mut label_for: impl FnMut(&[f64], usize) -> usize) -> Result<FisherDiag> {
    if data.train.is_empty() {
        return error::input("empty training set");
    }
    let n = model.params.len();
    let mut scratch = Scratch::new(&model.spec);
    let mut grad = vec![0.0; n];
    let mut acc = vec![0.0; n];
    for ex in &data.train {
        let logits = crate::nn::forward_logits(model, &ex.features)?;
        let label = label_for(&logits, ex.label);
        example_ce_grad(model, ex, label, &mut scratch, &mut grad)?;
        for (a, g) in acc.iter_mut().zip(&grad) {
            *a += g * g;
        }
    }
    let count = data.train.len() as f64;
    Ok(FisherDiag {
        values: acc.into_iter().map(|a| a / count).collect::<Vec<_>>().into(),
    })
}

/// `F_i = mean_n g_{n,i}^2` over the participant's training examples, where
/// `g_n` is the per-example cross-entropy gradient at `model`.
pub fn estimate_fisher_diag(model: &ModelState, data: &ParticipantData) -> Result<FisherDiag> {
    fisher_from_labels(model, data, |_, label| label)
}

/// Fisher diagonal with labels drawn from the model's predictive distribution.
pub fn estimate_fisher_diag_sampled(model: &ModelState, data: &ParticipantData, seed: u64) -> Result<FisherDiag> {
    let mut sampler = rng::stream_rng(seed, "fisher-labels", &[]);
    let mut logp = Vec::new();
    fisher_from_labels(model, data, |logits, _| {
        log_softmax(logits, 1.0, &mut logp);
        let u: f64 = sampler.random();
        let mut acc = 0.0;
        for (c, lp) in logp.iter().enumerate() {
            acc += lp.exp();
            if u < acc {
                return c;
            }
        }
        logp.len() - 1
    })
}

/// Adapts a copy of `federated` to `data`. `seed` drives batch shuffling
/// (and label sampling for the sampled Fisher variant).
pub fn adapt(federated: &ModelState, data: &ParticipantData, cfg: &AdaptationConfig, seed: u64) -> Result<ModelState> {
    adapt_with_history(federated, data, cfg, seed).map(|(m, _)| m)
}

pub fn adapt_with_history(
    federated: &ModelState,
    data: &ParticipantData,
    cfg: &AdaptationConfig,
    seed: u64,
) -> Result<(ModelState, TrainHistory)> {
    adapt_from(federated, federated, data, cfg, seed)
}

/// As [`adapt_with_history`], but training starts from `start` instead of
/// the federated model. The federated model still serves as the frozen-base
/// source for FB, the anchor and Fisher point for MTL, and the teacher for KD.
pub fn adapt_from(
    start: &ModelState,
    federated: &ModelState,
    data: &ParticipantData,
    cfg: &AdaptationConfig,
    seed: u64,
) -> Result<(ModelState, TrainHistory)> {
    cfg.validate()?;
    if start.spec != federated.spec {
        return error::input("start and federated models have different architectures");
    }
    if !federated.params.is_finite() || !start.params.is_finite() {
        return error::input("start or federated model has non-finite parameters");
    }
    if data.train.is_empty() {
        return error::input("empty training set");
    }
    let fisher;
    let (loss, trainable) = match cfg.strategy {
        AdaptationStrategy::Ft => (LossSpec::CrossEntropy, None),
        AdaptationStrategy::Fb => (LossSpec::CrossEntropy, Some(federated.spec.output_layer_range())),
        AdaptationStrategy::Mtl => {
            fisher = if cfg.fisher_sampled_labels {
                estimate_fisher_diag_sampled(federated, data, seed)?
            } else {
                estimate_fisher_diag(federated, data)?
            };
            (
                LossSpec::Ewc {
                    lambda: cfg.lambda.expect("validated"),
                    fisher: &fisher.values,
                    anchor: &federated.params,
                },
                None,
            )
        }
        AdaptationStrategy::Kd => (
            LossSpec::Kd {
                alpha: cfg.alpha.expect("validated"),
                temperature: cfg.temperature.expect("validated"),
                teacher: federated,
            },
            None,
        ),
    };
    let mut start = start.clone();
    if let Some(head) = &trainable {
        // Frozen coordinates always come from the federated model.
        let (p, f) = (start.params.as_mut_slice(), federated.params.as_slice());
        p[..head.start].copy_from_slice(&f[..head.start]);
        p[head.end..].copy_from_slice(&f[head.end..]);
    }
    run_train_loop(
        &start,
        &data.train,
        &TrainLoop {
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            sgd: cfg.sgd,
            shuffle_seed: seed,
            loss,
            trainable,
        },
    )
    .map_err(|e| Error::Adaptation {
        strategy: cfg.strategy.to_string(),
        source: Box::new(e),
    })
}

/// Outcome of running an adaptation menu for one participant.
#[derive(Debug, Clone, PartialEq)]
pub struct BestAdaptation {
    pub model: ModelState,
    pub strategy: AdaptationStrategy,
    pub accuracy: f64,
    /// Accuracy of every menu entry that trained successfully, in menu order.
    pub candidates: Vec<(AdaptationStrategy, f64)>,
}

/// Runs every config in `configs` and keeps the most accurate result. Ties
/// go to the earlier strategy in FT < FB < MTL < KD order, then to the
/// earlier menu entry. Failed strategies are skipped as long as one succeeds.
pub fn best_adaptation(
    federated: &ModelState,
    data: &ParticipantData,
    configs: &[AdaptationConfig],
    seed: u64,
    metric: AccuracyMetric,
    global_test: &[crate::nn::Example],
) -> Result<BestAdaptation> {
    if configs.is_empty() {
        return error::input("adaptation menu is empty");
    }
    let mut best: Option<(ModelState, AdaptationStrategy, f64)> = None;
    let mut candidates = Vec::with_capacity(configs.len());
    let mut first_error = None;
    for cfg in configs {
        let model = match adapt(federated, data, cfg, seed) {
            Ok(m) => m,
            Err(e) => {
                log::warn!("participant {}: {e}", data.id);
                first_error.get_or_insert(e);
                continue;
            }
        };
        let acc = participant_accuracy(&model, data, metric, global_test)?;
        candidates.push((cfg.strategy, acc));
        let better = match &best {
            None => true,
            Some((_, strategy, best_acc)) => acc > *best_acc || (acc == *best_acc && cfg.strategy < *strategy),
        };
        if better {
            best = Some((model, cfg.strategy, acc));
        }
    }
    match best {
        Some((model, strategy, accuracy)) => Ok(BestAdaptation {
            model,
            strategy,
            accuracy,
            candidates,
        }),
        None => Err(first_error.expect("at least one config ran")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_model, Example, ModelSpec};

    fn data() -> ParticipantData {
        let train = vec![
            Example::new(vec![1.0, 0.5], 0),
            Example::new(vec![-0.5, 1.5], 1),
            Example::new(vec![0.2, -1.0], 2),
            Example::new(vec![1.1, 0.1], 0),
        ];
        let test = vec![Example::new(vec![0.9, 0.4], 0)];
        ParticipantData::new(3, train, test, 3).unwrap()
    }

    fn model() -> ModelState {
        init_model(&ModelSpec::new(2, vec![4], 3), 11).unwrap()
    }

    #[test]
    fn zero_gradient_model_has_zero_fisher() {
        // A zero model still has output-bias gradients, so use a model whose
        // only nonzero parameters are huge correct-class biases.
        let spec = ModelSpec::new(2, vec![], 2);
        let mut m = ModelState::zeros(spec).unwrap();
        m.params[4] = 1e3;
        let d = ParticipantData::new(0, vec![Example::new(vec![0.0, 0.0], 0); 3], vec![Example::new(vec![0.0, 0.0], 0)], 2).unwrap();
        let f = estimate_fisher_diag(&m, &d).unwrap();
        assert!(f.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fisher_of_one_example_is_squared_gradient() {
        let m = model();
        let ex = Example::new(vec![0.3, -0.7], 1);
        let d = ParticipantData::new(0, vec![ex.clone()], vec![ex.clone()], 3).unwrap();
        let (_, g) = crate::nn::loss_and_grad(&m, &[ex], &LossSpec::CrossEntropy).unwrap();
        let f = estimate_fisher_diag(&m, &d).unwrap();
        for (fi, gi) in f.values.iter().zip(g.iter()) {
            assert!((fi - gi * gi).abs() < 1e-15);
        }
    }

    #[test]
    fn fisher_squares_before_averaging() {
        // Single-layer model with zero weights: per-example gradient of the
        // output bias is softmax - onehot; examples with labels 0 and 1 on a
        // 2-class zero model give bias gradients g and -g.
        let spec = ModelSpec::new(1, vec![], 2);
        let m = ModelState::zeros(spec).unwrap();
        let train = vec![Example::new(vec![0.0], 0), Example::new(vec![0.0], 1)];
        let d = ParticipantData::new(0, train, vec![Example::new(vec![0.0], 0)], 2).unwrap();
        let f = estimate_fisher_diag(&m, &d).unwrap();
        // g = [-0.5, 0.5] on the biases, zero on the weights (input is 0).
        assert_eq!(f.values.as_slice(), &[0.0, 0.0, 0.25, 0.25]);
    }

    #[test]
    fn sampled_fisher_is_nonnegative_and_seeded() {
        let m = model();
        let a = estimate_fisher_diag_sampled(&m, &data(), 5).unwrap();
        assert_eq!(a, estimate_fisher_diag_sampled(&m, &data(), 5).unwrap());
        assert!(a.values.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn zero_lr_fine_tune_is_identity() {
        let m = model();
        let out = adapt(&m, &data(), &AdaptationConfig::fine_tune(5, 2, SgdConfig::plain(0.0)), 1).unwrap();
        assert_eq!(out, m);
    }

    #[test]
    fn freeze_base_keeps_base_layers() {
        let m = model();
        let sgd = SgdConfig {
            lr: 0.2,
            momentum: 0.9,
            weight_decay: 0.0005,
        };
        let out = adapt(&m, &data(), &AdaptationConfig::freeze_base(10, 2, sgd), 1).unwrap();
        let top = m.spec.output_layer_range();
        assert_eq!(&out.params.as_slice()[..top.start], &m.params.as_slice()[..top.start]);
        assert_ne!(&out.params.as_slice()[top.clone()], &m.params.as_slice()[top]);
    }

    #[test]
    fn mtl_with_zero_lambda_is_fine_tuning() {
        let m = model();
        let sgd = SgdConfig::plain(0.1);
        let ft = adapt(&m, &data(), &AdaptationConfig::fine_tune(6, 3, sgd), 7).unwrap();
        let mtl = adapt(&m, &data(), &AdaptationConfig::multi_task(6, 3, sgd, 0.0), 7).unwrap();
        assert_eq!(ft, mtl);
    }

    #[test]
    fn kd_alpha_one_matches_rescaled_fine_tuning() {
        let m = model();
        let k = 6.0;
        let ft = adapt(&m, &data(), &AdaptationConfig::fine_tune(4, 2, SgdConfig::plain(0.1)), 7).unwrap();
        let kd = adapt(
            &m,
            &data(),
            &AdaptationConfig::distill(4, 2, SgdConfig::plain(0.1 / (k * k)), 1.0, k),
            7,
        )
        .unwrap();
        for (a, b) in ft.params.iter().zip(kd.params.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn config_validation() {
        let mut c = AdaptationConfig::multi_task(1, 1, SgdConfig::plain(0.1), 1.0);
        c.lambda = None;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut k = AdaptationConfig::distill(1, 1, SgdConfig::plain(0.1), 0.5, 2.0);
        k.alpha = Some(1.5);
        assert!(k.validate().is_err());
        assert_eq!("kd".parse::<AdaptationStrategy>().unwrap(), AdaptationStrategy::Kd);
    }

    #[test]
    fn best_adaptation_singleton_and_ties() {
        let m = model();
        let d = data();
        let only = [AdaptationConfig::freeze_base(3, 2, SgdConfig::plain(0.1))];
        let best = best_adaptation(&m, &d, &only, 1, AccuracyMetric::Plain, &[]).unwrap();
        assert_eq!(best.strategy, AdaptationStrategy::Fb);

        // Both entries are no-ops, so accuracies tie and FT wins the tie.
        let menu = [
            AdaptationConfig::distill(2, 2, SgdConfig::plain(0.0), 0.5, 2.0),
            AdaptationConfig::fine_tune(2, 2, SgdConfig::plain(0.0)),
        ];
        let best = best_adaptation(&m, &d, &menu, 1, AccuracyMetric::Plain, &[]).unwrap();
        assert_eq!(best.strategy, AdaptationStrategy::Ft);
        assert_eq!(best.model, m);
    }

    #[test]
    fn best_adaptation_skips_failures() {
        let m = model();
        let mut d = data();
        d.train[0].features = vec![1e200, 1e200];
        let menu = [
            AdaptationConfig::fine_tune(3, 1, SgdConfig::plain(1e10)),
            AdaptationConfig::fine_tune(3, 1, SgdConfig::plain(0.0)),
        ];
        let best = best_adaptation(&m, &d, &menu, 1, AccuracyMetric::Plain, &[]).unwrap();
        assert_eq!(best.candidates.len(), 1);
        let err = best_adaptation(&m, &d, &menu[..1], 1, AccuracyMetric::Plain, &[]).unwrap_err();
        assert!(matches!(err, Error::Adaptation { .. }), "{err}");
    }
}
