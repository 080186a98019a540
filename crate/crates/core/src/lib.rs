//! Federated learning simulator with differentially private and robust
//! aggregation, per-participant evaluation against local baselines, and
//! local adaptation of the federated model.

pub mod adaptation;
pub mod aggregation;
pub mod data;
pub mod error;
pub mod harness;
pub mod nn;
pub mod rng;
pub mod training;

pub use adaptation::{adapt, best_adaptation, estimate_fisher_diag, AdaptationConfig, AdaptationStrategy, FisherDiag};
pub use aggregation::{aggregate, clip_update, craft_replacement_update, AggregationConfig, AggregationStrategy, LocalUpdate};
pub use data::{generate_task, plain_accuracy, split_participant, weighted_accuracy, AccuracyMetric, ParticipantData, ShiftMode, Task, TaskConfig};
pub use error::{Error, Result};
pub use nn::{forward_logits, init_model, loss_and_grad, sgd_step, Example, LossSpec, ModelSpec, ModelState, ParamVec, SgdConfig};
pub use training::{local_train, train_local_baseline, LocalTrainConfig};
