//! End-to-end experiment orchestration.
//!
//! The pipeline is: federated training, per-participant comparison against
//! locally trained baselines, local adaptation, and the two follow-up
//! analyses (re-aggregating adapted models, and retraining without the
//! participants that had no incentive to join).
//!
//! Every random choice is drawn from a named stream derived from the
//! master seed, and parallel work is collected in participant order, so a
//! run is bit-reproducible regardless of the thread count.

mod config;
mod report;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{standard_menu, AttackConfig, ExperimentConfig, Preset};
pub use report::{
    emit_reports, improvement_bins, read_participants_csv, summarize, write_participants_csv, write_trace_csv, ExperimentSummary,
    ImprovementBin, ReportPaths, SummaryDocument,
};

use crate::adaptation::{best_adaptation, AdaptationStrategy};
use crate::aggregation::{aggregate, craft_replacement_update, AggregationConfig, LocalUpdate};
use crate::data::{generate_task, participant_accuracy, plain_accuracy, ParticipantData, Task};
use crate::error::{self, Error, Result};
use crate::nn::{init_model, ModelState};
use crate::rng::{derive_seed, stream_rng};
use crate::training::{local_train, train_local_baseline};

/// Global-holdout accuracy after one round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub global_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederatedRun {
    pub global: ModelState,
    pub trace: Vec<RoundRecord>,
}

/// Per-participant accuracies. Adaptation fields stay empty until the
/// adaptation phase fills them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantReport {
    pub id: usize,
    pub acc_local_baseline: f64,
    pub acc_federated: f64,
    pub acc_adapted: Option<f64>,
    pub best_strategy: Option<AdaptationStrategy>,
    pub delta_adapted_vs_local: Option<f64>,
    pub delta_adapted_vs_federated: Option<f64>,
    pub data_size: usize,
    pub data_complexity: f64,
}

impl ParticipantReport {
    pub fn local_beats_federated(&self) -> bool {
        self.acc_local_baseline > self.acc_federated
    }

    fn set_adapted(&mut self, acc: f64, strategy: AdaptationStrategy) {
        self.acc_adapted = Some(acc);
        self.best_strategy = Some(strategy);
        self.delta_adapted_vs_local = Some(acc - self.acc_local_baseline);
        self.delta_adapted_vs_federated = Some(acc - self.acc_federated);
    }
}

pub fn generate_experiment_task(cfg: &ExperimentConfig) -> Result<Task> {
    cfg.validate()?;
    generate_task(&cfg.task)
}

/// Federated training over the whole pool, seeded by `cfg.master_seed`.
pub fn run_federated_training(cfg: &ExperimentConfig, task: &Task) -> Result<FederatedRun> {
    let pool: Vec<usize> = task.participants.iter().map(|p| p.id).collect();
    train_on_pool(cfg, task, &pool, cfg.master_seed)
}

/// Federated training restricted to `pool` with an explicit seed. At most
/// `pool.len()` participants are selected per round.
pub fn train_on_pool(cfg: &ExperimentConfig, task: &Task, pool: &[usize], seed: u64) -> Result<FederatedRun> {
    cfg.validate()?;
    if pool.is_empty() {
        return error::config("participant pool is empty");
    }
    let participants: Vec<&ParticipantData> = pool
        .iter()
        .map(|&id| task.participant(id).ok_or_else(|| Error::Config(format!("participant {id} is not in the task"))))
        .collect::<Result<_>>()?;
    let spec = cfg.model_spec();
    let m = cfg.participants_per_round.min(participants.len());
    let mut global = init_model(&spec, derive_seed(seed, "init", &[]))?;
    let target = match &cfg.attack {
        Some(attack) => Some(init_model(&spec, attack.target_seed)?),
        None => None,
    };
    let is_malicious = |id: usize| cfg.attack.as_ref().is_some_and(|a| a.malicious_ids.contains(&id));
    let mut trace = Vec::with_capacity(cfg.rounds);

    for round in 1..=cfg.rounds {
        let mut sampler = stream_rng(seed, "sampling", &[round as u64]);
        let mut selected: Vec<&ParticipantData> = index::sample(&mut sampler, participants.len(), m)
            .into_iter()
            .map(|i| participants[i])
            .collect();
        selected.sort_by_key(|p| p.id);

        let updates: Vec<LocalUpdate> = selected
            .par_iter()
            .map(|p| {
                if is_malicious(p.id) {
                    let x = target.as_ref().expect("attack target");
                    craft_replacement_update(p.id, &global.params, &x.params, m, cfg.aggregation.eta)
                } else {
                    let local_cfg = cfg
                        .local
                        .with_seed(derive_seed(seed, "shuffle", &[cfg.local.shuffle_seed, round as u64, p.id as u64]));
                    local_train(&global, p, &local_cfg).map(|model| LocalUpdate {
                        participant_id: p.id,
                        params: model.params,
                    })
                }
            })
            .collect::<Result<_>>()
            .map_err(|e| Error::Round {
                round,
                source: Box::new(e),
            })?;

        let noise_seed = derive_seed(seed, "dp-noise", &[round as u64]);
        let params = aggregate(&global.params, &updates, &cfg.aggregation, noise_seed).map_err(|e| Error::Round {
            round,
            source: Box::new(e),
        })?;
        global = ModelState::new(spec.clone(), params)?;
        trace.push(RoundRecord {
            round,
            global_acc: plain_accuracy(&global, &task.global_test)?,
        });
    }
    Ok(FederatedRun { global, trace })
}

/// Trains every participant's local baseline and returns its accuracy, in
/// pool order. Baselines depend only on the task, the baseline config and
/// the master seed, so they can be shared across aggregation rules.
pub fn compute_baselines(cfg: &ExperimentConfig, task: &Task) -> Result<Vec<f64>> {
    let spec = cfg.model_spec();
    task.participants
        .par_iter()
        .map(|p| {
            let train_cfg = cfg.baseline.with_seed(derive_seed(
                cfg.master_seed,
                "baseline-shuffle",
                &[cfg.baseline.shuffle_seed, p.id as u64],
            ));
            let init_seed = derive_seed(cfg.master_seed, "baseline-init", &[p.id as u64]);
            let model = train_local_baseline(&spec, p, &train_cfg, init_seed)?;
            participant_accuracy(&model, p, cfg.metric, &task.global_test)
        })
        .collect()
}

/// Pre-adaptation reports given precomputed baseline accuracies.
pub fn evaluate_federated(cfg: &ExperimentConfig, task: &Task, global: &ModelState, baseline_accs: &[f64]) -> Result<Vec<ParticipantReport>> {
    if baseline_accs.len() != task.participants.len() {
        return error::input("one baseline accuracy per participant is required");
    }
    task.participants
        .par_iter()
        .zip(baseline_accs.par_iter())
        .map(|(p, &acc_local)| {
            Ok(ParticipantReport {
                id: p.id,
                acc_local_baseline: acc_local,
                acc_federated: participant_accuracy(global, p, cfg.metric, &task.global_test)?,
                acc_adapted: None,
                best_strategy: None,
                delta_adapted_vs_local: None,
                delta_adapted_vs_federated: None,
                data_size: p.data_size(),
                data_complexity: p.class_entropy(),
            })
        })
        .collect()
}

/// Trains all baselines and compares them with `global` for every participant.
pub fn evaluate_all(cfg: &ExperimentConfig, task: &Task, global: &ModelState) -> Result<Vec<ParticipantReport>> {
    let baselines = compute_baselines(cfg, task)?;
    evaluate_federated(cfg, task, global, &baselines)
}

#[derive(Debug, Clone)]
pub struct AdaptationPhase {
    pub reports: Vec<ParticipantReport>,
    /// Best adapted model per participant (`None` when the menu is empty or
    /// every strategy failed).
    pub adapted: Vec<Option<ModelState>>,
    pub failures: Vec<(usize, String)>,
}

/// Runs the adaptation menu for every participant and fills in the
/// adaptation fields of `reports`. Failures are recorded, not fatal.
pub fn run_adaptation_phase(cfg: &ExperimentConfig, task: &Task, global: &ModelState, reports: &[ParticipantReport]) -> Result<AdaptationPhase> {
    if reports.len() != task.participants.len() {
        return error::input("reports do not match the participant pool");
    }
    let mut reports = reports.to_vec();
    if cfg.adaptation_menu.is_empty() {
        return Ok(AdaptationPhase {
            adapted: vec![None; reports.len()],
            reports,
            failures: Vec::new(),
        });
    }
    let outcomes: Vec<Result<_>> = task
        .participants
        .par_iter()
        .map(|p| {
            let seed = derive_seed(cfg.master_seed, "adapt", &[p.id as u64]);
            best_adaptation(global, p, &cfg.adaptation_menu, seed, cfg.metric, &task.global_test)
        })
        .collect();
    let mut adapted = Vec::with_capacity(reports.len());
    let mut failures = Vec::new();
    for (report, outcome) in reports.iter_mut().zip(outcomes) {
        match outcome {
            Ok(best) => {
                report.set_adapted(best.accuracy, best.strategy);
                adapted.push(Some(best.model));
            }
            Err(e) => {
                failures.push((report.id, e.to_string()));
                adapted.push(None);
            }
        }
    }
    Ok(AdaptationPhase {
        reports,
        adapted,
        failures,
    })
}

/// Averages adapted models as if they were one round of updates from
/// `global_prev` with aggregation rate `eta`.
pub fn reaggregate_adapted(global_prev: &ModelState, adapted: &[ModelState], eta: f64) -> Result<ModelState> {
    if adapted.is_empty() {
        return error::input("no adapted models to aggregate");
    }
    let updates: Vec<LocalUpdate> = adapted
        .iter()
        .enumerate()
        .map(|(i, m)| {
            if m.spec != global_prev.spec {
                return error::input("adapted model architecture differs from the global model");
            }
            Ok(LocalUpdate {
                participant_id: i,
                params: m.params.clone(),
            })
        })
        .collect::<Result<_>>()?;
    let params = aggregate(&global_prev.params, &updates, &AggregationConfig::avg(eta), 0)?;
    ModelState::new(global_prev.spec.clone(), params)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReaggregationReport {
    pub models_aggregated: usize,
    pub eta: f64,
    pub global_acc_before: f64,
    pub global_acc_after: f64,
}

pub fn reaggregation_report(task: &Task, global: &ModelState, adapted: &[Option<ModelState>], eta: f64) -> Result<(ModelState, ReaggregationReport)> {
    let models: Vec<ModelState> = adapted.iter().flatten().cloned().collect();
    let merged = reaggregate_adapted(global, &models, eta)?;
    let report = ReaggregationReport {
        models_aggregated: models.len(),
        eta,
        global_acc_before: plain_accuracy(global, &task.global_test)?,
        global_acc_after: plain_accuracy(&merged, &task.global_test)?,
    };
    Ok((merged, report))
}

/// Comparison of the original federated model with one retrained without the
/// participants whose local baseline beat it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterRetrainSummary {
    pub retrain_seed: u64,
    pub removed_ids: Vec<usize>,
    pub retained_ids: Vec<usize>,
    pub retained_mean_acc_before: f64,
    pub retained_mean_acc_after: f64,
    pub removed_mean_acc_before: Option<f64>,
    pub removed_mean_acc_after: Option<f64>,
    pub global_acc_before: f64,
    pub global_acc_after: f64,
}

#[derive(Debug, Clone)]
pub struct FilterRetrainResult {
    pub run: FederatedRun,
    pub summary: FilterRetrainSummary,
}

fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// Removes participants whose local baseline beats the federated model,
/// retrains on the rest with a seed derived from the master seed, and
/// evaluates the new model on both groups.
pub fn filter_and_retrain(cfg: &ExperimentConfig, task: &Task, original_global: &ModelState, reports: &[ParticipantReport]) -> Result<FilterRetrainResult> {
    let (removed, retained): (Vec<&ParticipantReport>, Vec<&ParticipantReport>) = reports.iter().partition(|r| r.local_beats_federated());
    if retained.is_empty() {
        return error::config("every participant was removed; nothing left to retrain on");
    }
    let retained_ids: Vec<usize> = retained.iter().map(|r| r.id).collect();
    let removed_ids: Vec<usize> = removed.iter().map(|r| r.id).collect();
    let retrain_seed = derive_seed(cfg.master_seed, "retrain", &[]);
    let run = train_on_pool(cfg, task, &retained_ids, retrain_seed)?;

    let acc_of = |ids: &[usize]| -> Result<Vec<f64>> {
        ids.par_iter()
            .map(|&id| {
                let p = task.participant(id).ok_or_else(|| Error::Input(format!("unknown participant {id}")))?;
                participant_accuracy(&run.global, p, cfg.metric, &task.global_test)
            })
            .collect()
    };
    let retained_after = acc_of(&retained_ids)?;
    let removed_after = acc_of(&removed_ids)?;
    let retained_before: Vec<f64> = retained.iter().map(|r| r.acc_federated).collect();
    let removed_before: Vec<f64> = removed.iter().map(|r| r.acc_federated).collect();

    let summary = FilterRetrainSummary {
        retrain_seed,
        removed_ids,
        retained_ids,
        retained_mean_acc_before: mean(&retained_before).expect("non-empty"),
        retained_mean_acc_after: mean(&retained_after).expect("non-empty"),
        removed_mean_acc_before: mean(&removed_before),
        removed_mean_acc_after: mean(&removed_after),
        global_acc_before: plain_accuracy(original_global, &task.global_test)?,
        global_acc_after: plain_accuracy(&run.global, &task.global_test)?,
    };
    Ok(FilterRetrainResult { run, summary })
}

/// Everything one full pipeline run produces.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub run: FederatedRun,
    pub phase: AdaptationPhase,
    pub summary: ExperimentSummary,
}

/// Federated training, evaluation and adaptation. Pass `baselines` to reuse
/// baseline accuracies computed for the same task and master seed.
pub fn run_pipeline(cfg: &ExperimentConfig, task: &Task, baselines: Option<&[f64]>) -> Result<PipelineOutput> {
    let run = run_federated_training(cfg, task)?;
    let reports = match baselines {
        Some(b) => evaluate_federated(cfg, task, &run.global, b)?,
        None => evaluate_all(cfg, task, &run.global)?,
    };
    let phase = run_adaptation_phase(cfg, task, &run.global, &reports)?;
    let summary = summarize(&phase.reports);
    Ok(PipelineOutput { run, phase, summary })
}
