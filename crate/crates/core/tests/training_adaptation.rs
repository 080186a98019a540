mod common;

use common::*;
use fedadapt::adaptation::{adapt_from, best_adaptation};
use fedadapt::data::participant_accuracy;
use fedadapt::harness::standard_menu;
use fedadapt::training::local_train_with_history;
use fedadapt::{
    adapt, forward_logits, init_model, local_train, plain_accuracy, train_local_baseline, AccuracyMetric, AdaptationConfig,
    AdaptationStrategy, LocalTrainConfig, ModelSpec, ModelState, ParticipantData, SgdConfig,
};

fn spec() -> ModelSpec {
    ModelSpec::new(4, vec![8], 3)
}

fn cfg(epochs: usize, lr: f64) -> LocalTrainConfig {
    LocalTrainConfig {
        epochs,
        batch_size: 8,
        sgd: SgdConfig::plain(lr),
        shuffle_seed: 3,
    }
}

/// A model trained on a different participant, standing in for the
/// federated model.
fn foreign_model(pool: &[ParticipantData]) -> ModelState {
    train_local_baseline(&spec(), &pool[0], &cfg(30, 0.05), 17).unwrap()
}

#[test]
fn final_epoch_loss_is_below_first() {
    let pool = participants(21, 24);
    let mut failures = 0;
    for p in &pool {
        let init = init_model(&spec(), p.id as u64).unwrap();
        let (_, hist) = local_train_with_history(&init, p, &cfg(10, 0.05)).unwrap();
        if hist.epoch_losses.last() > hist.epoch_losses.first() {
            failures += 1;
        }
    }
    assert!(failures <= 1, "{failures} of {} participants ended with higher loss", pool.len());
}

#[test]
fn baselines_fit_train_at_least_as_well_as_test() {
    let pool = participants(22, 20);
    let (mut train_acc, mut test_acc) = (0.0, 0.0);
    for p in &pool {
        let model = train_local_baseline(&spec(), p, &cfg(100, 0.1), p.id as u64).unwrap();
        train_acc += plain_accuracy(&model, &p.train).unwrap();
        test_acc += plain_accuracy(&model, &p.test).unwrap();
    }
    assert!(train_acc >= test_acc, "train {train_acc} < test {test_acc}");
}

#[test]
fn local_training_does_not_touch_the_global_model() {
    let pool = participants(23, 2);
    let global = init_model(&spec(), 1).unwrap();
    let before = global.clone();
    let trained = local_train(&global, &pool[0], &cfg(3, 0.1)).unwrap();
    assert_eq!(global, before);
    assert_ne!(trained.params, global.params);
}

#[test]
fn identical_participants_get_identical_baselines() {
    let pool = participants(24, 1);
    let mut twin = pool[0].clone();
    twin.id = 99;
    let a = train_local_baseline(&spec(), &pool[0], &cfg(5, 0.1), 4).unwrap();
    let b = train_local_baseline(&spec(), &twin, &cfg(5, 0.1), 4).unwrap();
    assert_eq!(a, b);
}

#[test]
fn baseline_with_zero_lr_is_the_init() {
    let pool = participants(25, 1);
    let a = train_local_baseline(&spec(), &pool[0], &cfg(5, 0.0), 4).unwrap();
    assert_eq!(a, init_model(&spec(), 4).unwrap());
}

#[test]
fn mtl_distance_shrinks_as_lambda_grows() {
    let pool = participants(26, 8);
    let federated = foreign_model(&pool);
    let sgd = SgdConfig::plain(0.05);
    let mut inversions = 0;
    for p in &pool[1..7] {
        let distances: Vec<f64> = [0.0, 50.0, 5000.0, 5e5]
            .into_iter()
            .map(|lambda| {
                let a = adapt(&federated, p, &AdaptationConfig::multi_task(10, 8, sgd, lambda), 5).unwrap();
                a.params.distance(&federated.params)
            })
            .collect();
        inversions += distances.windows(2).filter(|w| w[1] > w[0]).count();
    }
    assert!(inversions <= 1, "{inversions} inversions");
}

fn mean_kl(teacher: &ModelState, student: &ModelState, data: &ParticipantData, k: f64) -> f64 {
    let softmax = |z: Vec<f64>| {
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| ((v - m) / k).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect::<Vec<_>>()
    };
    let total: f64 = data
        .train
        .iter()
        .map(|ex| {
            let pt = softmax(forward_logits(teacher, &ex.features).unwrap());
            let ps = softmax(forward_logits(student, &ex.features).unwrap());
            pt.iter().zip(&ps).map(|(t, s)| t * (t / s).ln()).sum::<f64>()
        })
        .sum();
    total / data.train.len() as f64
}

#[test]
fn pure_distillation_pulls_the_student_toward_the_teacher() {
    let pool = participants(27, 3);
    let teacher = foreign_model(&pool);
    let k = 2.0;
    let one_epoch = AdaptationConfig::distill(1, 8, SgdConfig::plain(0.2), 0.0, k);
    let mut student = init_model(&spec(), 99).unwrap();
    let mut kls = vec![mean_kl(&teacher, &student, &pool[1], k)];
    for epoch in 0..20 {
        student = adapt_from(&student, &teacher, &pool[1], &one_epoch, epoch).unwrap().0;
        kls.push(mean_kl(&teacher, &student, &pool[1], k));
    }
    let rises = kls.windows(2).filter(|w| w[1] > w[0]).count();
    assert!(rises <= 2, "KL rose in {rises} of 20 epochs: {kls:?}");
    assert!(kls.last().unwrap() < &(0.5 * kls[0]));
}

#[test]
fn every_strategy_leaves_the_federated_model_alone() {
    let pool = participants(28, 2);
    let federated = foreign_model(&pool);
    let before = federated.clone();
    for c in standard_menu(3, 8, 0.05) {
        adapt(&federated, &pool[1], &c, 1).unwrap();
        assert_eq!(federated, before, "{} mutated its input", c.strategy);
    }
}

#[test]
fn freeze_base_keeps_hidden_layers_bit_identical() {
    let pool = participants(29, 2);
    let federated = foreign_model(&pool);
    let fb = adapt(&federated, &pool[1], &AdaptationConfig::freeze_base(5, 8, SgdConfig::plain(0.1)), 2).unwrap();
    let head = federated.spec.output_layer_range();
    for i in 0..head.start {
        assert_eq!(fb.params[i].to_bits(), federated.params[i].to_bits());
    }
    assert_ne!(&fb.params.as_slice()[head.clone()], &federated.params.as_slice()[head]);
}

#[test]
fn best_adaptation_beats_every_menu_entry() {
    let task = fedadapt::generate_task(&small_task_config(30, 6)).unwrap();
    let federated = foreign_model(&task.participants);
    let menu = standard_menu(5, 8, 0.05);
    for p in &task.participants[1..] {
        let best = best_adaptation(&federated, p, &menu, 3, AccuracyMetric::Plain, &task.global_test).unwrap();
        for c in &menu {
            let single = adapt(&federated, p, c, 3).unwrap();
            let acc = participant_accuracy(&single, p, AccuracyMetric::Plain, &task.global_test).unwrap();
            assert!(best.accuracy >= acc);
        }
        assert_eq!(best.accuracy, plain_accuracy(&best.model, &p.test).unwrap());
    }
}

#[test]
fn strategy_order_breaks_ties() {
    let mut all = AdaptationStrategy::ALL.to_vec();
    all.reverse();
    all.sort();
    assert_eq!(all, AdaptationStrategy::ALL.to_vec());
    assert_eq!(AdaptationStrategy::ALL[0], AdaptationStrategy::Ft);
}
