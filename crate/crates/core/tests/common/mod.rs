#![allow(dead_code)]

use fedadapt::data::{ParticipantData, ShiftMode, TaskConfig};
use fedadapt::{init_model, loss_and_grad, Example, LossSpec, ModelSpec, ModelState, ParamVec};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const FD_STEP: f64 = 1e-4;
pub const FD_REL_TOL: f64 = 1e-4;
pub const FD_ABS_FLOOR: f64 = 1e-6;

pub fn random_spec(rng: &mut ChaCha8Rng) -> ModelSpec {
    let input = rng.random_range(1..=5);
    let layers = rng.random_range(0..=2);
    let hidden = (0..layers).map(|_| rng.random_range(1..=6)).collect();
    let classes = rng.random_range(2..=5);
    ModelSpec::new(input, hidden, classes)
}

pub fn random_batch(rng: &mut ChaCha8Rng, spec: &ModelSpec, n: usize) -> Vec<Example> {
    (0..n)
        .map(|_| {
            let x = (0..spec.input_dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            Example::new(x, rng.random_range(0..spec.num_classes))
        })
        .collect()
}

pub fn random_model(rng: &mut ChaCha8Rng, spec: &ModelSpec) -> ModelState {
    init_model(spec, rng.random()).unwrap()
}

pub fn perturbed(rng: &mut ChaCha8Rng, params: &ParamVec, scale: f64) -> ParamVec {
    params.iter().map(|p| p + scale * rng.sample::<f64, _>(StandardNormal)).collect::<Vec<_>>().into()
}

pub fn random_fisher(rng: &mut ChaCha8Rng, len: usize) -> ParamVec {
    (0..len).map(|_| rng.random_range(0.0..2.0)).collect::<Vec<_>>().into()
}

/// Largest per-coordinate mismatch between the analytic gradient and a
/// central difference. Coordinates with a tiny analytic value are compared
/// absolutely, the rest relatively.
pub fn max_gradient_error(model: &ModelState, batch: &[Example], loss: &LossSpec<'_>) -> f64 {
    let (_, grad) = loss_and_grad(model, batch, loss).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..model.params.len() {
        let mut plus = model.clone();
        plus.params[i] += FD_STEP;
        let mut minus = model.clone();
        minus.params[i] -= FD_STEP;
        let (lp, _) = loss_and_grad(&plus, batch, loss).unwrap();
        let (lm, _) = loss_and_grad(&minus, batch, loss).unwrap();
        let numeric = (lp - lm) / (2.0 * FD_STEP);
        let analytic = grad[i];
        let err = if analytic.abs() < FD_ABS_FLOOR {
            (analytic - numeric).abs()
        } else {
            (analytic - numeric).abs() / analytic.abs().max(numeric.abs())
        };
        worst = worst.max(err);
    }
    worst
}

const KINK_MARGIN: f64 = 1e-2;

/// Smallest |z| over every hidden unit and example, by a plain forward pass.
pub fn min_hidden_preactivation(model: &ModelState, batch: &[Example]) -> f64 {
    let p = model.params.as_slice();
    let ranges = model.spec.layer_ranges();
    let mut smallest = f64::INFINITY;
    for ex in batch {
        let mut a = ex.features.clone();
        for (l, (wr, br)) in ranges.iter().enumerate() {
            let n_in = a.len();
            let z: Vec<f64> = p[br.clone()]
                .iter()
                .enumerate()
                .map(|(o, b)| b + (0..n_in).map(|j| p[wr.start + o * n_in + j] * a[j]).sum::<f64>())
                .collect();
            if l + 1 == ranges.len() {
                break;
            }
            smallest = z.iter().fold(smallest, |m, v| m.min(v.abs()));
            a = z.into_iter().map(|v| v.max(0.0)).collect();
        }
    }
    smallest
}

/// One finite-difference instance per loss variant, cycling through them.
/// Returns the worst error and the variant name.
pub fn gradient_instance(seed: u64, variant: usize) -> (f64, &'static str) {
    let mut rng = fedadapt::rng::rng_from_seed(seed);
    let spec = random_spec(&mut rng);
    // Central differences are only valid away from ReLU kinks. Fresh models
    // have zero biases, so jitter every parameter and redraw until no hidden
    // pre-activation sits near 0.
    let (model, batch) = loop {
        let init = random_model(&mut rng, &spec);
        let model = ModelState::new(spec.clone(), perturbed(&mut rng, &init.params, 0.3)).unwrap();
        let batch_len = rng.random_range(1..=6);
        let batch = random_batch(&mut rng, &spec, batch_len);
        if min_hidden_preactivation(&model, &batch) > KINK_MARGIN {
            break (model, batch);
        }
    };
    match variant % 3 {
        0 => (max_gradient_error(&model, &batch, &LossSpec::CrossEntropy), "cross_entropy"),
        1 => {
            let fisher = random_fisher(&mut rng, model.params.len());
            let anchor = perturbed(&mut rng, &model.params, 0.5);
            let lambda = rng.random_range(0.1..10.0);
            let loss = LossSpec::Ewc {
                lambda,
                fisher: &fisher,
                anchor: &anchor,
            };
            (max_gradient_error(&model, &batch, &loss), "ewc")
        }
        _ => {
            let teacher = ModelState::new(spec.clone(), perturbed(&mut rng, &model.params, 0.5)).unwrap();
            let loss = LossSpec::Kd {
                alpha: rng.random_range(0.0..1.0),
                temperature: rng.random_range(0.5..8.0),
                teacher: &teacher,
            };
            (max_gradient_error(&model, &batch, &loss), "kd")
        }
    }
}

/// Small Gaussian-blob task used by property tests.
pub fn small_task_config(seed: u64, pool_size: usize) -> TaskConfig {
    TaskConfig {
        num_classes: 3,
        input_dim: 4,
        pool_size,
        dirichlet_alpha: 1.0,
        samples_min: 30,
        samples_max: 60,
        class_separation: 3.0,
        seed,
        participant_shift: 0.0,
        shifted_fraction: 1.0,
        shift_mode: ShiftMode::Independent,
        train_ratio: 0.9,
        global_test_per_class: 20,
    }
}

pub fn participants(seed: u64, pool_size: usize) -> Vec<ParticipantData> {
    fedadapt::generate_task(&small_task_config(seed, pool_size)).unwrap().participants
}
