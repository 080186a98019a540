//! Synthetic non-iid classification tasks.
//!
//! Every class is an isotropic unit-variance Gaussian blob. Each participant
//! draws its own class mixture from a symmetric Dirichlet distribution and a
//! sample count uniformly from a range, which gives the unbalanced, non-iid
//! pool federated learning is designed for. An optional per-participant
//! shift of the class means produces idiosyncratic "head" participants.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{self, Error, Result};
use crate::nn::{argmax, forward_into, Example, ModelState, Scratch};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub num_classes: usize,
    pub input_dim: usize,
    pub pool_size: usize,
    pub dirichlet_alpha: f64,
    pub samples_min: usize,
    pub samples_max: usize,
    pub class_separation: f64,
    pub seed: u64,
    /// Standard deviation of the per-participant shift added to every class mean.
    #[serde(default)]
    pub participant_shift: f64,
    /// Fraction of the pool that receives a shift; the rest keep the shared means.
    #[serde(default = "default_shifted_fraction")]
    pub shifted_fraction: f64,
    #[serde(default)]
    pub shift_mode: ShiftMode,
    #[serde(default = "default_train_ratio")]
    pub train_ratio: f64,
    /// Examples per class in the balanced global holdout set.
    #[serde(default = "default_global_test_per_class")]
    pub global_test_per_class: usize,
}

/// How shift vectors are drawn for the shifted participants.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftMode {
    /// One vector per participant.
    #[default]
    Independent,
    /// One vector shared by every shifted participant, which then form a
    /// coherent minority group.
    Shared,
}

fn default_shifted_fraction() -> f64 {
    1.0
}

fn default_train_ratio() -> f64 {
    0.9
}

fn default_global_test_per_class() -> usize {
    100
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return error::config(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.input_dim == 0 {
            return error::config("input_dim must be >= 1");
        }
        if self.pool_size == 0 {
            return error::config("pool_size must be >= 1");
        }
        if !(self.dirichlet_alpha > 0.0 && self.dirichlet_alpha.is_finite()) {
            return error::config("dirichlet_alpha must be finite and > 0");
        }
        if self.samples_min > self.samples_max {
            return error::config("samples_min exceeds samples_max");
        }
        if self.samples_min < 10 {
            return error::config("samples_min must be >= 10 so every participant has a test split");
        }
        if !(self.class_separation > 0.0 && self.class_separation.is_finite()) {
            return error::config("class_separation must be finite and > 0");
        }
        if !(self.participant_shift >= 0.0 && self.participant_shift.is_finite()) {
            return error::config("participant_shift must be finite and >= 0");
        }
        if !(0.0..=1.0).contains(&self.shifted_fraction) {
            return error::config("shifted_fraction must lie in [0, 1]");
        }
        if !(self.train_ratio > 0.0 && self.train_ratio < 1.0) {
            return error::config("train_ratio must lie in (0, 1)");
        }
        if self.global_test_per_class == 0 {
            return error::config("global_test_per_class must be >= 1");
        }
        Ok(())
    }
}

/// One participant's local dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantData {
    pub id: usize,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
    /// Class proportions of the training split.
    pub class_ratios: Vec<f64>,
}

impl ParticipantData {
    /// Builds a participant and derives `class_ratios` from `train`.
    pub fn new(id: usize, train: Vec<Example>, test: Vec<Example>, num_classes: usize) -> Result<Self> {
        if train.is_empty() || test.is_empty() {
            return error::input(format!("participant {id} has an empty train or test split"));
        }
        let class_ratios = class_ratios(&train, num_classes)?;
        Ok(ParticipantData {
            id,
            train,
            test,
            class_ratios,
        })
    }

    pub fn data_size(&self) -> usize {
        self.train.len() + self.test.len()
    }

    /// Shannon entropy (nats) of the training class distribution.
    pub fn class_entropy(&self) -> f64 {
        -self
            .class_ratios
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>()
    }
}

pub fn class_ratios(examples: &[Example], num_classes: usize) -> Result<Vec<f64>> {
    if examples.is_empty() {
        return error::input("cannot compute class ratios of an empty set");
    }
    let mut counts = vec![0usize; num_classes];
    for ex in examples {
        if ex.label >= num_classes {
            return error::input(format!("label {} out of range", ex.label));
        }
        counts[ex.label] += 1;
    }
    let n = examples.len() as f64;
    Ok(counts.into_iter().map(|c| c as f64 / n).collect())
}

/// A generated task: class generators, the participant pool and a balanced
/// global holdout disjoint from all participant data.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub config: TaskConfig,
    pub class_means: Vec<Vec<f64>>,
    /// Class mixture each participant drew from the Dirichlet distribution.
    pub mixtures: Vec<Vec<f64>>,
    pub participants: Vec<ParticipantData>,
    pub global_test: Vec<Example>,
}

impl Task {
    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn participant(&self, id: usize) -> Option<&ParticipantData> {
        self.participants.iter().find(|p| p.id == id)
    }
}

fn gaussian_point(rng: &mut ChaCha8Rng, mean: &[f64]) -> Vec<f64> {
    mean.iter()
        .map(|m| m + rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Symmetric Dirichlet draw through normalized Gamma variates.
fn sample_dirichlet(rng: &mut ChaCha8Rng, alpha: f64, k: usize) -> Result<Vec<f64>> {
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Config(format!("bad Dirichlet alpha: {e}")))?;
    let mut draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        draws.iter_mut().for_each(|d| *d /= sum);
    } else {
        // Every Gamma draw underflowed (tiny alpha): all mass on one class.
        let winner = rng.random_range(0..k);
        draws = (0..k).map(|c| if c == winner { 1.0 } else { 0.0 }).collect();
    }
    Ok(draws)
}

fn sample_class(rng: &mut ChaCha8Rng, mixture: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (c, &p) in mixture.iter().enumerate() {
        acc += p;
        if u < acc {
            return c;
        }
    }
    // Rounding left u above the cumulative sum; fall back to the last class with mass.
    mixture.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

fn class_means(rng: &mut ChaCha8Rng, cfg: &TaskConfig) -> Vec<Vec<f64>> {
    let (c, d) = (cfg.num_classes, cfg.input_dim);
    let scale = cfg.class_separation / 2f64.sqrt();
    if d >= c {
        // Scaled one-hot means: every pair is exactly `class_separation` apart.
        (0..c)
            .map(|k| (0..d).map(|j| if j == k { scale } else { 0.0 }).collect())
            .collect()
    } else {
        (0..c)
            .map(|_| {
                let v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                v.into_iter().map(|x| scale * x / norm).collect()
            })
            .collect()
    }
}

/// Shift vector per participant, `None` for unshifted ones. Drawn from its
/// own stream so the shift settings leave the sampled points untouched.
fn participant_shifts(cfg: &TaskConfig) -> Vec<Option<Vec<f64>>> {
    let n = cfg.pool_size;
    if cfg.participant_shift == 0.0 || cfg.shifted_fraction == 0.0 {
        return vec![None; n];
    }
    let mut rng = rng::stream_rng(cfg.seed, "shift", &[]);
    let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..cfg.input_dim)
            .map(|_| cfg.participant_shift * rng.sample::<f64, _>(StandardNormal))
            .collect()
    };
    let k = ((cfg.shifted_fraction * n as f64).round() as usize).min(n);
    let mut shifted = vec![false; n];
    for i in rand::seq::index::sample(&mut rng, n, k) {
        shifted[i] = true;
    }
    let shared = match cfg.shift_mode {
        ShiftMode::Shared => Some(draw(&mut rng)),
        ShiftMode::Independent => None,
    };
    shifted
        .into_iter()
        .map(|on| on.then(|| shared.clone().unwrap_or_else(|| draw(&mut rng))))
        .collect()
}

/// Generates the class generators, participant pool and global holdout.
/// The output is a pure function of `cfg`.
pub fn generate_task(cfg: &TaskConfig) -> Result<Task> {
    cfg.validate()?;
    let mut rng = rng::rng_from_seed(cfg.seed);
    let means = class_means(&mut rng, cfg);
    let mut participants = Vec::with_capacity(cfg.pool_size);
    let mut mixtures = Vec::with_capacity(cfg.pool_size);

    let shifts = participant_shifts(cfg);
    for (id, shift) in shifts.iter().enumerate() {
        let local_means: Vec<Vec<f64>> = match shift {
            Some(shift) => means
                .iter()
                .map(|m| m.iter().zip(shift).map(|(v, s)| v + s).collect())
                .collect(),
            None => means.clone(),
        };
        let mixture = sample_dirichlet(&mut rng, cfg.dirichlet_alpha, cfg.num_classes)?;
        let count = rng.random_range(cfg.samples_min..=cfg.samples_max);
        let samples: Vec<Example> = (0..count)
            .map(|_| {
                let label = sample_class(&mut rng, &mixture);
                Example::new(gaussian_point(&mut rng, &local_means[label]), label)
            })
            .collect();
        let (train, test) = split_participant(samples, cfg.train_ratio)?;
        participants.push(ParticipantData::new(id, train, test, cfg.num_classes)?);
        mixtures.push(mixture);
    }

    let mut global_test = Vec::with_capacity(cfg.num_classes * cfg.global_test_per_class);
    for (label, mean) in means.iter().enumerate() {
        for _ in 0..cfg.global_test_per_class {
            global_test.push(Example::new(gaussian_point(&mut rng, mean), label));
        }
    }

    Ok(Task {
        config: cfg.clone(),
        class_means: means,
        mixtures,
        participants,
        global_test,
    })
}

/// In-order split: the first `ceil(ratio * N)` samples train, the rest test.
pub fn split_participant<T>(mut samples: Vec<T>, ratio: f64) -> Result<(Vec<T>, Vec<T>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return error::input(format!("split ratio must lie in (0, 1), got {ratio}"));
    }
    if samples.len() < 10 {
        return error::input(format!("need at least 10 samples to split, got {}", samples.len()));
    }
    let n_train = (ratio * samples.len() as f64).ceil() as usize;
    if n_train >= samples.len() {
        return error::input("split leaves the test set empty");
    }
    let test = samples.split_off(n_train);
    Ok((samples, test))
}

fn predictions(model: &ModelState, examples: &[Example]) -> Result<Vec<usize>> {
    let mut scratch = Scratch::new(&model.spec);
    examples
        .iter()
        .map(|ex| {
            if ex.features.len() != model.spec.input_dim {
                return error::input("feature dimension mismatch");
            }
            forward_into(model.params.as_slice(), &ex.features, &mut scratch);
            Ok(argmax(scratch.logits()))
        })
        .collect()
}

/// Fraction of examples whose argmax logit equals the label.
pub fn plain_accuracy(model: &ModelState, test: &[Example]) -> Result<f64> {
    if test.is_empty() {
        return error::input("empty test set");
    }
    let preds = predictions(model, test)?;
    let correct = preds.iter().zip(test).filter(|(p, ex)| **p == ex.label).count();
    Ok(correct as f64 / test.len() as f64)
}

/// Per-class accuracy on `global_test`, weighted by `class_ratios`.
pub fn weighted_accuracy(model: &ModelState, global_test: &[Example], class_ratios: &[f64]) -> Result<f64> {
    let c = class_ratios.len();
    let preds = predictions(model, global_test)?;
    let mut total = vec![0usize; c];
    let mut correct = vec![0usize; c];
    for (p, ex) in preds.iter().zip(global_test) {
        if ex.label >= c {
            return Err(Error::Evaluation(format!("label {} out of range", ex.label)));
        }
        total[ex.label] += 1;
        if *p == ex.label {
            correct[ex.label] += 1;
        }
    }
    let mut acc = 0.0;
    for k in 0..c {
        if class_ratios[k] > 0.0 {
            if total[k] == 0 {
                return Err(Error::Evaluation(format!(
                    "global test set has no example of class {k}, which has positive ratio"
                )));
            }
            acc += class_ratios[k] * correct[k] as f64 / total[k] as f64;
        }
    }
    Ok(acc)
}

/// How a participant's accuracy is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccuracyMetric {
    /// Plain accuracy on the participant's own test split.
    #[default]
    Plain,
    /// Global-holdout per-class accuracy weighted by the participant's class ratios.
    ClassWeighted,
}

/// Accuracy of `model` for one participant under `metric`.
pub fn participant_accuracy(
    model: &ModelState,
    participant: &ParticipantData,
    metric: AccuracyMetric,
    global_test: &[Example],
) -> Result<f64> {
    match metric {
        AccuracyMetric::Plain => plain_accuracy(model, &participant.test),
        AccuracyMetric::ClassWeighted => weighted_accuracy(model, global_test, &participant.class_ratios),
    }
}

/// Writes the pool as tab-separated records:
/// `participant_id  split_tag  label  f1,f2,...`.
pub fn export_pool(participants: &[ParticipantData], path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let mut line = String::new();
    for p in participants {
        for (tag, set) in [("train", &p.train), ("test", &p.test)] {
            for ex in set.iter() {
                line.clear();
                write!(line, "{}\t{}\t{}\t", p.id, tag, ex.label).expect("write to string");
                for (j, f) in ex.features.iter().enumerate() {
                    if j > 0 {
                        line.push(',');
                    }
                    write!(line, "{f}").expect("write to string");
                }
                writeln!(out, "{line}")?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads a pool written by [`export_pool`]. Participant order follows first
/// appearance in the file; `class_ratios` are recomputed from the train split.
pub fn import_pool(path: &Path, num_classes: usize) -> Result<Vec<ParticipantData>> {
    let reader = BufReader::new(File::open(path)?);
    let mut order: Vec<usize> = Vec::new();
    let mut sets: Vec<(Vec<Example>, Vec<Example>)> = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let bad = |what: &str| Error::Input(format!("line {}: {what}", lineno + 1));
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(bad("expected 4 tab-separated fields"));
        }
        let id: usize = fields[0].parse().map_err(|_| bad("bad participant id"))?;
        let label: usize = fields[2].parse().map_err(|_| bad("bad label"))?;
        let features = fields[3]
            .split(',')
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| bad("bad feature value"))?;
        let slot = match order.iter().position(|&o| o == id) {
            Some(s) => s,
            None => {
                order.push(id);
                sets.push((Vec::new(), Vec::new()));
                order.len() - 1
            }
        };
        let ex = Example::new(features, label);
        match fields[1] {
            "train" => sets[slot].0.push(ex),
            "test" => sets[slot].1.push(ex),
            _ => return Err(bad("split tag must be train or test")),
        }
    }
    order
        .into_iter()
        .zip(sets)
        .map(|(id, (train, test))| ParticipantData::new(id, train, test, num_classes))
        .collect()
}
