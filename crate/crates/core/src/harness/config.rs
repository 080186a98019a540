use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adaptation::AdaptationConfig;
use crate::aggregation::{AggregationConfig, AggregationStrategy};
use crate::data::{AccuracyMetric, ShiftMode, TaskConfig};
use crate::error::{self, Error, Result};
use crate::nn::{ModelSpec, SgdConfig};
use crate::training::LocalTrainConfig;

/// Malicious participants that submit model-replacement updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub malicious_ids: Vec<usize>,
    /// Seed of the attacker's target model.
    pub target_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: TaskConfig,
    pub hidden_dims: Vec<usize>,
    pub rounds: usize,
    pub participants_per_round: usize,
    pub aggregation: AggregationConfig,
    pub local: LocalTrainConfig,
    pub baseline: LocalTrainConfig,
    #[serde(default)]
    pub adaptation_menu: Vec<AdaptationConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack: Option<AttackConfig>,
    pub master_seed: u64,
    #[serde(default)]
    pub metric: AccuracyMetric,
    /// Width of the accuracy bins in the improvement table.
    #[serde(default = "default_bin_width")]
    pub bin_width: f64,
}

fn default_bin_width() -> f64 {
    0.002
}

impl ExperimentConfig {
    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec::new(self.task.input_dim, self.hidden_dims.clone(), self.task.num_classes)
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.model_spec().validate()?;
        if self.rounds == 0 {
            return error::config("rounds must be >= 1");
        }
        if self.participants_per_round == 0 || self.participants_per_round > self.task.pool_size {
            return error::config(format!(
                "participants_per_round must lie in [1, {}], got {}",
                self.task.pool_size, self.participants_per_round
            ));
        }
        self.aggregation.validate()?;
        self.local.validate()?;
        self.baseline.validate()?;
        for a in &self.adaptation_menu {
            a.validate()?;
        }
        if let Some(attack) = &self.attack {
            if let Some(bad) = attack.malicious_ids.iter().find(|&&id| id >= self.task.pool_size) {
                return error::config(format!("malicious id {bad} is outside the pool"));
            }
        }
        if !(self.bin_width > 0.0) {
            return error::config("bin_width must be > 0");
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets the master seed and reseeds the task generator from it.
    pub fn with_seed(mut self, master_seed: u64) -> Self {
        self.master_seed = master_seed;
        self.task.seed = master_seed;
        self
    }

    pub fn with_aggregation(mut self, aggregation: AggregationConfig) -> Self {
        self.aggregation = aggregation;
        self
    }
}

/// Shipped experiment presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Tiny configuration for quick end-to-end checks.
    Smoke,
    /// Heterogeneous 100-participant, 10-class pool used for the
    /// qualitative reproduction experiments.
    PaperQualitative,
    /// Replacement attack against averaging and median aggregation.
    AttackDemo,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Smoke, Preset::PaperQualitative, Preset::AttackDemo];

    pub fn name(&self) -> &'static str {
        match self {
            Preset::Smoke => "smoke",
            Preset::PaperQualitative => "paper-qualitative",
            Preset::AttackDemo => "attack-demo",
        }
    }

    /// The preset with the given aggregation rule. DP uses the preset's
    /// clipping bound and noise level.
    pub fn config(&self, strategy: AggregationStrategy) -> ExperimentConfig {
        match self {
            Preset::Smoke => smoke(strategy),
            Preset::PaperQualitative => paper_qualitative(strategy),
            Preset::AttackDemo => attack_demo(strategy),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown preset {s:?}")))
    }
}

/// Standard four-strategy menu. KD's learning rate is divided by `K^2`
/// because its cross-entropy term carries a `K^2` factor.
pub fn standard_menu(epochs: usize, batch_size: usize, lr: f64) -> Vec<AdaptationConfig> {
    let sgd = SgdConfig::plain(lr);
    let (alpha, k) = (0.95, 6.0);
    vec![
        AdaptationConfig::fine_tune(epochs, batch_size, sgd),
        AdaptationConfig::freeze_base(epochs, batch_size, sgd),
        AdaptationConfig::multi_task(epochs, batch_size, sgd, 5000.0),
        AdaptationConfig::distill(epochs, batch_size, SgdConfig::plain(lr / (k * k)), alpha, k),
    ]
}

fn aggregation_for(strategy: AggregationStrategy, clip_bound: f64, noise_sigma: f64) -> AggregationConfig {
    match strategy {
        AggregationStrategy::Avg => AggregationConfig::avg(1.0),
        AggregationStrategy::Dp => AggregationConfig::dp(1.0, clip_bound, noise_sigma),
        AggregationStrategy::Median => AggregationConfig::median(1.0),
    }
}

fn smoke(strategy: AggregationStrategy) -> ExperimentConfig {
    ExperimentConfig {
        task: TaskConfig {
            num_classes: 4,
            input_dim: 6,
            pool_size: 20,
            dirichlet_alpha: 0.9,
            samples_min: 30,
            samples_max: 80,
            class_separation: 3.0,
            seed: 1,
            participant_shift: 0.0,
            shifted_fraction: 1.0,
            shift_mode: ShiftMode::Independent,
            train_ratio: 0.9,
            global_test_per_class: 50,
        },
        hidden_dims: vec![8],
        rounds: 50,
        participants_per_round: 5,
        aggregation: aggregation_for(strategy, 1.0, 0.01),
        local: LocalTrainConfig {
            epochs: 2,
            batch_size: 16,
            sgd: SgdConfig::plain(0.1),
            shuffle_seed: 0,
        },
        baseline: LocalTrainConfig {
            epochs: 30,
            batch_size: 16,
            sgd: SgdConfig::plain(0.1),
            shuffle_seed: 0,
        },
        adaptation_menu: standard_menu(10, 16, 0.05),
        attack: None,
        master_seed: 1,
        metric: AccuracyMetric::Plain,
        bin_width: 0.002,
    }
}

fn paper_qualitative(strategy: AggregationStrategy) -> ExperimentConfig {
    ExperimentConfig {
        task: TaskConfig {
            num_classes: 10,
            input_dim: 20,
            pool_size: 100,
            dirichlet_alpha: 0.3,
            samples_min: 150,
            samples_max: 500,
            class_separation: 4.0,
            seed: 1,
            participant_shift: 2.0,
            shifted_fraction: 0.4,
            shift_mode: ShiftMode::Shared,
            train_ratio: 0.9,
            global_test_per_class: 100,
        },
        hidden_dims: vec![32],
        rounds: 500,
        participants_per_round: 10,
        aggregation: aggregation_for(strategy, 0.4, 0.015),
        local: LocalTrainConfig {
            epochs: 2,
            batch_size: 32,
            sgd: SgdConfig::plain(0.1),
            shuffle_seed: 0,
        },
        baseline: LocalTrainConfig {
            epochs: 200,
            batch_size: 32,
            sgd: SgdConfig::plain(0.05),
            shuffle_seed: 0,
        },
        adaptation_menu: standard_menu(30, 32, 0.05),
        attack: None,
        master_seed: 1,
        metric: AccuracyMetric::Plain,
        bin_width: 0.002,
    }
}

fn attack_demo(strategy: AggregationStrategy) -> ExperimentConfig {
    let mut cfg = smoke(strategy);
    cfg.task.pool_size = 22;
    cfg.participants_per_round = 11;
    cfg.rounds = 40;
    cfg.attack = Some(AttackConfig {
        malicious_ids: vec![0],
        target_seed: 99,
    });
    cfg.adaptation_menu.clear();
    cfg
}
