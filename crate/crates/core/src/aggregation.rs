//! Server-side aggregation rules and the model-replacement update.

use std::cmp::Ordering;
use std::fmt;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{self, Error, Result};
use crate::nn::ParamVec;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum AggregationStrategy {
    /// Federated averaging.
    Avg,
    /// Averaging of L2-clipped updates plus Gaussian noise.
    Dp,
    /// Coordinate-wise median of the submitted models.
    Median,
}

impl fmt::Display for AggregationStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AggregationStrategy::Avg => "AVG",
            AggregationStrategy::Dp => "DP",
            AggregationStrategy::Median => "MEDIAN",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregationConfig {
    pub strategy: AggregationStrategy,
    pub eta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_bound: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_sigma: Option<f64>,
}

impl AggregationConfig {
    pub fn avg(eta: f64) -> Self {
        AggregationConfig {
            strategy: AggregationStrategy::Avg,
            eta,
            clip_bound: None,
            noise_sigma: None,
        }
    }

    pub fn dp(eta: f64, clip_bound: f64, noise_sigma: f64) -> Self {
        AggregationConfig {
            strategy: AggregationStrategy::Dp,
            eta,
            clip_bound: Some(clip_bound),
            noise_sigma: Some(noise_sigma),
        }
    }

    pub fn median(eta: f64) -> Self {
        AggregationConfig {
            strategy: AggregationStrategy::Median,
            eta,
            clip_bound: None,
            noise_sigma: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return error::config(format!("eta must be finite and >= 0, got {}", self.eta));
        }
        if self.strategy == AggregationStrategy::Dp {
            match (self.clip_bound, self.noise_sigma) {
                (Some(s), Some(sigma)) => {
                    if !(s > 0.0) {
                        return error::config("DP clip_bound must be > 0");
                    }
                    if !(sigma >= 0.0 && sigma.is_finite()) {
                        return error::config("DP noise_sigma must be finite and >= 0");
                    }
                }
                _ => return error::config("DP aggregation needs clip_bound and noise_sigma"),
            }
        }
        Ok(())
    }
}

/// A participant's locally trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalUpdate {
    pub participant_id: usize,
    pub params: ParamVec,
}

/// Scales `delta` into the L2 ball of radius `clip_bound`.
pub fn clip_update(delta: &ParamVec, clip_bound: f64) -> ParamVec {
    let norm = delta.l2_norm();
    if norm <= clip_bound || norm == 0.0 {
        return delta.clone();
    }
    let scale = clip_bound / norm;
    delta.iter().map(|v| v * scale).collect::<Vec<_>>().into()
}

fn median_of(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(|a, b| a.total_cmp(b));
    let m = values.len();
    if m % 2 == 1 {
        values[m / 2]
    } else {
        (values[m / 2 - 1] + values[m / 2]) / 2.0
    }
}

fn canonical_order(updates: &[LocalUpdate]) -> Vec<&LocalUpdate> {
    let mut sorted: Vec<&LocalUpdate> = updates.iter().collect();
    sorted.sort_by(|a, b| {
        a.participant_id.cmp(&b.participant_id).then_with(|| {
            a.params
                .iter()
                .zip(b.params.iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| *o != Ordering::Equal)
                .unwrap_or(Ordering::Equal)
        })
    });
    sorted
}

/// Combines the round's local models into the next global model.
///
/// Updates are summed in ascending participant-id order, so the result does
/// not depend on the order of `updates`. DP noise is drawn from a stream
/// seeded by `noise_seed` and added once to the averaged clipped sum.
pub fn aggregate(global_prev: &ParamVec, updates: &[LocalUpdate], cfg: &AggregationConfig, noise_seed: u64) -> Result<ParamVec> {
    cfg.validate()?;
    if updates.is_empty() {
        return error::input("no updates to aggregate");
    }
    let n = global_prev.len();
    if let Some(bad) = updates.iter().find(|u| u.params.len() != n) {
        return error::input(format!(
            "update from participant {} has length {}, global model has {}",
            bad.participant_id,
            bad.params.len(),
            n
        ));
    }
    let m = updates.len() as f64;
    let ordered = canonical_order(updates);
    let g = global_prev.as_slice();

    let next: Vec<f64> = match cfg.strategy {
        AggregationStrategy::Avg => {
            let mut sum = vec![0.0; n];
            for u in &ordered {
                for (s, (p, gi)) in sum.iter_mut().zip(u.params.iter().zip(g)) {
                    *s += p - gi;
                }
            }
            g.iter().zip(&sum).map(|(gi, s)| gi + cfg.eta / m * s).collect()
        }
        AggregationStrategy::Dp => {
            let clip_bound = cfg.clip_bound.expect("validated");
            let sigma = cfg.noise_sigma.expect("validated");
            let mut sum = vec![0.0; n];
            for u in &ordered {
                let clipped = clip_update(&u.params.sub(global_prev), clip_bound);
                for (s, d) in sum.iter_mut().zip(clipped.iter()) {
                    *s += d;
                }
            }
            let mut out: Vec<f64> = g.iter().zip(&sum).map(|(gi, s)| gi + cfg.eta / m * s).collect();
            if sigma > 0.0 {
                let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(format!("bad noise sigma: {e}")))?;
                let mut noise_rng = rng::rng_from_seed(noise_seed);
                for v in out.iter_mut() {
                    *v += normal.sample(&mut noise_rng);
                }
            }
            out
        }
        AggregationStrategy::Median => {
            let mut column = vec![0.0; ordered.len()];
            (0..n)
                .map(|j| {
                    for (slot, u) in column.iter_mut().zip(&ordered) {
                        *slot = u.params[j];
                    }
                    let med = median_of(&mut column);
                    g[j] + cfg.eta * (med - g[j])
                })
                .collect()
        }
    };

    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("aggregate is not finite".into()));
    }
    Ok(next.into())
}

/// Local model whose delta is `(m / eta) * (target - global)`: averaged with
/// `m - 1` zero deltas under `eta`, it turns the global model into `target`.
pub fn craft_replacement_update(
    participant_id: usize,
    global_prev: &ParamVec,
    target: &ParamVec,
    m: usize,
    eta: f64,
) -> Result<LocalUpdate> {
    if global_prev.len() != target.len() {
        return error::input("target and global model lengths differ");
    }
    if !(eta > 0.0) {
        return error::config("eta must be > 0 to craft a replacement update");
    }
    let scale = m as f64 / eta;
    let params: Vec<f64> = global_prev
        .iter()
        .zip(target.iter())
        .map(|(g, x)| g + scale * (x - g))
        .collect();
    Ok(LocalUpdate {
        participant_id,
        params: params.into(),
    })
}
