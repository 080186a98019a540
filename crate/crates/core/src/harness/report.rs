//! Summary statistics and report files.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ParticipantReport, RoundRecord};
use crate::adaptation::AdaptationStrategy;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub participants: usize,
    pub mean_federated_acc: f64,
    pub median_federated_acc: f64,
    pub mean_local_acc: f64,
    pub frac_local_beats_federated: f64,
    pub adapted_participants: usize,
    pub mean_adapted_acc: Option<f64>,
    /// Mean of `acc_adapted - acc_federated` over adapted participants.
    pub mean_adaptation_improvement: Option<f64>,
    pub mean_improvement_vs_local: Option<f64>,
    /// Among adapted participants, fraction whose local baseline still wins.
    pub frac_local_beats_adapted: Option<f64>,
    /// How often each strategy was the best one.
    pub strategy_counts: BTreeMap<AdaptationStrategy, usize>,
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Aggregate statistics over participant reports. Depends only on the
/// report values, so it can be recomputed from `participants.csv`.
pub fn summarize(reports: &[ParticipantReport]) -> ExperimentSummary {
    let fed: Vec<f64> = reports.iter().map(|r| r.acc_federated).collect();
    let local: Vec<f64> = reports.iter().map(|r| r.acc_local_baseline).collect();
    let n = reports.len();
    let adapted: Vec<&ParticipantReport> = reports.iter().filter(|r| r.acc_adapted.is_some()).collect();
    let fraction = |count: usize, of: usize| if of == 0 { 0.0 } else { count as f64 / of as f64 };

    let mut strategy_counts: BTreeMap<AdaptationStrategy, usize> = AdaptationStrategy::ALL.iter().map(|&s| (s, 0)).collect();
    for r in &adapted {
        if let Some(s) = r.best_strategy {
            *strategy_counts.entry(s).or_default() += 1;
        }
    }

    let (mean_adapted_acc, mean_adaptation_improvement, mean_improvement_vs_local, frac_local_beats_adapted) = if adapted.is_empty() {
        (None, None, None, None)
    } else {
        let acc: Vec<f64> = adapted.iter().map(|r| r.acc_adapted.unwrap()).collect();
        let d_fed: Vec<f64> = adapted.iter().map(|r| r.delta_adapted_vs_federated.unwrap()).collect();
        let d_loc: Vec<f64> = adapted.iter().map(|r| r.delta_adapted_vs_local.unwrap()).collect();
        let losers = adapted
            .iter()
            .filter(|r| r.acc_local_baseline > r.acc_adapted.unwrap())
            .count();
        (
            Some(mean(&acc)),
            Some(mean(&d_fed)),
            Some(mean(&d_loc)),
            Some(fraction(losers, adapted.len())),
        )
    };

    ExperimentSummary {
        participants: n,
        mean_federated_acc: mean(&fed),
        median_federated_acc: median(&fed),
        mean_local_acc: mean(&local),
        frac_local_beats_federated: fraction(reports.iter().filter(|r| r.local_beats_federated()).count(), n),
        adapted_participants: adapted.len(),
        mean_adapted_acc,
        mean_adaptation_improvement,
        mean_improvement_vs_local,
        frac_local_beats_adapted,
        strategy_counts,
    }
}

/// Mean improvements of participants grouped by local-baseline accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprovementBin {
    pub bin_start: f64,
    pub bin_end: f64,
    pub participants: usize,
    pub mean_improvement_vs_local: f64,
    pub mean_improvement_vs_federated: f64,
    /// Strategy accounting for the largest share of the bin's total
    /// improvement over the federated model.
    pub dominant_strategy: Option<AdaptationStrategy>,
}

/// Bins adapted participants by local-baseline accuracy (`width` wide bins);
/// only non-empty bins are returned, in ascending order.
pub fn improvement_bins(reports: &[ParticipantReport], width: f64) -> Vec<ImprovementBin> {
    let mut bins: BTreeMap<i64, Vec<&ParticipantReport>> = BTreeMap::new();
    for r in reports.iter().filter(|r| r.acc_adapted.is_some()) {
        // Nudge so exact multiples of the width land in their own bin.
        let key = (r.acc_local_baseline / width + 1e-9).floor() as i64;
        bins.entry(key).or_default().push(r);
    }
    bins.into_iter()
        .map(|(key, members)| {
            let vs_local: Vec<f64> = members.iter().map(|r| r.delta_adapted_vs_local.unwrap()).collect();
            let vs_fed: Vec<f64> = members.iter().map(|r| r.delta_adapted_vs_federated.unwrap()).collect();
            let mut share: BTreeMap<AdaptationStrategy, f64> = BTreeMap::new();
            for r in &members {
                if let Some(s) = r.best_strategy {
                    *share.entry(s).or_default() += r.delta_adapted_vs_federated.unwrap();
                }
            }
            let dominant_strategy = share
                .into_iter()
                .fold(None::<(AdaptationStrategy, f64)>, |best, (s, v)| match best {
                    Some((_, bv)) if bv >= v => best,
                    _ => Some((s, v)),
                })
                .map(|(s, _)| s);
            ImprovementBin {
                bin_start: key as f64 * width,
                bin_end: (key + 1) as f64 * width,
                participants: members.len(),
                mean_improvement_vs_local: mean(&vs_local),
                mean_improvement_vs_federated: mean(&vs_fed),
                dominant_strategy,
            }
        })
        .collect()
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryDocument {
    pub preset_or_config: String,
    pub aggregation: String,
    pub master_seed: u64,
    pub final_global_acc: Option<f64>,
    pub adaptation_failures: usize,
    pub summary: ExperimentSummary,
}

#[derive(Debug, Clone)]
pub struct ReportPaths {
    pub participants_csv: PathBuf,
    pub summary_json: PathBuf,
    pub trace_csv: Option<PathBuf>,
    pub bins_csv: Option<PathBuf>,
}

impl ReportPaths {
    pub fn in_dir(dir: &Path) -> Self {
        ReportPaths {
            participants_csv: dir.join("participants.csv"),
            summary_json: dir.join("summary.json"),
            trace_csv: Some(dir.join("trace.csv")),
            bins_csv: Some(dir.join("improvement_bins.csv")),
        }
    }
}

pub fn write_participants_csv(reports: &[ParticipantReport], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in reports {
        w.serialize(r)?;
    }
    if reports.is_empty() {
        w.write_record([
            "id",
            "acc_local_baseline",
            "acc_federated",
            "acc_adapted",
            "best_strategy",
            "delta_adapted_vs_local",
            "delta_adapted_vs_federated",
            "data_size",
            "data_complexity",
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_participants_csv(path: &Path) -> Result<Vec<ParticipantReport>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<_>, _>>()?)
}

pub fn write_trace_csv(trace: &[RoundRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["round", "global_acc"])?;
    for r in trace {
        w.write_record([r.round.to_string(), r.global_acc.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn write_bins_csv(bins: &[ImprovementBin], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "bin_start",
        "bin_end",
        "participants",
        "mean_improvement_vs_local",
        "mean_improvement_vs_federated",
        "dominant_strategy",
    ])?;
    for b in bins {
        w.write_record([
            b.bin_start.to_string(),
            b.bin_end.to_string(),
            b.participants.to_string(),
            b.mean_improvement_vs_local.to_string(),
            b.mean_improvement_vs_federated.to_string(),
            b.dominant_strategy.map(|s| s.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the per-participant CSV, the summary document, and optionally the
/// round trace and the binned improvement table.
pub fn emit_reports(
    reports: &[ParticipantReport],
    summary: &SummaryDocument,
    trace: Option<&[RoundRecord]>,
    bin_width: f64,
    paths: &ReportPaths,
) -> Result<()> {
    for p in [Some(&paths.participants_csv), Some(&paths.summary_json), paths.trace_csv.as_ref(), paths.bins_csv.as_ref()]
        .into_iter()
        .flatten()
    {
        if let Some(dir) = p.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
    }
    write_participants_csv(reports, &paths.participants_csv)?;
    let mut f = fs::File::create(&paths.summary_json)?;
    serde_json::to_writer_pretty(&mut f, summary)?;
    writeln!(f)?;
    if let (Some(trace), Some(path)) = (trace, &paths.trace_csv) {
        write_trace_csv(trace, path)?;
    }
    if let Some(path) = &paths.bins_csv {
        write_bins_csv(&improvement_bins(reports, bin_width), path)?;
    }
    Ok(())
}
