//! Runs the paper-qualitative preset under all three aggregation rules and
//! prints one line per rule. Environment variables override preset fields,
//! e.g. `SEEDS=1,2,3 SIGMA=0.02 cargo run --release --example sweep`.

use std::env;
use std::time::Instant;

use fedadapt::harness::{compute_baselines, generate_experiment_task, run_pipeline, Preset};
use fedadapt::{AggregationConfig, AggregationStrategy};

fn var(name: &str) -> Option<f64> {
    env::var(name).ok().map(|v| v.parse().unwrap())
}

fn main() {
    let seeds: Vec<u64> = env::var("SEEDS").unwrap_or("1".into()).split(',').map(|s| s.parse().unwrap()).collect();
    for seed in seeds {
        let mut base = Preset::PaperQualitative.config(AggregationStrategy::Avg).with_seed(seed);
        if let Some(v) = var("DIM") { base.task.input_dim = v as usize; }
        if let Some(v) = var("SEP") { base.task.class_separation = v; }
        if let Some(v) = var("SHIFT") { base.task.participant_shift = v; }
        if let Some(v) = var("ALPHA") { base.task.dirichlet_alpha = v; }
        if let Some(v) = var("HID") { base.hidden_dims = vec![v as usize]; }
        if let Some(v) = var("ROUNDS") { base.rounds = v as usize; }
        if let Some(v) = var("LR") { base.local.sgd.lr = v; }
        if let Some(v) = var("BLR") { base.baseline.sgd.lr = v; }
        if let Some(v) = var("BEP") { base.baseline.epochs = v as usize; }
        if let Some(v) = var("AEP") { for a in &mut base.adaptation_menu { a.epochs = v as usize; } }
        if let Some(v) = var("ALR") { for a in &mut base.adaptation_menu { a.sgd.lr = if a.strategy == fedadapt::AdaptationStrategy::Kd { v / 36.0 } else { v }; } }
        if let Some(v) = var("FRAC") { base.task.shifted_fraction = v; }
        if let Some(v) = var("SMIN") { base.task.samples_min = v as usize; }
        if let Some(v) = var("SMAX") { base.task.samples_max = v as usize; }
        if let Some(v) = var("M") { base.participants_per_round = v as usize; }
        if let Some(v) = var("LEP") { base.local.epochs = v as usize; }
        let dp = Preset::PaperQualitative.config(AggregationStrategy::Dp).aggregation;
        let s = var("S").or(dp.clip_bound).unwrap();
        let sigma = var("SIGMA").or(dp.noise_sigma).unwrap();
        let t = Instant::now();
        let task = generate_experiment_task(&base).unwrap();
        let baselines = compute_baselines(&base, &task).unwrap();
        println!("seed {seed} baselines {:.1}s", t.elapsed().as_secs_f64());
        let mut res = vec![];
        for agg in [AggregationConfig::avg(1.0), AggregationConfig::dp(1.0, s, sigma), AggregationConfig::median(1.0)] {
            let t = Instant::now();
            let cfg = base.clone().with_aggregation(agg);
            let out = run_pipeline(&cfg, &task, Some(&baselines)).unwrap();
            let sm = &out.summary;
            res.push((sm.mean_federated_acc, sm.frac_local_beats_federated));
            println!(
                "  {:6} glob {:.3} fed {:.3} loc {:.3} adapt {:.3} | locwin {:.2} -> {:.2} | {:?} {:.1}s",
                agg.strategy.to_string(),
                out.run.trace.last().unwrap().global_acc,
                sm.mean_federated_acc,
                sm.mean_local_acc,
                sm.mean_adapted_acc.unwrap_or(0.0),
                sm.frac_local_beats_federated,
                sm.frac_local_beats_adapted.unwrap_or(0.0),
                sm.strategy_counts.values().collect::<Vec<_>>(),
                t.elapsed().as_secs_f64()
            );
        }
        let ok = res[0].0 >= res[1].0 && res[1].0 >= res[2].0 && res[0].1 <= res[1].1 && res[1].1 <= res[2].1;
        println!("  VERDICT {}", if ok { "PASS" } else { "fail" });
    }
}
