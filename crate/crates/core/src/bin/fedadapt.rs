use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use fedadapt::data::export_pool;
use fedadapt::harness::{
    emit_reports, evaluate_all, filter_and_retrain, generate_experiment_task, reaggregation_report, run_adaptation_phase, run_federated_training,
    summarize, write_trace_csv, ExperimentConfig, FederatedRun, ParticipantReport, Preset, ReportPaths, SummaryDocument,
};
use fedadapt::{AggregationStrategy, Result, Task};

#[derive(Parser, Debug)]
#[command(name = "fedadapt", version, about = "Federated learning simulator with local adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment configuration (JSON). Overrides --preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed; also reseeds the task generator.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Built-in preset: smoke, paper-qualitative or attack-demo.
    #[arg(long, global = true, default_value = "smoke")]
    preset: String,

    /// Aggregation rule used with --preset.
    #[arg(long, global = true, value_enum, default_value_t = Aggregation::Avg)]
    aggregation: Aggregation,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Also write the generated participant pool to <out>/pool.tsv.
    #[arg(long, global = true)]
    export_pool: bool,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Run federated training; writes trace.csv and model.json.
    Train,
    /// Train, then compare the federated model with local baselines.
    Evaluate,
    /// Train, evaluate and locally adapt for every participant.
    Adapt,
    /// Adapt, then average the adapted models back into one model.
    Reaggregate,
    /// Evaluate, drop participants whose local model wins, retrain.
    FilterRetrain,
    /// Full pipeline with every report.
    Report,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum Aggregation {
    Avg,
    Dp,
    Median,
}

impl From<Aggregation> for AggregationStrategy {
    fn from(a: Aggregation) -> Self {
        match a {
            Aggregation::Avg => AggregationStrategy::Avg,
            Aggregation::Dp => AggregationStrategy::Dp,
            Aggregation::Median => AggregationStrategy::Median,
        }
    }
}

fn load_config(cli: &Cli) -> Result<(ExperimentConfig, String)> {
    let (mut cfg, source) = match &cli.config {
        Some(path) => (ExperimentConfig::from_json_file(path)?, path.display().to_string()),
        None => {
            let preset: Preset = cli.preset.parse()?;
            (preset.config(cli.aggregation.into()), preset.name().to_string())
        }
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    cfg.validate()?;
    Ok((cfg, source))
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn train(cfg: &ExperimentConfig, task: &Task, out: &Path) -> Result<FederatedRun> {
    info!("federated training: {} rounds, {} per round, {}", cfg.rounds, cfg.participants_per_round, cfg.aggregation.strategy);
    let run = run_federated_training(cfg, task)?;
    write_trace_csv(&run.trace, &out.join("trace.csv"))?;
    write_json(&run.global, &out.join("model.json"))?;
    Ok(run)
}

fn summary_doc(cfg: &ExperimentConfig, source: &str, run: &FederatedRun, reports: &[ParticipantReport], failures: usize) -> SummaryDocument {
    SummaryDocument {
        preset_or_config: source.to_string(),
        aggregation: cfg.aggregation.strategy.to_string(),
        master_seed: cfg.master_seed,
        final_global_acc: run.trace.last().map(|r| r.global_acc),
        adaptation_failures: failures,
        summary: summarize(reports),
    }
}

fn execute(cli: &Cli) -> Result<()> {
    let (cfg, source) = load_config(cli)?;
    fs::create_dir_all(&cli.out)?;
    write_json(&cfg, &cli.out.join("config.json"))?;
    let task = generate_experiment_task(&cfg)?;
    if cli.export_pool {
        export_pool(&task.participants, &cli.out.join("pool.tsv"))?;
    }

    let run = train(&cfg, &task, &cli.out)?;
    if cli.command == Command::Train {
        println!("final global accuracy: {:.4}", run.trace.last().map_or(0.0, |r| r.global_acc));
        return Ok(());
    }

    info!("training {} local baselines", task.participants.len());
    let reports = evaluate_all(&cfg, &task, &run.global)?;
    let paths = ReportPaths::in_dir(&cli.out);

    let filter = |reports: &[ParticipantReport]| -> Result<()> {
        let result = filter_and_retrain(&cfg, &task, &run.global, reports)?;
        write_trace_csv(&result.run.trace, &cli.out.join("retrain_trace.csv"))?;
        write_json(&result.summary, &cli.out.join("filter_retrain.json"))?;
        println!(
            "removed {} participants; retained mean accuracy {:.4} -> {:.4}",
            result.summary.removed_ids.len(),
            result.summary.retained_mean_acc_before,
            result.summary.retained_mean_acc_after
        );
        Ok(())
    };

    match cli.command {
        Command::Evaluate | Command::FilterRetrain => {
            let doc = summary_doc(&cfg, &source, &run, &reports, 0);
            emit_reports(&reports, &doc, Some(&run.trace), cfg.bin_width, &paths)?;
            println!("{}", serde_json::to_string_pretty(&doc.summary)?);
            if cli.command == Command::FilterRetrain {
                filter(&reports)?;
            }
        }
        Command::Adapt | Command::Reaggregate | Command::Report => {
            info!("adapting with {} strategies", cfg.adaptation_menu.len());
            let phase = run_adaptation_phase(&cfg, &task, &run.global, &reports)?;
            for (id, err) in &phase.failures {
                log::warn!("participant {id}: adaptation failed: {err}");
            }
            let doc = summary_doc(&cfg, &source, &run, &phase.reports, phase.failures.len());
            emit_reports(&phase.reports, &doc, Some(&run.trace), cfg.bin_width, &paths)?;
            println!("{}", serde_json::to_string_pretty(&doc.summary)?);
            if matches!(cli.command, Command::Reaggregate | Command::Report) {
                if phase.adapted.iter().any(Option::is_some) {
                    let (_, report) = reaggregation_report(&task, &run.global, &phase.adapted, cfg.aggregation.eta)?;
                    write_json(&report, &cli.out.join("reaggregate.json"))?;
                    println!(
                        "re-aggregated {} adapted models: global accuracy {:.4} -> {:.4}",
                        report.models_aggregated, report.global_acc_before, report.global_acc_after
                    );
                } else {
                    log::warn!("no adapted models to re-aggregate");
                }
            }
            if cli.command == Command::Report {
                filter(&phase.reports)?;
            }
        }
        Command::Train => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("error: could not configure thread pool: {e}");
            return ExitCode::FAILURE;
        }
    }
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
