//! End-to-end acquisition loop, baselines, metrics, λ sweeps and reports.

mod config;
mod metrics;
mod report;
mod run;

pub use config::ExperimentConfig;
pub use metrics::{
    accuracy, binary_auc, evaluate, macro_auc, mean_alignment, Evaluation, MacroAuc, MetricsRecord, Summary,
};
pub use report::{report, sweep_csv, sweep_lambda, ReportFiles, SWEEP_HEADER};
pub use run::{
    checkpoint_path, continue_run, curves_csv, prepare_dataset, run_active_learning, run_experiment,
    run_strategies, selections_csv, selections_path, strategy_tag, train_baseline, write_run_artifacts, Baseline,
    RoundMetrics, RunResult, SelectionRow, CURVES_HEADER, SELECTIONS_HEADER, STATUS_HEADER,
};

/// Aggregate per-seed runs of one strategy into per-round summaries.
pub fn summarize(runs: &[&RunResult]) -> Vec<MetricsRecord> {
    let rounds = runs.iter().map(|r| r.rounds.len()).min().unwrap_or(0);
    (0..rounds)
        .map(|t| {
            let col = |f: fn(&RoundMetrics) -> f64| Summary::of(runs.iter().map(|r| f(&r.rounds[t])).collect());
            MetricsRecord {
                round: t,
                accuracy: col(|m| m.accuracy),
                macro_auc: col(|m| m.macro_auc),
                mean_dice: col(|m| m.mean_dice),
            }
        })
        .collect()
}
