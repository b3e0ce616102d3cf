//! Experiment orchestration: evaluation loops, runs, sweeps and reports.

mod config;
mod eval;
mod experiment;
mod report;

pub use config::{parse_value, ExperimentConfig, SEED_ENV};
pub use eval::{evaluate, evaluate_traced, evaluate_with, mean_std, EvalOptions};
pub use experiment::{
    blank_report, denoiser_train, evaluate_agent, evaluate_checkpoint, prepare_adversary, run_experiment, run_seed, sweep,
    sweep_name, sweep_preset, train_experiment, training_seconds, write_eval_csv, write_report, TrainedRun, Workspace, BW_PRESET, K_PRESET,
    VERSION,
};
pub use report::{column_rank, median, report_render, Cell, EvalReport, ReportFormat, RunResult, AVERAGE, BOLD_WITHIN};
