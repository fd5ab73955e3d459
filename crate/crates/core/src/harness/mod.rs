//! Experiment driver: pretrain, score and select outliers, fine-tune,
//! evaluate, aggregate over seeds.

mod config;
mod eval;
mod report;
mod run;
mod train;

pub use config::{
    AugmentConfig, DataConfig, DataSpecs, ExperimentConfig, MethodConfig, ModelConfig, OodSetConfig,
    OptimConfig, Rung, Schedule, CONFIG_VERSION,
};
pub use eval::{evaluate, Evaluation};
pub use report::{aggregate_csv, grid_csv, read_record, write_run, ReportFormat};
pub use run::{
    choose_outliers, grid_search_sampling, run_experiment, run_experiment_on, Datasets, GridResult, GridRow,
    MethodRecord, RunOutput, RunRecord, SeedRecord, TeacherRecord,
};
pub use train::{finetune, pretrain, sub_seed, EpochLog};
