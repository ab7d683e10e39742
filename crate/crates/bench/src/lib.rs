//! Continual-learning benchmarks for parameter superposition.

pub mod data;
pub mod error;
pub mod experiment;
pub mod report;
pub mod schedule;
pub mod stream;

pub use data::{fetch, import_idx, import_npm, resolve_data_dir, Dataset, DatasetKind, Split, DATA_DIR_ENV};
pub use error::{BenchError, Result};
pub use experiment::{load_sources, run_experiment, run_for, EvalRecord, ExperimentConfig, RunMetrics, TaskKind};
pub use report::{read_report, summary_line, write_report};
pub use schedule::{ContextSchedule, SchedulePolicy, ScheduleSpec};
pub use stream::{Batch, LabelTask, StreamKind, TaskStream};
