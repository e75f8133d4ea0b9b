//! Benchmark runner, checkpoints and reports.

pub mod bench;
pub mod checkpoint;
pub mod report;

pub use bench::{
    run_bench, run_bench_with, run_clean_eval, run_clean_eval_with, run_fewshot, BenchConfig, BenchError,
    FewShotSweep, Method,
};
pub use checkpoint::{CheckpointError, CheckpointInfo};
pub use report::{MetricReport, ReportRow, RowKey};
