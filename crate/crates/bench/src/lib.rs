//! Workload driver for `memoindex`: key corpora, seeded YCSB-style query
//! streams, an ordered-map baseline, CSV reports and the retraining
//! scaling experiment.

pub mod baseline;
pub mod dataset;
pub mod error;
pub mod report;
pub mod runner;
pub mod scaling;
pub mod workload;

pub use baseline::OrderedMapBaseline;
pub use dataset::{load_dataset, synthetic_corpus, write_dataset, Dataset, KeySet};
pub use error::{BenchError, Result};
pub use report::{read_retrain_log, read_summary, report_csv, scaling_csv, SummaryRow};
pub use runner::{run, RetrainRow, RunConfig, RunReport, TargetKind};
pub use scaling::{run_scaling, scaling_key, ScalingConfig, ScalingPoint};
pub use workload::{generate_stream, Distribution, InsertOrder, Mix, Query, Stop, WorkloadSpec};
