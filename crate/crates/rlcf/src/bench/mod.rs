//! Synthetic domain-shift benchmark, metrics, and experiment orchestration.
//!
//! This layer owns everything the `rlcf` command-line tool does: benchmark
//! generation (`genbench`), checkpoint pretraining (`pretrain`), objective
//! comparisons on a fixed sample stream (`run`), grid sweeps (`sweep`), and
//! aggregation with optional SVG charts (`report`).

pub mod config;
pub mod experiment;
pub mod gen;
pub mod metrics;
pub mod report;

pub use config::RunConfig;
pub use experiment::{cmd_genbench, cmd_pretrain, cmd_sweep, prepare, run_experiment, Assets};
pub use gen::{gen_benchmark, BenchVariant, BenchmarkSpec, RetrievalSet, ShiftBenchmark};
pub use metrics::{caption_attribute_f1, ece, recall_at_k, MetricsReport};
pub use report::cmd_report;
