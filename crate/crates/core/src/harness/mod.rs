//! Experiment plumbing: annotation I/O, synthetic situations,
//! cross-validation, density benchmarks and configuration files.

pub mod bench;
pub mod config;
pub mod dataset;
pub mod experiment;
pub mod synthetic;

pub use bench::{bench_density, BenchReport, BenchRow, LinearFit};
pub use config::load_config;
pub use dataset::{load_annotations, parse_annotations, save_annotations, Dataset, Provenance};
pub use experiment::{cross_validate, fold_partition, EpisodeSummary, ExperimentOutput, ExperimentReport, MethodReport};
pub use synthetic::{generate_synthetic, SyntheticParams};
