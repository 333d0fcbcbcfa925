//! Datasets, mesh ingestion, experiments and the command-line front end.

pub mod cli;
pub mod data;
pub mod experiment;

pub use data::{generate_dataset, ingest_off, Dataset, ShapeKind, SyntheticDatasetSpec};
pub use experiment::{run_experiment, ExperimentConfig, ExperimentReport};
