//! Run configuration, checkpoints and artifact files.

pub mod artifacts;
pub mod checkpoint;
pub mod config;

pub use artifacts::{write_csv, write_grid, write_report, CsvLog, OutputLock};
pub use checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
pub use config::{ModelSection, RunConfig, RunSection, SampleConfig};
