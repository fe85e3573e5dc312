//! File formats: binary checkpoints, TOML run configuration, and
//! line-delimited sample, metric and sweep records.

mod checkpoint;
mod config;
mod records;

pub use checkpoint::{config_digest, write_atomic, Checkpoint, CheckpointKind, NamedTensors, MAGIC, VERSION};
pub use config::{ModelSection, RunConfig, ScheduleKind, ScheduleSection};
pub use records::{read_json_lines, sample_records, sweep_tsv, to_json_lines, write_json_lines, JsonLinesWriter, SampleRecord, SweepRow, SWEEP_COLUMNS};
