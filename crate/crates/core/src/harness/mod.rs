//! Experiment configs, the run loop, metrics CSVs, checkpoints, sweeps and
//! the self-check suite behind the `dni` binary.

mod checkpoint;
mod config;
mod metrics;
mod run;
mod sweep;
mod verify;

pub use checkpoint::{container_info, decode, encode, load, save, Checkpoint, ContainerInfo, MAGIC, VERSION};
pub use config::*;
pub use metrics::{MetricsRow, MetricsWriter};
pub use run::{checkpoint_path, load_data, metrics_path, run, Data, Mean, RunOptions, RunSummary, TrainerState, CHECKPOINT_FILE, METRICS_FILE};
pub use sweep::{sweep, ManifestEntry, SweepManifest, SweepSpec, SweepValues, UniformGrid, MANIFEST_FILE};
pub use verify::{check_names, verify, CheckResult, Fault, VerifyReport};
