//! User-facing surface: dataset generation, victim training, run
//! configuration, and task orchestration.

mod config;
mod dataset;
mod run;
mod target;

pub use config::{apply_override, echo_config, parse_config, RunSpec, Task};
pub use dataset::{make_dataset, DataSource, Dataset, DatasetSpec, Rescale};
pub use run::{compose_report, run, AttackRun, ProxySource};
pub use target::{accuracy, train_target, TargetReport, TargetSpec};
