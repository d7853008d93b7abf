//! Small-scale experiments: a toy network, teacher-student tasks, a
//! fine-tuning loop and the sweeps that compare initializations.

pub mod report;
pub mod sweep;
pub mod task;
pub mod toy;
pub mod train;

pub use report::{write_report, ReportFiles};
pub use sweep::{sweep_approx_degree, sweep_distributions, sweep_sigma, SweepConfig, SweepRow, SweepTable};
pub use task::{make_task, Dataset, TaskKind, TaskSpec, Targets};
pub use toy::{HeadSpec, Nonlinearity, ToyLayerSpec, ToyModel, ToyModelSpec};
pub use train::{finetune, EvalPoint, Metric, RunReport, TrainConfig};
