//! Synthetic data, recall metrics and routing telemetry.

pub mod data;
pub mod metrics;
pub mod report;
pub mod telemetry;

pub use data::{generate_dataset, DataConfig, Domain, SyntheticSample};
pub use metrics::{compute_metrics, MetricsReport};
pub use report::EvalReport;
pub use telemetry::{evaluate, gate_report, GateReport};
