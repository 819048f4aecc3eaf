//! Simulator: scenario configuration, the round engine, traces and the
//! metrics derived from them.

pub mod config;
pub mod engine;
pub mod metrics;
pub mod trace;

pub use config::{ConfigError, Mode, ScenarioConfig};
pub use engine::{direct_broadcast_baseline, run, run_with, RunOutput, TraceMode};
pub use metrics::{compute_metrics, RunMetrics};
pub use trace::{Trace, TraceEvent};
