//! Discrete-event simulation of a serving run.
//!
//! Ticks are FPGA cycles. The GPU runs iterations over the batch: a prefill
//! iteration for newly admitted requests, or a decode step of `L` layers.
//! Decode step `q` of a request consumes the KV entry of position `q-1`
//! (whose token was predicted during step `q-1`) and produces token `q`.

mod engine;
pub mod report;
pub mod sweep;

use thiserror::Error;

use crate::config::ConfigError;
use crate::workload::WorkloadError;

pub use engine::{run, run_detailed, run_trace, trace_for, RequestRecord, SimRun};
pub use report::{parse_report, report, ReportError, ReportFormat, SimMetrics, Value, CSV_HEADER};
pub use sweep::{engines_table, sweep_engines, sweep_k, sweep_k_table, EngineRow, SweepKRow};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error("trace file {path}: {msg}")]
    Trace { path: String, msg: String },
    #[error("request {id}: {msg}")]
    Infeasible { id: u64, msg: String },
}
