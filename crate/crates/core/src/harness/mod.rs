//! Trace-replay driver: parse or generate traces, run them, report.

pub mod gen;
pub mod report;
pub mod run;
pub mod trace;

pub use gen::{
    compare_with_manifest, gen_workload, GenParams, Manifest, SizeDistribution, Workload,
};
pub use report::{emit_report, ReportFormat};
pub use run::{run_trace, ArenaSize, RunConfig, RunError, RunReport};
pub use trace::{parse_trace, write_trace, TraceEvent};
