//! Trace files, synthetic traces, the prefill/evict/decode pipeline, reports
//! and settings.

pub mod config;
pub mod oracle;
pub mod pipeline;
pub mod report;
pub mod synth;
pub mod trace;

pub use config::{EvalSettings, Overrides};
pub use pipeline::{run_grid, run_pipeline, HeadOutcome, Reference, ReportRow, RunReport};
pub use report::{read_report_csv, read_report_json, write_report_csv, write_report_json};
pub use synth::{generate_trace, Distribution, SyntheticTrace};
pub use trace::{parse_trace, read_trace, write_trace, Trace, TraceDims};
