//! Perplexity, sublayer timing, plan comparison and sweep reports.

mod overlap;
mod perplexity;
mod profile;
mod report;
mod stream;
mod sweep;

pub use overlap::{plan_overlap, PlanOverlap};
pub use perplexity::{evaluate, next_token_nll, perplexity, Evaluation};
pub use profile::{profile_sublayers, SublayerKind, TimingEntry, TimingProfile, MIN_RUNS, WARMUP_RUNS};
pub use report::{merge_reports, LabeledOverlap, MergedReport, ReportInput, ScatterRow};
pub use stream::{random_tokens, TokenStream, TOKEN_FORMAT_VERSION, TOKEN_MAGIC};
pub use sweep::{sweep, Planner, SweepRow, SweepSpec, SweepTable, SWEEP_CSV_HEADER};

/// Schema tag of every report document.
pub const REPORT_SCHEMA: &str = "report/1";
