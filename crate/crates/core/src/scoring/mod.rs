//! Gate-norm scoring and pruning planners.

mod fingerprint;
mod gate;
mod plan;
mod stream;
mod table;

pub use fingerprint::{fingerprint_bytes, fingerprint_source};
pub use gate::{gate_matrix, gate_norm, GateScore, ScoreMode};
pub use plan::{plan_from_importance, plan_one_shot, plan_random, PlanMethod, PruneUnit, PruningPlan, PLAN_VERSION};
pub use stream::{expand_kv_heads, gate_norm_stored, score_checkpoint, ScoreOptions};
pub use table::{score_model, ScoreTable, SCORE_CSV_HEADER};
