use std::cell::OnceCell;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::perplexity::evaluate;
use super::stream::TokenStream;
use super::REPORT_SCHEMA;
use crate::error::{Error, Result};
use crate::importance::ImportanceReport;
use crate::scalar::Scalar;
use crate::scoring::{
    plan_from_importance, plan_one_shot, plan_random, score_model, GateScore, PlanMethod, PruneUnit, PruningPlan,
    ScoreMode,
};
use crate::sim::{CaptureFlags, Model, PlanApplication};

const CALIBRATION_CAPTURE: CaptureFlags =
    CaptureFlags { inputs: true, attn_out: true, post_attn: true, mlp_out: false, logits: false };

/// Builds plans of any method for one model, computing gate-norms,
/// calibration importances and the model fingerprint at most once.
pub struct Planner<'a, T: Scalar> {
    model: &'a Model<T>,
    calibration: &'a TokenStream,
    mode: ScoreMode,
    seed: u64,
    gate: OnceCell<Vec<GateScore>>,
    importance: OnceCell<ImportanceReport>,
    fingerprint: OnceCell<String>,
}

impl<'a, T: Scalar> Planner<'a, T> {
    /// Data-driven methods run the model over every window of `calibration`;
    /// random methods draw with `seed`.
    pub fn new(model: &'a Model<T>, calibration: &'a TokenStream, mode: ScoreMode, seed: u64) -> Self {
        Self {
            model,
            calibration,
            mode,
            seed,
            gate: OnceCell::new(),
            importance: OnceCell::new(),
            fingerprint: OnceCell::new(),
        }
    }

    pub fn gate_scores(&self) -> Result<&[GateScore]> {
        if self.gate.get().is_none() {
            let _ = self.gate.set(score_model(self.model, self.mode)?);
        }
        Ok(self.gate.get().expect("set above"))
    }

    /// Uncentered importances over the calibration windows.
    pub fn importance(&self) -> Result<&ImportanceReport> {
        if self.importance.get().is_none() {
            let plan = PlanApplication::none(self.model.config.layers);
            let traces = self
                .calibration
                .windows()
                .map(|w| self.model.forward(w, &plan, CALIBRATION_CAPTURE))
                .collect::<Result<Vec<_>>>()?;
            let gate: Vec<f64> = self.gate_scores()?.iter().map(|s| s.m).collect();
            let _ = self.importance.set(ImportanceReport::from_traces(&traces, None, false, Some(&gate))?);
        }
        Ok(self.importance.get().expect("set above"))
    }

    pub fn fingerprint(&self) -> Result<&str> {
        if self.fingerprint.get().is_none() {
            let _ = self.fingerprint.set(self.model.fingerprint()?);
        }
        Ok(self.fingerprint.get().expect("set above"))
    }

    pub fn plan(&self, method: PlanMethod, n: usize) -> Result<PruningPlan> {
        let layers = self.model.config.layers;
        let plan = match method {
            PlanMethod::GateNorm => plan_one_shot(self.gate_scores()?, n)?,
            PlanMethod::DataDrivenAttn => {
                plan_from_importance(&self.importance()?.attn_scores(), n, PruneUnit::AttentionSublayer)?
            }
            PlanMethod::DataDrivenBlock => {
                plan_from_importance(&self.importance()?.block_scores(), n, PruneUnit::FullBlock)?
            }
            PlanMethod::RandomAttn => plan_random(layers, n, PruneUnit::AttentionSublayer, self.seed)?,
            PlanMethod::RandomBlock => plan_random(layers, n, PruneUnit::FullBlock, self.seed)?,
        };
        Ok(plan.with_fingerprint(self.fingerprint()?))
    }
}

/// Methods and prune counts to evaluate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub methods: Vec<PlanMethod>,
    pub counts: Vec<usize>,
    pub mode: ScoreMode,
    /// Seed for random planners.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: PlanMethod,
    pub n: usize,
    pub perplexity: f64,
    /// `1 − MACs(pruned) / MACs(unpruned)` over the evaluation stream.
    pub flop_reduction: f64,
    pub removed: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub schema: String,
    pub kind: String,
    pub layers: usize,
    pub baseline_perplexity: f64,
    pub rows: Vec<SweepRow>,
}

pub const SWEEP_CSV_HEADER: &str = "method,n,perplexity,flop_reduction";

impl SweepTable {
    pub fn to_csv(&self) -> String {
        rows_to_csv(&self.rows)
    }

    pub fn to_document(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("sweep serializes");
        s.push('\n');
        s
    }

    pub fn from_document(text: &str) -> Result<Self> {
        let table: Self = serde_json::from_str(text).map_err(|e| Error::Format(format!("bad sweep document: {e}")))?;
        if table.schema != REPORT_SCHEMA || table.kind != "sweep" {
            return Err(Error::Format(format!(
                "expected a {REPORT_SCHEMA} sweep document, found {} {}",
                table.schema, table.kind
            )));
        }
        Ok(table)
    }

    pub fn curve(&self, method: PlanMethod) -> Vec<(usize, f64)> {
        self.rows.iter().filter(|r| r.method == method).map(|r| (r.n, r.perplexity)).collect()
    }
}

pub(crate) fn rows_to_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.method, r.n, r.perplexity, r.flop_reduction);
    }
    out
}

/// Evaluates every `(method, N)` cell of `spec` on `stream`, which also
/// serves as the calibration set for data-driven methods.
pub fn sweep<T: Scalar>(model: &Model<T>, spec: &SweepSpec, stream: &TokenStream) -> Result<SweepTable> {
    let layers = model.config.layers;
    let baseline = evaluate(model, &PlanApplication::none(layers), stream)?;
    let planner = Planner::new(model, stream, spec.mode, spec.seed);
    let mut rows = Vec::with_capacity(spec.methods.len() * spec.counts.len());
    for &method in &spec.methods {
        for &n in &spec.counts {
            let plan = planner.plan(method, n)?;
            let eval = evaluate(model, &PlanApplication::from_plan(&plan, layers)?, stream)?;
            rows.push(SweepRow {
                method,
                n,
                perplexity: eval.perplexity,
                flop_reduction: 1.0 - eval.macs as f64 / baseline.macs as f64,
                removed: plan.removed,
            });
        }
    }
    Ok(SweepTable {
        schema: REPORT_SCHEMA.into(),
        kind: "sweep".into(),
        layers,
        baseline_perplexity: baseline.perplexity,
        rows,
    })
}
