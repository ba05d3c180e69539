use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::overlap::{plan_overlap, PlanOverlap};
use super::sweep::{rows_to_csv, SweepRow, SweepTable};
use super::REPORT_SCHEMA;
use crate::error::{Error, Result};
use crate::importance::{ImportanceReport, IMPORTANCE_CSV_HEADER};
use crate::scoring::{PruningPlan, ScoreTable, PLAN_VERSION, SCORE_CSV_HEADER};

/// One artifact accepted by [`merge_reports`].
#[derive(Debug, Clone, PartialEq)]
pub enum ReportInput {
    Sweep(SweepTable),
    Plan(PruningPlan),
    Scores(ScoreTable),
    Importance(ImportanceReport),
}

impl ReportInput {
    /// Recognizes score and importance tables by their header row and JSON
    /// documents by their version fields.
    pub fn parse(text: &str) -> Result<Self> {
        let first = text.lines().next().unwrap_or_default();
        if first == SCORE_CSV_HEADER {
            return ScoreTable::from_csv(text).map(Self::Scores);
        }
        if first == IMPORTANCE_CSV_HEADER {
            return ImportanceReport::from_csv(text).map(Self::Importance);
        }
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|_| Error::Format("unrecognized report input".into()))?;
        if value.get("version").and_then(|v| v.as_str()) == Some(PLAN_VERSION) {
            return PruningPlan::from_document(text).map(Self::Plan);
        }
        if value.get("schema").and_then(|v| v.as_str()) == Some(REPORT_SCHEMA) {
            return SweepTable::from_document(text).map(Self::Sweep);
        }
        Err(Error::Format("unrecognized report input".into()))
    }

    pub fn layers(&self) -> usize {
        match self {
            ReportInput::Sweep(s) => s.layers,
            ReportInput::Plan(p) => p.layers,
            ReportInput::Scores(s) => s.scores.len(),
            ReportInput::Importance(r) => r.layers.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledOverlap {
    pub a: String,
    pub b: String,
    #[serde(flatten)]
    pub overlap: PlanOverlap,
}

/// Gate-norm against data-driven measures, joined on layer index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub layer: usize,
    pub gate_norm: f64,
    pub imp_attn: f64,
    pub imp_block: f64,
    pub imp_mlp: f64,
    pub norm_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergedReport {
    pub schema: String,
    pub kind: String,
    pub layers: usize,
    pub sweep: Vec<SweepRow>,
    pub overlaps: Vec<LabeledOverlap>,
    pub scatter: Vec<ScatterRow>,
}

impl MergedReport {
    pub fn sweep_csv(&self) -> String {
        rows_to_csv(&self.sweep)
    }

    pub fn overlap_csv(&self) -> String {
        let mut out = String::from("a,b,shared,jaccard,only_a,only_b\n");
        let join = |v: &[usize]| v.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(" ");
        for o in &self.overlaps {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                o.a,
                o.b,
                o.overlap.shared,
                o.overlap.jaccard,
                join(&o.overlap.only_a),
                join(&o.overlap.only_b)
            );
        }
        out
    }

    pub fn scatter_csv(&self) -> String {
        let mut out = String::from("layer,gate_norm,imp_attn,imp_block,imp_mlp,norm_ratio\n");
        for r in &self.scatter {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.layer, r.gate_norm, r.imp_attn, r.imp_block, r.imp_mlp, r.norm_ratio
            );
        }
        out
    }

    pub fn to_document(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Merges labeled artifacts describing models of one depth.
///
/// Sweep rows are concatenated in input order; every pair of plans is
/// compared; the first score table is joined with the first importance table
/// by layer index. When no score table is given, gate-norms recorded in the
/// importance table are used.
pub fn merge_reports(inputs: &[(String, ReportInput)]) -> Result<MergedReport> {
    let (_, first) = inputs.first().ok_or_else(|| Error::contract("nothing to merge"))?;
    let layers = first.layers();
    if let Some((label, other)) = inputs.iter().find(|(_, i)| i.layers() != layers) {
        return Err(Error::contract(format!("{label} describes {} layers, expected {layers}", other.layers())));
    }

    let mut sweep = Vec::new();
    let mut plans = Vec::new();
    let mut scores = None;
    let mut importance = None;
    for (label, input) in inputs {
        match input {
            ReportInput::Sweep(s) => sweep.extend(s.rows.iter().cloned()),
            ReportInput::Plan(p) => plans.push((label, p)),
            ReportInput::Scores(s) => {
                scores.get_or_insert(s);
            }
            ReportInput::Importance(r) => {
                importance.get_or_insert(r);
            }
        }
    }

    let mut overlaps = Vec::new();
    for (i, (la, a)) in plans.iter().enumerate() {
        for (lb, b) in &plans[i + 1..] {
            overlaps.push(LabeledOverlap { a: la.to_string(), b: lb.to_string(), overlap: plan_overlap(a, b)? });
        }
    }

    let scatter = match importance {
        None => Vec::new(),
        Some(imp) => imp
            .layers
            .iter()
            .map(|l| {
                let gate_norm = match scores {
                    Some(s) => Some(s.scores[l.layer - 1].m),
                    None => l.gate_norm,
                };
                let gate_norm = gate_norm
                    .ok_or_else(|| Error::contract(format!("no gate-norm available for layer {}", l.layer)))?;
                Ok(ScatterRow {
                    layer: l.layer,
                    gate_norm,
                    imp_attn: l.imp_attn,
                    imp_block: l.imp_block,
                    imp_mlp: l.imp_mlp,
                    norm_ratio: l.norm_ratio,
                })
            })
            .collect::<Result<_>>()?,
    };

    Ok(MergedReport { schema: REPORT_SCHEMA.into(), kind: "merged".into(), layers, sweep, overlaps, scatter })
}
