use std::fmt::Write as _;

use super::gate::{gate_norm, GateScore, ScoreMode};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sim::Model;

pub const SCORE_CSV_HEADER: &str = "layer,gate_norm,mode,source_fingerprint";

/// Gate-norms of every layer of an in-memory model.
pub fn score_model<T: Scalar>(model: &Model<T>, mode: ScoreMode) -> Result<Vec<GateScore>> {
    model
        .blocks
        .iter()
        .enumerate()
        .map(|(i, b)| {
            Ok(GateScore { layer: i + 1, m: gate_norm(&b.wq, &b.wk, mode).map_err(|e| e.at_layer(i + 1))?, mode })
        })
        .collect()
}

/// Scores with the fingerprint of what was scored.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub scores: Vec<GateScore>,
    pub source_fingerprint: String,
}

impl ScoreTable {
    pub fn m_values(&self) -> Vec<f64> {
        self.scores.iter().map(|s| s.m).collect()
    }

    /// One row per layer in ascending layer order.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{SCORE_CSV_HEADER}\n");
        for s in &self.scores {
            let _ = writeln!(out, "{},{},{},{}", s.layer, s.m, s.mode, self.source_fingerprint);
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(SCORE_CSV_HEADER) {
            return Err(Error::Format("score table has an unexpected header".into()));
        }
        let bad = |n: usize, what: &str| Error::Format(format!("score table row {n}: {what}"));
        let mut scores = Vec::new();
        let mut fingerprint: Option<String> = None;
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad(n + 1, "expected 4 fields"));
            }
            let layer: usize = f[0].parse().map_err(|_| bad(n + 1, "bad layer index"))?;
            if layer != scores.len() + 1 {
                return Err(bad(n + 1, "layers must be listed in order from 1"));
            }
            let m: f64 = f[1].parse().map_err(|_| bad(n + 1, "bad gate-norm"))?;
            if !(m >= 0.0) {
                return Err(bad(n + 1, "gate-norm must be nonnegative"));
            }
            let mode: ScoreMode = f[2].parse()?;
            if fingerprint.get_or_insert_with(|| f[3].to_owned()) != f[3] {
                return Err(bad(n + 1, "rows disagree on the source fingerprint"));
            }
            scores.push(GateScore { layer, m, mode });
        }
        if scores.is_empty() {
            return Err(Error::Format("score table has no rows".into()));
        }
        Ok(Self { scores, source_fingerprint: fingerprint.unwrap_or_default() })
    }
}
