use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::gate::GateScore;
use crate::error::{Error, Result};
use crate::rng::seeded;

pub const PLAN_VERSION: &str = "plan/1";

/// Stream id for [`plan_random`].
const RANDOM_PLAN_STREAM: u64 = 0x706c_616e;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlanMethod {
    GateNorm,
    DataDrivenAttn,
    DataDrivenBlock,
    RandomAttn,
    RandomBlock,
}

impl PlanMethod {
    pub const ALL: [PlanMethod; 5] = [
        PlanMethod::GateNorm,
        PlanMethod::DataDrivenAttn,
        PlanMethod::DataDrivenBlock,
        PlanMethod::RandomAttn,
        PlanMethod::RandomBlock,
    ];

    pub fn unit(self) -> PruneUnit {
        match self {
            PlanMethod::DataDrivenBlock | PlanMethod::RandomBlock => PruneUnit::FullBlock,
            _ => PruneUnit::AttentionSublayer,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PlanMethod::GateNorm => "gate-norm",
            PlanMethod::DataDrivenAttn => "data-driven-attn",
            PlanMethod::DataDrivenBlock => "data-driven-block",
            PlanMethod::RandomAttn => "random-attn",
            PlanMethod::RandomBlock => "random-block",
        }
    }

    /// Short flag spelling used on the command line.
    pub fn flag(self) -> &'static str {
        match self {
            PlanMethod::GateNorm => "gate-norm",
            PlanMethod::DataDrivenAttn => "data-attn",
            PlanMethod::DataDrivenBlock => "data-block",
            PlanMethod::RandomAttn => "random-attn",
            PlanMethod::RandomBlock => "random-block",
        }
    }
}

impl fmt::Display for PlanMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PlanMethod {
    type Err = Error;

    /// Accepts both the document spelling and the short flag spelling.
    fn from_str(s: &str) -> Result<Self> {
        PlanMethod::ALL
            .into_iter()
            .find(|m| m.as_str() == s || m.flag() == s)
            .ok_or_else(|| Error::Format(format!("unknown plan method {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PruneUnit {
    AttentionSublayer,
    FullBlock,
}

/// Ordered removal decision over layers `1..=layers`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruningPlan {
    pub version: String,
    pub method: PlanMethod,
    pub unit: PruneUnit,
    /// Total layer count `L` of the scored model.
    pub layers: usize,
    /// Removal priority order.
    pub removed: Vec<usize>,
    /// Per-layer scores in layer order, for score-based methods.
    pub scores: Option<Vec<f64>>,
    pub source_fingerprint: String,
    pub seed: Option<u64>,
}

impl PruningPlan {
    pub fn with_fingerprint(mut self, fingerprint: impl Into<String>) -> Self {
        self.source_fingerprint = fingerprint.into();
        self
    }

    pub fn validate(&self, layers: usize) -> Result<()> {
        if self.layers != layers {
            return Err(Error::contract(format!("plan was made for {} layers, model has {layers}", self.layers)));
        }
        if self.unit != self.method.unit() {
            return Err(Error::contract(format!("method {} cannot remove {:?}", self.method, self.unit)));
        }
        let mut seen = BTreeSet::new();
        for &l in &self.removed {
            if l == 0 || l > layers {
                return Err(Error::contract(format!("plan removes layer {l} outside 1..={layers}")));
            }
            if !seen.insert(l) {
                return Err(Error::contract(format!("plan removes layer {l} twice")));
            }
        }
        if let Some(scores) = &self.scores {
            if scores.len() != layers {
                return Err(Error::contract(format!("plan lists {} scores for {layers} layers", scores.len())));
            }
        }
        Ok(())
    }

    /// Pretty JSON with a trailing newline; key order follows the struct.
    pub fn to_document(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("plan serializes");
        s.push('\n');
        s
    }

    pub fn from_document(text: &str) -> Result<Self> {
        let plan: PruningPlan =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("bad plan document: {e}")))?;
        if plan.version != PLAN_VERSION {
            return Err(Error::Format(format!("plan version {:?}, expected {PLAN_VERSION:?}", plan.version)));
        }
        plan.validate(plan.layers)?;
        Ok(plan)
    }
}

fn check_count(n: usize, layers: usize) -> Result<()> {
    if n > layers {
        return Err(Error::contract(format!("cannot remove {n} of {layers} layers")));
    }
    Ok(())
}

/// Indices `1..=L` sorted by ascending score, ties to the lower index.
fn ascending(scores: &[f64]) -> Result<Vec<usize>> {
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::contract(format!("score of layer {} is NaN", i + 1)));
    }
    let mut order: Vec<usize> = (1..=scores.len()).collect();
    order.sort_by(|&a, &b| scores[a - 1].total_cmp(&scores[b - 1]).then(a.cmp(&b)));
    Ok(order)
}

/// Scores keyed by layer, checked to cover `1..=L` exactly once.
fn dense_scores(pairs: impl Iterator<Item = (usize, f64)>, count: usize) -> Result<Vec<f64>> {
    let mut dense = vec![None; count];
    for (layer, s) in pairs {
        if layer == 0 || layer > count {
            return Err(Error::contract(format!("score for layer {layer} outside 1..={count}")));
        }
        if dense[layer - 1].replace(s).is_some() {
            return Err(Error::contract(format!("duplicate score for layer {layer}")));
        }
    }
    Ok(dense.into_iter().map(|s| s.expect("all layers present")).collect())
}

/// Removes the `n` layers with the smallest gate-norm.
pub fn plan_one_shot(scores: &[GateScore], n: usize) -> Result<PruningPlan> {
    let dense = dense_scores(scores.iter().map(|s| (s.layer, s.m)), scores.len())?;
    check_count(n, dense.len())?;
    let mut order = ascending(&dense)?;
    order.truncate(n);
    Ok(PruningPlan {
        version: PLAN_VERSION.into(),
        method: PlanMethod::GateNorm,
        unit: PruneUnit::AttentionSublayer,
        layers: dense.len(),
        removed: order,
        scores: Some(dense),
        source_fingerprint: String::new(),
        seed: None,
    })
}

/// `n` distinct layers drawn uniformly without replacement.
///
/// Draws come from a partial Fisher–Yates shuffle of `1..=L` driven by
/// ChaCha8 seeded with `seed`.
pub fn plan_random(layers: usize, n: usize, unit: PruneUnit, seed: u64) -> Result<PruningPlan> {
    check_count(n, layers)?;
    let mut rng = seeded(seed, RANDOM_PLAN_STREAM);
    let mut pool: Vec<usize> = (1..=layers).collect();
    for i in 0..n {
        let j = rng.random_range(i..layers);
        pool.swap(i, j);
    }
    pool.truncate(n);
    Ok(PruningPlan {
        version: PLAN_VERSION.into(),
        method: match unit {
            PruneUnit::AttentionSublayer => PlanMethod::RandomAttn,
            PruneUnit::FullBlock => PlanMethod::RandomBlock,
        },
        unit,
        layers,
        removed: pool,
        scores: None,
        source_fingerprint: String::new(),
        seed: Some(seed),
    })
}

/// Removes the `n` least important layers by a data-driven measure.
pub fn plan_from_importance(importances: &[(usize, f64)], n: usize, unit: PruneUnit) -> Result<PruningPlan> {
    let dense = dense_scores(importances.iter().copied(), importances.len())?;
    check_count(n, dense.len())?;
    let mut order = ascending(&dense)?;
    order.truncate(n);
    Ok(PruningPlan {
        version: PLAN_VERSION.into(),
        method: match unit {
            PruneUnit::AttentionSublayer => PlanMethod::DataDrivenAttn,
            PruneUnit::FullBlock => PlanMethod::DataDrivenBlock,
        },
        unit,
        layers: dense.len(),
        removed: order,
        scores: Some(dense),
        source_fingerprint: String::new(),
        seed: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::ScoreMode;
    use proptest::prelude::*;

    fn scores(m: &[f64]) -> Vec<GateScore> {
        m.iter().enumerate().map(|(i, &m)| GateScore { layer: i + 1, m, mode: ScoreMode::Whole }).collect()
    }

    #[test]
    fn one_shot_cases() {
        assert_eq!(plan_one_shot(&scores(&[3.0, 1.0, 2.0]), 2).unwrap().removed, vec![2, 3]);
        assert!(plan_one_shot(&scores(&[3.0, 1.0, 2.0]), 0).unwrap().removed.is_empty());
        assert_eq!(plan_one_shot(&scores(&[1.0, 1.0, 5.0]), 1).unwrap().removed, vec![1]);
        assert!(plan_one_shot(&scores(&[1.0, 2.0]), 3).is_err());
        assert!(plan_one_shot(&scores(&[1.0, f64::NAN]), 1).is_err());
        assert_eq!(plan_one_shot(&scores(&[0.0, 0.0, 0.0]), 2).unwrap().removed, vec![1, 2]);

        let mut dup = scores(&[1.0, 2.0]);
        dup[1].layer = 1;
        assert!(plan_one_shot(&dup, 1).is_err());
    }

    #[test]
    fn importance_cases() {
        let eq: Vec<(usize, f64)> = (1..=5).map(|l| (l, 0.5)).collect();
        assert_eq!(plan_from_importance(&eq, 2, PruneUnit::AttentionSublayer).unwrap().removed, vec![1, 2]);
        let inc: Vec<(usize, f64)> = (1..=5).map(|l| (l, l as f64)).collect();
        let plan = plan_from_importance(&inc, 3, PruneUnit::FullBlock).unwrap();
        assert_eq!(plan.removed, vec![1, 2, 3]);
        assert_eq!(plan.method, PlanMethod::DataDrivenBlock);
        assert!(plan_from_importance(&[(1, 0.1), (1, 0.2)], 1, PruneUnit::FullBlock).is_err());
        assert!(plan_from_importance(&[(1, 0.1), (2, 0.2)], 3, PruneUnit::FullBlock).is_err());
        let unordered = [(3, 0.3), (1, 0.9), (2, 0.1)];
        let plan = plan_from_importance(&unordered, 2, PruneUnit::AttentionSublayer).unwrap();
        assert_eq!(plan.removed, vec![2, 3]);
        assert_eq!(plan.scores, Some(vec![0.9, 0.1, 0.3]));
    }

    #[test]
    fn random_cases() {
        let all = plan_random(40, 40, PruneUnit::AttentionSublayer, 9).unwrap();
        let mut sorted = all.removed.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (1..=40).collect::<Vec<_>>());
        assert_eq!(
            plan_random(12, 5, PruneUnit::FullBlock, 3).unwrap(),
            plan_random(12, 5, PruneUnit::FullBlock, 3).unwrap()
        );
        assert_ne!(
            plan_random(12, 5, PruneUnit::FullBlock, 3).unwrap().removed,
            plan_random(12, 5, PruneUnit::FullBlock, 4).unwrap().removed
        );
        assert!(plan_random(3, 4, PruneUnit::FullBlock, 0).is_err());
        assert_eq!(plan_random(3, 0, PruneUnit::AttentionSublayer, 0).unwrap().removed, Vec::<usize>::new());
    }

    #[test]
    fn random_selection_is_uniform() {
        // binomial(10_000, 0.1): sigma = 30
        let mut counts = [0usize; 10];
        for seed in 0..10_000 {
            let plan = plan_random(10, 1, PruneUnit::AttentionSublayer, seed).unwrap();
            counts[plan.removed[0] - 1] += 1;
        }
        for c in counts {
            assert!((c as f64 - 1000.0).abs() <= 90.0, "{counts:?}");
        }
    }

    #[test]
    fn document_round_trip_and_key_order() {
        let plan = plan_one_shot(&scores(&[3.0, 1.0, 2.0]), 2).unwrap().with_fingerprint("sha256:ab");
        let doc = plan.to_document();
        let keys = ["version", "method", "unit", "layers", "removed", "scores", "source_fingerprint", "seed"];
        let positions: Vec<usize> = keys.iter().map(|k| doc.find(&format!("\"{k}\"")).unwrap()).collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]), "{doc}");
        assert!(doc.contains("\"plan/1\"") && doc.contains("\"gate-norm\"") && doc.contains("\"attention-sublayer\""));
        assert_eq!(PruningPlan::from_document(&doc).unwrap(), plan);

        let stale = doc.replace("plan/1", "plan/0");
        assert!(PruningPlan::from_document(&stale).is_err());
        let bad = doc.replace("\"layers\": 3", "\"layers\": 1");
        assert!(PruningPlan::from_document(&bad).is_err());
    }

    proptest! {
        #[test]
        fn one_shot_matches_reference_sort(m in proptest::collection::vec(0u8..6, 1..30), frac in 0.0f64..=1.0) {
            let m: Vec<f64> = m.into_iter().map(f64::from).collect();
            let n = (frac * m.len() as f64) as usize;
            let plan = plan_one_shot(&scores(&m), n).unwrap();
            let mut reference: Vec<(f64, usize)> = m.iter().enumerate().map(|(i, &s)| (s, i + 1)).collect();
            reference.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let expected: Vec<usize> = reference.into_iter().take(n).map(|(_, l)| l).collect();
            prop_assert_eq!(plan.removed, expected);
        }

        #[test]
        fn one_shot_invariant_under_common_rescaling(m in proptest::collection::vec(0.0f64..10.0, 1..20), c in 1e-3f64..1e3) {
            let n = m.len() / 2;
            let scaled: Vec<f64> = m.iter().map(|v| v * c).collect();
            prop_assert_eq!(plan_one_shot(&scores(&m), n).unwrap().removed, plan_one_shot(&scores(&scaled), n).unwrap().removed);
        }
    }
}
