use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::{PruneUnit, PruningPlan};

/// Set comparison of two plans' removed layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanOverlap {
    pub layers: usize,
    pub unit: PruneUnit,
    pub shared: usize,
    /// `|A ∩ B| / |A ∪ B|`, and 1 when both plans remove nothing.
    pub jaccard: f64,
    pub only_a: Vec<usize>,
    pub only_b: Vec<usize>,
}

pub fn plan_overlap(a: &PruningPlan, b: &PruningPlan) -> Result<PlanOverlap> {
    if a.unit != b.unit {
        return Err(Error::contract(format!("plans remove different units: {:?} vs {:?}", a.unit, b.unit)));
    }
    if a.layers != b.layers {
        return Err(Error::contract(format!("plans cover different depths: {} vs {} layers", a.layers, b.layers)));
    }
    let sa: BTreeSet<usize> = a.removed.iter().copied().collect();
    let sb: BTreeSet<usize> = b.removed.iter().copied().collect();
    let shared = sa.intersection(&sb).count();
    let union = sa.union(&sb).count();
    Ok(PlanOverlap {
        layers: a.layers,
        unit: a.unit,
        shared,
        jaccard: if union == 0 { 1.0 } else { shared as f64 / union as f64 },
        only_a: sa.difference(&sb).copied().collect(),
        only_b: sb.difference(&sa).copied().collect(),
    })
}
