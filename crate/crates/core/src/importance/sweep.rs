use serde::{Deserialize, Serialize};

use super::attn_importance;
use crate::error::{Error, Result};
use crate::scoring::{gate_norm, ScoreMode};
use crate::sim::{CaptureFlags, Model, ModelConfig, PlanApplication, Suppression};

/// One model in a `W_q` scaling sweep, measured at the swept layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    /// Factor applied to `W_q`.
    pub t: f64,
    /// Whole-matrix gate-norm of the swept layer.
    pub m: f64,
    pub imp_centered: f64,
    pub imp_uncentered: f64,
}

const CAPTURE: CaptureFlags =
    CaptureFlags { inputs: true, attn_out: false, post_attn: true, mlp_out: false, logits: false };

/// For each `t`, builds the seeded model with layer `layer`'s `W_q` scaled by
/// `t` and measures its gate-norm and attention importance over `sequences`.
pub fn scaling_sweep(
    config: &ModelConfig,
    seed: u64,
    layer: usize,
    scales: &[f64],
    sequences: &[Vec<u32>],
) -> Result<Vec<SweepPoint>> {
    if layer == 0 || layer > config.layers {
        return Err(Error::contract(format!("sweep layer {layer} outside 1..={}", config.layers)));
    }
    scales
        .iter()
        .map(|&t| {
            let model = Model::<f32>::init_random(config, seed, &Suppression(vec![(layer, t)]))?;
            let block = &model.blocks[layer - 1];
            let m = gate_norm(&block.wq, &block.wk, ScoreMode::Whole)?;
            let plan = PlanApplication::none(config.layers);
            let traces = sequences.iter().map(|s| model.forward(s, &plan, CAPTURE)).collect::<Result<Vec<_>>>()?;
            Ok(SweepPoint {
                t,
                m,
                imp_centered: attn_importance(&traces, None, true)?[layer - 1],
                imp_uncentered: attn_importance(&traces, None, false)?[layer - 1],
            })
        })
        .collect()
}
