use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Activation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    LayerNorm,
    RmsNorm,
}

/// Shape and options of a toy decoder-only transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of blocks `L`.
    pub layers: usize,
    /// Hidden width `D`.
    pub dim: usize,
    /// Attention heads `H`; each head has width `D / H`.
    pub heads: usize,
    /// MLP hidden width `F`.
    pub mlp_dim: usize,
    /// Vocabulary size `V`.
    pub vocab: usize,
    /// Longest accepted sequence.
    pub max_seq: usize,
    pub norm: NormKind,
    pub activation: Activation,
    pub causal: bool,
    pub rope: bool,
    #[serde(default = "default_eps")]
    pub norm_eps: f64,
}

fn default_eps() -> f64 {
    1e-5
}

impl Default for ModelConfig {
    /// The desk-scale model used by the planted-suppression experiments.
    fn default() -> Self {
        Self {
            layers: 8,
            dim: 64,
            heads: 4,
            mlp_dim: 256,
            vocab: 256,
            max_seq: 512,
            norm: NormKind::RmsNorm,
            activation: Activation::Gelu,
            causal: true,
            rope: false,
            norm_eps: default_eps(),
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("layers", self.layers),
            ("dim", self.dim),
            ("heads", self.heads),
            ("mlp_dim", self.mlp_dim),
            ("vocab", self.vocab),
            ("max_seq", self.max_seq),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::contract(format!("config field {name} must be positive")));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::contract(format!("dim {} is not divisible by heads {}", self.dim, self.heads)));
        }
        if self.rope && !self.head_dim().is_multiple_of(2) {
            return Err(Error::contract("rotary embeddings need an even head width"));
        }
        if !(self.norm_eps >= 0.0 && self.norm_eps.is_finite()) {
            return Err(Error::contract("norm_eps must be finite and non-negative"));
        }
        Ok(())
    }

    /// Multiply-accumulates of one attention sublayer over `seq` tokens:
    /// four projections plus the logit and value products.
    pub fn attention_macs(&self, seq: usize) -> u64 {
        let (s, d) = (seq as u64, self.dim as u64);
        4 * s * d * d + 2 * s * s * d
    }

    pub fn mlp_macs(&self, seq: usize) -> u64 {
        2 * seq as u64 * self.dim as u64 * self.mlp_dim as u64
    }

    pub fn head_macs(&self, seq: usize) -> u64 {
        seq as u64 * self.dim as u64 * self.vocab as u64
    }
}
