use std::collections::BTreeMap;
use std::io::Write;

use super::{write_checkpoint, Dtype, Role, TensorSpec};
use crate::error::{Error, Result};
use crate::sim::{gaussian_into, layer_stream, Model, ModelConfig};

pub use crate::sim::Suppression;

/// Full toy model serialized as a checkpoint. Byte-identical for identical
/// arguments.
pub fn synth_checkpoint(config: &ModelConfig, seed: u64, suppression: &Suppression, dtype: Dtype) -> Result<Vec<u8>> {
    Model::<f32>::init_random(config, seed, suppression)?.to_checkpoint_bytes(dtype)
}

/// Shape of a query/key-only checkpoint used for scoring benchmarks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionShape {
    pub layers: usize,
    /// Model width `D`; query projections are `D x D`.
    pub dim: usize,
    /// Output rows of each key projection; smaller than `dim` for grouped keys.
    pub kv_dim: usize,
}

impl AttentionShape {
    pub fn square(layers: usize, dim: usize) -> Self {
        Self { layers, dim, kv_dim: dim }
    }

    /// Stored bytes of one layer's query and key tensors at `dtype`.
    pub fn pair_bytes(&self, dtype: Dtype) -> u64 {
        ((self.dim + self.kv_dim) * self.dim * dtype.size()) as u64
    }
}

/// Streams a checkpoint holding only query and key projections, drawn exactly
/// as [`Model::init_random`] draws them for the same seed and width.
pub fn synth_attention_checkpoint<W: Write>(
    out: &mut W,
    shape: AttentionShape,
    dtype: Dtype,
    seed: u64,
    suppression: &Suppression,
) -> Result<u64> {
    if shape.layers == 0 || shape.dim == 0 || shape.kv_dim == 0 {
        return Err(Error::contract("attention shape needs positive sizes"));
    }
    suppression.validate(shape.layers)?;
    let d = shape.dim;
    let mut specs = Vec::with_capacity(2 * shape.layers);
    for i in 0..shape.layers {
        specs.push(TensorSpec::new(format!("model.layers.{i}.self_attn.q_proj.weight"), dtype, &[d, d]));
        specs.push(TensorSpec::new(format!("model.layers.{i}.self_attn.k_proj.weight"), dtype, &[shape.kv_dim, d]));
    }
    let std = 1.0 / (d as f64).sqrt();
    let mut draws = Vec::new();
    write_checkpoint(out, &specs, &BTreeMap::new(), |i, buf| {
        let layer = i / 2 + 1;
        draws.clear();
        // draws fill the `D x out` matrix of the x · W convention; files store its transpose
        let cols = if i % 2 == 0 {
            gaussian_into(seed, layer_stream(layer, Role::Query), d * d, std, suppression.factor(layer), &mut draws);
            d
        } else {
            gaussian_into(seed, layer_stream(layer, Role::Key), shape.kv_dim * d, std, 1.0, &mut draws);
            shape.kv_dim
        };
        buf.extend((0..cols).flat_map(|c| (0..d).map(move |r| (r, c))).map(|(r, c)| draws[r * cols + c]));
        Ok(())
    })
}
