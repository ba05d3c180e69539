use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use super::config::{ModelConfig, NormKind};
use crate::checkpoint::{
    read_tensor, read_vector, write_checkpoint, ByteSource, CheckpointIndex, Dtype, LayerTensorMap, Role, TensorSpec,
};
use crate::error::{Error, Result};
use crate::rng::seeded;
use crate::scalar::Scalar;
use crate::tensor::{transpose, Matrix};

pub const EMBED_NAME: &str = "model.embed_tokens.weight";
pub const FINAL_NORM_NAME: &str = "model.norm.weight";
pub const FINAL_NORM_BIAS_NAME: &str = "model.norm.bias";
pub const HEAD_NAME: &str = "lm_head.weight";
pub const CONFIG_METADATA_KEY: &str = "gatenorm.config";

/// Layers whose query projection is multiplied by a factor at construction.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Suppression(pub Vec<(usize, f64)>);

impl Suppression {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn factor(&self, layer: usize) -> f64 {
        self.0.iter().filter(|(l, _)| *l == layer).fold(1.0, |acc, (_, t)| acc * t)
    }

    pub fn layers(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.0.iter().map(|(l, _)| *l).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn validate(&self, layers: usize) -> Result<()> {
        for &(l, t) in &self.0 {
            if l == 0 || l > layers {
                return Err(Error::contract(format!("suppression layer {l} outside 1..={layers}")));
            }
            if !(t.is_finite() && t >= 0.0) {
                return Err(Error::contract(format!("suppression factor {t} for layer {l} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

impl FromStr for Suppression {
    type Err = Error;

    /// `L:t[,L:t...]`, e.g. `5:1e-3,7:1e-3`. An empty string means none.
    fn from_str(s: &str) -> Result<Self> {
        s.split(',')
            .filter(|p| !p.trim().is_empty())
            .map(|pair| {
                let (l, t) = pair
                    .split_once(':')
                    .ok_or_else(|| Error::Format(format!("expected layer:factor, got {pair:?}")))?;
                let l = l.trim().parse().map_err(|_| Error::Format(format!("bad layer {l:?}")))?;
                let t = t.trim().parse().map_err(|_| Error::Format(format!("bad factor {t:?}")))?;
                Ok((l, t))
            })
            .collect::<Result<Vec<_>>>()
            .map(Suppression)
    }
}

impl fmt::Display for Suppression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|(l, t)| format!("{l}:{t}")).collect();
        f.write_str(&parts.join(","))
    }
}

/// Gain and optional bias of a normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NormParams<T> {
    pub gain: Vec<T>,
    pub bias: Option<Vec<T>>,
}

impl<T: Scalar> NormParams<T> {
    fn unit(dim: usize, kind: NormKind) -> Self {
        Self { gain: vec![T::one(); dim], bias: (kind == NormKind::LayerNorm).then(|| vec![T::zero(); dim]) }
    }
}

/// Parameters of one block, in the `x · W` convention: every projection maps
/// row vectors by right multiplication.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights<T> {
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub wo: Matrix<T>,
    /// `D x F`
    pub w1: Matrix<T>,
    /// `F x D`
    pub w2: Matrix<T>,
    pub attn_norm: NormParams<T>,
    pub mlp_norm: NormParams<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    /// `V x D`, one row per token.
    pub embed: Matrix<T>,
    pub blocks: Vec<BlockWeights<T>>,
    pub final_norm: NormParams<T>,
    /// `D x V`
    pub head: Matrix<T>,
}

// Stream ids for the per-tensor generators.
const STREAM_EMBED: u64 = 1;
const STREAM_HEAD: u64 = 2;

pub(crate) fn layer_stream(layer: usize, role: Role) -> u64 {
    (layer as u64) << 8 | (role as u64 + 1)
}

pub(crate) fn gaussian<T: Scalar>(seed: u64, stream: u64, rows: usize, cols: usize, std: f64) -> Matrix<T> {
    let mut rng = seeded(seed, stream);
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = rng.sample(StandardNormal);
        T::of(z * std)
    })
}

/// Same draws as [`gaussian`], appended to `buf` as `f32` and multiplied by `scale`.
pub(crate) fn gaussian_into(seed: u64, stream: u64, n: usize, std: f64, scale: f64, buf: &mut Vec<f32>) {
    let mut rng = seeded(seed, stream);
    buf.extend((0..n).map(|_| {
        let z: f64 = rng.sample(StandardNormal);
        (z * std) as f32 * scale as f32
    }));
}

impl<T: Scalar> Model<T> {
    /// Seeded initialization. Projection and head entries are drawn with
    /// standard deviation `1/sqrt(D)`, embeddings with standard deviation 1,
    /// norm gains are 1 and biases 0. Every tensor has its own generator
    /// stream, so results do not depend on construction order.
    pub fn init_random(config: &ModelConfig, seed: u64, suppression: &Suppression) -> Result<Self> {
        config.validate()?;
        suppression.validate(config.layers)?;
        let (d, f, v) = (config.dim, config.mlp_dim, config.vocab);
        let std = 1.0 / (d as f64).sqrt();
        let blocks = (1..=config.layers)
            .map(|l| {
                let g = |role, rows, cols| gaussian::<T>(seed, layer_stream(l, role), rows, cols, std);
                let t = T::of(suppression.factor(l));
                BlockWeights {
                    wq: g(Role::Query, d, d).map(|x| x * t),
                    wk: g(Role::Key, d, d),
                    wv: g(Role::Value, d, d),
                    wo: g(Role::Output, d, d),
                    w1: g(Role::MlpUp, d, f),
                    w2: g(Role::MlpDown, f, d),
                    attn_norm: NormParams::unit(d, config.norm),
                    mlp_norm: NormParams::unit(d, config.norm),
                }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            embed: gaussian(seed, STREAM_EMBED, v, d, 1.0),
            blocks,
            final_norm: NormParams::unit(d, config.norm),
            head: gaussian(seed, STREAM_HEAD, d, v, std),
        })
    }

    /// Tensor list in file order, using LLaMA-style names and the stored
    /// `(out_features, in_features)` orientation.
    fn tensor_specs(&self, dtype: Dtype) -> Vec<(TensorSpec, TensorRef<'_, T>)> {
        let cfg = &self.config;
        let (d, f, v) = (cfg.dim, cfg.mlp_dim, cfg.vocab);
        let mut out = vec![(TensorSpec::new(EMBED_NAME, dtype, &[v, d]), TensorRef::Plain(&self.embed))];
        for (i, b) in self.blocks.iter().enumerate() {
            let name = |suffix: &str| format!("model.layers.{i}.{suffix}");
            out.push((TensorSpec::new(name("self_attn.q_proj.weight"), dtype, &[d, d]), TensorRef::Transposed(&b.wq)));
            out.push((TensorSpec::new(name("self_attn.k_proj.weight"), dtype, &[d, d]), TensorRef::Transposed(&b.wk)));
            out.push((TensorSpec::new(name("self_attn.v_proj.weight"), dtype, &[d, d]), TensorRef::Transposed(&b.wv)));
            out.push((TensorSpec::new(name("self_attn.o_proj.weight"), dtype, &[d, d]), TensorRef::Transposed(&b.wo)));
            out.push((TensorSpec::new(name("mlp.up_proj.weight"), dtype, &[f, d]), TensorRef::Transposed(&b.w1)));
            out.push((TensorSpec::new(name("mlp.down_proj.weight"), dtype, &[d, f]), TensorRef::Transposed(&b.w2)));
            out.push((
                TensorSpec::new(name("input_layernorm.weight"), dtype, &[d]),
                TensorRef::Vector(&b.attn_norm.gain),
            ));
            if let Some(bias) = &b.attn_norm.bias {
                out.push((TensorSpec::new(name("input_layernorm.bias"), dtype, &[d]), TensorRef::Vector(bias)));
            }
            out.push((
                TensorSpec::new(name("post_attention_layernorm.weight"), dtype, &[d]),
                TensorRef::Vector(&b.mlp_norm.gain),
            ));
            if let Some(bias) = &b.mlp_norm.bias {
                out.push((
                    TensorSpec::new(name("post_attention_layernorm.bias"), dtype, &[d]),
                    TensorRef::Vector(bias),
                ));
            }
        }
        out.push((TensorSpec::new(FINAL_NORM_NAME, dtype, &[d]), TensorRef::Vector(&self.final_norm.gain)));
        if let Some(bias) = &self.final_norm.bias {
            out.push((TensorSpec::new(FINAL_NORM_BIAS_NAME, dtype, &[d]), TensorRef::Vector(bias)));
        }
        out.push((TensorSpec::new(HEAD_NAME, dtype, &[v, d]), TensorRef::Transposed(&self.head)));
        out
    }

    /// Serializes the model as a checkpoint. The config travels in the
    /// `__metadata__` entry.
    pub fn write_checkpoint<W: Write>(&self, out: &mut W, dtype: Dtype) -> Result<u64> {
        let tensors = self.tensor_specs(dtype);
        let specs: Vec<TensorSpec> = tensors.iter().map(|(s, _)| s.clone()).collect();
        let metadata = BTreeMap::from([(
            CONFIG_METADATA_KEY.to_owned(),
            serde_json::to_string(&self.config).expect("config serializes"),
        )]);
        write_checkpoint(out, &specs, &metadata, |i, buf| {
            tensors[i].1.extend_f32(buf);
            Ok(())
        })
    }

    pub fn to_checkpoint_bytes(&self, dtype: Dtype) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_checkpoint(&mut out, dtype)?;
        Ok(out)
    }

    /// Builds a model from a checkpoint, converting stored projections to the
    /// `x · W` convention.
    pub fn load_from_checkpoint(
        index: &CheckpointIndex,
        map: &LayerTensorMap,
        config: &ModelConfig,
        source: &dyn ByteSource,
    ) -> Result<Self> {
        config.validate()?;
        if map.len() != config.layers {
            return Err(Error::Format(format!(
                "checkpoint has {} layers, config expects {}",
                map.len(),
                config.layers
            )));
        }
        let layernorm = config.norm == NormKind::LayerNorm;
        let mut needed = vec![
            Role::Query,
            Role::Key,
            Role::Value,
            Role::Output,
            Role::MlpUp,
            Role::MlpDown,
            Role::AttnNorm,
            Role::MlpNorm,
        ];
        if layernorm {
            needed.extend([Role::AttnNormBias, Role::MlpNormBias]);
        }
        let missing: Vec<String> = map
            .layers
            .iter()
            .filter_map(|lt| {
                let roles: Vec<&str> = needed.iter().filter(|r| lt.name(**r).is_none()).map(|r| r.describe()).collect();
                (!roles.is_empty()).then(|| format!("layer {}: {}", lt.layer, roles.join(", ")))
            })
            .collect();
        if !missing.is_empty() {
            return Err(Error::Format(format!("cannot load model, missing roles: {}", missing.join("; "))));
        }

        let (d, f, v) = (config.dim, config.mlp_dim, config.vocab);
        let matrix = |name: &str, rows: usize, cols: usize| -> Result<Matrix<T>> {
            let m = read_tensor::<T>(index, name, source)?;
            if m.shape() != (rows, cols) {
                return Err(Error::Format(format!(
                    "tensor {name:?} has shape {:?}, config expects {:?}",
                    m.shape(),
                    (rows, cols)
                )));
            }
            Ok(m)
        };
        let vector = |name: &str| -> Result<Vec<T>> {
            let x = read_vector::<T>(index, name, source)?;
            if x.len() != d {
                return Err(Error::Format(format!("tensor {name:?} has length {}, config expects {d}", x.len())));
            }
            Ok(x)
        };
        let norm = |gain: &str, bias: Option<&str>| -> Result<NormParams<T>> {
            Ok(NormParams {
                gain: vector(gain)?,
                bias: match bias {
                    Some(b) if layernorm => Some(vector(b)?),
                    _ => None,
                },
            })
        };

        let mut blocks = Vec::with_capacity(config.layers);
        for lt in &map.layers {
            let name = |r| lt.require(r);
            let block = BlockWeights {
                wq: transpose(&matrix(name(Role::Query)?, d, d)?),
                wk: transpose(&matrix(name(Role::Key)?, d, d)?),
                wv: transpose(&matrix(name(Role::Value)?, d, d)?),
                wo: transpose(&matrix(name(Role::Output)?, d, d)?),
                w1: transpose(&matrix(name(Role::MlpUp)?, f, d)?),
                w2: transpose(&matrix(name(Role::MlpDown)?, d, f)?),
                attn_norm: norm(name(Role::AttnNorm)?, lt.name(Role::AttnNormBias))?,
                mlp_norm: norm(name(Role::MlpNorm)?, lt.name(Role::MlpNormBias))?,
            };
            blocks.push(block);
        }
        let final_bias = index.records.contains_key(FINAL_NORM_BIAS_NAME).then_some(FINAL_NORM_BIAS_NAME);
        if layernorm && final_bias.is_none() {
            return Err(Error::Format(format!("cannot load model, missing {FINAL_NORM_BIAS_NAME}")));
        }
        Ok(Self {
            config: config.clone(),
            embed: matrix(EMBED_NAME, v, d)?,
            blocks,
            final_norm: norm(FINAL_NORM_NAME, final_bias)?,
            head: transpose(&matrix(HEAD_NAME, v, d)?),
        })
    }

    /// Config stored in a checkpoint written by [`Model::write_checkpoint`].
    pub fn config_from_metadata(index: &CheckpointIndex) -> Option<Result<ModelConfig>> {
        index
            .metadata
            .get(CONFIG_METADATA_KEY)
            .map(|text| serde_json::from_str(text).map_err(|e| Error::Format(format!("bad config metadata: {e}"))))
    }
}

enum TensorRef<'a, T> {
    Plain(&'a Matrix<T>),
    Transposed(&'a Matrix<T>),
    Vector(&'a [T]),
}

impl<T: Scalar> TensorRef<'_, T> {
    fn extend_f32(&self, buf: &mut Vec<f32>) {
        let conv = |v: &T| v.as_f64() as f32;
        match self {
            TensorRef::Plain(m) => buf.extend(m.data().iter().map(conv)),
            TensorRef::Transposed(m) => {
                for j in 0..m.cols() {
                    buf.extend((0..m.rows()).map(|i| conv(&m.get(i, j))));
                }
            }
            TensorRef::Vector(v) => buf.extend(v.iter().map(conv)),
        }
    }
}
