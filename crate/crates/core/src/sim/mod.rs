//! Desk-scale decoder-only transformer engine with activation capture and
//! plan application.

mod config;
mod forward;
mod model;

pub use config::{ModelConfig, NormKind};
pub use forward::{
    apply_rope, attention_detail, attention_forward, block_forward, mlp_forward, model_forward, AttentionDetail,
    BlockFlags, CaptureFlags, ForwardTrace, LayerTrace, PlanApplication,
};
pub(crate) use model::{gaussian_into, layer_stream};
pub use model::{
    BlockWeights, Model, NormParams, Suppression, CONFIG_METADATA_KEY, EMBED_NAME, FINAL_NORM_NAME, HEAD_NAME,
};
