//! Transformer definitions: configuration, canonical checkpoints, parameter
//! accounting and forward passes.

pub mod checkpoint;
pub mod config;
pub mod forward;
pub mod layers;
pub mod params;

pub use checkpoint::{expected_shapes, is_cross_attention, CheckpointMeta, NamedCheckpoint};
pub use config::{ArchKind, MaskKind, ModelConfig, PRESET_NAMES};
pub use forward::{
    attention, decoder_only_forward, decoder_only_hidden_states, encdec_forward, encoder_forward,
    rope_apply, AttentionWeights,
};
pub use layers::{ParamVars, TokenBatch, NORM_EPS};
pub use params::{count_params, ParamConvention, ParamCounts};
