//! Encoder-decoder transformer over the unified vocabulary.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod forward;
pub mod params;

pub use attention::{attention_scores, multi_head_attention, softmax_rows, RelativeBias};
pub use config::{ModelConfig, MAX_SOURCE_LEN};
pub use forward::{
    apply_stochastic_depth, decoder_forward, decoder_last_logits, encoder_forward, stochastic_depth_gate, BranchGate,
    Mode, Patch,
};
pub use params::{Layout, ModelParams};
