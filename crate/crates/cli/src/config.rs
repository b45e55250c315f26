//! Run configuration: one JSON file, overridden by command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use uniseq_core::decoding::DecodeConfig;
use uniseq_core::model::ModelConfig;
use uniseq_core::tasks::{ImageSpec, TaskMixConfig};
use uniseq_core::trainer::OptimizerState;

use crate::error::{CliError, CliResult};

/// A named preset with optional per-field overrides. `vocab_total`,
/// `patch_size` and `channels` always come from the vocabulary and image spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub preset: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intermediate: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heads: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enc_layers: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dec_layers: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_text_positions: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_rel_buckets: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch_rel_buckets: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dropout: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stochastic_depth: Option<f64>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            preset: "toy".into(),
            hidden: None,
            intermediate: None,
            heads: None,
            enc_layers: None,
            dec_layers: None,
            max_text_positions: None,
            text_rel_buckets: None,
            patch_rel_buckets: None,
            dropout: None,
            stochastic_depth: None,
        }
    }
}

impl ModelSpec {
    /// Presets: `toy` (hidden 64, 4 heads, 2+2 layers, 128 positions), `small`, `medium`, `base`.
    pub fn resolve(&self, vocab_total: usize, image: &ImageSpec) -> CliResult<ModelConfig> {
        let mut c = match self.preset.as_str() {
            "toy" => ModelConfig { max_text_positions: 128, ..ModelConfig::toy(64, 256, 4, 2, vocab_total) },
            name => ModelConfig::by_name(name, vocab_total).ok_or_else(|| {
                CliError::usage(format!("unknown model preset {name:?}; valid presets: toy, small, medium, base"))
            })?,
        };
        macro_rules! over {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { c.$f = v; })* };
        }
        over!(hidden, intermediate, heads, enc_layers, dec_layers, max_text_positions, text_rel_buckets, patch_rel_buckets, dropout, stochastic_depth);
        c.patch_size = image.patch_size;
        c.channels = image.channels;
        c.max_patch_grid = c.max_patch_grid.max(image.grid());
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSpec {
    pub peak_lr: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    pub max_grad_norm: Option<f64>,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        Self { peak_lr: 1e-4, warmup_ratio: 0.01, weight_decay: 0.01, label_smoothing: 0.1, max_grad_norm: Some(1.0) }
    }
}

impl OptimizerSpec {
    pub fn apply(&self, state: &mut OptimizerState) {
        state.peak_lr = self.peak_lr;
        state.warmup_ratio = self.warmup_ratio;
        state.weight_decay = self.weight_decay;
        state.label_smoothing = self.label_smoothing;
        state.max_grad_norm = self.max_grad_norm;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    /// Output checkpoint.
    pub checkpoint: Option<PathBuf>,
    /// Starting checkpoint for fine-tuning.
    pub init_checkpoint: Option<PathBuf>,
    /// Held-out corpus for per-epoch model selection.
    pub validation: Option<PathBuf>,
    pub report: Option<PathBuf>,
    /// Step log; defaults to the checkpoint path with `.log` appended.
    pub log: Option<PathBuf>,
}

fn desk_image() -> ImageSpec {
    ImageSpec { encoder_side: 64, patch_size: 16, channels: 3, code_patch: 32 }
}

fn default_steps() -> usize {
    500
}

fn default_batch() -> usize {
    12
}

fn default_mask_rate() -> f64 {
    0.15
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Required; there is no clock-derived fallback.
    pub seed: u64,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default = "default_steps")]
    pub total_steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub mix: TaskMixConfig,
    #[serde(default)]
    pub decode: DecodeConfig,
    #[serde(default = "desk_image")]
    pub image: ImageSpec,
    #[serde(default)]
    pub optimizer: OptimizerSpec,
    #[serde(default = "default_mask_rate")]
    pub mask_rate: f64,
    /// Fine-tuning task.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_every: Option<usize>,
    #[serde(default)]
    pub paths: Paths,
}

impl RunConfig {
    pub fn with_seed(seed: u64) -> Self {
        serde_json::from_value(serde_json::json!({ "seed": seed })).expect("defaults deserialize")
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::usage(format!("bad config {}: {e}", path.display())))
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.batch_size == 0 {
            return Err(CliError::usage("batch_size must be at least 1"));
        }
        self.image.validate()?;
        self.decode.validate()?;
        self.mix.validate()?;
        Ok(())
    }

    pub fn log_path(&self) -> Option<PathBuf> {
        self.paths.log.clone().or_else(|| {
            self.paths.checkpoint.as_ref().map(|c| {
                let mut s = c.clone().into_os_string();
                s.push(".log");
                PathBuf::from(s)
            })
        })
    }
}

/// `key` names the config field, `flag` the command-line override.
pub fn require<'a>(p: &'a Option<PathBuf>, key: &str, flag: &str) -> CliResult<&'a Path> {
    p.as_deref().ok_or_else(|| CliError::usage(format!("missing path: set paths.{key} in the config or pass --{flag}")))
}
