use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Longest combined (patches + text) encoder input.
pub const MAX_SOURCE_LEN: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: usize,
    pub intermediate: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// Rows of the 1D absolute position table (shared by encoder text and decoder).
    pub max_text_positions: usize,
    /// Side of the 2D absolute patch position grid.
    pub max_patch_grid: usize,
    /// Text offsets are clipped to `[-b/2, b/2 - 1]`.
    pub text_rel_buckets: usize,
    /// Per-axis patch offsets are clipped to `[-b/2, b/2 - 1]`.
    pub patch_rel_buckets: usize,
    pub dropout: f64,
    pub stochastic_depth: f64,
    pub vocab_total: usize,
    /// Side of one encoder input patch in pixels.
    pub patch_size: usize,
    pub channels: usize,
}

impl ModelConfig {
    fn preset(hidden: usize, intermediate: usize, heads: usize, layers: usize, vocab_total: usize) -> Self {
        Self {
            hidden,
            intermediate,
            heads,
            enc_layers: layers,
            dec_layers: layers,
            max_text_positions: 1024,
            max_patch_grid: 32,
            text_rel_buckets: 256,
            patch_rel_buckets: 32,
            dropout: 0.1,
            stochastic_depth: 0.1,
            vocab_total,
            patch_size: 8,
            channels: 3,
        }
    }

    /// Hidden 256, intermediate 1024, 4 heads, 4+4 layers.
    pub fn small(vocab_total: usize) -> Self {
        Self::preset(256, 1024, 4, 4, vocab_total)
    }

    /// Hidden 512, intermediate 2048, 8 heads, 4+4 layers.
    pub fn medium(vocab_total: usize) -> Self {
        Self::preset(512, 2048, 8, 4, vocab_total)
    }

    /// Hidden 768, intermediate 3072, 12 heads, 6+6 layers.
    pub fn base(vocab_total: usize) -> Self {
        Self::preset(768, 3072, 12, 6, vocab_total)
    }

    /// Desk-scale configuration with short position tables and no regularization.
    pub fn toy(hidden: usize, intermediate: usize, heads: usize, layers: usize, vocab_total: usize) -> Self {
        Self {
            max_text_positions: 64,
            max_patch_grid: 8,
            text_rel_buckets: 32,
            patch_rel_buckets: 8,
            dropout: 0.0,
            stochastic_depth: 0.0,
            ..Self::preset(hidden, intermediate, heads, layers, vocab_total)
        }
    }

    pub fn by_name(name: &str, vocab_total: usize) -> Option<Self> {
        match name {
            "small" | "s" | "S" => Some(Self::small(vocab_total)),
            "medium" | "m" | "M" => Some(Self::medium(vocab_total)),
            "base" | "b" | "B" => Some(Self::base(vocab_total)),
            _ => None,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn patch_pixels(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.hidden == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if self.intermediate == 0 || self.vocab_total == 0 || self.max_text_positions == 0 {
            return Err(Error::Config("intermediate, vocab and position sizes must be positive".into()));
        }
        if self.text_rel_buckets < 2 || !self.text_rel_buckets.is_multiple_of(2) {
            return Err(Error::Config("text_rel_buckets must be even and at least 2".into()));
        }
        if self.patch_rel_buckets < 2 || !self.patch_rel_buckets.is_multiple_of(2) {
            return Err(Error::Config("patch_rel_buckets must be even and at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.stochastic_depth) {
            return Err(Error::Config("dropout and stochastic depth rates must lie in [0, 1)".into()));
        }
        if self.patch_size == 0 || (self.channels != 1 && self.channels != 3) {
            return Err(Error::Config("patch size must be positive and channels 1 or 3".into()));
        }
        Ok(())
    }
}
