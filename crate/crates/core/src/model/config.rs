use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture and input-layout settings of the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub frame_dim: usize,
    /// Maximum total input length, including frames and the title region.
    pub max_len: usize,
    pub vocab_size: usize,
    pub dropout: f64,
    /// Capacity of the title region, end marker included.
    pub max_title_len: usize,
    pub mask_fraction: f64,
    pub max_masked: usize,
    pub tie_embeddings: bool,
    /// Terminate the title region with `[SEP]` so decoding learns to stop.
    pub title_end_token: bool,
    /// Placed between ASR and OCR text.
    pub text_separator: String,
    pub init_std: f64,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 12,
            heads: 12,
            hidden: 768,
            frame_dim: 2048,
            max_len: 512,
            vocab_size: 21_128,
            dropout: 0.1,
            max_title_len: 20,
            mask_fraction: 0.2,
            max_masked: 20,
            tie_embeddings: false,
            title_end_token: true,
            text_separator: " ".into(),
            init_std: 0.02,
            layer_norm_eps: 1e-12,
        }
    }
}

impl ModelConfig {
    /// Desk-scale configuration used by tests and synthetic runs.
    pub fn tiny(vocab_size: usize) -> Self {
        ModelConfig {
            layers: 2,
            heads: 2,
            hidden: 32,
            frame_dim: crate::data_io::DEFAULT_FRAME_DIM,
            max_len: 48,
            vocab_size,
            max_title_len: 8,
            ..Default::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.hidden
    }

    /// Per-head attention scale `1 / sqrt(hidden / heads)`.
    pub fn attention_scale(&self) -> f64 {
        1.0 / (self.head_dim() as f64).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.layers == 0 || self.heads == 0 || self.hidden == 0 {
            return fail("layers, heads and hidden must be positive");
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return fail("hidden must be divisible by heads");
        }
        if self.frame_dim == 0 {
            return fail("frame_dim must be positive");
        }
        if self.max_len == 0 || self.max_len > 512 {
            return fail("max_len must be in 1..=512");
        }
        if self.vocab_size < 5 {
            return fail("vocab_size must cover the five special tokens");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must be in [0, 1)");
        }
        if self.max_title_len == 0 {
            return fail("max_title_len must be at least 1");
        }
        if !(self.mask_fraction > 0.0 && self.mask_fraction <= 1.0) {
            return fail("mask_fraction must be in (0, 1]");
        }
        if self.max_masked == 0 {
            return fail("max_masked must be at least 1");
        }
        if self.max_title_len + 2 > self.max_len {
            return fail("max_len too small for [CLS], [SEP] and the title region");
        }
        if !(self.init_std > 0.0) || !(self.layer_norm_eps > 0.0) {
            return fail("init_std and layer_norm_eps must be positive");
        }
        Ok(())
    }
}
