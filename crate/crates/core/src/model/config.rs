use serde::{Deserialize, Serialize};

use super::ModelError;

/// Architecture hyperparameters. Defaults are the full-scale configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: usize,
    pub num_sessions: usize,
    pub d_model: usize,
    pub num_blocks: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub conv_kernel: usize,
    pub patch_size: usize,
    pub stride: usize,
    pub dropout: f64,
    pub vocab_size: usize,
    pub max_pos_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 512,
            num_sessions: 45,
            d_model: 512,
            num_blocks: 6,
            heads: 8,
            d_ff: 2048,
            conv_kernel: 31,
            patch_size: 14,
            stride: 4,
            dropout: 0.1,
            vocab_size: crate::textcodec::VOCAB_SIZE,
            max_pos_len: 5000,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::Config(msg));
        if self.channels == 0 || self.d_model == 0 || self.d_ff == 0 || self.conv_kernel == 0 {
            return bad("channels, d_model, d_ff and conv_kernel must be positive".into());
        }
        if self.num_sessions == 0 {
            return bad("at least one session is required".into());
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            ));
        }
        if self.patch_size == 0 || self.stride == 0 || self.stride > self.patch_size {
            return bad(format!(
                "need 1 <= stride <= patch_size, got stride {} and patch {}",
                self.stride, self.patch_size
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.vocab_size < 2 {
            return bad("vocabulary needs a blank and at least one symbol".into());
        }
        if self.max_pos_len == 0 {
            return bad("max_pos_len must be positive".into());
        }
        Ok(())
    }

    /// Frame count of the shortest admissible trial.
    pub fn min_frames(&self) -> usize {
        self.patch_size
    }

    /// Longest trial whose token count fits the positional table.
    pub fn max_frames(&self) -> usize {
        (self.max_pos_len - 1) * self.stride + self.patch_size
    }
}

/// Trainable parameter totals. Batch-norm running statistics are buffers and
/// are not counted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub adapters: usize,
    pub without_adapters: usize,
    pub total: usize,
}

pub fn count_parameters(cfg: &ModelConfig) -> ParamCount {
    let d = cfg.d_model;
    let linear = |i: usize, o: usize| i * o + o;
    let norm = 2 * d;
    let ffn = norm + linear(d, cfg.d_ff) + linear(cfg.d_ff, d);
    let mhsa = norm + 4 * linear(d, d);
    let conv = norm + linear(d, 2 * d) + cfg.conv_kernel * d + d + 2 * d + linear(d, d);
    let block = 2 * ffn + mhsa + conv + norm;
    let embed = linear(cfg.patch_size * cfg.channels, d);
    let head = linear(d, d) + linear(d, cfg.vocab_size);
    let adapters = cfg.num_sessions * linear(cfg.channels, cfg.channels);
    let without_adapters = embed + cfg.num_blocks * block + head;
    ParamCount {
        adapters,
        without_adapters,
        total: adapters + without_adapters,
    }
}
