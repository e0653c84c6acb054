//! Vision Transformer backbone with a projection head.
//!
//! The backbone follows the usual pre-norm ViT layout: linear patch embedding,
//! a learned `[CLS]` token, learned positional embeddings, `n_layers` blocks of
//! multi-head self-attention and a GELU MLP, then a final layer norm. The
//! projection head is a two-layer GELU MLP whose output is L2-normalised and
//! mapped to `head_out_dim` logits by a bias-free linear layer.
//!
//! Forward and backward passes are written by hand (see [`forward`]) so that
//! the same code runs at 32-bit for training and at 64-bit for gradient
//! verification.

mod attention_map;
pub mod forward;
mod params;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

pub use attention_map::{extract_cls_attention, AttentionMapStack};
pub use forward::{Forward, ImageBatch, OutputGrads};
pub use params::{ParamIndex, ParameterSet, TensorSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViTConfig {
    /// Training resolution (square images).
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub head_hidden_dim: usize,
    pub head_out_dim: usize,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            embed_dim: 96,
            n_layers: 4,
            n_heads: 6,
            mlp_ratio: 2,
            head_hidden_dim: 256,
            head_out_dim: 128,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            bail!(Shape, "image_size {} not divisible by patch_size {}", self.image_size, self.patch_size);
        }
        if self.n_heads == 0 || self.embed_dim % self.n_heads != 0 {
            bail!(Shape, "embed_dim {} not divisible by n_heads {}", self.embed_dim, self.n_heads);
        }
        if self.mlp_ratio == 0 || self.head_hidden_dim == 0 || self.head_out_dim == 0 {
            bail!(Config, "mlp_ratio, head_hidden_dim and head_out_dim must be positive");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }

    /// Patches per side at the training resolution.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn seq_len(&self) -> usize {
        self.n_patches() + 1
    }

    pub fn mlp_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }
}

/// Parameters of one transformer block:
/// two layer norms `4D`, qkv `3D^2 + 3D`, output projection `D^2 + D`,
/// MLP `2rD^2 + rD + D`.
pub fn block_parameter_count(config: &ViTConfig) -> usize {
    let d = config.embed_dim;
    let m = config.mlp_dim();
    4 * d + (3 * d * d + 3 * d) + (d * d + d) + (d * m + m) + (m * d + d)
}

/// Patch embedding `p^2 D + D`, CLS token `D`, positional table `(P + 1) D`.
pub fn embedding_parameter_count(config: &ViTConfig) -> usize {
    let d = config.embed_dim;
    let pp = config.patch_size * config.patch_size;
    pp * d + d + d + config.seq_len() * d
}

/// Final norm `2D`, head MLP `DH + H + H^2 + H`, last layer `H * out`.
pub fn head_parameter_count(config: &ViTConfig) -> usize {
    let d = config.embed_dim;
    let h = config.head_hidden_dim;
    2 * d + (d * h + h) + (h * h + h) + h * config.head_out_dim
}

/// Closed-form parameter count:
/// `embedding + n_layers * block + head` with the terms documented on the
/// three helper functions above.
pub fn count_parameters(config: &ViTConfig) -> usize {
    embedding_parameter_count(config) + config.n_layers * block_parameter_count(config) + head_parameter_count(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn enumerated(config: &ViTConfig) -> usize {
        params::layout(config).iter().map(|t| t.shape.iter().product::<usize>()).sum()
    }

    #[test]
    fn closed_form_matches_enumerated_tensors() {
        for config in [
            ViTConfig::default(),
            ViTConfig { n_layers: 0, ..ViTConfig::default() },
            ViTConfig { image_size: 16, patch_size: 8, embed_dim: 8, n_layers: 1, n_heads: 2, mlp_ratio: 2, head_hidden_dim: 6, head_out_dim: 5 },
        ] {
            assert_eq!(count_parameters(&config), enumerated(&config));
        }
    }

    #[test]
    fn doubling_embed_dim_changes_count_by_closed_form() {
        let a = ViTConfig { n_layers: 1, ..ViTConfig::default() };
        let b = ViTConfig { embed_dim: 2 * a.embed_dim, ..a };
        let d = a.embed_dim;
        let (r, pp, s, h) = (a.mlp_ratio, a.patch_size * a.patch_size, a.seq_len(), a.head_hidden_dim);
        // Each term that is linear in D doubles, each quadratic term quadruples.
        let linear_in_d = pp * d + d + d + s * d + (4 * d + 3 * d + d + r * d + d) + 2 * d + d * h;
        let quadratic_in_d = 3 * d * d + d * d + 2 * r * d * d;
        let expected = linear_in_d + 3 * quadratic_in_d;
        assert_eq!(count_parameters(&b) - count_parameters(&a), expected);
        assert_eq!(enumerated(&b) - enumerated(&a), expected);
    }

    #[test]
    fn zero_layers_counts_only_embeddings_and_head() {
        let c = ViTConfig { n_layers: 0, ..ViTConfig::default() };
        assert_eq!(count_parameters(&c), embedding_parameter_count(&c) + head_parameter_count(&c));
    }

    #[test]
    fn default_model_is_small() {
        let n = count_parameters(&ViTConfig::default());
        assert!(n < 1_500_000, "{n}");
    }

    #[test]
    fn rejects_indivisible_shapes() {
        assert!(ViTConfig { image_size: 60, ..ViTConfig::default() }.validate().is_err());
        assert!(ViTConfig { n_heads: 5, ..ViTConfig::default() }.validate().is_err());
    }
}
