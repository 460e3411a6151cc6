//! Divided space-time attention transformer with a projection head.
//!
//! Forward and backward passes are written out by hand in `f64`; parameters
//! live in one flat vector so that the optimizer, the EMA teacher update and
//! checkpointing all work on plain slices.

mod attention;
mod encoder;
mod ops;
mod params;
pub mod posenc;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

pub use encoder::{
    backward, backward_from_feature, divided_st_block, encode, encode_with_attention,
    forward_train, patchify, positional_encode, project, ClsAttention, Forward, TokenGrid, Tokens,
};
pub use params::{EncoderParams, Layout, Slot};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    pub max_spatial_tokens: usize,
    pub max_temporal_tokens: usize,
    pub proj_hidden_dim: usize,
    pub proj_output_dim: usize,
    #[serde(default = "default_proj_layers")]
    pub proj_layers: usize,
}

fn default_mlp_ratio() -> usize {
    4
}

fn default_proj_layers() -> usize {
    3
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl BackboneConfig {
    /// Scaled-down default: P=8, m=128, 4 blocks of 4 heads.
    pub fn desk() -> Self {
        Self {
            patch_size: 8,
            embed_dim: 128,
            depth: 4,
            num_heads: 4,
            mlp_ratio: 4,
            max_spatial_tokens: 196,
            max_temporal_tokens: 16,
            proj_hidden_dim: 256,
            proj_output_dim: 256,
            proj_layers: 3,
        }
    }

    /// ViT-Base geometry: P=16, m=768, 12 blocks of 12 heads.
    pub fn vit_base() -> Self {
        Self {
            patch_size: 16,
            embed_dim: 768,
            depth: 12,
            num_heads: 12,
            mlp_ratio: 4,
            max_spatial_tokens: 196,
            max_temporal_tokens: 16,
            proj_hidden_dim: 2048,
            proj_output_dim: 4096,
            proj_layers: 3,
        }
    }

    /// Gradient-check size: P=8, m=16, 2 blocks of 2 heads.
    pub fn tiny() -> Self {
        Self {
            patch_size: 8,
            embed_dim: 16,
            depth: 2,
            num_heads: 2,
            mlp_ratio: 2,
            max_spatial_tokens: 16,
            max_temporal_tokens: 4,
            proj_hidden_dim: 32,
            proj_output_dim: 16,
            proj_layers: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.patch_size >= 1,
            Validation,
            "patch_size must be positive"
        );
        ensure!(
            self.embed_dim >= 1
                && self.num_heads >= 1
                && self.embed_dim.is_multiple_of(self.num_heads),
            Validation,
            "embed_dim {} must be a positive multiple of num_heads {}",
            self.embed_dim,
            self.num_heads
        );
        ensure!(self.depth >= 1, Validation, "depth must be at least 1");
        ensure!(
            self.mlp_ratio >= 1,
            Validation,
            "mlp_ratio must be at least 1"
        );
        ensure!(
            self.proj_output_dim >= 2,
            Validation,
            "proj_output_dim must be at least 2"
        );
        ensure!(
            self.proj_layers >= 1,
            Validation,
            "proj_layers must be at least 1"
        );
        ensure!(
            self.proj_layers == 1 || self.proj_hidden_dim >= 1,
            Validation,
            "proj_hidden_dim must be positive"
        );
        ensure!(
            self.max_temporal_tokens >= 1,
            Validation,
            "max_temporal_tokens must be positive"
        );
        let side = self.table_side();
        ensure!(
            side >= 1 && side * side == self.max_spatial_tokens,
            Validation,
            "max_spatial_tokens {} must be a perfect square",
            self.max_spatial_tokens
        );
        Ok(())
    }

    /// Side length of the square spatial positional table.
    pub fn table_side(&self) -> usize {
        (self.max_spatial_tokens as f64).sqrt().round() as usize
    }

    pub fn spatial_tokens(&self, height: usize, width: usize) -> Result<usize> {
        let p = self.patch_size;
        if !height.is_multiple_of(p) || !width.is_multiple_of(p) || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "frame size {width}x{height} must be a positive multiple of the patch size {p}"
            )));
        }
        Ok((height / p) * (width / p))
    }
}
