use serde::{Deserialize, Serialize};

use super::ModelError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Image embedding width.
    pub image_dim: usize,
    /// Text embedding width, also the shared contrastive space.
    pub text_dim: usize,
    pub image_layers: usize,
    pub image_heads: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    /// Text sequence length including the trailing CLS slot.
    pub text_len: usize,
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_dim: 64,
            text_dim: 64,
            image_layers: 2,
            image_heads: 4,
            text_layers: 2,
            text_heads: 4,
            text_len: 32,
            mlp_ratio: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub image_layers: usize,
    pub image_heads: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    /// Hidden width of the classification heads.
    pub head_hidden: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { image_layers: 2, image_heads: 4, text_layers: 2, text_heads: 4, head_hidden: 64 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    /// Small widths for finite-difference checks.
    pub fn tiny(dim: usize, text_len: usize) -> Self {
        Self {
            encoder: EncoderConfig {
                image_dim: dim,
                text_dim: dim,
                image_layers: 1,
                image_heads: 2,
                text_layers: 1,
                text_heads: 2,
                text_len,
                mlp_ratio: 2,
            },
            decoder: DecoderConfig { image_layers: 1, image_heads: 2, text_layers: 1, text_heads: 2, head_hidden: dim },
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let e = &self.encoder;
        let d = &self.decoder;
        let checks = [
            ("encoder.image_dim", e.image_dim, e.image_heads),
            ("encoder.text_dim", e.text_dim, e.text_heads),
            ("encoder.text_dim", e.text_dim, d.image_heads),
            ("encoder.text_dim", e.text_dim, d.text_heads),
        ];
        for (field, dim, heads) in checks {
            if heads == 0 || dim == 0 || dim % heads != 0 {
                return Err(ModelError::Config(format!("{field} = {dim} is not divisible by head count {heads}")));
            }
        }
        if e.text_len < 2 {
            return Err(ModelError::Config(format!("encoder.text_len must be at least 2, got {}", e.text_len)));
        }
        if e.mlp_ratio == 0 || d.head_hidden == 0 {
            return Err(ModelError::Config("mlp widths must be positive".into()));
        }
        Ok(())
    }
}
