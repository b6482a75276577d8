use alloc::format;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patching::{CHANNELS, PATCH, ROPE_BASE};

use super::tokenizer::VOCAB_SIZE;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Silu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosEmbed {
    #[serde(rename = "2d_rope")]
    Rope2d,
}

fn default_patch() -> usize {
    PATCH
}

fn default_base() -> f64 {
    ROPE_BASE
}

fn default_activation() -> Activation {
    Activation::Silu
}

fn default_pos() -> PosEmbed {
    PosEmbed::Rope2d
}

/// Geometry of the image encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub depth: usize,
    #[serde(default = "default_patch")]
    pub patch: usize,
    pub hidden: usize,
    pub intermediate: usize,
    pub heads: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default = "default_pos")]
    pub pos_embed: PosEmbed,
    #[serde(default = "default_base")]
    pub rope_base: f64,
}

fn check_heads(field: &str, hidden: usize, heads: usize) -> Result<()> {
    if heads == 0 || hidden % heads != 0 {
        return Err(Error::config(
            format!("{field}.heads"),
            format!("hidden {hidden} is not divisible by {heads} heads"),
        ));
    }
    if (hidden / heads) % 4 != 0 {
        return Err(Error::config(
            format!("{field}.heads"),
            format!("head dimension {} is not divisible by 4", hidden / heads),
        ));
    }
    Ok(())
}

/// Parameters of one pre-norm block: attention with biases, gated SiLU
/// feed-forward with biases, two layer norms.
pub fn block_param_count(hidden: usize, intermediate: usize) -> u64 {
    let (h, i) = (hidden as u64, intermediate as u64);
    let attention = 4 * (h * h + h);
    let ffn = 2 * (h * i + i) + (i * h + h);
    let norms = 2 * 2 * h;
    attention + ffn + norms
}

impl EncoderConfig {
    /// Row-for-row architecture of the released encoder.
    pub fn paper() -> Self {
        Self {
            depth: 28,
            patch: PATCH,
            hidden: 1536,
            intermediate: 4608,
            heads: 16,
            activation: Activation::Silu,
            pos_embed: PosEmbed::Rope2d,
            rope_base: ROPE_BASE,
        }
    }

    pub fn toy() -> Self {
        Self {
            depth: 2,
            patch: PATCH,
            hidden: 32,
            intermediate: 64,
            heads: 4,
            activation: Activation::Silu,
            pos_embed: PosEmbed::Rope2d,
            rope_base: ROPE_BASE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::config("encoder.depth", "must be at least 1"));
        }
        if self.patch != PATCH {
            return Err(Error::config("encoder.patch", format!("only {PATCH}x{PATCH} patches are supported")));
        }
        if self.intermediate == 0 {
            return Err(Error::config("encoder.intermediate", "must be positive"));
        }
        check_heads("encoder", self.hidden, self.heads)
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * CHANNELS
    }

    /// Analytic parameter count (nothing is allocated).
    pub fn param_count(&self) -> u64 {
        let h = self.hidden as u64;
        let embed = self.patch_dim() as u64 * h + h;
        let mask_token = h;
        let final_norm = 2 * h;
        let logit_head = 2;
        embed + mask_token + final_norm + logit_head + self.depth as u64 * block_param_count(self.hidden, self.intermediate)
    }
}

/// Byte-level text tower producing embeddings in the image embedding space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextConfig {
    pub depth: usize,
    pub hidden: usize,
    pub intermediate: usize,
    pub heads: usize,
}

impl TextConfig {
    pub fn toy() -> Self {
        Self {
            depth: 2,
            hidden: 32,
            intermediate: 64,
            heads: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::config("text.depth", "must be at least 1"));
        }
        check_heads("text", self.hidden, self.heads)
    }
}

/// Causal toy language model that consumes projected visual tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub depth: usize,
    pub hidden: usize,
    pub intermediate: usize,
    pub heads: usize,
    /// Width of the projector's hidden layer.
    pub projector_hidden: usize,
}

impl DecoderConfig {
    pub fn toy() -> Self {
        Self {
            depth: 2,
            hidden: 32,
            intermediate: 64,
            heads: 4,
            projector_hidden: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::config("decoder.depth", "must be at least 1"));
        }
        if self.projector_hidden == 0 {
            return Err(Error::config("decoder.projector_hidden", "must be positive"));
        }
        check_heads("decoder", self.hidden, self.heads)
    }

    pub fn vocab(&self) -> usize {
        VOCAB_SIZE
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub text: TextConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn toy() -> Self {
        Self {
            encoder: EncoderConfig::toy(),
            text: TextConfig::toy(),
            decoder: DecoderConfig::toy(),
        }
    }

    /// Full-size encoder geometry with the desk-scale text tower and
    /// decoder standing in for pretrained models.
    pub fn paper() -> Self {
        Self {
            encoder: EncoderConfig::paper(),
            ..Self::toy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.text.validate()?;
        self.decoder.validate()
    }

    /// Dimension shared by pooled image and text embeddings.
    pub fn embed_dim(&self) -> usize {
        self.encoder.hidden
    }
}
