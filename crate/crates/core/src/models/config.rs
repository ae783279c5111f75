use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Encoder-only image classifier.
    Vit,
    /// Decoder-only language model.
    Gpt,
}

/// Transformer dimensions. Sequence lengths are in tokens (patches + class
/// token for ViTs).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    pub kind: ModelKind,
    pub blocks: usize,
    pub e: usize,
    pub p: usize,
    pub h: usize,
    pub ff: usize,
    pub s_default: usize,
    pub s_min: usize,
    pub s_max: usize,
    pub params: u64,
    /// Flattened patch length fed to the patch embedding (ViT only).
    #[serde(default)]
    pub patch_dim: usize,
    /// Classifier outputs (ViT only).
    #[serde(default)]
    pub num_classes: usize,
}

pub const PRESET_NAMES: [&str; 5] = ["vit-b", "vit-l", "vit-h", "gpt3-xl", "gpt-j"];

impl ModelConfig {
    #[allow(clippy::too_many_arguments)]
    fn vit(
        name: &str,
        blocks: usize,
        e: usize,
        p: usize,
        h: usize,
        ff: usize,
        params: u64,
    ) -> Self {
        ModelConfig {
            name: name.into(),
            kind: ModelKind::Vit,
            blocks,
            e,
            p,
            h,
            ff,
            s_default: 197,
            s_min: 197,
            s_max: 197,
            params,
            patch_dim: 3 * 16 * 16,
            num_classes: 1000,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn gpt(
        name: &str,
        blocks: usize,
        e: usize,
        p: usize,
        h: usize,
        ff: usize,
        params: u64,
    ) -> Self {
        ModelConfig {
            name: name.into(),
            kind: ModelKind::Gpt,
            blocks,
            e,
            p,
            h,
            ff,
            s_default: 1024,
            s_min: 128,
            s_max: 2048,
            params,
            patch_dim: 0,
            num_classes: 0,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        Ok(match name {
            "vit-b" => Self::vit(name, 12, 768, 64, 12, 3072, 86_000_000),
            "vit-l" => Self::vit(name, 24, 1024, 64, 16, 4096, 307_000_000),
            "vit-h" => Self::vit(name, 32, 1280, 80, 16, 5120, 632_000_000),
            "gpt3-xl" => Self::gpt(name, 40, 2048, 128, 16, 8192, 1_300_000_000),
            "gpt-j" => Self::gpt(name, 28, 4096, 256, 16, 16384, 6_000_000_000),
            _ => {
                return Err(Error::config(
                    "model",
                    format!(
                        "unknown preset {name:?}; expected one of {}",
                        PRESET_NAMES.join(", ")
                    ),
                ))
            }
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: ModelConfig = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    /// `H * P`, the width of the concatenated head outputs.
    pub fn hp(&self) -> usize {
        self.h * self.p
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("e", self.e), ("p", self.p), ("h", self.h), ("ff", self.ff)] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.s_min == 0 || self.s_min > self.s_max {
            return Err(Error::config(
                "s_min",
                format!("range [{}, {}] is empty", self.s_min, self.s_max),
            ));
        }
        if !(self.s_min..=self.s_max).contains(&self.s_default) {
            return Err(Error::config("s_default", "outside [s_min, s_max]"));
        }
        if self.kind == ModelKind::Vit && (self.patch_dim == 0 || self.num_classes == 0) {
            return Err(Error::config(
                "patch_dim",
                "ViT models need patch_dim and num_classes",
            ));
        }
        Ok(())
    }

    pub fn check_seq(&self, s: usize) -> Result<()> {
        if !(self.s_min..=self.s_max).contains(&s) {
            return Err(Error::config(
                "seq",
                format!(
                    "{} supports S in [{}, {}], got {s}",
                    self.name, self.s_min, self.s_max
                ),
            ));
        }
        Ok(())
    }

    /// Weights held by the transformer blocks.
    pub fn block_weight_count(&self) -> u64 {
        (4 * self.e * self.hp() + 2 * self.e * self.ff) as u64 * self.blocks as u64
    }
}
