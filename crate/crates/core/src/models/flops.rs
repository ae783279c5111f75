use serde::{Deserialize, Serialize};

use crate::machine::Calibration;
use crate::models::config::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecMode {
    /// Whole prompt in one causal pass.
    Nar,
    /// One new token against a cache.
    Ar,
    /// Non-causal encoder pass.
    Vit,
}

impl std::str::FromStr for ExecMode {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> crate::error::Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nar" => Ok(ExecMode::Nar),
            "ar" => Ok(ExecMode::Ar),
            "vit" => Ok(ExecMode::Vit),
            _ => Err(crate::error::Error::config(
                "mode",
                format!("{s:?} is not one of nar, ar, vit"),
            )),
        }
    }
}

/// FLOPs of one transformer block, split by operation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BlockFlops {
    pub qkv_proj: f64,
    pub scores: f64,
    pub av: f64,
    pub out_proj: f64,
    pub mlp: f64,
    pub softmax: f64,
    pub layernorm: f64,
    pub gelu: f64,
}

impl BlockFlops {
    pub fn matmul(&self) -> f64 {
        self.qkv_proj + self.scores + self.av + self.out_proj + self.mlp
    }

    pub fn activation(&self) -> f64 {
        self.softmax + self.layernorm + self.gelu
    }

    pub fn total(&self) -> f64 {
        self.matmul() + self.activation()
    }
}

/// Query rows and visible keys of one pass. In AR mode `s` is the cache
/// length before the step, so the new token sees `s + 1` keys.
pub fn pass_shape(mode: ExecMode, s: usize) -> (usize, usize) {
    match mode {
        ExecMode::Nar | ExecMode::Vit => (s, s),
        ExecMode::Ar => (1, s + 1),
    }
}

pub fn block_flops(model: &ModelConfig, mode: ExecMode, s: usize, cal: &Calibration) -> BlockFlops {
    let (q, kv) = pass_shape(mode, s);
    let (q, kv) = (q as f64, kv as f64);
    let (e, hp, h, p, ff) = (
        model.e as f64,
        model.hp() as f64,
        model.h as f64,
        model.p as f64,
        model.ff as f64,
    );
    BlockFlops {
        qkv_proj: 3.0 * 2.0 * q * e * hp,
        scores: 2.0 * h * q * kv * p,
        av: 2.0 * h * q * kv * p,
        out_proj: 2.0 * q * hp * e,
        mlp: 2.0 * q * e * ff * 2.0,
        softmax: cal.softmax_flops_per_element * h * q * kv,
        layernorm: cal.layernorm_flops_per_element * 2.0 * q * e,
        gelu: cal.gelu_flops_per_element * q * ff,
    }
}

/// Patch embedding plus classifier head of a ViT.
pub fn vit_extra_flops(model: &ModelConfig) -> f64 {
    let patches = (model.s_default - 1) as f64;
    2.0 * patches * model.patch_dim as f64 * model.e as f64
        + 2.0 * model.e as f64 * model.num_classes as f64
}

/// Total FLOPs of one pass over all blocks (one token step in AR mode).
pub fn count_flops_with(model: &ModelConfig, mode: ExecMode, s: usize, cal: &Calibration) -> f64 {
    let blocks = block_flops(model, mode, s, cal).total() * model.blocks as f64;
    match mode {
        ExecMode::Vit => blocks + vit_extra_flops(model),
        _ => blocks,
    }
}

pub fn count_flops(model: &ModelConfig, mode: ExecMode, s: usize) -> f64 {
    count_flops_with(model, mode, s, &Calibration::default())
}
