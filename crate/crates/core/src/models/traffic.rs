use serde::{Deserialize, Serialize};

use crate::models::config::{ModelConfig, ModelKind};
use crate::models::flops::{pass_shape, ExecMode};
use crate::numerics::FloatFormat;

pub const MIB: f64 = 1024.0 * 1024.0;

/// Printed with every traffic figure.
pub const TRAFFIC_ASSUMPTION: &str =
    "tensor sizes at the run's storage format (FP16 for the fusion comparison); \
softmax statistics stay in SPM; weights are read once per pass and broadcast on chip";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficItem {
    pub tensor: String,
    pub read_bytes: f64,
    pub write_bytes: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficReport {
    pub fused: bool,
    pub fmt: FloatFormat,
    /// Ledger of one transformer block.
    pub block_items: Vec<TrafficItem>,
    /// Ledger of the pass outside the blocks.
    pub model_items: Vec<TrafficItem>,
    pub block_read_bytes: f64,
    pub block_write_bytes: f64,
    pub bytes_read: f64,
    pub bytes_written: f64,
    pub assumption: String,
}

fn item(tensor: &str, read: f64, write: f64) -> TrafficItem {
    TrafficItem {
        tensor: tensor.into(),
        read_bytes: read,
        write_bytes: write,
    }
}

/// Per-block HBM ledger. Fused execution keeps every intermediate of the
/// block on chip; unfused execution writes and re-reads each one.
pub fn block_ledger(
    model: &ModelConfig,
    mode: ExecMode,
    s: usize,
    fused: bool,
    fmt: FloatFormat,
) -> Vec<TrafficItem> {
    let b = fmt.bytes() as f64;
    let (q, kv) = pass_shape(mode, s);
    let (q, kv) = (q as f64, kv as f64);
    let (e, hp, h, ff) = (
        model.e as f64,
        model.hp() as f64,
        model.h as f64,
        model.ff as f64,
    );
    let mut v = vec![
        item("block input X", q * e * b, 0.0),
        item("W_Q, W_K, W_V", 3.0 * e * hp * b, 0.0),
        item("W_L", hp * e * b, 0.0),
        item("W1", e * ff * b, 0.0),
        item("W2", ff * e * b, 0.0),
        item("block output", 0.0, q * e * b),
    ];
    if mode == ExecMode::Ar {
        v.push(item("KV cache", 2.0 * (kv - 1.0) * hp * b, 2.0 * hp * b));
    }
    if !fused {
        v.push(item("Q, K, V", 3.0 * q * hp * b, 3.0 * q * hp * b));
        v.push(item(
            "attention probabilities",
            h * q * kv * b,
            h * q * kv * b,
        ));
        v.push(item("head outputs", q * hp * b, q * hp * b));
        v.push(item("GELU input", q * ff * b, q * ff * b));
    }
    v
}

fn sums(items: &[TrafficItem]) -> (f64, f64) {
    items.iter().fold((0.0, 0.0), |(r, w), i| {
        (r + i.read_bytes, w + i.write_bytes)
    })
}

pub fn hbm_traffic(
    model: &ModelConfig,
    mode: ExecMode,
    s: usize,
    fused: bool,
    fmt: FloatFormat,
) -> TrafficReport {
    let b = fmt.bytes() as f64;
    let (q, _) = pass_shape(mode, s);
    let block_items = block_ledger(model, mode, s, fused, fmt);
    let (br, bw) = sums(&block_items);
    let mut model_items = Vec::new();
    if model.blocks == 0 {
        model_items.push(item("input", q as f64 * model.e as f64 * b, 0.0));
        model_items.push(item("output", 0.0, q as f64 * model.e as f64 * b));
    }
    if model.kind == ModelKind::Vit && mode == ExecMode::Vit {
        let patches = (s - 1) as f64;
        let (pd, e, c) = (
            model.patch_dim as f64,
            model.e as f64,
            model.num_classes as f64,
        );
        model_items.push(item("image patches", patches * pd * b, 0.0));
        model_items.push(item("patch embedding weights", pd * e * b, 0.0));
        model_items.push(item("classifier weights", e * c * b, c * b));
    }
    let (mr, mw) = sums(&model_items);
    let n = model.blocks as f64;
    TrafficReport {
        fused,
        fmt,
        block_items,
        model_items,
        block_read_bytes: br,
        block_write_bytes: bw,
        bytes_read: n * br + mr,
        bytes_written: n * bw + mw,
        assumption: TRAFFIC_ASSUMPTION.into(),
    }
}
