//! Model zoo, analytic FLOP and traffic accounting, and executors.

pub mod config;
pub mod decoder;
pub mod exec;
pub mod flops;
pub mod timing;
pub mod traffic;

pub use config::{ModelConfig, ModelKind, PRESET_NAMES};
pub use decoder::{KvCache, ToyConfig, ToyDecoder};
pub use exec::{run_ar_generate, run_nar, run_vit, RunOptions, RunReport};
pub use flops::{count_flops, count_flops_with, BlockFlops, ExecMode};
pub use traffic::{hbm_traffic, TrafficReport};
