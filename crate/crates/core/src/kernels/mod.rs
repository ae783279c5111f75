//! Functional kernels and their reference oracles.

pub mod activation;
pub mod attention;
pub mod blocks;
pub mod gemm;
pub mod reduce;

pub use activation::{gelu_exact, i_gelu, i_gelu_matrix, i_gelu_with, layernorm};
pub use attention::{attention_naive, flash_attention2, AttentionInputs, OnlineSoftmaxState};
pub use blocks::{mha_block, mha_block_unfused, mlp_block, MhaConfig, MhaWeights, MlpWeights};
pub use gemm::{gemm_naive, gemm_naive_to, gemm_tiled, gemm_tiled_with};
pub use reduce::tree_reduce;
