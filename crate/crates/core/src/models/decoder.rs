//! Desk-scale functional decoder used to check cached generation against a
//! full causal pass.

use crate::error::{Error, Result};
use crate::kernels::activation::layernorm;
use crate::kernels::blocks::{attend_heads, fused_concat_linear, linear, mlp_block, project_qkv};
use crate::kernels::{MhaConfig, MhaWeights, MlpWeights};
use crate::numerics::FloatFormat;
use crate::tensor::{Matrix, TileSpec};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyConfig {
    pub blocks: usize,
    pub e: usize,
    pub h: usize,
    pub p: usize,
    pub ff: usize,
    pub vocab: usize,
    pub max_len: usize,
    pub fmt: FloatFormat,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            blocks: 2,
            e: 16,
            h: 2,
            p: 8,
            ff: 32,
            vocab: 32,
            max_len: 64,
            fmt: FloatFormat::Fp64,
        }
    }
}

#[derive(Debug, Clone)]
struct BlockWeights {
    mha: MhaWeights,
    mlp: MlpWeights,
    ln1: (Vec<f64>, Vec<f64>),
    ln2: (Vec<f64>, Vec<f64>),
}

/// Per-block keys and values of every token processed so far.
#[derive(Debug, Clone)]
pub struct KvCache {
    k: Vec<Matrix>,
    v: Vec<Matrix>,
    len: usize,
    max_len: usize,
}

impl KvCache {
    pub fn new(blocks: usize, width: usize, max_len: usize, fmt: FloatFormat) -> Self {
        KvCache {
            k: vec![Matrix::zeros(0, width, fmt); blocks],
            v: vec![Matrix::zeros(0, width, fmt); blocks],
            len: 0,
            max_len,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn keys(&self, block: usize) -> &Matrix {
        &self.k[block]
    }

    pub fn values(&self, block: usize) -> &Matrix {
        &self.v[block]
    }

    /// Check that `extra` more rows fit.
    pub fn reserve(&self, extra: usize) -> Result<()> {
        if self.len + extra > self.max_len {
            return Err(Error::CacheOverflow {
                len: self.len,
                extra,
                max: self.max_len,
            });
        }
        Ok(())
    }

    fn append(&mut self, block: usize, k: &Matrix, v: &Matrix) -> Result<()> {
        self.reserve(k.rows())?;
        self.k[block] = Matrix::vconcat(&[self.k[block].clone(), k.clone()])?;
        self.v[block] = Matrix::vconcat(&[self.v[block].clone(), v.clone()])?;
        if block + 1 == self.k.len() {
            self.len += k.rows();
        }
        Ok(())
    }
}

/// Post-norm decoder: `h = LN(x + MHA(x))`, `y = LN(h + MLP(h))`, then a
/// linear map to vocabulary logits.
#[derive(Debug, Clone)]
pub struct ToyDecoder {
    pub cfg: ToyConfig,
    embed: Matrix,
    blocks: Vec<BlockWeights>,
    w_out: Matrix,
}

fn add(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let mut out = a.clone();
    out.accumulate(b)?;
    Ok(out)
}

impl ToyDecoder {
    pub fn seeded(cfg: ToyConfig, seed: u64) -> Self {
        let f = cfg.fmt;
        let blocks = (0..cfg.blocks)
            .map(|i| {
                let s = seed + 100 * (i as u64 + 1);
                let ln = |o: u64| {
                    let g = Matrix::seeded_random(1, cfg.e, f, s + o, (0.8, 1.2)).into_data();
                    let b = Matrix::seeded_random(1, cfg.e, f, s + o + 1, (-0.1, 0.1)).into_data();
                    (g, b)
                };
                BlockWeights {
                    mha: MhaWeights::seeded(cfg.e, cfg.h, cfg.p, f, s),
                    mlp: MlpWeights::seeded(cfg.e, cfg.ff, f, s + 10),
                    ln1: ln(20),
                    ln2: ln(30),
                }
            })
            .collect();
        ToyDecoder {
            cfg,
            embed: Matrix::seeded_random(cfg.vocab, cfg.e, f, seed, (-1.0, 1.0)),
            blocks,
            w_out: Matrix::seeded_random(cfg.e, cfg.vocab, f, seed + 1, (-0.5, 0.5)),
        }
    }

    fn mha_cfg(&self) -> MhaConfig {
        MhaConfig {
            br: 4,
            bc: 4,
            ..MhaConfig::new(self.cfg.h, true, self.cfg.fmt)
        }
    }

    pub fn new_cache(&self) -> KvCache {
        KvCache::new(
            self.cfg.blocks,
            self.cfg.h * self.cfg.p,
            self.cfg.max_len,
            self.cfg.fmt,
        )
    }

    fn embed(&self, tokens: &[usize]) -> Result<Matrix> {
        let rows = tokens
            .iter()
            .map(|&t| {
                if t >= self.cfg.vocab {
                    return Err(Error::config(
                        "token",
                        format!("{t} outside vocabulary of {}", self.cfg.vocab),
                    ));
                }
                self.embed.tile(TileSpec::new(t, 0, 1, self.cfg.e))
            })
            .collect::<Result<Vec<_>>>()?;
        Matrix::vconcat(&rows)
    }

    fn block(&self, i: usize, x: &Matrix, cache: Option<&mut KvCache>) -> Result<Matrix> {
        let w = &self.blocks[i];
        let mcfg = self.mha_cfg();
        let (q, k, v) = project_qkv(x, &w.mha, &mcfg)?;
        let outs = match cache {
            Some(c) => {
                c.append(i, &k, &v)?;
                attend_heads(&q, c.keys(i), c.values(i), &mcfg)?
            }
            None => attend_heads(&q, &k, &v, &mcfg)?,
        };
        let a = fused_concat_linear(&outs, &w.mha, &mcfg)?;
        let h = layernorm(&add(x, &a)?, &w.ln1.0, &w.ln1.1, 1e-5)?;
        let m = mlp_block(&h, &w.mlp, mcfg.acc_fmt)?;
        layernorm(&add(&h, &m)?, &w.ln2.0, &w.ln2.1, 1e-5)
    }

    fn logits(&self, x: &Matrix) -> Result<Matrix> {
        let acc = self.cfg.fmt.default_accumulator();
        linear(x, &self.w_out, None, acc, self.cfg.fmt)
    }

    /// Full causal pass: row `t` holds the logits after token `t`.
    pub fn forward(&self, tokens: &[usize]) -> Result<Matrix> {
        let mut x = self.embed(tokens)?;
        for i in 0..self.cfg.blocks {
            x = self.block(i, &x, None)?;
        }
        self.logits(&x)
    }

    /// Process `tokens` against `cache`, appending their keys and values.
    pub fn forward_cached(&self, tokens: &[usize], cache: &mut KvCache) -> Result<Matrix> {
        cache.reserve(tokens.len())?;
        let mut x = self.embed(tokens)?;
        for i in 0..self.cfg.blocks {
            x = self.block(i, &x, Some(cache))?;
        }
        self.logits(&x)
    }

    /// Greedy generation of `n_new` tokens. An empty prompt starts from
    /// token 0. Returns all tokens and one logits row per processed position.
    pub fn generate(&self, prompt: &[usize], n_new: usize) -> Result<Generation> {
        let mut cache = self.new_cache();
        let mut tokens = if prompt.is_empty() {
            vec![0]
        } else {
            prompt.to_vec()
        };
        if n_new == 0 {
            return Ok(Generation {
                tokens,
                logits: Vec::new(),
                cache_len: 0,
            });
        }
        cache.reserve(tokens.len() + n_new - 1)?;
        let mut logits = Vec::new();
        let mut l = self.forward_cached(&tokens, &mut cache)?;
        for step in 0..n_new {
            for r in 0..l.rows() {
                logits.push(l.row(r).to_vec());
            }
            let next = argmax(l.row(l.rows() - 1));
            tokens.push(next);
            if step + 1 < n_new {
                l = self.forward_cached(&[next], &mut cache)?;
            }
        }
        Ok(Generation {
            tokens,
            logits,
            cache_len: cache.len(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct Generation {
    pub tokens: Vec<usize>,
    pub logits: Vec<Vec<f64>>,
    pub cache_len: usize,
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
