//! Multi-head attention and MLP blocks assembled from the kernels.

use crate::error::{Error, Result};
use crate::kernels::activation::i_gelu;
use crate::kernels::attention::{flash_attention2, AttentionInputs};
use crate::kernels::gemm::gemm_naive_to;
use crate::kernels::reduce::tree_reduce;
use crate::numerics::{quantize, FloatFormat};
use crate::par::{self, ExecPolicy};
use crate::scheduler::ReductionSchedule;
use crate::tensor::{Matrix, TileSpec};

/// Projection weights for `H` heads of width `P`: `w_q`, `w_k`, `w_v` are
/// `E x HP`, `w_l` is `HP x E`. Biases are optional and default to zero.
#[derive(Debug, Clone)]
pub struct MhaWeights {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_l: Matrix,
    pub b_q: Option<Vec<f64>>,
    pub b_k: Option<Vec<f64>>,
    pub b_v: Option<Vec<f64>>,
    pub b_l: Option<Vec<f64>>,
}

impl MhaWeights {
    pub fn new(w_q: Matrix, w_k: Matrix, w_v: Matrix, w_l: Matrix) -> Self {
        MhaWeights {
            w_q,
            w_k,
            w_v,
            w_l,
            b_q: None,
            b_k: None,
            b_v: None,
            b_l: None,
        }
    }

    /// Uniform random weights scaled by `1/sqrt(fan_in)`.
    pub fn seeded(e: usize, heads: usize, p: usize, fmt: FloatFormat, seed: u64) -> Self {
        let hp = heads * p;
        let a = 1.0 / (e as f64).sqrt();
        let b = 1.0 / (hp as f64).sqrt();
        MhaWeights::new(
            Matrix::seeded_random(e, hp, fmt, seed, (-a, a)),
            Matrix::seeded_random(e, hp, fmt, seed + 1, (-a, a)),
            Matrix::seeded_random(e, hp, fmt, seed + 2, (-a, a)),
            Matrix::seeded_random(hp, e, fmt, seed + 3, (-b, b)),
        )
    }

    fn check(&self, e: usize, heads: usize) -> Result<usize> {
        let hp = self.w_q.cols();
        if heads == 0 || !hp.is_multiple_of(heads) {
            return Err(Error::Shape(format!(
                "{hp} projection columns over {heads} heads"
            )));
        }
        for (name, w) in [("W_Q", &self.w_q), ("W_K", &self.w_k), ("W_V", &self.w_v)] {
            if w.shape() != (e, hp) {
                return Err(Error::Shape(format!(
                    "{name} is {:?}, expected {:?}",
                    w.shape(),
                    (e, hp)
                )));
            }
        }
        if self.w_l.shape() != (hp, e) {
            return Err(Error::Shape(format!(
                "W_L is {:?}, expected {:?}",
                self.w_l.shape(),
                (hp, e)
            )));
        }
        Ok(hp / heads)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MhaConfig {
    pub heads: usize,
    pub causal: bool,
    pub br: usize,
    pub bc: usize,
    pub compute_fmt: FloatFormat,
    pub acc_fmt: FloatFormat,
    pub policy: ExecPolicy,
}

impl MhaConfig {
    pub fn new(heads: usize, causal: bool, compute_fmt: FloatFormat) -> Self {
        MhaConfig {
            heads,
            causal,
            br: 16,
            bc: 16,
            compute_fmt,
            acc_fmt: compute_fmt.default_accumulator(),
            policy: ExecPolicy::default(),
        }
    }
}

/// `X W + b`, accumulated in `acc_fmt` and rounded to `out_fmt`.
pub fn linear(
    x: &Matrix,
    w: &Matrix,
    bias: Option<&[f64]>,
    acc_fmt: FloatFormat,
    out_fmt: FloatFormat,
) -> Result<Matrix> {
    let xw = gemm_naive_to(x, w, 1.0, acc_fmt, acc_fmt)?;
    let mut out = Matrix::zeros(xw.rows(), xw.cols(), out_fmt);
    if let Some(b) = bias {
        if b.len() != w.cols() {
            return Err(Error::Shape(format!(
                "bias of length {} for {} outputs",
                b.len(),
                w.cols()
            )));
        }
    }
    for i in 0..xw.rows() {
        for j in 0..xw.cols() {
            let v = xw.get(i, j) + bias.map_or(0.0, |b| b[j]);
            out.set(i, j, quantize(v, acc_fmt));
        }
    }
    Ok(out)
}

fn head_cols(m: &Matrix, h: usize, p: usize) -> Result<Matrix> {
    m.tile(TileSpec::new(0, h * p, m.rows(), p))
}

fn head_rows(m: &Matrix, h: usize, p: usize) -> Result<Matrix> {
    m.tile(TileSpec::new(h * p, 0, p, m.cols()))
}

/// Per-head attention outputs `O_h` for already projected `Q`, `K`, `V`
/// (`S x HP` each; `K`/`V` may be longer than `Q` for cached decoding).
pub fn attend_heads(q: &Matrix, k: &Matrix, v: &Matrix, cfg: &MhaConfig) -> Result<Vec<Matrix>> {
    let heads = cfg.heads;
    if heads == 0 || !q.cols().is_multiple_of(heads) || k.cols() != q.cols() || v.cols() != q.cols()
    {
        return Err(Error::Shape(format!(
            "Q/K/V widths {}/{}/{} over {heads} heads",
            q.cols(),
            k.cols(),
            v.cols()
        )));
    }
    let p = q.cols() / heads;
    let br = cfg.br.clamp(1, q.rows().max(1));
    let bc = cfg.bc.clamp(1, k.rows().max(1));
    par::map_indexed(cfg.policy, heads, |h| {
        let inp = AttentionInputs::new(
            head_cols(q, h, p)?,
            head_cols(k, h, p)?,
            head_cols(v, h, p)?,
            cfg.causal,
        )?;
        flash_attention2(&inp, br, bc, cfg.compute_fmt)
    })
    .into_iter()
    .collect()
}

/// Fused concat + linear: each head multiplies its `O_h` by its `P` rows of
/// `W_L`; the partials are summed by a binary tree in the accumulator format.
pub fn fused_concat_linear(outs: &[Matrix], w: &MhaWeights, cfg: &MhaConfig) -> Result<Matrix> {
    let p = w.w_l.rows() / cfg.heads.max(1);
    let w_l = w.w_l.convert(cfg.compute_fmt);
    let partials = par::map_indexed(cfg.policy, outs.len(), |h| {
        gemm_naive_to(
            &outs[h],
            &head_rows(&w_l, h, p)?,
            1.0,
            cfg.acc_fmt,
            cfg.acc_fmt,
        )
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let sum = tree_reduce(&partials, &ReductionSchedule::binary(partials.len()))?;
    let mut out = Matrix::zeros(sum.rows(), sum.cols(), cfg.compute_fmt);
    for i in 0..sum.rows() {
        for j in 0..sum.cols() {
            let v = sum.get(i, j) + w.b_l.as_ref().map_or(0.0, |b| b[j]);
            out.set(i, j, quantize(v, cfg.acc_fmt));
        }
    }
    Ok(out)
}

/// Q, K, V projections in the compute format.
pub fn project_qkv(
    x: &Matrix,
    w: &MhaWeights,
    cfg: &MhaConfig,
) -> Result<(Matrix, Matrix, Matrix)> {
    w.check(x.cols(), cfg.heads)?;
    let x = x.convert(cfg.compute_fmt);
    let f = cfg.compute_fmt;
    let proj =
        |m: &Matrix, b: &Option<Vec<f64>>| linear(&x, &m.convert(f), b.as_deref(), cfg.acc_fmt, f);
    Ok((
        proj(&w.w_q, &w.b_q)?,
        proj(&w.w_k, &w.b_k)?,
        proj(&w.w_v, &w.b_v)?,
    ))
}

/// Multi-head self-attention over `X` (`S x E`).
pub fn mha_block(x: &Matrix, w: &MhaWeights, cfg: &MhaConfig) -> Result<Matrix> {
    let (q, k, v) = project_qkv(x, w, cfg)?;
    let outs = attend_heads(&q, &k, &v, cfg)?;
    fused_concat_linear(&outs, w, cfg)
}

/// Unfused reference: explicit concatenation of all heads, then one GEMM.
pub fn mha_block_unfused(x: &Matrix, w: &MhaWeights, cfg: &MhaConfig) -> Result<Matrix> {
    let p = w.check(x.cols(), cfg.heads)?;
    let (q, k, v) = project_qkv(x, w, cfg)?;
    let mut outs = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let inp = AttentionInputs::new(
            head_cols(&q, h, p)?,
            head_cols(&k, h, p)?,
            head_cols(&v, h, p)?,
            cfg.causal,
        )?;
        outs.push(crate::kernels::attention::attention_naive(
            &inp,
            cfg.compute_fmt,
        )?);
    }
    let concat = Matrix::hconcat(&outs)?;
    linear(
        &concat,
        &w.w_l.convert(cfg.compute_fmt),
        w.b_l.as_deref(),
        cfg.acc_fmt,
        cfg.compute_fmt,
    )
}

#[derive(Debug, Clone)]
pub struct MlpWeights {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl MlpWeights {
    pub fn seeded(e: usize, ff: usize, fmt: FloatFormat, seed: u64) -> Self {
        let a = 1.0 / (e as f64).sqrt();
        let b = 1.0 / (ff as f64).sqrt();
        MlpWeights {
            w1: Matrix::seeded_random(e, ff, fmt, seed, (-a, a)),
            b1: vec![0.0; ff],
            w2: Matrix::seeded_random(ff, e, fmt, seed + 1, (-b, b)),
            b2: vec![0.0; e],
        }
    }
}

/// `i_gelu(X W1 + b1) W2 + b2`. The first GEMM's result is widened to the
/// statistics format for the activation and converted back before `W2`.
pub fn mlp_block(x: &Matrix, w: &MlpWeights, acc_fmt: FloatFormat) -> Result<Matrix> {
    let fmt = x.fmt();
    let stats = fmt.statistics_format();
    let h = linear(x, &w.w1.convert(fmt), Some(&w.b1), acc_fmt, stats)?;
    let g = Matrix::from_fn(h.rows(), h.cols(), fmt, |i, j| {
        quantize(i_gelu(h.get(i, j)), stats)
    });
    linear(&g, &w.w2.convert(fmt), Some(&w.b2), acc_fmt, fmt)
}
