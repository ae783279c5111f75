//! Scaled dot-product attention: a row-wise reference and the blocked
//! FlashAttention-2 forward pass with an online softmax.

use crate::error::{Error, Result};
use crate::numerics::{check_widening, quantize, widening_dot_unchecked, FloatFormat};
use crate::tensor::Matrix;

#[derive(Debug, Clone)]
pub struct AttentionInputs {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub causal: bool,
    pub scale: f64,
}

impl AttentionInputs {
    /// Inputs with the default `1/sqrt(P)` scale.
    pub fn new(q: Matrix, k: Matrix, v: Matrix, causal: bool) -> Result<Self> {
        let scale = 1.0 / (q.cols() as f64).sqrt();
        let inp = AttentionInputs {
            q,
            k,
            v,
            causal,
            scale,
        };
        inp.validate()?;
        Ok(inp)
    }

    pub fn validate(&self) -> Result<()> {
        if self.q.cols() != self.k.cols() {
            return Err(Error::Shape(format!(
                "Q has {} cols, K has {}",
                self.q.cols(),
                self.k.cols()
            )));
        }
        if self.k.rows() != self.v.rows() {
            return Err(Error::Shape(format!(
                "K has {} rows, V has {}",
                self.k.rows(),
                self.v.rows()
            )));
        }
        if self.k.rows() == 0 {
            return Err(Error::Shape("attention over zero keys".into()));
        }
        if self.causal && self.q.rows() > self.k.rows() {
            return Err(Error::Shape(format!(
                "causal attention with {} queries over {} keys",
                self.q.rows(),
                self.k.rows()
            )));
        }
        Ok(())
    }

    /// Last visible key for query `i`. Causal masks are aligned to the end of
    /// the key sequence so a decode step sees the whole cache.
    #[inline]
    fn last_key(&self, i: usize) -> usize {
        if self.causal {
            i + self.k.rows() - self.q.rows()
        } else {
            self.k.rows() - 1
        }
    }
}

/// Running statistics of one query block.
#[derive(Debug, Clone)]
pub struct OnlineSoftmaxState {
    /// Row max of all scores seen so far.
    pub m: Vec<f64>,
    /// Running denominator, relative to `m`.
    pub l: Vec<f64>,
    /// Unnormalised output accumulator, `rows x cols` row-major.
    pub o_acc: Vec<f64>,
    pub cols: usize,
}

impl OnlineSoftmaxState {
    pub fn new(rows: usize, cols: usize) -> Self {
        OnlineSoftmaxState {
            m: vec![f64::NEG_INFINITY; rows],
            l: vec![0.0; rows],
            o_acc: vec![0.0; rows * cols],
            cols,
        }
    }
}

fn in_format(m: &Matrix, fmt: FloatFormat) -> Matrix {
    if m.fmt() == fmt {
        m.clone()
    } else {
        m.convert(fmt)
    }
}

/// Reference attention: full score rows, stable softmax, then `P V`.
pub fn attention_naive(inp: &AttentionInputs, compute_fmt: FloatFormat) -> Result<Matrix> {
    inp.validate()?;
    let acc = compute_fmt.default_accumulator();
    let stats = compute_fmt.statistics_format();
    check_widening(compute_fmt, acc)?;
    let q = in_format(&inp.q, compute_fmt);
    let k = in_format(&inp.k, compute_fmt);
    let vt = in_format(&inp.v, compute_fmt).transpose();
    let (s1, s2, p) = (q.rows(), k.rows(), vt.rows());
    let scale = quantize(inp.scale, stats);
    let mut out = Matrix::zeros(s1, p, compute_fmt);
    let mut probs = vec![0.0; s2];
    for i in 0..s1 {
        let last = inp.last_key(i);
        let mut row_max = f64::NEG_INFINITY;
        for (j, pj) in probs.iter_mut().enumerate() {
            *pj = if j <= last {
                let s = quantize(widening_dot_unchecked(q.row(i), k.row(j), acc), stats);
                let s = quantize(s * scale, stats);
                row_max = row_max.max(s);
                s
            } else {
                f64::NEG_INFINITY
            };
        }
        let mut denom = 0.0;
        for pj in probs.iter_mut() {
            *pj = if pj.is_finite() {
                quantize((*pj - row_max).exp(), stats)
            } else {
                0.0
            };
            denom = quantize(denom + *pj, stats);
        }
        for pj in probs.iter_mut() {
            *pj = quantize(quantize(*pj / denom, stats), compute_fmt);
        }
        for c in 0..p {
            out.set(i, c, widening_dot_unchecked(&probs, vt.row(c), acc));
        }
    }
    Ok(out)
}

/// FlashAttention-2 forward pass with `br x bc` blocks.
///
/// Scores leave the low-precision GEMM and are converted up to the
/// statistics format; probabilities are converted down again before the
/// `P V` GEMM; normalisation is deferred to the end of each row block.
pub fn flash_attention2(
    inp: &AttentionInputs,
    br: usize,
    bc: usize,
    compute_fmt: FloatFormat,
) -> Result<Matrix> {
    inp.validate()?;
    let (s1, s2) = (inp.q.rows(), inp.k.rows());
    if br == 0 || br > s1.max(1) || bc == 0 || bc > s2 {
        return Err(Error::BlockSize(format!(
            "Br={br}, Bc={bc} for S1={s1}, S2={s2}"
        )));
    }
    let acc = compute_fmt.default_accumulator();
    let stats = compute_fmt.statistics_format();
    check_widening(compute_fmt, acc)?;
    let q = in_format(&inp.q, compute_fmt);
    let k = in_format(&inp.k, compute_fmt);
    let vt = in_format(&inp.v, compute_fmt).transpose();
    let p = vt.rows();
    let scale = quantize(inp.scale, stats);
    let mut out = Matrix::zeros(s1, p, compute_fmt);

    let mut scores = vec![0.0; br * bc];
    for r0 in (0..s1).step_by(br) {
        let rows = br.min(s1 - r0);
        let mut st = OnlineSoftmaxState::new(rows, p);
        let last_visible = inp.last_key(r0 + rows - 1);
        for c0 in (0..s2).step_by(bc) {
            if c0 > last_visible {
                break;
            }
            let cols = bc.min(s2 - c0);
            // S = Q_i K_j^T, up-converted and scaled.
            for i in 0..rows {
                let last = inp.last_key(r0 + i);
                for j in 0..cols {
                    scores[i * bc + j] = if c0 + j <= last {
                        let s = quantize(
                            widening_dot_unchecked(q.row(r0 + i), k.row(c0 + j), acc),
                            stats,
                        );
                        quantize(s * scale, stats)
                    } else {
                        f64::NEG_INFINITY
                    };
                }
            }
            for i in 0..rows {
                let row = &mut scores[i * bc..i * bc + cols];
                let block_max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let m_new = st.m[i].max(block_max);
                if m_new == f64::NEG_INFINITY {
                    continue;
                }
                let corr = if st.m[i] == f64::NEG_INFINITY {
                    0.0
                } else {
                    quantize((st.m[i] - m_new).exp(), stats)
                };
                let mut rowsum = 0.0;
                for s in row.iter_mut() {
                    *s = if s.is_finite() {
                        quantize((*s - m_new).exp(), stats)
                    } else {
                        0.0
                    };
                    rowsum = quantize(rowsum + *s, stats);
                    *s = quantize(*s, compute_fmt);
                }
                st.l[i] = quantize(corr * st.l[i] + rowsum, stats);
                for c in 0..p {
                    let pv = widening_dot_unchecked(row, &vt.row(c)[c0..c0 + cols], acc);
                    let o = &mut st.o_acc[i * p + c];
                    *o = quantize(corr * *o + pv, stats);
                }
                st.m[i] = m_new;
            }
        }
        for i in 0..rows {
            for c in 0..p {
                out.set(r0 + i, c, st.o_acc[i * p + c] / st.l[i]);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand(rows: usize, cols: usize, seed: u64) -> Matrix {
        Matrix::seeded_random(rows, cols, FloatFormat::Fp64, seed, (-1.0, 1.0))
    }

    #[test]
    fn single_key_returns_value_row() {
        let v = rand(1, 4, 3);
        let inp = AttentionInputs::new(rand(5, 4, 1), rand(1, 4, 2), v.clone(), false).unwrap();
        let o = attention_naive(&inp, FloatFormat::Fp64).unwrap();
        for i in 0..5 {
            assert_eq!(o.row(i), v.row(0));
        }
    }

    #[test]
    fn zero_queries_average_values() {
        let v = rand(6, 3, 3);
        let inp = AttentionInputs::new(
            Matrix::zeros(4, 5, FloatFormat::Fp64),
            rand(6, 5, 2),
            v.clone(),
            false,
        )
        .unwrap();
        let o = attention_naive(&inp, FloatFormat::Fp64).unwrap();
        for c in 0..3 {
            let mean = v.column(c).iter().sum::<f64>() / 6.0;
            for i in 0..4 {
                assert!((o.get(i, c) - mean).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn causal_first_row_is_first_value() {
        let v = rand(5, 3, 9);
        let inp = AttentionInputs::new(rand(5, 3, 7), rand(5, 3, 8), v.clone(), true).unwrap();
        let o = attention_naive(&inp, FloatFormat::Fp64).unwrap();
        assert_eq!(o.row(0), v.row(0));
        let f = flash_attention2(&inp, 2, 2, FloatFormat::Fp64).unwrap();
        assert_eq!(f.row(0), v.row(0));
    }

    #[test]
    fn single_block_matches_naive() {
        let inp = AttentionInputs::new(rand(7, 4, 1), rand(9, 4, 2), rand(9, 4, 3), false).unwrap();
        let n = attention_naive(&inp, FloatFormat::Fp64).unwrap();
        let f = flash_attention2(&inp, 7, 9, FloatFormat::Fp64).unwrap();
        assert!(f.max_abs_diff(&n) <= 1e-14);
    }

    #[test]
    fn small_blocks_match_naive_both_masks() {
        for causal in [false, true] {
            let inp = AttentionInputs::new(rand(8, 4, 11), rand(8, 4, 12), rand(8, 4, 13), causal)
                .unwrap();
            let n = attention_naive(&inp, FloatFormat::Fp64).unwrap();
            let f = flash_attention2(&inp, 2, 2, FloatFormat::Fp64).unwrap();
            assert!(f.max_abs_diff(&n) <= 1e-12, "causal={causal}");
        }
    }

    #[test]
    fn one_hot_values_give_probability_rows() {
        let s = 6;
        let inp = AttentionInputs::new(
            Matrix::seeded_random(s, 4, FloatFormat::Fp32, 1, (-2.0, 2.0)),
            Matrix::seeded_random(s, 4, FloatFormat::Fp32, 2, (-2.0, 2.0)),
            Matrix::identity(s, FloatFormat::Fp32),
            false,
        )
        .unwrap();
        let o = flash_attention2(&inp, 4, 4, FloatFormat::Fp32).unwrap();
        for i in 0..s {
            let sum: f64 = o.row(i).iter().sum();
            assert!((sum - 1.0).abs() <= 1e-6);
            assert!(o.row(i).iter().all(|p| *p > 0.0));
        }
    }

    #[test]
    fn decode_row_sees_whole_cache() {
        // One causal query over three keys must equal the last row of the full pass.
        let q = rand(3, 4, 1);
        let (k, v) = (rand(3, 4, 2), rand(3, 4, 3));
        let full = flash_attention2(
            &AttentionInputs::new(q.clone(), k.clone(), v.clone(), true).unwrap(),
            1,
            1,
            FloatFormat::Fp64,
        )
        .unwrap();
        let last_q = Matrix::materialize(1, 4, FloatFormat::Fp64, q.row(2).to_vec()).unwrap();
        let one = flash_attention2(
            &AttentionInputs::new(last_q, k, v, true).unwrap(),
            1,
            1,
            FloatFormat::Fp64,
        )
        .unwrap();
        assert!((0..4).all(|c| (one.get(0, c) - full.get(2, c)).abs() < 1e-15));
    }

    #[test]
    fn rejects_bad_shapes_and_blocks() {
        assert!(AttentionInputs::new(rand(2, 3, 1), rand(2, 4, 2), rand(2, 4, 3), false).is_err());
        assert!(AttentionInputs::new(rand(2, 4, 1), rand(2, 4, 2), rand(3, 4, 3), false).is_err());
        assert!(AttentionInputs::new(rand(3, 4, 1), rand(2, 4, 2), rand(2, 4, 3), true).is_err());
        let inp = AttentionInputs::new(rand(2, 4, 1), rand(2, 4, 2), rand(2, 4, 3), false).unwrap();
        assert!(flash_attention2(&inp, 0, 1, FloatFormat::Fp64).is_err());
        assert!(flash_attention2(&inp, 1, 3, FloatFormat::Fp64).is_err());
    }
}
