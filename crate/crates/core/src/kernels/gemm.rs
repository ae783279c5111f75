use crate::error::{Error, Result};
use crate::kernels::reduce::tree_reduce;
use crate::numerics::{check_widening, quantize, widening_dot_unchecked, FloatFormat};
use crate::par::{self, ExecPolicy};
use crate::scheduler::{tile_ranges, ReductionSchedule, SpatialDim, TilingPlan};
use crate::tensor::Matrix;

fn check_shapes(a: &Matrix, b: &Matrix) -> Result<()> {
    if a.cols() != b.rows() {
        return Err(Error::Shape(format!(
            "gemm inner dims {}x{} * {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    Ok(())
}

/// Reference `C = alpha * A x B`, one left-to-right accumulation chain per
/// output element in `acc_fmt`; output in `A`'s format.
pub fn gemm_naive(a: &Matrix, b: &Matrix, alpha: f64, acc_fmt: FloatFormat) -> Result<Matrix> {
    gemm_naive_to(a, b, alpha, acc_fmt, a.fmt())
}

pub fn gemm_naive_to(
    a: &Matrix,
    b: &Matrix,
    alpha: f64,
    acc_fmt: FloatFormat,
    out_fmt: FloatFormat,
) -> Result<Matrix> {
    check_shapes(a, b)?;
    check_widening(a.fmt(), acc_fmt)?;
    let bt = b.transpose();
    let mut out = Matrix::zeros(a.rows(), b.cols(), out_fmt);
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let dot = widening_dot_unchecked(a.row(i), bt.row(j), acc_fmt);
            out.set(i, j, quantize(alpha * dot, acc_fmt));
        }
    }
    Ok(out)
}

/// Accumulate the product of row block `rows` and k range `ks` into `acc`
/// (row-major `rows.len() x n`) tile by tile, continuing each chain.
fn accumulate_part(
    a: &Matrix,
    bt: &Matrix,
    rows: std::ops::Range<usize>,
    ks: std::ops::Range<usize>,
    plan: &TilingPlan,
    acc_fmt: FloatFormat,
) -> Vec<f64> {
    let n = bt.rows();
    let mut acc = vec![0.0; rows.len() * n];
    let t = plan.tile_shape;
    for mt in tile_ranges(rows.len(), t.m) {
        for nt in tile_ranges(n, t.n) {
            for kt in tile_ranges(ks.len(), t.k) {
                let k0 = ks.start + kt.start;
                let k1 = ks.start + kt.end;
                for i in mt.clone() {
                    let arow = &a.row(rows.start + i)[k0..k1];
                    for j in nt.clone() {
                        let brow = &bt.row(j)[k0..k1];
                        let slot = &mut acc[i * n + j];
                        *slot = arow
                            .iter()
                            .zip(brow)
                            .fold(*slot, |s, (x, y)| quantize(s + x * y, acc_fmt));
                    }
                }
            }
        }
    }
    acc
}

/// Tiled GEMM following `plan`: spatial parts across (simulated) clusters,
/// temporal tiles within each part. K-spatial partials are combined with a
/// binary tree reduction in `acc_fmt`.
pub fn gemm_tiled(
    a: &Matrix,
    b: &Matrix,
    alpha: f64,
    plan: &TilingPlan,
    in_fmt: FloatFormat,
    acc_fmt: FloatFormat,
) -> Result<Matrix> {
    gemm_tiled_with(a, b, alpha, plan, in_fmt, acc_fmt, ExecPolicy::default())
}

pub fn gemm_tiled_with(
    a: &Matrix,
    b: &Matrix,
    alpha: f64,
    plan: &TilingPlan,
    in_fmt: FloatFormat,
    acc_fmt: FloatFormat,
    policy: ExecPolicy,
) -> Result<Matrix> {
    check_shapes(a, b)?;
    check_widening(in_fmt, acc_fmt)?;
    if (plan.m, plan.n, plan.k) != (a.rows(), b.cols(), a.cols()) {
        return Err(Error::InvalidPlan(format!(
            "plan for {}x{}x{} used on {}x{}x{}",
            plan.m,
            plan.n,
            plan.k,
            a.rows(),
            b.cols(),
            a.cols()
        )));
    }
    let t = plan.tile_shape;
    if t.m == 0 || t.n == 0 || t.k == 0 || plan.spatial_parts == 0 {
        return Err(Error::InvalidPlan("zero tile or part count".into()));
    }
    let a = if a.fmt() == in_fmt {
        a.clone()
    } else {
        a.convert(in_fmt)
    };
    let bt = if b.fmt() == in_fmt {
        b.transpose()
    } else {
        b.convert(in_fmt).transpose()
    };
    let (m, n) = (plan.m, plan.n);
    let parts = plan.part_ranges();
    let partials = par::map_indexed(policy, parts.len(), |p| {
        let (rows, ks) = parts[p].clone();
        accumulate_part(&a, &bt, rows, ks, plan, acc_fmt)
    });

    let out_fmt = a.fmt();
    let mut out = Matrix::zeros(m, n, out_fmt);
    match plan.spatial_dim {
        SpatialDim::K => {
            let mats = partials
                .into_iter()
                .map(|v| Matrix::materialize(m, n, acc_fmt, v))
                .collect::<Result<Vec<_>>>()?;
            let sum = tree_reduce(&mats, &ReductionSchedule::binary(mats.len()))?;
            for i in 0..m {
                for j in 0..n {
                    out.set(i, j, quantize(alpha * sum.get(i, j), acc_fmt));
                }
            }
        }
        SpatialDim::M | SpatialDim::None => {
            for ((rows, _), part) in parts.iter().zip(partials) {
                for (li, i) in rows.clone().enumerate() {
                    for j in 0..n {
                        out.set(i, j, quantize(alpha * part[li * n + j], acc_fmt));
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::machine::MachineConfig;
    use crate::scheduler::{plan_gemm_tiling, plan_gemm_tiling_parts, TemporalTiles, TileShape};

    /// Plain triple loop in f64.
    fn triple_loop(a: &Matrix, b: &Matrix, alpha: f64) -> Vec<f64> {
        let mut c = vec![0.0; a.rows() * b.cols()];
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                c[i * b.cols() + j] = alpha * s;
            }
        }
        c
    }

    fn manual_plan(
        m: usize,
        n: usize,
        k: usize,
        dim: SpatialDim,
        parts: usize,
        t: TileShape,
    ) -> TilingPlan {
        TilingPlan {
            m,
            n,
            k,
            in_fmt: FloatFormat::Fp64,
            acc_fmt: FloatFormat::Fp64,
            spatial_dim: dim,
            spatial_parts: parts,
            temporal_tiles: TemporalTiles { m: 1, n: 1, k: 1 },
            tile_shape: t,
        }
    }

    #[test]
    fn identity_and_zero_alpha() {
        let a = Matrix::seeded_random(5, 5, FloatFormat::Fp32, 1, (-1.0, 1.0));
        let i = Matrix::identity(5, FloatFormat::Fp32);
        assert_eq!(gemm_naive(&a, &i, 1.0, FloatFormat::Fp32).unwrap(), a);
        let z = gemm_naive(&a, &i, 0.0, FloatFormat::Fp32).unwrap();
        assert!(z.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn naive_matches_triple_loop() {
        let a = Matrix::seeded_random(3, 3, FloatFormat::Fp64, 2, (-1.0, 1.0));
        let b = Matrix::seeded_random(3, 3, FloatFormat::Fp64, 3, (-1.0, 1.0));
        let c = gemm_naive(&a, &b, 0.5, FloatFormat::Fp64).unwrap();
        for (x, y) in c.data().iter().zip(triple_loop(&a, &b, 0.5)) {
            assert!((x - y).abs() <= 1e-15);
        }
        assert!(gemm_naive(
            &a,
            &Matrix::zeros(4, 2, FloatFormat::Fp64),
            1.0,
            FloatFormat::Fp64
        )
        .is_err());
    }

    #[test]
    fn single_tile_m_plan_is_bit_identical() {
        let a = Matrix::seeded_random(12, 9, FloatFormat::Fp16, 4, (-1.0, 1.0));
        let b = Matrix::seeded_random(9, 7, FloatFormat::Fp16, 5, (-1.0, 1.0));
        let plan = manual_plan(12, 7, 9, SpatialDim::M, 1, TileShape { m: 12, n: 7, k: 9 });
        let t = gemm_tiled(&a, &b, 1.0, &plan, FloatFormat::Fp16, FloatFormat::Fp32).unwrap();
        assert_eq!(t, gemm_naive(&a, &b, 1.0, FloatFormat::Fp32).unwrap());
    }

    #[test]
    fn planner_plans_match_naive_fp64() {
        let a = Matrix::seeded_random(32, 32, FloatFormat::Fp64, 6, (-1.0, 1.0));
        let b = Matrix::seeded_random(32, 32, FloatFormat::Fp64, 7, (-1.0, 1.0));
        let naive = gemm_naive(&a, &b, 1.0, FloatFormat::Fp64).unwrap();
        let cfg = MachineConfig::default();
        let plan = plan_gemm_tiling(32, 32, 32, FloatFormat::Fp64, &cfg, SpatialDim::M).unwrap();
        let t = gemm_tiled(&a, &b, 1.0, &plan, FloatFormat::Fp64, FloatFormat::Fp64).unwrap();
        assert!(t.max_abs_diff(&naive) <= 1e-12);
        let plan =
            plan_gemm_tiling_parts(32, 32, 32, FloatFormat::Fp64, &cfg, SpatialDim::K, 4).unwrap();
        let t = gemm_tiled(&a, &b, 1.0, &plan, FloatFormat::Fp64, FloatFormat::Fp64).unwrap();
        assert!(t.max_abs_diff(&naive) <= 1e-12);
    }

    #[test]
    fn rejects_mismatched_plan() {
        let a = Matrix::seeded_random(4, 4, FloatFormat::Fp64, 6, (-1.0, 1.0));
        let plan = manual_plan(5, 4, 4, SpatialDim::M, 1, TileShape { m: 1, n: 1, k: 1 });
        assert!(gemm_tiled(&a, &a, 1.0, &plan, FloatFormat::Fp64, FloatFormat::Fp64).is_err());
        let plan = manual_plan(4, 4, 4, SpatialDim::M, 1, TileShape { m: 0, n: 1, k: 1 });
        assert!(gemm_tiled(&a, &a, 1.0, &plan, FloatFormat::Fp64, FloatFormat::Fp64).is_err());
    }
}
