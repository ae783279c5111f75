//! Desk-scale oracle suite: every optimized kernel against its reference.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::kernels::activation::{i_gelu_max_error, IGELU_A, IGELU_B};
use crate::kernels::attention::{attention_naive, flash_attention2, AttentionInputs};
use crate::kernels::gemm::{gemm_naive, gemm_tiled};
use crate::kernels::reduce::tree_reduce;
use crate::models::decoder::{ToyConfig, ToyDecoder};
use crate::numerics::{enumerate_finite, quantize, FloatFormat};
use crate::scheduler::{ReductionSchedule, SpatialDim, TemporalTiles, TileShape, TilingPlan};
use crate::tensor::Matrix;

pub const ATTENTION_SHAPES: usize = 200;
pub const GEMM_PLANS: usize = 200;
pub const REDUCTION_CASES: usize = 100;
pub const MONOTONIC_PAIRS: usize = 1_000_000;
pub const IGELU_SAMPLES: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub max_error: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, max_error: f64, tolerance: f64, extra: bool, detail: String) -> Self {
        CheckResult {
            name: name.into(),
            passed: extra && max_error <= tolerance,
            max_error,
            tolerance,
            detail,
        }
    }

    /// One summary line; the same flags always give the same text.
    pub fn line(&self) -> String {
        format!(
            "{} {:<22} max_error={:.3e} tol={:.1e} {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.max_error,
            self.tolerance,
            self.detail
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidateOptions {
    pub seed: u64,
    /// i-GELU `a` constant under test; perturbing it must fail the bound.
    pub igelu_a: f64,
}

impl Default for ValidateOptions {
    fn default() -> Self {
        ValidateOptions {
            seed: 0,
            igelu_a: IGELU_A,
        }
    }
}

pub const CHECK_NAMES: [&str; 7] = [
    "flash_attention_fp64",
    "flash_attention_fp32",
    "gemm_tiled",
    "tree_reduce",
    "ar_nar_equivalence",
    "fp8_formats",
    "igelu_bound",
];

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn random_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize, fmt: FloatFormat) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| quantize(r.gen_range(-2.0..2.0), fmt))
        .collect();
    Matrix::materialize(rows, cols, fmt, data).expect("sized buffer")
}

fn max_abs(m: &Matrix) -> f64 {
    m.data().iter().fold(0.0, |a, v| a.max(v.abs()))
}

/// A random attention problem: causal problems keep `q <= kv`.
pub fn random_attention_case(
    r: &mut ChaCha8Rng,
    fmt: FloatFormat,
) -> (AttentionInputs, usize, usize) {
    let causal = r.gen_bool(0.5);
    let kv = r.gen_range(1..=64);
    let q = if causal {
        r.gen_range(1..=kv)
    } else {
        r.gen_range(1..=64)
    };
    let p = r.gen_range(1..=32);
    let inp = AttentionInputs::new(
        random_matrix(r, q, p, fmt),
        random_matrix(r, kv, p, fmt),
        random_matrix(r, kv, p, fmt),
        causal,
    )
    .expect("consistent shapes");
    let br = r.gen_range(1..=q);
    let bc = r.gen_range(1..=kv);
    (inp, br, bc)
}

/// FP64: max absolute error. FP32: max error relative to the largest output.
pub fn check_flash_attention(seed: u64, fmt: FloatFormat) -> CheckResult {
    let mut r = rng(seed, 1 + fmt as u64);
    let mut worst: f64 = 0.0;
    let mut causal = 0;
    for _ in 0..ATTENTION_SHAPES {
        let (inp, br, bc) = random_attention_case(&mut r, fmt);
        causal += inp.causal as usize;
        let n = attention_naive(&inp, fmt).expect("naive attention");
        let f = flash_attention2(&inp, br, bc, fmt).expect("flash attention");
        let err = f.max_abs_diff(&n);
        let err = if fmt == FloatFormat::Fp64 {
            err
        } else {
            err / max_abs(&n).max(f64::MIN_POSITIVE)
        };
        worst = worst.max(err);
    }
    let (name, tol) = if fmt == FloatFormat::Fp64 {
        ("flash_attention_fp64", 1e-12)
    } else {
        ("flash_attention_fp32", 1e-5)
    };
    CheckResult::new(
        name,
        worst,
        tol,
        true,
        format!("{ATTENTION_SHAPES} shapes, {causal} causal"),
    )
}

/// A random, possibly lopsided plan over an `m x n x k` problem.
pub fn random_plan(r: &mut ChaCha8Rng, m: usize, n: usize, k: usize) -> TilingPlan {
    let dim = match r.gen_range(0..3) {
        0 => SpatialDim::M,
        1 => SpatialDim::K,
        _ => SpatialDim::None,
    };
    let parts = match dim {
        SpatialDim::M => r.gen_range(1..=m.min(16)),
        SpatialDim::K => r.gen_range(1..=k.min(16)),
        SpatialDim::None => 1,
    };
    let tile = TileShape {
        m: r.gen_range(1..=m),
        n: r.gen_range(1..=n),
        k: r.gen_range(1..=k),
    };
    let (rows, kk) = match dim {
        SpatialDim::M => (m.div_ceil(parts), k),
        SpatialDim::K => (m, k.div_ceil(parts)),
        SpatialDim::None => (m, k),
    };
    TilingPlan {
        m,
        n,
        k,
        in_fmt: FloatFormat::Fp64,
        acc_fmt: FloatFormat::Fp64,
        spatial_dim: dim,
        spatial_parts: parts,
        temporal_tiles: TemporalTiles {
            m: rows.div_ceil(tile.m),
            n: n.div_ceil(tile.n),
            k: kk.div_ceil(tile.k),
        },
        tile_shape: tile,
    }
}

pub fn check_gemm(seed: u64) -> CheckResult {
    let mut r = rng(seed, 10);
    let f = FloatFormat::Fp64;
    let mut worst: f64 = 0.0;
    for _ in 0..GEMM_PLANS {
        let (m, n, k) = (
            r.gen_range(1..=48),
            r.gen_range(1..=48),
            r.gen_range(1..=48),
        );
        let a = random_matrix(&mut r, m, k, f);
        let b = random_matrix(&mut r, k, n, f);
        let alpha = r.gen_range(-2.0..2.0);
        let plan = random_plan(&mut r, m, n, k);
        let t = gemm_tiled(&a, &b, alpha, &plan, f, f).expect("tiled gemm");
        let naive = gemm_naive(&a, &b, alpha, f).expect("naive gemm");
        worst = worst.max(t.max_abs_diff(&naive));
    }
    CheckResult::new(
        "gemm_tiled",
        worst,
        1e-12,
        true,
        format!("{GEMM_PLANS} plans"),
    )
}

/// Against a left-to-right fold, plus bit-identity across repeated runs.
pub fn check_tree_reduce(seed: u64) -> CheckResult {
    let mut r = rng(seed, 20);
    let f = FloatFormat::Fp64;
    let mut worst: f64 = 0.0;
    let mut identical = true;
    for _ in 0..REDUCTION_CASES {
        let parts = r.gen_range(1..=16);
        let (rows, cols) = (r.gen_range(1..=8), r.gen_range(1..=8));
        let partials: Vec<Matrix> = (0..parts)
            .map(|_| random_matrix(&mut r, rows, cols, f))
            .collect();
        let sched = ReductionSchedule::binary(parts);
        let a = tree_reduce(&partials, &sched).expect("reduction");
        let b = tree_reduce(&partials, &sched).expect("reduction");
        identical &= a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits());
        let mut fold = Matrix::zeros(rows, cols, f);
        for p in &partials {
            fold.accumulate(p).expect("same shape");
        }
        worst = worst.max(a.max_abs_diff(&fold));
    }
    CheckResult::new(
        "tree_reduce",
        worst,
        1e-13,
        identical,
        format!(
            "{REDUCTION_CASES} cases, repeat runs {}",
            if identical { "bit-identical" } else { "differ" }
        ),
    )
}

/// Greedy cached generation on the toy decoder against full causal passes.
pub fn check_ar_nar(seed: u64) -> CheckResult {
    let mut r = rng(seed, 30);
    let dec = ToyDecoder::seeded(ToyConfig::default(), seed);
    let prompt: Vec<usize> = (0..4).map(|_| r.gen_range(0..dec.cfg.vocab)).collect();
    let gen = dec.generate(&prompt, 12).expect("generation");
    let processed = &gen.tokens[..gen.logits.len()];
    let full = dec.forward(processed).expect("full pass");
    let mut worst: f64 = 0.0;
    for (t, row) in gen.logits.iter().enumerate() {
        for (a, b) in row.iter().zip(full.row(t)) {
            worst = worst.max((a - b).abs());
        }
    }
    CheckResult::new(
        "ar_nar_equivalence",
        worst,
        1e-12,
        true,
        format!("{} positions", gen.logits.len()),
    )
}

/// Exhaustive 8-bit enumeration plus random monotonicity pairs.
pub fn check_fp8(seed: u64) -> CheckResult {
    let mut r = rng(seed, 40);
    let mut ok = true;
    let mut worst: f64 = 0.0;
    let mut notes = Vec::new();
    for (fmt, want) in [
        (FloatFormat::Fp8E4M3, 448.0),
        (FloatFormat::Fp8E5M2, 57344.0),
    ] {
        let vals = enumerate_finite(fmt);
        let max = vals.iter().cloned().fold(f64::MIN, f64::max);
        ok &= max == want;
        for v in &vals {
            worst = worst.max((quantize(*v, fmt) - v).abs());
        }
        let mut violations = 0usize;
        for _ in 0..MONOTONIC_PAIRS / 2 {
            let scale = 2f64.powi(r.gen_range(-20..18));
            let x = r.gen_range(-1.0..1.0) * scale;
            let y = r.gen_range(-1.0..1.0) * scale;
            let (lo, hi) = if x <= y { (x, y) } else { (y, x) };
            if quantize(lo, fmt) > quantize(hi, fmt) {
                violations += 1;
            }
        }
        ok &= violations == 0;
        notes.push(format!(
            "{fmt}: max {max}, {} values, {violations} order violations",
            vals.len()
        ));
    }
    CheckResult::new("fp8_formats", worst, 0.0, ok, notes.join("; "))
}

pub fn check_igelu(a: f64) -> CheckResult {
    let (err, at) = i_gelu_max_error(-8.0, 8.0, IGELU_SAMPLES, a, IGELU_B);
    CheckResult::new(
        "igelu_bound",
        err,
        0.05,
        err < 0.05,
        format!("{IGELU_SAMPLES} points in [-8, 8], worst at x={at:.4}"),
    )
}

/// Run one named check.
pub fn run_check(name: &str, opts: &ValidateOptions) -> Option<CheckResult> {
    let s = opts.seed;
    Some(match name {
        "flash_attention_fp64" => check_flash_attention(s, FloatFormat::Fp64),
        "flash_attention_fp32" => check_flash_attention(s, FloatFormat::Fp32),
        "gemm_tiled" => check_gemm(s),
        "tree_reduce" => check_tree_reduce(s),
        "ar_nar_equivalence" => check_ar_nar(s),
        "fp8_formats" => check_fp8(s),
        "igelu_bound" => check_igelu(opts.igelu_a),
        _ => return None,
    })
}

pub fn run_suite(opts: &ValidateOptions) -> Vec<CheckResult> {
    CHECK_NAMES
        .iter()
        .map(|n| run_check(n, opts).expect("known check"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn igelu_mutation_fails() {
        assert!(check_igelu(IGELU_A).passed);
        assert!(!check_igelu(IGELU_A * 1.5).passed);
    }

    #[test]
    fn unknown_check_is_none() {
        assert!(run_check("nope", &ValidateOptions::default()).is_none());
    }

    #[test]
    fn random_plans_are_consistent() {
        let mut r = rng(3, 0);
        for _ in 0..50 {
            let p = random_plan(&mut r, 7, 5, 9);
            assert!(p.spatial_parts >= 1);
            assert!(p.tile_shape.m <= 7 && p.tile_shape.k <= 9);
        }
    }
}
