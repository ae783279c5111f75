use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tfsim::kernels::attention::{flash_attention2, AttentionInputs};
use tfsim::kernels::gemm::gemm_tiled_with;
use tfsim::kernels::reduce::tree_reduce;
use tfsim::numerics::quantize;
use tfsim::par::ExecPolicy;
use tfsim::scheduler::ReductionSchedule;
use tfsim::validate::random_plan;
use tfsim::{FloatFormat, Matrix};

fn reference_attention(q: &Matrix, k: &Matrix, v: &Matrix, causal: bool) -> Vec<f64> {
    let (s1, s2, p) = (q.rows(), k.rows(), q.cols());
    let scale = 1.0 / (p as f64).sqrt();
    let mut out = vec![0.0; s1 * v.cols()];
    for i in 0..s1 {
        // Bottom-right aligned mask: query i sees keys up to i + s2 - s1.
        let last = if causal { i + s2 - s1 } else { s2 - 1 };
        let scores: Vec<f64> = (0..=last)
            .map(|j| (0..p).map(|c| q.get(i, c) * k.get(j, c)).sum::<f64>() * scale)
            .collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = w.iter().sum();
        for c in 0..v.cols() {
            out[i * v.cols() + c] = (0..=last).map(|j| w[j] * v.get(j, c)).sum::<f64>() / z;
        }
    }
    out
}

fn reference_gemm(a: &Matrix, b: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; a.rows() * b.cols()];
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            out[i * b.cols() + j] = (0..a.cols()).map(|k| a.get(i, k) * b.get(k, j)).sum();
        }
    }
    out
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn any_format() -> impl Strategy<Value = FloatFormat> {
    prop::sample::select(FloatFormat::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn quantize_is_monotone(fmt in any_format(), x in -1e6f64..1e6, y in -1e6f64..1e6) {
        let (lo, hi) = if x <= y { (x, y) } else { (y, x) };
        prop_assert!(quantize(lo, fmt) <= quantize(hi, fmt));
    }

    #[test]
    fn quantize_is_idempotent(fmt in any_format(), x in -7e4f64..7e4) {
        let q = quantize(x, fmt);
        prop_assert_eq!(quantize(q, fmt).to_bits(), q.to_bits());
    }

    #[test]
    fn flash_attention_matches_reference(
        kv in 1usize..=24,
        qfrac in 0.0f64..1.0,
        p in 1usize..=16,
        causal: bool,
        seed: u64,
        bsel in (0.0f64..1.0, 0.0f64..1.0),
    ) {
        let s1 = 1 + ((kv - 1) as f64 * qfrac) as usize;
        let q = Matrix::seeded_random(s1, p, FloatFormat::Fp64, seed, (-2.0, 2.0));
        let k = Matrix::seeded_random(kv, p, FloatFormat::Fp64, seed ^ 1, (-2.0, 2.0));
        let v = Matrix::seeded_random(kv, p, FloatFormat::Fp64, seed ^ 2, (-2.0, 2.0));
        let br = 1 + ((s1 - 1) as f64 * bsel.0) as usize;
        let bc = 1 + ((kv - 1) as f64 * bsel.1) as usize;
        let want = reference_attention(&q, &k, &v, causal);
        let inp = AttentionInputs::new(q, k, v, causal).unwrap();
        let got = flash_attention2(&inp, br, bc, FloatFormat::Fp64).unwrap();
        prop_assert!(max_diff(got.data(), &want) <= 1e-12);
    }

    #[test]
    fn tiled_gemm_matches_reference(m in 1usize..=20, n in 1usize..=20, k in 1usize..=20, seed: u64) {
        let a = Matrix::seeded_random(m, k, FloatFormat::Fp64, seed, (-1.0, 1.0));
        let b = Matrix::seeded_random(k, n, FloatFormat::Fp64, seed ^ 7, (-1.0, 1.0));
        let plan = random_plan(&mut ChaCha8Rng::seed_from_u64(seed), m, n, k);
        let want = reference_gemm(&a, &b);
        let par = gemm_tiled_with(&a, &b, 1.0, &plan, FloatFormat::Fp64, FloatFormat::Fp64, ExecPolicy::Parallel).unwrap();
        let seq = gemm_tiled_with(&a, &b, 1.0, &plan, FloatFormat::Fp64, FloatFormat::Fp64, ExecPolicy::Sequential).unwrap();
        prop_assert!(max_diff(par.data(), &want) <= 1e-12);
        prop_assert_eq!(par.data(), seq.data());
    }

    #[test]
    fn tree_reduce_matches_fold(n in 1usize..=33, rows in 1usize..=4, cols in 1usize..=4, seed: u64) {
        let parts: Vec<Matrix> = (0..n)
            .map(|i| Matrix::seeded_random(rows, cols, FloatFormat::Fp64, seed.wrapping_add(i as u64), (-1.0, 1.0)))
            .collect();
        let sched = ReductionSchedule::binary(n);
        let got = tree_reduce(&parts, &sched).unwrap();
        let again = tree_reduce(&parts, &sched).unwrap();
        let mut fold = vec![0.0; rows * cols];
        for p in &parts {
            for (acc, v) in fold.iter_mut().zip(p.data()) {
                *acc += v;
            }
        }
        prop_assert!(max_diff(got.data(), &fold) <= 1e-13);
        prop_assert_eq!(got.data(), again.data());
    }

    #[test]
    fn matrix_container_round_trips(rows in 0usize..=6, cols in 0usize..=6, fmt in any_format(), seed: u64) {
        let m = Matrix::seeded_random(rows, cols, fmt, seed, (-100.0, 100.0));
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        let back = Matrix::read_from(buf.as_slice()).unwrap();
        prop_assert_eq!(back.shape(), m.shape());
        prop_assert_eq!(back.fmt(), fmt);
        prop_assert_eq!(back.data(), m.data());
    }
}
