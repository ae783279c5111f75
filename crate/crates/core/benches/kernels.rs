use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use tfsim::kernels::blocks::{mha_block, MhaConfig, MhaWeights};
use tfsim::kernels::gemm::gemm_tiled_with;
use tfsim::machine::MachineConfig;
use tfsim::par::ExecPolicy;
use tfsim::scheduler::{plan_gemm_tiling, SpatialDim};
use tfsim::{FloatFormat, Matrix};

const POLICIES: [(&str, ExecPolicy); 2] = [
    ("parallel", ExecPolicy::Parallel),
    ("sequential", ExecPolicy::Sequential),
];

fn gemm(c: &mut Criterion) {
    let cfg = MachineConfig::default();
    let mut g = c.benchmark_group("gemm_tiled");
    for n in [64, 128] {
        for fmt in [FloatFormat::Fp64, FloatFormat::Fp16] {
            let a = Matrix::seeded_random(n, n, fmt, 1, (-1.0, 1.0));
            let b = Matrix::seeded_random(n, n, fmt, 2, (-1.0, 1.0));
            let plan = plan_gemm_tiling(n, n, n, fmt, &cfg, SpatialDim::M).unwrap();
            let acc = fmt.default_accumulator();
            for (name, policy) in POLICIES {
                g.bench_with_input(
                    BenchmarkId::new(format!("{name}/{fmt}"), n),
                    &n,
                    |bch, _| {
                        bch.iter(|| {
                            gemm_tiled_with(black_box(&a), &b, 1.0, &plan, fmt, acc, policy)
                                .unwrap()
                        })
                    },
                );
            }
        }
    }
    g.finish();
}

fn mha(c: &mut Criterion) {
    let mut g = c.benchmark_group("mha_block");
    let (s, e, heads, p) = (64, 64, 8, 8);
    let x = Matrix::seeded_random(s, e, FloatFormat::Fp32, 3, (-1.0, 1.0));
    let w = MhaWeights::seeded(e, heads, p, FloatFormat::Fp32, 4);
    for (name, policy) in POLICIES {
        let cfg = MhaConfig {
            policy,
            ..MhaConfig::new(heads, true, FloatFormat::Fp32)
        };
        g.bench_function(name, |b| {
            b.iter(|| mha_block(black_box(&x), &w, &cfg).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, gemm, mha);
criterion_main!(benches);
