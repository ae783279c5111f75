//! Kernel-level timing: each kernel is lowered to a list of double-buffered
//! pipeline steps for its busiest cluster and run through the pipeline model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::machine::{MachineConfig, Route};
use crate::models::config::ModelConfig;
use crate::models::flops::{pass_shape, ExecMode};
use crate::numerics::FloatFormat;
use crate::scheduler::{
    plan_gemm_tiling_parts, plan_mha_mapping, simulate_phases, tile_ranges, PhaseTiming,
    ReductionSchedule, SpatialDim, Step, TilingPlan, Transfer,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Gemm,
    FlashAttention,
    Layernorm,
    Gelu,
    Conversion,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::Gemm,
        Category::FlashAttention,
        Category::Layernorm,
        Category::Gelu,
        Category::Conversion,
    ];

    fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            Category::Gemm => "GEMM",
            Category::FlashAttention => "FlashAttention-2",
            Category::Layernorm => "Layernorm",
            Category::Gelu => "GELU",
            Category::Conversion => "Conversions",
        }
    }
}

/// Latency per kernel category in nanoseconds.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Breakdown {
    pub gemm_ns: f64,
    pub flash_attention_ns: f64,
    pub layernorm_ns: f64,
    pub gelu_ns: f64,
    pub conversion_ns: f64,
}

impl Breakdown {
    pub fn get(&self, c: Category) -> f64 {
        match c {
            Category::Gemm => self.gemm_ns,
            Category::FlashAttention => self.flash_attention_ns,
            Category::Layernorm => self.layernorm_ns,
            Category::Gelu => self.gelu_ns,
            Category::Conversion => self.conversion_ns,
        }
    }

    fn get_mut(&mut self, c: Category) -> &mut f64 {
        match c {
            Category::Gemm => &mut self.gemm_ns,
            Category::FlashAttention => &mut self.flash_attention_ns,
            Category::Layernorm => &mut self.layernorm_ns,
            Category::Gelu => &mut self.gelu_ns,
            Category::Conversion => &mut self.conversion_ns,
        }
    }

    pub fn add_ns(&mut self, c: Category, ns: f64) {
        *self.get_mut(c) += ns;
    }

    pub fn add(&mut self, other: &Breakdown) {
        for c in Category::ALL {
            self.add_ns(c, other.get(c));
        }
    }

    pub fn scaled(&self, f: f64) -> Breakdown {
        let mut b = *self;
        for c in Category::ALL {
            *b.get_mut(c) *= f;
        }
        b
    }

    pub fn total(&self) -> f64 {
        Category::ALL.iter().map(|&c| self.get(c)).sum()
    }

    /// Fraction of the total per category.
    pub fn share(&self, c: Category) -> f64 {
        let t = self.total();
        if t > 0.0 {
            self.get(c) / t
        } else {
            0.0
        }
    }
}

/// Timing of one kernel invocation, repeated `repeat` times back to back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelTiming {
    pub name: String,
    pub repeat: f64,
    pub timing: PhaseTiming,
    pub breakdown: Breakdown,
    pub steps: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plan: Option<TilingPlan>,
}

impl KernelTiming {
    pub fn total_ns(&self) -> f64 {
        self.timing.total_ns * self.repeat
    }
}

/// Pipeline steps of one kernel plus how their compute cycles split into
/// categories. Phase time is attributed to categories pro rata.
struct PhaseBuilder {
    name: String,
    primary: Category,
    steps: Vec<Step>,
    cycles: [f64; 5],
}

impl PhaseBuilder {
    fn new(name: impl Into<String>, primary: Category) -> Self {
        PhaseBuilder {
            name: name.into(),
            primary,
            steps: Vec::new(),
            cycles: [0.0; 5],
        }
    }

    fn push(
        &mut self,
        parts: &[(Category, f64)],
        overhead: f64,
        dma_in: Vec<Transfer>,
        dma_out: Vec<Transfer>,
    ) {
        let mut total = overhead;
        self.cycles[self.primary.index()] += overhead;
        for &(c, cy) in parts {
            self.cycles[c.index()] += cy;
            total += cy;
        }
        self.steps.push(Step {
            compute_cycles: total,
            dma_in,
            dma_out,
        });
    }

    fn finish(
        self,
        cfg: &MachineConfig,
        plan: Option<TilingPlan>,
        repeat: f64,
    ) -> Result<KernelTiming> {
        let timing = simulate_phases(&self.steps, cfg)?;
        let sum: f64 = self.cycles.iter().sum();
        let mut breakdown = Breakdown::default();
        if sum > 0.0 {
            for c in Category::ALL {
                breakdown.add_ns(c, timing.total_ns * self.cycles[c.index()] / sum);
            }
        } else {
            breakdown.add_ns(self.primary, timing.total_ns);
        }
        Ok(KernelTiming {
            name: self.name,
            repeat,
            timing,
            breakdown: breakdown.scaled(repeat),
            steps: self.steps.len(),
            plan,
        })
    }
}

/// Per-run constants shared by all kernel builders.
pub struct Ctx<'a> {
    pub cfg: &'a MachineConfig,
    pub fmt: FloatFormat,
    pub acc: FloatFormat,
    pub stats: FloatFormat,
    pub fused: bool,
    pub causal: bool,
}

impl<'a> Ctx<'a> {
    pub fn new(cfg: &'a MachineConfig, fmt: FloatFormat, fused: bool, causal: bool) -> Self {
        Ctx {
            cfg,
            fmt,
            acc: fmt.default_accumulator(),
            stats: fmt.statistics_format(),
            fused,
            causal,
        }
    }

    fn slow(&self) -> f64 {
        self.cfg.isa_slowdown()
    }

    fn b(&self) -> f64 {
        self.fmt.bytes() as f64
    }

    /// Sustainable FLOP per cycle per cluster.
    fn peak(&self) -> f64 {
        self.cfg.peak(self.fmt) * self.cfg.calibration.simd_efficiency(self.fmt)
    }

    fn gemm_cycles(&self, flops: f64) -> f64 {
        flops / (self.peak() * self.cfg.isa_efficiency(self.cfg.isa_mode))
    }

    fn attn_cycles(&self, flops: f64) -> f64 {
        flops / (self.peak() * self.cfg.calibration.attention_gemm_efficiency / self.slow())
    }

    /// Element-wise work in the statistics format on one cluster.
    fn elem_cycles(&self, elems: f64, cost: f64) -> f64 {
        let lanes = self.stats.info().simd_lanes as f64;
        elems * cost * self.slow() / (self.cfg.compute_cores_per_cluster as f64 * lanes)
    }

    fn conv_cycles(&self, elems: f64) -> f64 {
        if self.fmt == self.stats {
            0.0
        } else {
            self.elem_cycles(elems, self.cfg.calibration.conversion_cost)
        }
    }

    fn add_cycles(&self, elems: f64) -> f64 {
        let lanes = self.acc.info().simd_lanes as f64;
        elems * self.slow() / (self.cfg.compute_cores_per_cluster as f64 * lanes)
    }

    fn overhead(&self) -> f64 {
        self.cfg.calibration.step_overhead_cycles * self.slow()
    }

    fn load(&self, bytes: f64, sharers: usize) -> Transfer {
        Transfer::new(bytes, Route::hbm_read(0, sharers.max(1)))
    }

    fn store(&self, bytes: f64, sharers: usize) -> Transfer {
        Transfer::new(bytes, Route::hbm_write(0, sharers.max(1)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Epilogue {
    /// Result rounded to the storage format.
    Store,
    /// i-GELU in the statistics format, then rounded.
    Gelu,
    /// Partial result kept in the accumulator format.
    Partial,
}

pub struct GemmSpec<'s> {
    pub name: &'s str,
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub parts: usize,
    /// Clusters streaming from HBM concurrently.
    pub sharers: usize,
    pub category: Category,
    pub epilogue: Epilogue,
    pub repeat: f64,
    /// Score or `P V` product: runs at the attention GEMM efficiency.
    pub attention: bool,
}

/// M-spatially tiled GEMM on `spec.parts` clusters.
pub fn gemm_kernel(ctx: &Ctx, spec: GemmSpec) -> Result<KernelTiming> {
    let plan = plan_gemm_tiling_parts(
        spec.m,
        spec.n,
        spec.k,
        ctx.fmt,
        ctx.cfg,
        SpatialDim::M,
        spec.parts,
    )?;
    let rows = spec.m.div_ceil(plan.spatial_parts);
    let t = plan.tile_shape;
    let b = ctx.b();
    let cal = &ctx.cfg.calibration;
    let out_b = match spec.epilogue {
        Epilogue::Partial => ctx.acc.bytes() as f64,
        _ => b,
    };
    let mut pb = PhaseBuilder::new(spec.name, spec.category);
    let nk = spec.k.div_ceil(t.k);
    for mt in tile_ranges(rows, t.m) {
        for nt in tile_ranges(spec.n, t.n) {
            for (ki, kt) in tile_ranges(spec.k, t.k).enumerate() {
                let (mr, nr, kr) = (mt.len() as f64, nt.len() as f64, kt.len() as f64);
                let flops = 2.0 * mr * nr * kr;
                let cycles = if spec.attention {
                    ctx.attn_cycles(flops)
                } else {
                    ctx.gemm_cycles(flops)
                };
                let mut parts = vec![(spec.category, cycles)];
                let dma_in = vec![
                    ctx.load(mr * kr * b, spec.sharers),
                    ctx.load(kr * nr * b, spec.sharers),
                ];
                let mut dma_out = Vec::new();
                if ki + 1 == nk {
                    let c = mr * nr;
                    match spec.epilogue {
                        Epilogue::Store => parts.push((Category::Conversion, ctx.conv_cycles(c))),
                        Epilogue::Gelu => {
                            parts.push((Category::Gelu, ctx.elem_cycles(c, cal.gelu_cost)));
                            parts.push((Category::Conversion, ctx.conv_cycles(c)));
                        }
                        Epilogue::Partial => {}
                    }
                    dma_out.push(ctx.store(c * out_b, spec.sharers));
                }
                pb.push(&parts, ctx.overhead(), dma_in, dma_out);
            }
        }
    }
    pb.finish(ctx.cfg, Some(plan), spec.repeat)
}

/// Largest square-ish `(Br, Bc)` whose FlashAttention working set fits SPM.
pub fn choose_attention_blocks(
    q: usize,
    kv: usize,
    p: usize,
    fmt: FloatFormat,
    spm: usize,
) -> Result<(usize, usize)> {
    let b = fmt.bytes();
    let sb = fmt.statistics_format().bytes();
    for cand in [128usize, 64, 32, 16, 8, 4, 2, 1] {
        let br = cand.min(q);
        let bc = cand.min(kv);
        let bytes = 2 * br * p * b + 4 * bc * p * b + br * bc * sb + br * p * sb + 2 * br * sb;
        if bytes <= spm {
            return Ok((br, bc));
        }
    }
    Err(Error::NoFeasiblePlan(format!(
        "attention head of width {p} in {spm} B"
    )))
}

/// FlashAttention-2 over one head on one cluster. Fully masked blocks are
/// skipped; scores are converted up and probabilities down inside the kernel.
pub fn flash_attention_kernel(
    ctx: &Ctx,
    q: usize,
    kv: usize,
    p: usize,
    sharers: usize,
    repeat: f64,
) -> Result<KernelTiming> {
    let (br, bc) = choose_attention_blocks(q, kv, p, ctx.fmt, ctx.cfg.spm_bytes)?;
    let b = ctx.b();
    let pf = p as f64;
    let cal = &ctx.cfg.calibration;
    let fa = Category::FlashAttention;
    let mut pb = PhaseBuilder::new("flash_attention", fa);
    for r0 in (0..q).step_by(br) {
        let rows = br.min(q - r0);
        let last_visible = if ctx.causal {
            r0 + rows - 1 + (kv - q)
        } else {
            kv - 1
        };
        let blocks: Vec<usize> = (0..kv)
            .step_by(bc)
            .take_while(|&c0| c0 <= last_visible)
            .collect();
        for (j, &c0) in blocks.iter().enumerate() {
            let cols = bc.min(kv - c0) as f64;
            let rf = rows as f64;
            let s = rf * cols;
            let parts = [
                (fa, ctx.attn_cycles(4.0 * s * pf)),
                (fa, ctx.elem_cycles(s, cal.softmax_cost)),
                (fa, ctx.conv_cycles(2.0 * s)),
            ];
            let mut dma_in = vec![
                ctx.load(cols * pf * b, sharers),
                ctx.load(cols * pf * b, sharers),
            ];
            if j == 0 {
                dma_in.push(ctx.load(rf * pf * b, sharers));
            }
            let mut dma_out = Vec::new();
            if j + 1 == blocks.len() {
                dma_out.push(ctx.store(rf * pf * b, sharers));
            }
            pb.push(&parts, ctx.overhead(), dma_in, dma_out);
        }
    }
    pb.finish(ctx.cfg, None, repeat)
}

/// Tree reduction of `q x e` partials over `active` clusters, chunked so
/// each transfer fits in SPM, then the root stores the rounded result.
pub fn reduction_kernel(ctx: &Ctx, q: usize, e: usize, active: usize) -> Result<KernelTiming> {
    let fa = Category::FlashAttention;
    let mut pb = PhaseBuilder::new("tree_reduction", fa);
    let acc_b = ctx.acc.bytes() as f64;
    let elems = (q * e) as f64;
    let chunk_elems = (ctx.cfg.spm_bytes as f64 / (4.0 * acc_b)).floor().max(1.0);
    let chunks = (elems / chunk_elems).ceil().max(1.0) as usize;
    let sched = ReductionSchedule::binary(active.max(1));
    for level in 1..=sched.depth() {
        let step = sched
            .level(level)
            .next()
            .copied()
            .ok_or_else(|| Error::Schedule("empty level".into()))?;
        let route = Route::cluster_to_cluster(step.sender, step.receiver);
        for c in 0..chunks {
            let n = chunk_elems.min(elems - c as f64 * chunk_elems);
            pb.push(
                &[(fa, ctx.add_cycles(n))],
                0.0,
                vec![Transfer::new(n * acc_b, route)],
                vec![],
            );
        }
    }
    for c in 0..chunks {
        let n = chunk_elems.min(elems - c as f64 * chunk_elems);
        pb.push(
            &[(Category::Conversion, ctx.conv_cycles(n))],
            0.0,
            vec![],
            vec![ctx.store(n * ctx.b(), 1)],
        );
    }
    pb.finish(ctx.cfg, None, 1.0)
}

/// Element-wise pass over `rows x cols`, spatially tiled by rows.
#[allow(clippy::too_many_arguments)]
fn elementwise_kernel(
    ctx: &Ctx,
    name: &str,
    rows: usize,
    cols: usize,
    inputs: usize,
    category: Category,
    cost: f64,
    conversions: f64,
    repeat: f64,
) -> Result<KernelTiming> {
    let clusters = ctx.cfg.total_clusters();
    let parts = rows.clamp(1, clusters);
    let per = rows.div_ceil(parts);
    let b = ctx.b();
    let row_bytes = cols as f64 * b;
    let fit = ((ctx.cfg.spm_bytes as f64) / ((2 * inputs + 2) as f64 * row_bytes)).floor() as usize;
    let tile = fit.clamp(1, per.max(1));
    let mut pb = PhaseBuilder::new(name, category);
    for r in tile_ranges(per, tile) {
        let n = (r.len() * cols) as f64;
        let dma_in = (0..inputs)
            .map(|_| ctx.load(r.len() as f64 * row_bytes, parts))
            .collect();
        pb.push(
            &[
                (category, ctx.elem_cycles(n, cost)),
                (Category::Conversion, ctx.conv_cycles(conversions * n)),
            ],
            ctx.overhead(),
            dma_in,
            vec![ctx.store(r.len() as f64 * row_bytes, parts)],
        );
    }
    pb.finish(ctx.cfg, None, repeat)
}

/// Residual add plus Layernorm.
pub fn layernorm_kernel(ctx: &Ctx, rows: usize, e: usize) -> Result<KernelTiming> {
    elementwise_kernel(
        ctx,
        "layernorm",
        rows,
        e,
        2,
        Category::Layernorm,
        ctx.cfg.calibration.layernorm_cost,
        2.0,
        1.0,
    )
}

/// Every kernel of one transformer block (or one AR token step of it).
pub fn block_kernels(
    model: &ModelConfig,
    mode: ExecMode,
    s: usize,
    ctx: &Ctx,
) -> Result<Vec<KernelTiming>> {
    let (q, kv) = pass_shape(mode, s);
    let (e, p, h, ff) = (model.e, model.p, model.h, model.ff);
    let clusters = ctx.cfg.total_clusters();
    let mapping = plan_mha_mapping(h, ctx.cfg);
    let active = mapping.active_clusters();
    let slots = mapping.slots() as f64;
    let mut ks = Vec::new();
    let fa = Category::FlashAttention;
    if ctx.fused {
        // One head per cluster and slot: projections, attention and the
        // head's share of the output projection, then a tree reduction.
        let qkv = GemmSpec {
            name: "head_qkv_projection",
            m: q,
            n: 3 * p,
            k: e,
            parts: 1,
            sharers: active,
            category: fa,
            epilogue: Epilogue::Store,
            repeat: slots,
            attention: false,
        };
        ks.push(gemm_kernel(ctx, qkv)?);
        ks.push(flash_attention_kernel(ctx, q, kv, p, active, slots)?);
        let lin = GemmSpec {
            name: "head_concat_linear",
            m: q,
            n: e,
            k: p,
            parts: 1,
            sharers: active,
            category: fa,
            epilogue: Epilogue::Partial,
            repeat: slots,
            attention: false,
        };
        ks.push(gemm_kernel(ctx, lin)?);
        ks.push(reduction_kernel(ctx, q, e, active)?);
    } else {
        let gemm = Category::Gemm;
        ks.push(gemm_kernel(
            ctx,
            GemmSpec {
                name: "qkv_projection",
                m: q,
                n: 3 * h * p,
                k: e,
                parts: clusters,
                sharers: clusters.min(q),
                category: gemm,
                epilogue: Epilogue::Store,
                repeat: 1.0,
                attention: false,
            },
        )?);
        // Scores, softmax and A x V as separate passes through HBM.
        ks.push(gemm_kernel(
            ctx,
            GemmSpec {
                name: "attention_scores",
                m: q,
                n: kv,
                k: p,
                parts: 1,
                sharers: active,
                category: fa,
                epilogue: Epilogue::Store,
                repeat: slots,
                attention: true,
            },
        )?);
        // one head at a time, rows spread over all clusters
        let softmax_cost = ctx.cfg.calibration.softmax_cost;
        ks.push(elementwise_kernel(
            ctx,
            "softmax",
            q,
            kv,
            1,
            fa,
            softmax_cost,
            2.0,
            h as f64,
        )?);
        ks.push(gemm_kernel(
            ctx,
            GemmSpec {
                name: "attention_av",
                m: q,
                n: p,
                k: kv,
                parts: 1,
                sharers: active,
                category: fa,
                epilogue: Epilogue::Store,
                repeat: slots,
                attention: true,
            },
        )?);
        ks.push(gemm_kernel(
            ctx,
            GemmSpec {
                name: "output_projection",
                m: q,
                n: e,
                k: h * p,
                parts: clusters,
                sharers: clusters.min(q),
                category: gemm,
                epilogue: Epilogue::Store,
                repeat: 1.0,
                attention: false,
            },
        )?);
    }
    ks.push(layernorm_kernel(ctx, q, e)?);
    let mlp1_epilogue = if ctx.fused {
        Epilogue::Gelu
    } else {
        Epilogue::Store
    };
    ks.push(gemm_kernel(
        ctx,
        GemmSpec {
            name: "mlp_up",
            m: q,
            n: ff,
            k: e,
            parts: clusters,
            sharers: clusters.min(q),
            category: Category::Gemm,
            epilogue: mlp1_epilogue,
            repeat: 1.0,
            attention: false,
        },
    )?);
    if !ctx.fused {
        ks.push(elementwise_kernel(
            ctx,
            "gelu",
            q,
            ff,
            1,
            Category::Gelu,
            ctx.cfg.calibration.gelu_cost,
            2.0,
            1.0,
        )?);
    }
    ks.push(gemm_kernel(
        ctx,
        GemmSpec {
            name: "mlp_down",
            m: q,
            n: e,
            k: ff,
            parts: clusters,
            sharers: clusters.min(q),
            category: Category::Gemm,
            epilogue: Epilogue::Store,
            repeat: 1.0,
            attention: false,
        },
    )?);
    ks.push(layernorm_kernel(ctx, q, e)?);
    Ok(ks)
}

/// Patch embedding and classifier of a ViT, as plain GEMMs.
pub fn vit_extra_kernels(model: &ModelConfig, ctx: &Ctx) -> Result<Vec<KernelTiming>> {
    let clusters = ctx.cfg.total_clusters();
    let patches = model.s_default - 1;
    Ok(vec![
        gemm_kernel(
            ctx,
            GemmSpec {
                name: "patch_embedding",
                m: patches,
                n: model.e,
                k: model.patch_dim,
                parts: clusters,
                sharers: clusters.min(patches),
                category: Category::Gemm,
                epilogue: Epilogue::Store,
                repeat: 1.0,
                attention: false,
            },
        )?,
        gemm_kernel(
            ctx,
            GemmSpec {
                name: "classifier",
                m: 1,
                n: model.num_classes,
                k: model.e,
                parts: 1,
                sharers: 1,
                category: Category::Gemm,
                epilogue: Epilogue::Store,
                repeat: 1.0,
                attention: false,
            },
        )?,
    ])
}

pub fn sum_kernels(ks: &[KernelTiming]) -> (f64, Breakdown) {
    let mut b = Breakdown::default();
    let mut t = 0.0;
    for k in ks {
        t += k.total_ns();
        b.add(&k.breakdown);
    }
    (t, b)
}
