//! End-to-end executors: lower every block to kernels, time them, and
//! assemble a report with throughput, utilization and HBM traffic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::machine::{Calibration, IsaMode, MachineConfig};
use crate::models::config::{ModelConfig, ModelKind};
use crate::models::decoder::{ToyConfig, ToyDecoder};
use crate::models::flops::{count_flops_with, ExecMode};
use crate::models::timing::{
    block_kernels, sum_kernels, vit_extra_kernels, Breakdown, Ctx, KernelTiming,
};
use crate::models::traffic::hbm_traffic;
use crate::numerics::FloatFormat;
use crate::par::{map_indexed, ExecPolicy};

/// Largest dimension for which AR runs also execute the functional decoder.
pub const DESK_SCALE_MAX_DIM: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunOptions {
    pub fused: bool,
    /// Keep per-kernel timings and tiling plans in the report.
    pub dump_plan: bool,
    /// Also time the same run on one cluster and report the speedup.
    pub speedup: bool,
    pub seed: u64,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            fused: true,
            dump_plan: false,
            speedup: false,
            seed: 0,
        }
    }
}

/// Prompt processing of an AR run, reported apart from decoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefillReport {
    pub seq_len: usize,
    pub total_ns: f64,
    pub tokens_per_s: f64,
    pub flops: f64,
    pub fpu_utilization: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub model: String,
    pub mode: ExecMode,
    pub fmt: FloatFormat,
    pub seq_len: usize,
    pub new_tokens: Option<usize>,
    pub clusters: usize,
    pub fused: bool,
    pub isa_mode: IsaMode,
    pub total_ns: f64,
    pub breakdown: Breakdown,
    pub tokens_per_s: Option<f64>,
    pub images_per_s: Option<f64>,
    pub flops: f64,
    pub achieved_flops_per_s: f64,
    pub fpu_utilization: f64,
    pub hbm_bytes_read: f64,
    pub hbm_bytes_written: f64,
    /// One block's share (summed over decode steps in AR mode).
    pub hbm_block_bytes_read: f64,
    pub hbm_block_bytes_written: f64,
    pub traffic_assumption: String,
    pub prefill: Option<PrefillReport>,
    pub speedup_vs_one_cluster: Option<f64>,
    pub calibration: Calibration,
    /// Kernels of one block (the last decode step in AR mode).
    pub kernels: Option<Vec<KernelTiming>>,
    /// Greedy-decoding logits, only for desk-scale models.
    pub logits: Option<Vec<Vec<f64>>>,
}

impl RunReport {
    /// Throughput in the unit that fits the mode.
    pub fn throughput(&self) -> f64 {
        self.tokens_per_s.or(self.images_per_s).unwrap_or(0.0)
    }
}

/// FLOPs at full peak over elapsed cycles.
pub fn utilization(flops: f64, total_ns: f64, fmt: FloatFormat, cfg: &MachineConfig) -> f64 {
    let ideal = flops / (cfg.peak(fmt) * cfg.total_clusters() as f64);
    let cycles = total_ns * cfg.freq_hz / 1e9;
    ideal / cycles
}

struct Timed {
    total_ns: f64,
    breakdown: Breakdown,
    kernels: Vec<KernelTiming>,
}

fn time_pass(model: &ModelConfig, mode: ExecMode, s: usize, ctx: &Ctx) -> Result<Timed> {
    let ks = block_kernels(model, mode, s, ctx)?;
    let (t, b) = sum_kernels(&ks);
    let n = model.blocks as f64;
    let mut total_ns = t * n;
    let mut breakdown = b.scaled(n);
    if mode == ExecMode::Vit {
        let extra = vit_extra_kernels(model, ctx)?;
        let (te, be) = sum_kernels(&extra);
        total_ns += te;
        breakdown.add(&be);
    }
    Ok(Timed {
        total_ns,
        breakdown,
        kernels: ks,
    })
}

fn base_report(
    model: &ModelConfig,
    mode: ExecMode,
    fmt: FloatFormat,
    s: usize,
    cfg: &MachineConfig,
    opts: &RunOptions,
) -> RunReport {
    RunReport {
        model: model.name.clone(),
        mode,
        fmt,
        seq_len: s,
        new_tokens: None,
        clusters: cfg.total_clusters(),
        fused: opts.fused,
        isa_mode: cfg.isa_mode,
        total_ns: 0.0,
        breakdown: Breakdown::default(),
        tokens_per_s: None,
        images_per_s: None,
        flops: 0.0,
        achieved_flops_per_s: 0.0,
        fpu_utilization: 0.0,
        hbm_bytes_read: 0.0,
        hbm_bytes_written: 0.0,
        hbm_block_bytes_read: 0.0,
        hbm_block_bytes_written: 0.0,
        traffic_assumption: String::new(),
        prefill: None,
        speedup_vs_one_cluster: None,
        calibration: cfg.calibration.clone(),
        kernels: None,
        logits: None,
    }
}

fn finish(r: &mut RunReport, timed: Timed, cfg: &MachineConfig, opts: &RunOptions) {
    r.total_ns = timed.total_ns;
    r.breakdown = timed.breakdown;
    r.achieved_flops_per_s = r.flops / (r.total_ns * 1e-9);
    r.fpu_utilization = utilization(r.flops, r.total_ns, r.fmt, cfg);
    if opts.dump_plan {
        r.kernels = Some(timed.kernels);
    }
}

fn one_cluster_speedup<F>(total_ns: f64, cfg: &MachineConfig, rerun: F) -> Result<Option<f64>>
where
    F: FnOnce(&MachineConfig) -> Result<RunReport>,
{
    let single = rerun(&cfg.with_clusters(1))?;
    Ok(Some(single.total_ns / total_ns))
}

/// Full-sequence pass of a decoder (causal) or encoder model.
pub fn run_nar(
    model: &ModelConfig,
    s: usize,
    fmt: FloatFormat,
    cfg: &MachineConfig,
    opts: &RunOptions,
) -> Result<RunReport> {
    model.check_seq(s)?;
    cfg.validate()?;
    let causal = model.kind == ModelKind::Gpt;
    let ctx = Ctx::new(cfg, fmt, opts.fused, causal);
    let timed = time_pass(model, ExecMode::Nar, s, &ctx)?;
    let mut r = base_report(model, ExecMode::Nar, fmt, s, cfg, opts);
    r.flops = count_flops_with(model, ExecMode::Nar, s, &cfg.calibration);
    let traffic = hbm_traffic(model, ExecMode::Nar, s, opts.fused, fmt);
    r.hbm_bytes_read = traffic.bytes_read;
    r.hbm_bytes_written = traffic.bytes_written;
    r.hbm_block_bytes_read = traffic.block_read_bytes;
    r.hbm_block_bytes_written = traffic.block_write_bytes;
    r.traffic_assumption = traffic.assumption;
    finish(&mut r, timed, cfg, opts);
    r.tokens_per_s = Some(s as f64 / (r.total_ns * 1e-9));
    if opts.speedup && cfg.total_clusters() > 1 {
        let o = RunOptions {
            speedup: false,
            dump_plan: false,
            ..*opts
        };
        r.speedup_vs_one_cluster =
            one_cluster_speedup(r.total_ns, cfg, |c| run_nar(model, s, fmt, c, &o))?;
    }
    Ok(r)
}

/// Whole-image inference of a ViT, including patch embedding and classifier.
pub fn run_vit(
    model: &ModelConfig,
    fmt: FloatFormat,
    cfg: &MachineConfig,
    opts: &RunOptions,
) -> Result<RunReport> {
    if model.kind != ModelKind::Vit {
        return Err(Error::config(
            "mode",
            format!("vit mode needs a ViT model, {} is a decoder", model.name),
        ));
    }
    cfg.validate()?;
    let s = model.s_default;
    let ctx = Ctx::new(cfg, fmt, opts.fused, false);
    let timed = time_pass(model, ExecMode::Vit, s, &ctx)?;
    let mut r = base_report(model, ExecMode::Vit, fmt, s, cfg, opts);
    r.flops = count_flops_with(model, ExecMode::Vit, s, &cfg.calibration);
    let traffic = hbm_traffic(model, ExecMode::Vit, s, opts.fused, fmt);
    r.hbm_bytes_read = traffic.bytes_read;
    r.hbm_bytes_written = traffic.bytes_written;
    r.hbm_block_bytes_read = traffic.block_read_bytes;
    r.hbm_block_bytes_written = traffic.block_write_bytes;
    r.traffic_assumption = traffic.assumption;
    finish(&mut r, timed, cfg, opts);
    r.images_per_s = Some(1e9 / r.total_ns);
    if opts.speedup && cfg.total_clusters() > 1 {
        let o = RunOptions {
            speedup: false,
            dump_plan: false,
            ..*opts
        };
        r.speedup_vs_one_cluster =
            one_cluster_speedup(r.total_ns, cfg, |c| run_vit(model, fmt, c, &o))?;
    }
    Ok(r)
}

fn is_desk_scale(model: &ModelConfig) -> bool {
    [model.e, model.ff, model.hp()]
        .iter()
        .all(|&d| d <= DESK_SCALE_MAX_DIM)
}

/// Greedy generation: a causal prefill over the prompt, then one query row
/// per new token against a cache of length `t`.
pub fn run_ar_generate(
    model: &ModelConfig,
    prompt_len: usize,
    n_new: usize,
    fmt: FloatFormat,
    cfg: &MachineConfig,
    opts: &RunOptions,
) -> Result<RunReport> {
    if n_new == 0 {
        return Err(Error::config("new-tokens", "must be at least 1"));
    }
    if prompt_len + n_new > model.s_max {
        return Err(Error::CacheOverflow {
            len: prompt_len,
            extra: n_new,
            max: model.s_max,
        });
    }
    cfg.validate()?;
    let ctx = Ctx::new(cfg, fmt, opts.fused, true);
    let steps = map_indexed(ExecPolicy::Parallel, n_new, |i| {
        time_pass(model, ExecMode::Ar, prompt_len + i, &ctx)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let mut r = base_report(model, ExecMode::Ar, fmt, prompt_len, cfg, opts);
    r.new_tokens = Some(n_new);
    let mut total_ns = 0.0;
    let mut breakdown = Breakdown::default();
    for (i, st) in steps.iter().enumerate() {
        let t = prompt_len + i;
        total_ns += st.total_ns;
        breakdown.add(&st.breakdown);
        r.flops += count_flops_with(model, ExecMode::Ar, t, &cfg.calibration);
        let traffic = hbm_traffic(model, ExecMode::Ar, t, opts.fused, fmt);
        r.hbm_bytes_read += traffic.bytes_read;
        r.hbm_bytes_written += traffic.bytes_written;
        r.hbm_block_bytes_read += traffic.block_read_bytes;
        r.hbm_block_bytes_written += traffic.block_write_bytes;
        if i == 0 {
            r.traffic_assumption = traffic.assumption;
        }
    }
    let last = steps
        .into_iter()
        .last()
        .map(|s| s.kernels)
        .unwrap_or_default();
    finish(
        &mut r,
        Timed {
            total_ns,
            breakdown,
            kernels: last,
        },
        cfg,
        opts,
    );
    r.tokens_per_s = Some(n_new as f64 / (r.total_ns * 1e-9));

    if prompt_len > 0 {
        let pre = time_pass(model, ExecMode::Nar, prompt_len, &ctx)?;
        let flops = count_flops_with(model, ExecMode::Nar, prompt_len, &cfg.calibration);
        r.prefill = Some(PrefillReport {
            seq_len: prompt_len,
            total_ns: pre.total_ns,
            tokens_per_s: prompt_len as f64 / (pre.total_ns * 1e-9),
            flops,
            fpu_utilization: utilization(flops, pre.total_ns, fmt, cfg),
        });
    }

    if is_desk_scale(model) {
        let toy = ToyConfig {
            blocks: model.blocks,
            e: model.e,
            h: model.h,
            p: model.p,
            ff: model.ff,
            vocab: 32,
            max_len: model.s_max.max(1),
            fmt,
        };
        let dec = ToyDecoder::seeded(toy, opts.seed);
        let prompt: Vec<usize> = (0..prompt_len).map(|i| (i * 7 + 1) % toy.vocab).collect();
        r.logits = Some(dec.generate(&prompt, n_new)?.logits);
    }

    if opts.speedup && cfg.total_clusters() > 1 {
        let o = RunOptions {
            speedup: false,
            dump_plan: false,
            ..*opts
        };
        r.speedup_vs_one_cluster = one_cluster_speedup(r.total_ns, cfg, |c| {
            run_ar_generate(model, prompt_len, n_new, fmt, c, &o)
        })?;
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::timing::Category;

    fn preset(n: &str) -> ModelConfig {
        ModelConfig::preset(n).unwrap()
    }

    fn opts() -> RunOptions {
        RunOptions::default()
    }

    #[test]
    fn breakdown_matches_total() {
        let cfg = MachineConfig::default();
        let runs = [
            run_nar(&preset("gpt3-xl"), 256, FloatFormat::Fp16, &cfg, &opts()).unwrap(),
            run_vit(&preset("vit-b"), FloatFormat::Fp8E4M3, &cfg, &opts()).unwrap(),
            run_ar_generate(&preset("gpt3-xl"), 16, 4, FloatFormat::Fp32, &cfg, &opts()).unwrap(),
        ];
        for r in runs {
            let sum: f64 = Category::ALL.iter().map(|c| r.breakdown.get(*c)).sum();
            assert!((sum - r.total_ns).abs() <= 1e-3 * r.total_ns);
            assert!(r.fpu_utilization > 0.0 && r.fpu_utilization <= 1.0);
        }
    }

    #[test]
    fn nar_throughput_falls_with_length() {
        let cfg = MachineConfig::default();
        let m = preset("gpt3-xl");
        let a = run_nar(&m, 128, FloatFormat::Fp16, &cfg, &opts()).unwrap();
        let b = run_nar(&m, 512, FloatFormat::Fp16, &cfg, &opts()).unwrap();
        assert!(a.tokens_per_s.unwrap() > b.tokens_per_s.unwrap());
    }

    #[test]
    fn more_clusters_is_faster() {
        let cfg = MachineConfig::default();
        let m = preset("vit-l");
        let one = run_vit(&m, FloatFormat::Fp32, &cfg.with_clusters(8), &opts()).unwrap();
        let two = run_vit(&m, FloatFormat::Fp32, &cfg.with_clusters(16), &opts()).unwrap();
        assert!(two.total_ns < one.total_ns);
    }

    #[test]
    fn vit_l_slower_than_vit_b() {
        let cfg = MachineConfig::default();
        let b = run_vit(&preset("vit-b"), FloatFormat::Fp16, &cfg, &opts()).unwrap();
        let l = run_vit(&preset("vit-l"), FloatFormat::Fp16, &cfg, &opts()).unwrap();
        assert!(l.total_ns > b.total_ns);
    }

    #[test]
    fn ar_step_latency_grows_with_cache() {
        let cfg = MachineConfig::default();
        let m = preset("gpt-j");
        let a = run_ar_generate(&m, 100, 1, FloatFormat::Fp16, &cfg, &opts()).unwrap();
        let b = run_ar_generate(&m, 1000, 1, FloatFormat::Fp16, &cfg, &opts()).unwrap();
        assert!(b.total_ns > a.total_ns);
        assert_eq!(b.prefill.as_ref().unwrap().seq_len, 1000);
    }

    #[test]
    fn ar_rejects_overflow_and_empty_request() {
        let cfg = MachineConfig::default();
        let m = preset("gpt-j");
        assert!(matches!(
            run_ar_generate(&m, 2000, 100, FloatFormat::Fp16, &cfg, &opts()),
            Err(Error::CacheOverflow { .. })
        ));
        assert!(run_ar_generate(&m, 10, 0, FloatFormat::Fp16, &cfg, &opts()).is_err());
    }

    #[test]
    fn vit_mode_needs_vit_model() {
        let cfg = MachineConfig::default();
        assert!(run_vit(&preset("gpt-j"), FloatFormat::Fp16, &cfg, &opts()).is_err());
    }

    #[test]
    fn desk_scale_ar_returns_logits() {
        let cfg = MachineConfig::default();
        let toy = ModelConfig::from_json(
            r#"{"name":"toy","kind":"gpt","blocks":2,"e":16,"p":8,"h":2,"ff":32,
                "s_default":8,"s_min":1,"s_max":64,"params":0,"patch_dim":0,"num_classes":0}"#,
        )
        .unwrap();
        let r = run_ar_generate(&toy, 0, 1, FloatFormat::Fp64, &cfg, &opts()).unwrap();
        assert_eq!(r.logits.unwrap().len(), 1);
        assert!(r.prefill.is_none());
    }

    #[test]
    fn speedup_field() {
        let cfg = MachineConfig::default();
        let o = RunOptions {
            speedup: true,
            ..opts()
        };
        let r = run_vit(&preset("vit-b"), FloatFormat::Fp8E4M3, &cfg, &o).unwrap();
        assert!(r.speedup_vs_one_cluster.unwrap() > 4.0);
    }
}
