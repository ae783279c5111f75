//! Hardware description of the many-cluster machine and its primitive costs.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::FloatFormat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IsaMode {
    /// Plain RV32 loops: no streaming registers, no hardware loops.
    Baseline,
    /// Stream semantic registers plus FREP hardware loops.
    SsrFrep,
}

/// Tunable cost constants of the timing model. Reported with every run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Calibration {
    /// Fraction of peak reached by GEMM inner loops with SSR+FREP.
    pub gemm_efficiency: f64,
    /// Fraction of peak reached by the small GEMMs inside attention tiles.
    pub attention_gemm_efficiency: f64,
    /// Compute slowdown of the baseline ISA relative to SSR+FREP.
    pub baseline_slowdown: f64,
    /// Fixed cycles per double-buffered step (barrier, DMA issue, loop setup).
    pub step_overhead_cycles: f64,
    /// Core-cycles per element per SIMD lane for the online softmax update.
    pub softmax_cost: f64,
    /// Core-cycles per element per SIMD lane for Layernorm (incl. residual add).
    pub layernorm_cost: f64,
    /// Core-cycles per element per SIMD lane for i-GELU.
    pub gelu_cost: f64,
    /// Core-cycles per element per SIMD lane for a low/single precision conversion.
    pub conversion_cost: f64,
    /// Fraction of the packed-SIMD peak the inner loops sustain per format.
    /// Narrow formats do more work per instruction, so loop and operand
    /// handling weighs more. Missing formats default to 1.
    pub simd_efficiency: BTreeMap<FloatFormat, f64>,
    /// FLOP counted per element for Layernorm.
    pub layernorm_flops_per_element: f64,
    /// FLOP counted per element for i-GELU.
    pub gelu_flops_per_element: f64,
    /// FLOP counted per score element for softmax (exp counted as one).
    pub softmax_flops_per_element: f64,
}

impl Default for Calibration {
    fn default() -> Self {
        Calibration {
            gemm_efficiency: 0.84,
            attention_gemm_efficiency: 0.75,
            baseline_slowdown: 4.3,
            step_overhead_cycles: 400.0,
            softmax_cost: 150.0,
            layernorm_cost: 40.0,
            gelu_cost: 12.0,
            conversion_cost: 6.0,
            simd_efficiency: FloatFormat::ALL
                .iter()
                .map(|&f| {
                    let e = match f.info().simd_lanes {
                        1 | 2 => 1.0,
                        4 => 0.88,
                        _ => 0.87,
                    };
                    (f, e)
                })
                .collect(),
            layernorm_flops_per_element: 8.0,
            gelu_flops_per_element: 7.0,
            softmax_flops_per_element: 5.0,
        }
    }
}

impl Calibration {
    pub fn simd_efficiency(&self, fmt: FloatFormat) -> f64 {
        self.simd_efficiency.get(&fmt).copied().unwrap_or(1.0)
    }

    pub fn validate(&self) -> Result<()> {
        let effs = [
            ("calibration.gemm_efficiency", self.gemm_efficiency),
            (
                "calibration.attention_gemm_efficiency",
                self.attention_gemm_efficiency,
            ),
        ];
        let simd = self
            .simd_efficiency
            .values()
            .map(|v| ("calibration.simd_efficiency", *v));
        for (name, v) in effs.into_iter().chain(simd) {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::config(name, "must lie in (0, 1]"));
            }
        }
        if !(self.baseline_slowdown >= 1.0 && self.baseline_slowdown.is_finite()) {
            return Err(Error::config(
                "calibration.baseline_slowdown",
                "must be >= 1",
            ));
        }
        for (name, v) in [
            (
                "calibration.step_overhead_cycles",
                self.step_overhead_cycles,
            ),
            ("calibration.softmax_cost", self.softmax_cost),
            ("calibration.layernorm_cost", self.layernorm_cost),
            ("calibration.gelu_cost", self.gelu_cost),
            ("calibration.conversion_cost", self.conversion_cost),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(name, "must be non-negative"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineConfig {
    pub clusters_per_group: usize,
    pub groups: usize,
    pub compute_cores_per_cluster: usize,
    pub spm_bytes: usize,
    pub freq_hz: f64,
    pub peak_flop_per_cycle_per_cluster: BTreeMap<FloatFormat, f64>,
    pub bw_spm: f64,
    pub bw_cluster_xbar_per_link: f64,
    pub bw_group_xbar_per_link: f64,
    pub bw_hbm_total: f64,
    pub dma_bytes_per_cycle: f64,
    pub dma_setup_ns: f64,
    pub dma_static_ns: f64,
    pub hbm_roundtrip_ns: f64,
    pub isa_mode: IsaMode,
    #[serde(default)]
    pub calibration: Calibration,
}

pub const DEFAULT_MACHINE_JSON: &str = include_str!("../data/machine_default.json");

impl Default for MachineConfig {
    fn default() -> Self {
        let peak = FloatFormat::ALL
            .iter()
            .map(|&f| (f, 16.0 * f.info().simd_lanes as f64))
            .collect();
        MachineConfig {
            clusters_per_group: 4,
            groups: 4,
            compute_cores_per_cluster: 8,
            spm_bytes: 131072,
            freq_hz: 1e9,
            peak_flop_per_cycle_per_cluster: peak,
            bw_spm: 256e9,
            bw_cluster_xbar_per_link: 64e9,
            bw_group_xbar_per_link: 64e9,
            bw_hbm_total: 410e9,
            dma_bytes_per_cycle: 56.0,
            dma_setup_ns: 27.0,
            dma_static_ns: 115.0,
            hbm_roundtrip_ns: 88.0,
            isa_mode: IsaMode::SsrFrep,
            calibration: Calibration::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Endpoint {
    Hbm,
    Spm(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RouteKind {
    HbmToCluster,
    ClusterToHbm,
    IntraGroup,
    InterGroup,
}

/// A DMA transfer path. `hbm_sharers` is the number of clusters streaming
/// from/to HBM at the same time; the aggregate bandwidth is split evenly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Route {
    pub src: Endpoint,
    pub dst: Endpoint,
    pub hbm_sharers: usize,
}

impl Route {
    pub fn hbm_read(cluster: usize, sharers: usize) -> Self {
        Route {
            src: Endpoint::Hbm,
            dst: Endpoint::Spm(cluster),
            hbm_sharers: sharers.max(1),
        }
    }

    pub fn hbm_write(cluster: usize, sharers: usize) -> Self {
        Route {
            src: Endpoint::Spm(cluster),
            dst: Endpoint::Hbm,
            hbm_sharers: sharers.max(1),
        }
    }

    pub fn cluster_to_cluster(src: usize, dst: usize) -> Self {
        Route {
            src: Endpoint::Spm(src),
            dst: Endpoint::Spm(dst),
            hbm_sharers: 1,
        }
    }

    pub fn kind(&self, cfg: &MachineConfig) -> Result<RouteKind> {
        let n = cfg.total_clusters();
        let check = |c: usize| {
            if c < n {
                Ok(())
            } else {
                Err(Error::Route(format!(
                    "cluster {c} out of range (machine has {n})"
                )))
            }
        };
        match (self.src, self.dst) {
            (Endpoint::Hbm, Endpoint::Hbm) => Err(Error::Route("HBM to HBM".into())),
            (Endpoint::Hbm, Endpoint::Spm(c)) => check(c).map(|_| RouteKind::HbmToCluster),
            (Endpoint::Spm(c), Endpoint::Hbm) => check(c).map(|_| RouteKind::ClusterToHbm),
            (Endpoint::Spm(a), Endpoint::Spm(b)) => {
                check(a)?;
                check(b)?;
                if a == b {
                    Err(Error::Route(format!(
                        "source and destination are both cluster {a}"
                    )))
                } else if cfg.group_of(a) == cfg.group_of(b) {
                    Ok(RouteKind::IntraGroup)
                } else {
                    Ok(RouteKind::InterGroup)
                }
            }
        }
    }
}

impl MachineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: MachineConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.clusters_per_group == 0 {
            return Err(Error::config("clusters_per_group", "must be >= 1"));
        }
        if self.groups == 0 {
            return Err(Error::config("groups", "must be >= 1"));
        }
        if self.compute_cores_per_cluster == 0 {
            return Err(Error::config("compute_cores_per_cluster", "must be >= 1"));
        }
        if self.spm_bytes == 0 {
            return Err(Error::config("spm_bytes", "must be positive"));
        }
        for (name, v) in [
            ("freq_hz", self.freq_hz),
            ("bw_spm", self.bw_spm),
            ("bw_cluster_xbar_per_link", self.bw_cluster_xbar_per_link),
            ("bw_group_xbar_per_link", self.bw_group_xbar_per_link),
            ("bw_hbm_total", self.bw_hbm_total),
            ("dma_bytes_per_cycle", self.dma_bytes_per_cycle),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(name, "must be positive and finite"));
            }
        }
        for f in FloatFormat::ALL {
            match self.peak_flop_per_cycle_per_cluster.get(&f) {
                Some(p) if *p > 0.0 => {}
                _ => {
                    return Err(Error::config(
                        "peak_flop_per_cycle_per_cluster",
                        format!("missing or non-positive entry for {f}"),
                    ))
                }
            }
        }
        self.calibration.validate()
    }

    pub fn total_clusters(&self) -> usize {
        self.clusters_per_group * self.groups
    }

    pub fn group_of(&self, cluster: usize) -> usize {
        cluster / self.clusters_per_group
    }

    /// Reshape into `clusters` total clusters, keeping groups of at most four.
    pub fn with_clusters(&self, clusters: usize) -> MachineConfig {
        let mut cfg = self.clone();
        let per_group = self.clusters_per_group.min(clusters).max(1);
        cfg.clusters_per_group = per_group;
        cfg.groups = clusters.div_ceil(per_group).max(1);
        cfg
    }

    pub fn peak(&self, fmt: FloatFormat) -> f64 {
        self.peak_flop_per_cycle_per_cluster[&fmt]
    }

    /// DMA engine rate in bytes per second.
    pub fn dma_rate(&self) -> f64 {
        self.dma_bytes_per_cycle * self.freq_hz
    }

    pub fn cycles_to_ns(&self, cycles: f64) -> f64 {
        cycles * 1e9 / self.freq_hz
    }

    /// Effective bytes/s of one transfer on `route`.
    pub fn route_bandwidth(&self, route: &Route) -> Result<f64> {
        let cap = match route.kind(self)? {
            RouteKind::HbmToCluster | RouteKind::ClusterToHbm => {
                self.bw_hbm_total / route.hbm_sharers.max(1) as f64
            }
            RouteKind::IntraGroup => self.bw_cluster_xbar_per_link,
            RouteKind::InterGroup => self.bw_group_xbar_per_link,
        };
        Ok(self.dma_rate().min(cap))
    }

    pub fn isa_efficiency(&self, mode: IsaMode) -> f64 {
        match mode {
            IsaMode::SsrFrep => self.calibration.gemm_efficiency,
            IsaMode::Baseline => {
                self.calibration.gemm_efficiency / self.calibration.baseline_slowdown
            }
        }
    }

    /// Multiplier on non-GEMM compute costs for the configured ISA.
    pub fn isa_slowdown(&self) -> f64 {
        match self.isa_mode {
            IsaMode::SsrFrep => 1.0,
            IsaMode::Baseline => self.calibration.baseline_slowdown,
        }
    }
}

/// Duration of one DMA transfer in nanoseconds.
pub fn dma_time(bytes: f64, route: &Route, cfg: &MachineConfig) -> Result<f64> {
    let kind = route.kind(cfg)?;
    let bw = cfg.route_bandwidth(route)?;
    let mut ns = cfg.dma_static_ns + bytes.max(0.0) / bw * 1e9;
    if matches!(kind, RouteKind::HbmToCluster | RouteKind::ClusterToHbm) {
        ns += cfg.hbm_roundtrip_ns;
    }
    Ok(ns)
}

/// Cycles to execute `flops` of GEMM work in `fmt` over `n_clusters`.
pub fn compute_cycles(
    flops: f64,
    fmt: FloatFormat,
    n_clusters: usize,
    cfg: &MachineConfig,
) -> Result<f64> {
    let peak = cfg
        .peak_flop_per_cycle_per_cluster
        .get(&fmt)
        .ok_or_else(|| {
            Error::config(
                "peak_flop_per_cycle_per_cluster",
                format!("no entry for {fmt}"),
            )
        })?;
    if flops <= 0.0 {
        return Ok(0.0);
    }
    let ideal = flops / (peak * n_clusters.max(1) as f64);
    Ok(ideal / cfg.isa_efficiency(cfg.isa_mode))
}

/// Depth of the binary reduction tree over all clusters.
pub fn reduction_levels(cfg: &MachineConfig) -> Result<u32> {
    let n = cfg.total_clusters();
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::NotPowerOfTwo(n));
    }
    Ok(n.trailing_zeros())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> MachineConfig {
        MachineConfig::default()
    }

    #[test]
    fn bundled_default_matches_builtin() {
        let loaded = MachineConfig::from_json(DEFAULT_MACHINE_JSON).unwrap();
        assert_eq!(loaded, cfg());
        assert_eq!(loaded.total_clusters(), 16);
    }

    #[test]
    fn peak_doubles_per_halving() {
        let c = cfg();
        assert_eq!(c.peak(FloatFormat::Fp64), 16.0);
        assert_eq!(c.peak(FloatFormat::Fp32), 32.0);
        assert_eq!(c.peak(FloatFormat::Fp16), 64.0);
        assert_eq!(c.peak(FloatFormat::Bf16), 64.0);
        assert_eq!(c.peak(FloatFormat::Fp8E4M3), 128.0);
        assert_eq!(c.peak(FloatFormat::Fp8E5M2), 128.0);
    }

    #[test]
    fn dma_examples() {
        let c = cfg();
        let r = Route::cluster_to_cluster(0, 1);
        assert_eq!(dma_time(0.0, &r, &c).unwrap(), 115.0);
        assert!((dma_time(57344.0, &r, &c).unwrap() - 1139.0).abs() < 1e-9);
        let t1 = dma_time(1000.0, &r, &c).unwrap() - 115.0;
        let t2 = dma_time(2000.0, &r, &c).unwrap() - 115.0;
        assert!((t2 - 2.0 * t1).abs() < 1e-9);
        // 56 GB/s engine binds before the 64 GB/s crossbar link.
        assert_eq!(c.route_bandwidth(&r).unwrap(), 56e9);
        assert_eq!(
            c.route_bandwidth(&Route::cluster_to_cluster(0, 4)).unwrap(),
            56e9
        );
        assert_eq!(
            Route::cluster_to_cluster(0, 4).kind(&c).unwrap(),
            RouteKind::InterGroup
        );
    }

    #[test]
    fn hbm_sharing_and_roundtrip() {
        let c = cfg();
        assert_eq!(
            dma_time(0.0, &Route::hbm_read(0, 1), &c).unwrap(),
            115.0 + 88.0
        );
        assert_eq!(
            c.route_bandwidth(&Route::hbm_read(0, 16)).unwrap(),
            410e9 / 16.0
        );
        assert_eq!(c.route_bandwidth(&Route::hbm_read(0, 2)).unwrap(), 56e9);
    }

    #[test]
    fn invalid_routes() {
        let c = cfg();
        assert!(dma_time(1.0, &Route::cluster_to_cluster(3, 3), &c).is_err());
        assert!(dma_time(
            1.0,
            &Route {
                src: Endpoint::Hbm,
                dst: Endpoint::Hbm,
                hbm_sharers: 1
            },
            &c
        )
        .is_err());
        assert!(dma_time(1.0, &Route::hbm_read(16, 1), &c).is_err());
    }

    #[test]
    fn compute_cycle_examples() {
        let mut c = cfg();
        c.calibration.gemm_efficiency = 1.0;
        assert_eq!(
            compute_cycles(32768.0, FloatFormat::Fp64, 1, &c).unwrap(),
            2048.0
        );
        assert_eq!(compute_cycles(0.0, FloatFormat::Fp64, 1, &c).unwrap(), 0.0);
        assert_eq!(
            compute_cycles(32768.0, FloatFormat::Fp32, 1, &c).unwrap(),
            1024.0
        );
        let fast = compute_cycles(1e6, FloatFormat::Fp64, 4, &cfg()).unwrap();
        let mut b = cfg();
        b.isa_mode = IsaMode::Baseline;
        let slow = compute_cycles(1e6, FloatFormat::Fp64, 4, &b).unwrap();
        assert!((slow / fast - 4.3).abs() < 1e-12);
    }

    #[test]
    fn reduction_depths() {
        let c = cfg();
        assert_eq!(reduction_levels(&c).unwrap(), 4);
        let mut c2 = cfg();
        c2.clusters_per_group = 1;
        c2.groups = 2;
        assert_eq!(reduction_levels(&c2).unwrap(), 1);
        c2.groups = 1;
        assert_eq!(reduction_levels(&c2).unwrap(), 0);
        c2.groups = 3;
        assert!(reduction_levels(&c2).is_err());
    }

    #[test]
    fn config_errors_name_the_field() {
        let mut v: serde_json::Value = serde_json::from_str(DEFAULT_MACHINE_JSON).unwrap();
        v["groups"] = 0.into();
        let err = MachineConfig::from_json(&v.to_string())
            .unwrap_err()
            .to_string();
        assert!(err.contains("groups"), "{err}");
    }
}
