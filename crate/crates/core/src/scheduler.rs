//! Tiling and mapping planners, plus the double-buffered pipeline model that
//! turns per-step compute and DMA into simulated time.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::machine::{dma_time, reduction_levels, MachineConfig, Route};
use crate::numerics::FloatFormat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpatialDim {
    M,
    K,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileShape {
    pub m: usize,
    pub n: usize,
    pub k: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemporalTiles {
    pub m: usize,
    pub n: usize,
    pub k: usize,
}

/// Spatial (across clusters) and temporal (per cluster) decomposition of
/// `C[M,N] = A[M,K] x B[K,N]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TilingPlan {
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub in_fmt: FloatFormat,
    pub acc_fmt: FloatFormat,
    pub spatial_dim: SpatialDim,
    pub spatial_parts: usize,
    /// Temporal tile counts for the largest spatial part.
    pub temporal_tiles: TemporalTiles,
    pub tile_shape: TileShape,
}

/// Balanced split of `len` into `parts` contiguous ranges.
pub fn split_range(len: usize, parts: usize) -> Vec<std::ops::Range<usize>> {
    let parts = parts.max(1);
    let base = len / parts;
    let extra = len % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for p in 0..parts {
        let size = base + usize::from(p < extra);
        out.push(start..start + size);
        start += size;
    }
    out
}

/// Ragged tiling of `len` by `tile`: every tile is full except possibly the last.
pub fn tile_ranges(len: usize, tile: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    let tile = tile.max(1);
    (0..len.div_ceil(tile)).map(move |i| i * tile..((i + 1) * tile).min(len))
}

impl TilingPlan {
    /// Bytes of the double-buffered working set.
    pub fn working_set_bytes(&self) -> usize {
        let t = self.tile_shape;
        2 * (t.m * t.k + t.k * t.n) * self.in_fmt.bytes() + t.m * t.n * self.acc_fmt.bytes()
    }

    /// Per-part extents `(rows, k)` for spatial part `p`.
    pub fn part_ranges(&self) -> Vec<(std::ops::Range<usize>, std::ops::Range<usize>)> {
        match self.spatial_dim {
            SpatialDim::M => split_range(self.m, self.spatial_parts)
                .into_iter()
                .map(|r| (r, 0..self.k))
                .collect(),
            SpatialDim::K => split_range(self.k, self.spatial_parts)
                .into_iter()
                .map(|r| (0..self.m, r))
                .collect(),
            SpatialDim::None => vec![(0..self.m, 0..self.k)],
        }
    }

    pub fn validate(&self, spm_bytes: usize, clusters: usize) -> Result<()> {
        let t = self.tile_shape;
        if t.m == 0 || t.n == 0 || t.k == 0 {
            return Err(Error::InvalidPlan("zero tile dimension".into()));
        }
        if self.spatial_parts == 0 || self.spatial_parts > clusters {
            return Err(Error::InvalidPlan(format!(
                "{} spatial parts on {clusters} clusters",
                self.spatial_parts
            )));
        }
        if self.spatial_dim == SpatialDim::None && self.spatial_parts != 1 {
            return Err(Error::InvalidPlan("unsplit plan with several parts".into()));
        }
        let ws = self.working_set_bytes();
        if ws > spm_bytes {
            return Err(Error::InvalidPlan(format!(
                "working set {ws} B exceeds SPM {spm_bytes} B"
            )));
        }
        Ok(())
    }

    /// Total number of temporal steps executed by the busiest cluster.
    pub fn steps_per_cluster(&self) -> usize {
        let tt = self.temporal_tiles;
        tt.m * tt.n * tt.k
    }
}

fn tile_candidates(extent: usize, cap: usize) -> Vec<usize> {
    let cap = cap.min(extent).max(1);
    let mut v: Vec<usize> = (1..=cap.min(8)).collect();
    v.extend((16..=cap).step_by(8));
    v.push(cap);
    v.sort_unstable();
    v.dedup();
    v
}

fn choose_tile(
    rows: usize,
    n: usize,
    k: usize,
    in_b: usize,
    acc_b: usize,
    spm: usize,
) -> Option<TileShape> {
    // Minimise the number of temporal steps; ties go to larger k, then m,
    // then n, then the squarest C tile.
    let mut best: Option<(usize, TileShape)> = None;
    for &mt in &tile_candidates(rows, 512) {
        for &nt in &tile_candidates(n, 512) {
            let c_bytes = mt * nt * acc_b;
            if c_bytes >= spm {
                continue;
            }
            let kmax = (spm - c_bytes) / (2 * in_b * (mt + nt));
            if kmax == 0 {
                continue;
            }
            let mut kt = kmax.min(k);
            if kt < k && kt > 8 {
                kt -= kt % 8;
            }
            let steps = rows.div_ceil(mt) * n.div_ceil(nt) * k.div_ceil(kt);
            let cand = TileShape {
                m: mt,
                n: nt,
                k: kt,
            };
            let better = match &best {
                None => true,
                Some((bs, b)) => {
                    let key = |s: usize, t: &TileShape| {
                        (
                            std::cmp::Reverse(s),
                            t.k,
                            t.m,
                            t.n,
                            std::cmp::Reverse(t.m.abs_diff(t.n)),
                        )
                    };
                    key(steps, &cand) > key(*bs, b)
                }
            };
            if better {
                best = Some((steps, cand));
            }
        }
    }
    best.map(|(_, t)| t)
}

/// Plan a GEMM with an explicit number of spatial parts.
pub fn plan_gemm_tiling_parts(
    m: usize,
    n: usize,
    k: usize,
    fmt: FloatFormat,
    cfg: &MachineConfig,
    hint: SpatialDim,
    parts: usize,
) -> Result<TilingPlan> {
    if m == 0 || n == 0 || k == 0 {
        return Err(Error::NoFeasiblePlan(format!("empty GEMM {m}x{n}x{k}")));
    }
    let clusters = cfg.total_clusters();
    let parts = match hint {
        SpatialDim::M => parts.clamp(1, clusters).min(m),
        SpatialDim::K => parts.clamp(1, clusters).min(k),
        SpatialDim::None => 1,
    };
    let (rows, kk) = match hint {
        SpatialDim::M => (m.div_ceil(parts), k),
        SpatialDim::K => (m, k.div_ceil(parts)),
        SpatialDim::None => (m, k),
    };
    let acc = fmt.default_accumulator();
    let tile =
        choose_tile(rows, n, kk, fmt.bytes(), acc.bytes(), cfg.spm_bytes).ok_or_else(|| {
            Error::NoFeasiblePlan(format!("{m}x{n}x{k} {fmt} in {} B", cfg.spm_bytes))
        })?;
    let plan = TilingPlan {
        m,
        n,
        k,
        in_fmt: fmt,
        acc_fmt: acc,
        spatial_dim: hint,
        spatial_parts: parts,
        temporal_tiles: TemporalTiles {
            m: rows.div_ceil(tile.m),
            n: n.div_ceil(tile.n),
            k: kk.div_ceil(tile.k),
        },
        tile_shape: tile,
    };
    plan.validate(cfg.spm_bytes, clusters)?;
    Ok(plan)
}

/// Plan a GEMM over all clusters of `cfg`. M-spatial unless told otherwise.
pub fn plan_gemm_tiling(
    m: usize,
    n: usize,
    k: usize,
    fmt: FloatFormat,
    cfg: &MachineConfig,
    hint: SpatialDim,
) -> Result<TilingPlan> {
    plan_gemm_tiling_parts(m, n, k, fmt, cfg, hint, cfg.total_clusters())
}

/// Head -> (cluster, temporal slot).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadMapping {
    pub assignments: Vec<(usize, usize)>,
    pub clusters: usize,
}

impl HeadMapping {
    pub fn slots(&self) -> usize {
        self.assignments
            .iter()
            .map(|&(_, s)| s + 1)
            .max()
            .unwrap_or(0)
    }

    pub fn active_clusters(&self) -> usize {
        self.assignments.len().min(self.clusters)
    }
}

/// Round-robin heads over clusters; extra heads go to later temporal slots.
pub fn plan_mha_mapping(heads: usize, cfg: &MachineConfig) -> HeadMapping {
    let n = cfg.total_clusters().max(1);
    HeadMapping {
        assignments: (0..heads).map(|h| (h % n, h / n)).collect(),
        clusters: n,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReductionStep {
    /// 1-based tree level.
    pub level: u32,
    pub sender: usize,
    pub receiver: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ReductionSchedule {
    pub participants: usize,
    pub levels: Vec<ReductionStep>,
}

impl ReductionSchedule {
    /// Binary tree over `n` participants: at level l, participant i with
    /// i % 2^l == 0 receives from i + 2^(l-1). Works for any `n`.
    pub fn binary(n: usize) -> Self {
        let mut levels = Vec::new();
        let mut stride = 1;
        let mut level = 1;
        while stride < n {
            let mut i = 0;
            while i + stride < n {
                levels.push(ReductionStep {
                    level,
                    sender: i + stride,
                    receiver: i,
                });
                i += 2 * stride;
            }
            stride *= 2;
            level += 1;
        }
        ReductionSchedule {
            participants: n,
            levels,
        }
    }

    pub fn depth(&self) -> u32 {
        self.levels.iter().map(|s| s.level).max().unwrap_or(0)
    }

    pub fn level(&self, l: u32) -> impl Iterator<Item = &ReductionStep> {
        self.levels.iter().filter(move |s| s.level == l)
    }

    /// Each participant sends at most once, never after it sent, and all
    /// values end at participant 0.
    pub fn validate(&self) -> Result<()> {
        let n = self.participants;
        let mut sent = vec![false; n];
        let mut last_level = 0;
        for s in &self.levels {
            if s.sender >= n || s.receiver >= n || s.sender == s.receiver {
                return Err(Error::Schedule(format!(
                    "bad pair {s:?} for {n} participants"
                )));
            }
            if s.level < last_level {
                return Err(Error::Schedule("levels out of order".into()));
            }
            last_level = s.level;
            if sent[s.sender] || sent[s.receiver] {
                return Err(Error::Schedule(format!(
                    "participant reused after sending in {s:?}"
                )));
            }
            sent[s.sender] = true;
        }
        let unsent = sent
            .iter()
            .enumerate()
            .filter(|(_, s)| !**s)
            .map(|(i, _)| i)
            .collect::<Vec<_>>();
        if n > 0 && unsent != vec![0] {
            return Err(Error::Schedule(format!(
                "values not fully reduced: {unsent:?} never send"
            )));
        }
        Ok(())
    }
}

/// Tree over all clusters of the machine; intra-group levels come first
/// because cluster ids are group-major.
pub fn build_reduction_schedule(cfg: &MachineConfig) -> Result<ReductionSchedule> {
    let depth = reduction_levels(cfg)?;
    let sched = ReductionSchedule::binary(cfg.total_clusters());
    debug_assert_eq!(sched.depth(), depth);
    Ok(sched)
}

/// One transfer inside a pipeline step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transfer {
    pub bytes: f64,
    pub route: Route,
}

impl Transfer {
    pub fn new(bytes: f64, route: Route) -> Self {
        Transfer { bytes, route }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Step {
    pub compute_cycles: f64,
    /// Loads needed before this step can compute.
    pub dma_in: Vec<Transfer>,
    /// Stores issued after this step computes.
    pub dma_out: Vec<Transfer>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bound {
    Compute,
    Memory,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseTiming {
    pub prologue_ns: f64,
    pub steady_ns: f64,
    pub epilogue_ns: f64,
    pub total_ns: f64,
    pub compute_ns: f64,
    pub dma_ns: f64,
    pub bound: Bound,
}

impl PhaseTiming {
    pub fn zero() -> Self {
        PhaseTiming {
            prologue_ns: 0.0,
            steady_ns: 0.0,
            epilogue_ns: 0.0,
            total_ns: 0.0,
            compute_ns: 0.0,
            dma_ns: 0.0,
            bound: Bound::Compute,
        }
    }

    /// Run `times` back-to-back copies of this phase.
    pub fn repeated(&self, times: f64) -> Self {
        PhaseTiming {
            prologue_ns: self.prologue_ns * times,
            steady_ns: self.steady_ns * times,
            epilogue_ns: self.epilogue_ns * times,
            total_ns: self.total_ns * times,
            compute_ns: self.compute_ns * times,
            dma_ns: self.dma_ns * times,
            bound: self.bound,
        }
    }
}

fn transfers_ns(ts: &[Transfer], cfg: &MachineConfig) -> Result<f64> {
    ts.iter().map(|t| dma_time(t.bytes, &t.route, cfg)).sum()
}

/// Double-buffered pipeline: while step i computes, the DMA engine writes
/// back step i-1 and prefetches step i+1.
pub fn simulate_phases(steps: &[Step], cfg: &MachineConfig) -> Result<PhaseTiming> {
    if steps.is_empty() {
        return Err(Error::InvalidPlan("no pipeline steps".into()));
    }
    let ns_in = steps
        .iter()
        .map(|s| transfers_ns(&s.dma_in, cfg))
        .collect::<Result<Vec<_>>>()?;
    let ns_out = steps
        .iter()
        .map(|s| transfers_ns(&s.dma_out, cfg))
        .collect::<Result<Vec<_>>>()?;
    let compute: Vec<f64> = steps
        .iter()
        .map(|s| cfg.cycles_to_ns(s.compute_cycles))
        .collect();

    let n = steps.len();
    let prologue = ns_in[0];
    let mut steady = 0.0;
    let mut steady_dma = 0.0;
    for i in 0..n {
        let prefetch = if i + 1 < n { ns_in[i + 1] } else { 0.0 };
        let writeback = if i > 0 { ns_out[i - 1] } else { 0.0 };
        steady += compute[i].max(prefetch + writeback);
        steady_dma += prefetch + writeback;
    }
    let epilogue = ns_out[n - 1];
    let compute_ns: f64 = compute.iter().sum();
    Ok(PhaseTiming {
        prologue_ns: prologue,
        steady_ns: steady,
        epilogue_ns: epilogue,
        total_ns: prologue + steady + epilogue,
        compute_ns,
        dma_ns: ns_in.iter().sum::<f64>() + ns_out.iter().sum::<f64>(),
        bound: if compute_ns >= steady_dma {
            Bound::Compute
        } else {
            Bound::Memory
        },
    })
}
