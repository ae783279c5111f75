//! Command-line front end. `run` takes argv and two sinks so tests can
//! drive it in-process; `main` only forwards the exit code.

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::machine::{IsaMode, MachineConfig};
use crate::models::config::{ModelConfig, ModelKind};
use crate::models::exec::{run_ar_generate, run_nar, run_vit, RunOptions, RunReport};
use crate::models::flops::ExecMode;
use crate::models::timing::Category;
use crate::numerics::FloatFormat;
use crate::par::{map_indexed, ExecPolicy};
use crate::recipes;
use crate::validate::{self, ValidateOptions, CHECK_NAMES};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

/// Sweep columns after the axis and throughput columns.
pub const SWEEP_TAIL: [&str; 4] = ["total_ns", "fpu_util", "hbm_read_bytes", "hbm_write_bytes"];

#[derive(Debug, Parser)]
#[command(
    name = "tfsim",
    version,
    about = "Transformer inference simulator for a many-cluster accelerator"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Time one inference run and print a report.
    Simulate(RunArgs),
    /// Repeat a run along one axis and print one row per point.
    Sweep(SweepArgs),
    /// Run the numeric equivalence checks (or the reproduction recipes).
    Validate(ValidateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum IsaArg {
    Baseline,
    SsrFrep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutFormat {
    Json,
    Csv,
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Seq,
    Clusters,
    Fmt,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Preset name: vit-b, vit-l, vit-h, gpt3-xl, gpt-j.
    #[arg(long, conflicts_with = "model_config")]
    model: Option<String>,
    /// Model dimensions as JSON.
    #[arg(long)]
    model_config: Option<PathBuf>,
    /// Machine description as JSON (defaults to the bundled one).
    #[arg(long)]
    machine_config: Option<PathBuf>,
    /// nar, ar or vit. Defaults to vit for ViTs and nar for decoders.
    #[arg(long)]
    mode: Option<String>,
    /// fp64, fp32, fp16, bf16, fp8e4m3, fp8e5m2 (fp8 = fp8e5m2).
    #[arg(long, default_value = "fp16")]
    fmt: String,
    /// Sequence length (prompt length in ar mode).
    #[arg(long)]
    seq: Option<usize>,
    /// Tokens to generate (ar mode only).
    #[arg(long)]
    new_tokens: Option<usize>,
    /// Total clusters, a power of two.
    #[arg(long)]
    clusters: Option<usize>,
    /// Number of groups the clusters are split into.
    #[arg(long)]
    groups: Option<usize>,
    #[arg(long, overrides_with = "no_fused")]
    fused: bool,
    #[arg(long, overrides_with = "fused")]
    no_fused: bool,
    #[arg(long, value_enum)]
    isa: Option<IsaArg>,
    #[arg(long, value_enum)]
    out: Option<OutFormat>,
    /// Include per-kernel timings and tiling plans.
    #[arg(long)]
    dump_plan: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Clone, Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_enum)]
    axis: SweepAxis,
    /// Comma-separated points; defaults depend on the axis.
    #[arg(long)]
    values: Option<String>,
}

#[derive(Debug, Clone, Args)]
struct ValidateArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Run the reproduction recipes instead of the numeric checks.
    /// Without a path the bundled manifest is used.
    #[arg(long, num_args = 0..=1, default_missing_value = "")]
    recipes: Option<String>,
    /// Run a single check (or recipe id with --recipes).
    #[arg(long)]
    only: Option<String>,
    /// Override the i-GELU `a` constant under test.
    #[arg(long, hide = true)]
    igelu_a: Option<f64>,
}

/// Fully resolved run, ready to execute.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub model: ModelConfig,
    pub machine: MachineConfig,
    pub mode: ExecMode,
    pub fmt: FloatFormat,
    pub seq: usize,
    pub new_tokens: Option<usize>,
    pub opts: RunOptions,
    pub out: OutFormat,
}

/// Accepts the six format names plus `fp8` for E5M2.
pub fn parse_format(s: &str) -> Result<FloatFormat> {
    match s.to_ascii_lowercase().as_str() {
        "fp8" => Ok(FloatFormat::Fp8E5M2),
        other => other
            .parse()
            .map_err(|_| Error::UnknownFormat(s.to_string())),
    }
}

fn reshape(
    machine: &MachineConfig,
    clusters: Option<usize>,
    groups: Option<usize>,
) -> Result<MachineConfig> {
    let total = clusters.unwrap_or_else(|| machine.total_clusters());
    if total == 0 || !total.is_power_of_two() {
        return Err(Error::config(
            "clusters",
            format!("{total} is not a power of two"),
        ));
    }
    let mut m = machine.with_clusters(total);
    if let Some(g) = groups {
        if g == 0 || !total.is_multiple_of(g) {
            return Err(Error::config(
                "groups",
                format!("{g} groups do not divide {total} clusters"),
            ));
        }
        m.groups = g;
        m.clusters_per_group = total / g;
    }
    Ok(m)
}

impl RunArgs {
    pub fn resolve(&self) -> Result<RunSpec> {
        let model = match (&self.model, &self.model_config) {
            (Some(name), None) => ModelConfig::preset(name)?,
            (None, Some(path)) => ModelConfig::load(path).map_err(|e| match e {
                Error::Config { .. } => e,
                other => Error::config("model-config", other.to_string()),
            })?,
            (None, None) => return Err(Error::config("model", "pass --model or --model-config")),
            (Some(_), Some(_)) => {
                return Err(Error::config(
                    "model",
                    "--model and --model-config are exclusive",
                ))
            }
        };
        let base = match &self.machine_config {
            Some(path) => MachineConfig::load(path).map_err(|e| match e {
                Error::Config { .. } => e,
                other => Error::config("machine-config", other.to_string()),
            })?,
            None => MachineConfig::default(),
        };
        let mut machine = reshape(&base, self.clusters, self.groups)?;
        if let Some(isa) = self.isa {
            machine.isa_mode = match isa {
                IsaArg::Baseline => IsaMode::Baseline,
                IsaArg::SsrFrep => IsaMode::SsrFrep,
            };
        }
        machine.validate()?;

        let mode = match &self.mode {
            Some(m) => m.parse::<ExecMode>()?,
            None if model.kind == ModelKind::Vit => ExecMode::Vit,
            None => ExecMode::Nar,
        };
        let fmt = parse_format(&self.fmt)?;
        match (mode, model.kind) {
            (ExecMode::Vit, ModelKind::Gpt) => {
                return Err(Error::config(
                    "mode",
                    format!("{} is not a ViT", model.name),
                ))
            }
            (ExecMode::Ar, ModelKind::Vit) => {
                return Err(Error::config("mode", "ar mode needs a decoder model"))
            }
            _ => {}
        }
        if self.new_tokens.is_some() && mode != ExecMode::Ar {
            return Err(Error::config("new-tokens", "only valid with --mode ar"));
        }
        let seq = match mode {
            ExecMode::Vit => match self.seq {
                Some(s) if s != model.s_default => {
                    return Err(Error::config(
                        "seq",
                        format!("{} always runs S={}", model.name, model.s_default),
                    ))
                }
                _ => model.s_default,
            },
            ExecMode::Nar => {
                let s = self.seq.unwrap_or(model.s_default);
                model.check_seq(s)?;
                s
            }
            ExecMode::Ar => self.seq.unwrap_or(model.s_default),
        };
        let new_tokens = match mode {
            ExecMode::Ar => Some(self.new_tokens.unwrap_or(16)),
            _ => None,
        };
        if let Some(n) = new_tokens {
            if seq + n > model.s_max {
                return Err(Error::config(
                    "new-tokens",
                    format!(
                        "prompt {seq} + {n} new tokens exceeds the {} token cache",
                        model.s_max
                    ),
                ));
            }
        }
        Ok(RunSpec {
            model,
            machine,
            mode,
            fmt,
            seq,
            new_tokens,
            opts: RunOptions {
                fused: !self.no_fused,
                dump_plan: self.dump_plan,
                speedup: false,
                seed: self.seed,
            },
            out: self.out.unwrap_or(OutFormat::Json),
        })
    }
}

impl RunSpec {
    pub fn execute(&self) -> Result<RunReport> {
        match self.mode {
            ExecMode::Nar => run_nar(&self.model, self.seq, self.fmt, &self.machine, &self.opts),
            ExecMode::Vit => run_vit(&self.model, self.fmt, &self.machine, &self.opts),
            ExecMode::Ar => run_ar_generate(
                &self.model,
                self.seq,
                self.new_tokens.unwrap_or(1),
                self.fmt,
                &self.machine,
                &self.opts,
            ),
        }
    }
}

/// The serde name of a unit enum value, for labels.
fn tag<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        _ => String::new(),
    }
}

fn yes_no(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

pub fn render_text(r: &RunReport) -> String {
    let mut s = String::new();
    s += &format!(
        "model {}  mode {}  fmt {}  S {}  clusters {}  fused {}  isa {}\n",
        r.model,
        tag(&r.mode),
        r.fmt,
        r.seq_len,
        r.clusters,
        yes_no(r.fused),
        tag(&r.isa_mode)
    );
    if let Some(n) = r.new_tokens {
        s += &format!("new tokens         {n}\n");
    }
    s += &format!("latency            {:.3} ms\n", r.total_ns * 1e-6);
    match (r.tokens_per_s, r.images_per_s) {
        (Some(t), _) => s += &format!("tokens/s           {t:.2}\n"),
        (None, Some(i)) => s += &format!("images/s           {i:.2}\n"),
        _ => {}
    }
    s += &format!(
        "achieved           {:.3} TFLOPS\n",
        r.achieved_flops_per_s * 1e-12
    );
    s += &format!("fpu utilization    {:.1} %\n", r.fpu_utilization * 100.0);
    s += &format!(
        "hbm read / write   {:.1} / {:.1} MiB\n",
        r.hbm_bytes_read / 1048576.0,
        r.hbm_bytes_written / 1048576.0
    );
    if let Some(x) = r.speedup_vs_one_cluster {
        s += &format!("vs one cluster     {x:.2}x\n");
    }
    s += "\nkernel              latency [ms]   share\n";
    for c in Category::ALL {
        s += &format!(
            "{:<18} {:>13.3} {:>6.1} %\n",
            c.label(),
            r.breakdown.get(c) * 1e-6,
            r.breakdown.share(c) * 100.0
        );
    }
    s
}

pub fn csv_header() -> &'static str {
    "model,mode,fmt,seq,clusters,throughput,total_ns,fpu_util,hbm_read_bytes,hbm_write_bytes"
}

pub fn csv_row(r: &RunReport) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{}",
        r.model,
        tag(&r.mode),
        r.fmt,
        r.seq_len,
        r.clusters,
        r.throughput(),
        r.total_ns,
        r.fpu_utilization,
        r.hbm_bytes_read,
        r.hbm_bytes_written
    )
}

fn throughput_column(mode: ExecMode) -> &'static str {
    if mode == ExecMode::Vit {
        "images_per_s"
    } else {
        "tokens_per_s"
    }
}

pub fn sweep_header(axis: SweepAxis, mode: ExecMode) -> String {
    let axis = match axis {
        SweepAxis::Seq => "seq",
        SweepAxis::Clusters => "clusters",
        SweepAxis::Fmt => "fmt",
    };
    format!(
        "{axis},{},{}",
        throughput_column(mode),
        SWEEP_TAIL.join(",")
    )
}

fn default_values(axis: SweepAxis) -> &'static str {
    match axis {
        SweepAxis::Seq => "128,256,512,1024,2048",
        SweepAxis::Clusters => "1,2,4,8,16",
        SweepAxis::Fmt => "fp64,fp32,fp16,fp8e5m2",
    }
}

fn split_values(text: &str) -> Result<Vec<String>> {
    let v: Vec<String> = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect();
    if v.is_empty() {
        return Err(Error::config("values", "axis list is empty"));
    }
    Ok(v)
}

fn sweep_point(args: &RunArgs, axis: SweepAxis, value: &str) -> Result<RunReport> {
    let mut a = args.clone();
    let bad = |what: &str| Error::config("values", format!("{value:?} is not a valid {what}"));
    match axis {
        SweepAxis::Seq => {
            a.seq = Some(value.parse().map_err(|_| bad("sequence length"))?);
        }
        SweepAxis::Clusters => {
            a.clusters = Some(value.parse().map_err(|_| bad("cluster count"))?);
            a.groups = None;
        }
        SweepAxis::Fmt => a.fmt = value.to_string(),
    }
    let spec = a.resolve()?;
    if axis == SweepAxis::Seq && spec.mode == ExecMode::Vit {
        return Err(Error::config(
            "axis",
            "ViT runs have a fixed sequence length",
        ));
    }
    spec.execute()
}

#[derive(Debug, Serialize)]
struct SweepRow<'a> {
    point: &'a str,
    report: &'a RunReport,
}

fn cmd_sweep(a: &SweepArgs, out: &mut dyn Write) -> Result<()> {
    let text = a.values.as_deref().unwrap_or(default_values(a.axis));
    let values = split_values(text)?;
    // Resolve once up front so flag errors surface before any work.
    let first = a.run.resolve()?;
    let reports = map_indexed(ExecPolicy::Parallel, values.len(), |i| {
        sweep_point(&a.run, a.axis, &values[i])
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    match a.run.out.unwrap_or(OutFormat::Csv) {
        OutFormat::Json => {
            let rows: Vec<SweepRow> = values
                .iter()
                .zip(&reports)
                .map(|(p, r)| SweepRow {
                    point: p,
                    report: r,
                })
                .collect();
            writeln!(out, "{}", serde_json::to_string_pretty(&rows)?)?;
        }
        fmt => {
            let header = sweep_header(a.axis, first.mode);
            let rows: Vec<Vec<String>> = values
                .iter()
                .zip(&reports)
                .map(|(v, r)| {
                    vec![
                        v.clone(),
                        r.throughput().to_string(),
                        r.total_ns.to_string(),
                        r.fpu_utilization.to_string(),
                        r.hbm_bytes_read.to_string(),
                        r.hbm_bytes_written.to_string(),
                    ]
                })
                .collect();
            if fmt == OutFormat::Csv {
                writeln!(out, "{header}")?;
                for row in rows {
                    writeln!(out, "{}", row.join(","))?;
                }
            } else {
                let head: Vec<String> = header.split(',').map(String::from).collect();
                let mut width: Vec<usize> = head.iter().map(String::len).collect();
                for row in &rows {
                    for (w, c) in width.iter_mut().zip(row) {
                        *w = (*w).max(c.len());
                    }
                }
                for row in std::iter::once(&head).chain(&rows) {
                    let cells: Vec<String> = row
                        .iter()
                        .zip(&width)
                        .map(|(c, w)| format!("{c:>w$}"))
                        .collect();
                    writeln!(out, "{}", cells.join("  "))?;
                }
            }
        }
    }
    Ok(())
}

fn cmd_simulate(a: &RunArgs, out: &mut dyn Write) -> Result<()> {
    let mut spec = a.resolve()?;
    spec.opts.speedup = true;
    let r = spec.execute()?;
    match spec.out {
        OutFormat::Json => writeln!(out, "{}", serde_json::to_string_pretty(&r)?)?,
        OutFormat::Csv => {
            writeln!(out, "{}", csv_header())?;
            writeln!(out, "{}", csv_row(&r))?;
        }
        OutFormat::Text => write!(out, "{}", render_text(&r))?,
    }
    Ok(())
}

fn cmd_validate(a: &ValidateArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    if let Some(path) = &a.recipes {
        let manifest = if path.is_empty() {
            recipes::bundled()?
        } else {
            recipes::load(path)?
        };
        let selected: Vec<_> = match &a.only {
            Some(id) => {
                let r: Vec<_> = manifest.into_iter().filter(|r| &r.id == id).collect();
                if r.is_empty() {
                    return Err(Error::config("only", format!("no recipe {id:?}")));
                }
                r
            }
            None => manifest,
        };
        let mut first_fail = None;
        for r in &selected {
            let o = recipes::run_recipe(r);
            writeln!(out, "{}", o.line())?;
            if !o.passed && first_fail.is_none() {
                first_fail = Some(o.id.clone());
            }
        }
        return Ok(match first_fail {
            Some(id) => {
                writeln!(err, "recipe failed: {id}")?;
                EXIT_FAIL
            }
            None => EXIT_OK,
        });
    }

    let mut opts = ValidateOptions {
        seed: a.seed,
        ..ValidateOptions::default()
    };
    if let Some(x) = a.igelu_a {
        opts.igelu_a = x;
    }
    let names: Vec<&str> = match &a.only {
        Some(n) if CHECK_NAMES.contains(&n.as_str()) => vec![n.as_str()],
        Some(n) => {
            return Err(Error::config(
                "only",
                format!(
                    "unknown check {n:?}; expected one of {}",
                    CHECK_NAMES.join(", ")
                ),
            ))
        }
        None => CHECK_NAMES.to_vec(),
    };
    let mut first_fail = None;
    for name in names {
        let res = validate::run_check(name, &opts).expect("known check");
        writeln!(out, "{}", res.line())?;
        if !res.passed && first_fail.is_none() {
            first_fail = Some(res.name.clone());
        }
    }
    Ok(match first_fail {
        Some(name) => {
            writeln!(err, "check failed: {name}")?;
            EXIT_FAIL
        }
        None => {
            writeln!(out, "all checks passed (seed {})", a.seed)?;
            EXIT_OK
        }
    })
}

/// Parse `argv` (program name first) and run. Returns the exit code.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                write!(err, "{text}")
            } else {
                write!(out, "{text}")
            };
            return code;
        }
    };
    let res = match &cli.cmd {
        Command::Simulate(a) => cmd_simulate(a, out).map(|_| EXIT_OK),
        Command::Sweep(a) => cmd_sweep(a, out).map(|_| EXIT_OK),
        Command::Validate(a) => cmd_validate(a, out, err),
    };
    match res {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_CONFIG
        }
    }
}

/// Run with string arguments (no program name) and capture stdout.
pub fn run_captured(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("tfsim").chain(args.iter().copied());
    let code = run(argv, &mut out, &mut err);
    (
        code,
        String::from_utf8_lossy(&out).into_owned(),
        String::from_utf8_lossy(&err).into_owned(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fp8_alias() {
        assert_eq!(parse_format("fp8").unwrap(), FloatFormat::Fp8E5M2);
        assert_eq!(parse_format("FP32").unwrap(), FloatFormat::Fp32);
        assert!(parse_format("fp12").is_err());
    }

    #[test]
    fn reshape_checks_counts() {
        let m = MachineConfig::default();
        assert_eq!(reshape(&m, Some(8), None).unwrap().total_clusters(), 8);
        let g = reshape(&m, Some(16), Some(2)).unwrap();
        assert_eq!((g.groups, g.clusters_per_group), (2, 8));
        assert!(reshape(&m, Some(6), None).is_err());
        assert!(reshape(&m, Some(16), Some(3)).is_err());
    }

    #[test]
    fn sweep_header_names_axis() {
        assert_eq!(
            sweep_header(SweepAxis::Seq, ExecMode::Nar),
            "seq,tokens_per_s,total_ns,fpu_util,hbm_read_bytes,hbm_write_bytes"
        );
        assert!(sweep_header(SweepAxis::Clusters, ExecMode::Vit).contains("images_per_s"));
    }

    #[test]
    fn help_exits_zero() {
        let (code, out, _) = run_captured(&["--help"]);
        assert_eq!(code, 0);
        assert!(out.contains("simulate"));
    }
}
