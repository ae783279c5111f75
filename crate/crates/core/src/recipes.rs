//! Scripted reproduction recipes: CLI invocations plus window or trend
//! assertions, kept in a JSON manifest and run in-process.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::cli::run_captured;
use crate::error::{Error, Result};
use crate::models::exec::RunReport;
use crate::models::timing::Category;

pub const BUNDLED_MANIFEST: &str = include_str!("../data/recipes.json");

/// Number of acceptance criteria the manifest must cover.
pub const CRITERIA: u32 = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    pub id: String,
    pub criterion: u32,
    /// What result the recipe reproduces, in plain words.
    pub anchor: String,
    /// Argument lists without the program name.
    pub commands: Vec<Vec<String>>,
    pub assertion: String,
    /// Which checker interprets the outputs.
    pub check: String,
    /// Numeric windows read by the checker.
    #[serde(default)]
    pub expect: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecipeOutcome {
    pub id: String,
    pub criterion: u32,
    pub passed: bool,
    pub seconds: f64,
    pub detail: String,
}

impl RecipeOutcome {
    pub fn line(&self) -> String {
        format!(
            "{} criterion {:>2} {:<24} {} ({:.2} s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.criterion,
            self.id,
            self.detail,
            self.seconds
        )
    }
}

pub const CHECKS: [&str; 10] = [
    "all_exit_zero",
    "ar_nar",
    "fp8",
    "igelu",
    "traffic",
    "utilization",
    "speedups",
    "cluster_scaling",
    "constant_flops",
    "breakdown",
];

pub fn parse(text: &str) -> Result<Vec<Recipe>> {
    let v: Vec<Recipe> = serde_json::from_str(text)?;
    for r in &v {
        if !CHECKS.contains(&r.check.as_str()) {
            return Err(Error::config(
                "check",
                format!("recipe {} names unknown checker {:?}", r.id, r.check),
            ));
        }
        if r.commands.is_empty() {
            return Err(Error::config(
                "commands",
                format!("recipe {} has none", r.id),
            ));
        }
    }
    Ok(v)
}

pub fn bundled() -> Result<Vec<Recipe>> {
    parse(BUNDLED_MANIFEST)
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<Recipe>> {
    parse(&std::fs::read_to_string(path)?)
}

/// Criteria with no recipe, and criteria with more than one.
pub fn coverage_gaps(recipes: &[Recipe]) -> (Vec<u32>, Vec<u32>) {
    let count = |c: u32| recipes.iter().filter(|r| r.criterion == c).count();
    let missing = (1..=CRITERIA).filter(|&c| count(c) == 0).collect();
    let dup = (1..=CRITERIA).filter(|&c| count(c) > 1).collect();
    (missing, dup)
}

struct Output {
    code: i32,
    stdout: String,
    stderr: String,
}

type Verdict = std::result::Result<String, String>;

fn num(v: &Value, key: &str) -> std::result::Result<f64, String> {
    v.get(key)
        .and_then(Value::as_f64)
        .ok_or_else(|| format!("manifest expect.{key} missing"))
}

fn window(v: &Value, key: &str) -> std::result::Result<(f64, f64), String> {
    let w = v
        .get(key)
        .and_then(Value::as_array)
        .filter(|a| a.len() == 2)
        .ok_or_else(|| format!("manifest expect.{key} must be [lo, hi]"))?;
    match (w[0].as_f64(), w[1].as_f64()) {
        (Some(a), Some(b)) => Ok((a, b)),
        _ => Err(format!("manifest expect.{key} must be numeric")),
    }
}

fn nums(v: &Value, key: &str) -> std::result::Result<Vec<f64>, String> {
    v.get(key)
        .and_then(Value::as_array)
        .and_then(|a| a.iter().map(Value::as_f64).collect())
        .ok_or_else(|| format!("manifest expect.{key} must be a number list"))
}

fn reports(outs: &[Output]) -> std::result::Result<Vec<RunReport>, String> {
    outs.iter()
        .map(|o| {
            if o.code != 0 {
                return Err(format!("command exited {}: {}", o.code, o.stderr.trim()));
            }
            serde_json::from_str(&o.stdout).map_err(|e| format!("bad report: {e}"))
        })
        .collect()
}

fn sweep_reports(o: &Output) -> std::result::Result<Vec<RunReport>, String> {
    if o.code != 0 {
        return Err(format!("sweep exited {}: {}", o.code, o.stderr.trim()));
    }
    let rows: Vec<Value> = serde_json::from_str(&o.stdout).map_err(|e| e.to_string())?;
    rows.into_iter()
        .map(|mut r| serde_json::from_value(r["report"].take()).map_err(|e| e.to_string()))
        .collect()
}

fn within(x: f64, (lo, hi): (f64, f64)) -> bool {
    (lo..=hi).contains(&x)
}

fn near(x: f64, target: f64, rel: f64) -> bool {
    (x - target).abs() <= rel * target
}

fn check_exit_zero(outs: &[Output]) -> Verdict {
    let failed: Vec<String> = outs
        .iter()
        .filter(|o| o.code != 0)
        .map(|o| o.stderr.trim().to_string())
        .collect();
    let lines: Vec<&str> = outs.iter().flat_map(|o| o.stdout.lines()).collect();
    let summary = lines
        .iter()
        .filter(|l| l.starts_with("PASS") || l.starts_with("FAIL"))
        .map(|l| {
            let mut w = l.split_whitespace();
            let name = w.nth(1).unwrap_or("");
            let err = l
                .split_whitespace()
                .find_map(|t| t.strip_prefix("max_error="))
                .unwrap_or("?");
            format!("{name}={err}")
        })
        .collect::<Vec<_>>()
        .join(" ");
    if !failed.is_empty() {
        return Err(format!("{summary}; {}", failed.join("; ")));
    }
    Ok(summary)
}

fn check_traffic(outs: &[Output], e: &Value) -> Verdict {
    let r = reports(outs)?;
    let [unfused, fused] = r.as_slice() else {
        return Err("expects an unfused and a fused run".into());
    };
    let mib = 1048576.0;
    let (u, f) = (
        unfused.hbm_block_bytes_read / mib,
        fused.hbm_block_bytes_read / mib,
    );
    let ratio = u / f;
    let tol = num(e, "rel_tol")?;
    let ok = within(ratio, window(e, "ratio")?)
        && near(u, num(e, "unfused_mib")?, tol)
        && near(f, num(e, "fused_mib")?, tol);
    let d = format!("per-block reads unfused {u:.0} MiB fused {f:.0} MiB ratio {ratio:.3}");
    if ok {
        Ok(d)
    } else {
        Err(d)
    }
}

fn check_utilization(outs: &[Output], e: &Value) -> Verdict {
    let r = reports(outs)?;
    let targets = nums(e, "nar_targets")?;
    let n = targets.len();
    if r.len() != 2 * n {
        return Err(format!("expects {n} NAR then {n} AR runs"));
    }
    let tol = num(e, "abs_tol")?;
    let ar_max = num(e, "ar_max")?;
    let nar: Vec<f64> = r[..n].iter().map(|x| x.fpu_utilization).collect();
    let ar: Vec<f64> = r[n..].iter().map(|x| x.fpu_utilization).collect();
    let mut ok = nar.iter().zip(&targets).all(|(u, t)| (u - t).abs() <= tol);
    // Expected ranking as indices into the run list, highest first.
    let order: Vec<usize> = nums(e, "order")?.iter().map(|&i| i as usize).collect();
    ok &= order.windows(2).all(|w| nar[w[0]] > nar[w[1]]);
    ok &= ar.iter().all(|&u| u < ar_max);
    let pct = |v: &[f64]| {
        v.iter()
            .map(|u| format!("{:.1}", u * 100.0))
            .collect::<Vec<_>>()
            .join("/")
    };
    let d = format!("NAR {} %, AR {} %", pct(&nar), pct(&ar));
    if ok {
        Ok(d)
    } else {
        Err(d)
    }
}

fn check_speedups(outs: &[Output], e: &Value) -> Verdict {
    let r = reports(outs)?;
    let [f64_, f32_, f16_, f8_, base] = r.as_slice() else {
        return Err("expects fp64, fp32, fp16, fp8 and a baseline-ISA fp64 run".into());
    };
    let s1 = f64_.total_ns / f32_.total_ns;
    let s2 = f32_.total_ns / f16_.total_ns;
    let s3 = f16_.total_ns / f8_.total_ns;
    let isa = base.total_ns / f64_.total_ns;
    let ok = within(s1, window(e, "fp64_to_fp32")?)
        && within(s2, window(e, "fp32_to_fp16")?)
        && s3 > 1.0
        && within(isa, window(e, "isa")?);
    let d = format!("64->32 {s1:.2}x 32->16 {s2:.2}x 16->8 {s3:.2}x isa {isa:.2}x");
    if ok {
        Ok(d)
    } else {
        Err(d)
    }
}

fn check_scaling(outs: &[Output], e: &Value) -> Verdict {
    let r = reports(outs)?;
    let targets = nums(e, "targets")?;
    if r.len() != targets.len() {
        return Err(format!("expects {} runs", targets.len()));
    }
    let tol = num(e, "rel_tol")?;
    let mut ok = true;
    let mut parts = Vec::new();
    for (rep, &t) in r.iter().zip(&targets) {
        let s = rep.speedup_vs_one_cluster.unwrap_or(1.0);
        ok &= near(s, t, tol);
        parts.push(format!("{} x{} {s:.2}", rep.model, rep.clusters));
    }
    let d = parts.join(", ");
    if ok {
        Ok(d)
    } else {
        Err(d)
    }
}

fn check_constant_flops(outs: &[Output], e: &Value) -> Verdict {
    let r = sweep_reports(outs.first().ok_or("no sweep output")?)?;
    if r.len() < 2 {
        return Err("sweep needs at least two points".into());
    }
    let flops: Vec<f64> = r.iter().map(|x| x.achieved_flops_per_s).collect();
    let max = flops.iter().cloned().fold(f64::MIN, f64::max);
    let min = flops.iter().cloned().fold(f64::MAX, f64::min);
    let ratio = max / min;
    let ends = nums(e, "endpoints")?;
    let tol = num(e, "rel_tol")?;
    let first = r[0].throughput();
    let last = r[r.len() - 1].throughput();
    let flat = ratio <= num(e, "max_ratio")?;
    let e0 = near(first, ends[0], tol);
    let e1 = near(last, ends[1], tol);
    let d = format!(
        "FLOPS max/min {ratio:.3}{}, tok/s {first:.0}{} .. {last:.0}{}",
        if flat { "" } else { " (out)" },
        if e0 { "" } else { " (out)" },
        if e1 { "" } else { " (out)" },
    );
    if flat && e0 && e1 {
        Ok(d)
    } else {
        Err(d)
    }
}

fn check_breakdown(outs: &[Output], e: &Value) -> Verdict {
    let r = reports(outs)?;
    let [fp32, fp8] = r.as_slice() else {
        return Err("expects an fp32 and an fp8 run".into());
    };
    let gemm = fp32.breakdown.share(Category::Gemm);
    let fa32 = fp32.breakdown.share(Category::FlashAttention);
    let fa8 = fp8.breakdown.share(Category::FlashAttention);
    let ok = within(gemm, window(e, "gemm_share")?) && fa8 > fa32;
    let d = format!(
        "GEMM share {:.1} %, attention share fp32 {:.1} % fp8 {:.1} %",
        gemm * 100.0,
        fa32 * 100.0,
        fa8 * 100.0
    );
    if ok {
        Ok(d)
    } else {
        Err(d)
    }
}

pub fn run_recipe(r: &Recipe) -> RecipeOutcome {
    let t0 = Instant::now();
    let outs: Vec<Output> = r
        .commands
        .iter()
        .map(|c| {
            let args: Vec<&str> = c.iter().map(String::as_str).collect();
            let (code, stdout, stderr) = run_captured(&args);
            Output {
                code,
                stdout,
                stderr,
            }
        })
        .collect();
    let seconds = t0.elapsed().as_secs_f64();
    let e = &r.expect;
    let verdict = match r.check.as_str() {
        "all_exit_zero" | "ar_nar" | "fp8" | "igelu" => check_exit_zero(&outs),
        "traffic" => check_traffic(&outs, e),
        "utilization" => check_utilization(&outs, e),
        "speedups" => check_speedups(&outs, e),
        "cluster_scaling" => check_scaling(&outs, e),
        "constant_flops" => check_constant_flops(&outs, e),
        "breakdown" => check_breakdown(&outs, e),
        other => Err(format!("unknown checker {other}")),
    };
    let verdict = match (verdict, e.get("max_seconds").and_then(Value::as_f64)) {
        (Ok(d), Some(limit)) if seconds > limit => {
            Err(format!("{d}; took {seconds:.2} s > {limit} s"))
        }
        (v, _) => v,
    };
    let (passed, detail) = match verdict {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    RecipeOutcome {
        id: r.id.clone(),
        criterion: r.criterion,
        passed,
        seconds,
        detail,
    }
}

pub fn run_all(recipes: &[Recipe]) -> Vec<RecipeOutcome> {
    recipes.iter().map(run_recipe).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_manifest_parses() {
        let r = bundled().unwrap();
        assert_eq!(r.len(), CRITERIA as usize);
        assert_eq!(coverage_gaps(&r), (vec![], vec![]));
    }

    #[test]
    fn unknown_checker_rejected() {
        let text = r#"[{"id":"x","criterion":1,"anchor":"a","commands":[["validate"]],
                        "assertion":"a","check":"nope"}]"#;
        assert!(parse(text).is_err());
    }

    #[test]
    fn gaps_reported() {
        let mut r = bundled().unwrap();
        r.retain(|x| x.criterion != 3);
        r.push(r[0].clone());
        assert_eq!(coverage_gaps(&r), (vec![3], vec![1]));
    }
}
