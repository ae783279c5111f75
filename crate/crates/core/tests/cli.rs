use serde_json::Value;
use tfsim::cli::run_captured;

fn json(args: &[&str]) -> Value {
    let (code, out, err) = run_captured(args);
    assert_eq!(code, 0, "{args:?}: {err}");
    serde_json::from_str(&out).expect("json report")
}

fn csv_rows(out: &str) -> Vec<Vec<String>> {
    out.lines()
        .skip(1)
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

#[test]
fn simulate_reports_utilization() {
    let r = json(&[
        "simulate", "--model", "gpt-j", "--mode", "nar", "--fmt", "fp32", "--seq", "1024",
    ]);
    let u = r["fpu_utilization"].as_f64().unwrap();
    assert!(u > 0.0 && u <= 1.0);
    assert_eq!(r["fmt"], "fp32");
    assert_eq!(r["seq_len"], 1024);
}

#[test]
fn sixteen_clusters_beat_one_by_fourteen() {
    let r16 = json(&[
        "simulate",
        "--model",
        "vit-h",
        "--fmt",
        "fp8",
        "--clusters",
        "16",
    ]);
    let r1 = json(&[
        "simulate",
        "--model",
        "vit-h",
        "--fmt",
        "fp8",
        "--clusters",
        "1",
    ]);
    let s = r16["speedup_vs_one_cluster"].as_f64().unwrap();
    assert!(s >= 14.0, "{s}");
    let direct = r1["total_ns"].as_f64().unwrap() / r16["total_ns"].as_f64().unwrap();
    assert!((direct - s).abs() < 1e-9 * s);
    assert!(r1["speedup_vs_one_cluster"].is_null());
}

#[test]
fn invalid_format_lists_all_six() {
    let (code, _, err) = run_captured(&["simulate", "--model", "gpt-j", "--fmt", "fp12"]);
    assert_eq!(code, 2);
    for f in ["fp64", "fp32", "fp16", "bf16", "fp8e4m3", "fp8e5m2"] {
        assert!(err.contains(f), "{err}");
    }
}

#[test]
fn config_errors_name_the_field() {
    let cases: [(&[&str], &str); 7] = [
        (
            &[
                "simulate",
                "--model",
                "gpt-j",
                "--mode",
                "ar",
                "--seq",
                "2040",
                "--new-tokens",
                "20",
            ],
            "new-tokens",
        ),
        (&["simulate", "--model", "gpt-j", "--seq", "99999"], "seq"),
        (
            &["simulate", "--model", "gpt-j", "--new-tokens", "3"],
            "new-tokens",
        ),
        (
            &["simulate", "--model", "gpt-j", "--clusters", "6"],
            "clusters",
        ),
        (&["simulate", "--model", "gpt-j", "--groups", "3"], "groups"),
        (&["simulate", "--model", "gpt-x"], "model"),
        (&["simulate", "--model", "gpt-j", "--mode", "vit"], "mode"),
    ];
    for (args, field) in cases {
        let (code, _, err) = run_captured(args);
        assert_eq!(code, 2, "{args:?}");
        assert!(err.contains(&format!("`{field}`")), "{args:?}: {err}");
    }
}

#[test]
fn bad_flag_exits_two() {
    let (code, _, _) = run_captured(&["simulate", "--model", "gpt-j", "--out", "yaml"]);
    assert_eq!(code, 2);
    let (code, _, _) = run_captured(&["simulate", "--model", "gpt-j", "--frobnicate"]);
    assert_eq!(code, 2);
}

#[test]
fn model_and_machine_files() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("m.json");
    std::fs::write(
        &model,
        r#"{"name":"tiny","kind":"gpt","blocks":2,"e":64,"p":16,"h":4,"ff":128,
            "s_default":32,"s_min":1,"s_max":64,"params":100000}"#,
    )
    .unwrap();
    let r = json(&[
        "simulate",
        "--model-config",
        model.to_str().unwrap(),
        "--seq",
        "16",
    ]);
    assert_eq!(r["model"], "tiny");

    let machine = dir.path().join("machine.json");
    let mut cfg: Value = serde_json::from_str(tfsim::machine::DEFAULT_MACHINE_JSON).unwrap();
    cfg["groups"] = 0.into();
    std::fs::write(&machine, cfg.to_string()).unwrap();
    let (code, _, err) = run_captured(&[
        "simulate",
        "--model",
        "gpt-j",
        "--machine-config",
        machine.to_str().unwrap(),
    ]);
    assert_eq!(code, 2);
    assert!(
        err.contains("`groups`") || err.contains("`clusters`"),
        "{err}"
    );

    let (code, _, err) = run_captured(&["simulate", "--model-config", "/nonexistent.json"]);
    assert_eq!(code, 2);
    assert!(err.contains("`model-config`"), "{err}");
}

#[test]
fn ar_mode_reports_prefill_and_decode() {
    let r = json(&[
        "simulate",
        "--model",
        "gpt3-xl",
        "--mode",
        "ar",
        "--seq",
        "64",
        "--new-tokens",
        "4",
        "--fmt",
        "fp16",
    ]);
    assert_eq!(r["new_tokens"], 4);
    assert_eq!(r["prefill"]["seq_len"], 64);
    assert!(r["fpu_utilization"].as_f64().unwrap() < 0.12);
}

#[test]
fn seq_sweep_decreases_throughput() {
    let (code, out, err) = run_captured(&[
        "sweep",
        "--model",
        "gpt3-xl",
        "--mode",
        "nar",
        "--fmt",
        "fp8",
        "--axis",
        "seq",
        "--values",
        "128,256,512,1024,2048",
    ]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(
        out.lines().next().unwrap(),
        "seq,tokens_per_s,total_ns,fpu_util,hbm_read_bytes,hbm_write_bytes"
    );
    let rows = csv_rows(&out);
    assert_eq!(
        rows.iter().map(|r| r[0].as_str()).collect::<Vec<_>>(),
        ["128", "256", "512", "1024", "2048"]
    );
    let tps: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    assert!(tps.windows(2).all(|w| w[1] < w[0]), "{tps:?}");
}

#[test]
fn fmt_sweep_orders_latency() {
    let (code, out, _) =
        run_captured(&["sweep", "--model", "gpt-j", "--axis", "fmt", "--seq", "512"]);
    assert_eq!(code, 0);
    let rows = csv_rows(&out);
    let names: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(names, ["fp64", "fp32", "fp16", "fp8e5m2"]);
    let ns: Vec<f64> = rows.iter().map(|r| r[2].parse().unwrap()).collect();
    assert!(ns.windows(2).all(|w| w[1] < w[0]), "{ns:?}");
}

#[test]
fn cluster_sweep_on_vit_uses_images() {
    let (code, out, _) = run_captured(&[
        "sweep", "--model", "vit-b", "--axis", "clusters", "--values", "1,4,16",
    ]);
    assert_eq!(code, 0);
    assert!(out.starts_with("clusters,images_per_s,"));
    assert_eq!(csv_rows(&out).len(), 3);
}

#[test]
fn empty_axis_list_exits_two() {
    let (code, _, err) =
        run_captured(&["sweep", "--model", "gpt-j", "--axis", "seq", "--values", ""]);
    assert_eq!(code, 2);
    assert!(err.contains("`values`"));
    let (code, _, _) = run_captured(&[
        "sweep", "--model", "gpt-j", "--axis", "seq", "--values", " , ",
    ]);
    assert_eq!(code, 2);
}

#[test]
fn text_output_has_breakdown_table() {
    let (code, out, _) = run_captured(&[
        "simulate", "--model", "vit-b", "--fmt", "fp16", "--out", "text",
    ]);
    assert_eq!(code, 0);
    for label in [
        "GEMM",
        "FlashAttention-2",
        "Layernorm",
        "GELU",
        "Conversions",
    ] {
        assert!(
            out.lines()
                .any(|l| l.starts_with(label) && l.ends_with('%')),
            "{out}"
        );
    }
    let total: f64 = out
        .lines()
        .filter(|l| l.ends_with(" %") && !l.starts_with("fpu"))
        .map(|l| {
            l.split_whitespace()
                .rev()
                .nth(1)
                .unwrap()
                .parse::<f64>()
                .unwrap()
        })
        .sum();
    assert!((total - 100.0).abs() < 0.3, "{total}");
}

#[test]
fn csv_simulate_has_stable_header() {
    let (_, out, _) = run_captured(&["simulate", "--model", "vit-l", "--out", "csv"]);
    let mut lines = out.lines();
    assert_eq!(lines.next().unwrap(), tfsim::cli::csv_header());
    assert!(lines.next().unwrap().starts_with("vit-l,vit,fp16,197,16,"));
}

#[test]
fn runs_are_deterministic() {
    let args = [
        "simulate",
        "--model",
        "gpt3-xl",
        "--fmt",
        "bf16",
        "--seq",
        "256",
        "--dump-plan",
        "--seed",
        "7",
    ];
    assert_eq!(run_captured(&args), run_captured(&args));
}

#[test]
fn dump_plan_includes_kernels() {
    let r = json(&["simulate", "--model", "vit-b", "--dump-plan"]);
    assert!(!r["kernels"].as_array().unwrap().is_empty());
    let r = json(&["simulate", "--model", "vit-b"]);
    assert!(r["kernels"].is_null());
}

#[test]
fn validate_is_deterministic_and_passes() {
    let a = run_captured(&["validate", "--seed", "7"]);
    let b = run_captured(&["validate", "--seed", "7"]);
    assert_eq!(a.0, 0, "{}", a.1);
    assert_eq!(a, b);
    assert_eq!(a.1.lines().filter(|l| l.starts_with("PASS")).count(), 7);
    assert!(a.1.contains("max_error="));
}

#[test]
fn perturbed_igelu_fails_validation() {
    let (code, out, err) = run_captured(&["validate", "--only", "igelu_bound", "--igelu-a=-0.45"]);
    assert_eq!(code, 1);
    assert!(out.starts_with("FAIL"));
    assert!(err.contains("igelu_bound"));
}

#[test]
fn validate_unknown_check_is_config_error() {
    let (code, _, err) = run_captured(&["validate", "--only", "nonsense"]);
    assert_eq!(code, 2);
    assert!(err.contains("`only`"));
}

#[test]
fn fused_flags_last_one_wins() {
    let a = json(&["simulate", "--model", "vit-b", "--no-fused", "--fused"]);
    let b = json(&["simulate", "--model", "vit-b", "--fused", "--no-fused"]);
    assert_eq!(a["fused"], true);
    assert_eq!(b["fused"], false);
    assert!(b["hbm_bytes_read"].as_f64() > a["hbm_bytes_read"].as_f64());
}
