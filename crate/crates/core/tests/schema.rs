use serde_json::Value;
use tfsim::cli::run_captured;

const SCHEMA: &str = include_str!("../data/report.schema.json");

fn validator() -> jsonschema::Validator {
    let schema: Value = serde_json::from_str(SCHEMA).unwrap();
    jsonschema::validator_for(&schema).expect("valid schema")
}

fn report(args: &[&str]) -> Value {
    let (code, out, err) = run_captured(args);
    assert_eq!(code, 0, "{err}");
    serde_json::from_str(&out).unwrap()
}

#[test]
fn reports_conform_to_schema() {
    let v = validator();
    let runs: [&[&str]; 5] = [
        &[
            "simulate", "--model", "gpt-j", "--fmt", "fp32", "--seq", "512",
        ],
        &[
            "simulate",
            "--model",
            "vit-h",
            "--fmt",
            "fp8e4m3",
            "--dump-plan",
        ],
        &[
            "simulate",
            "--model",
            "gpt3-xl",
            "--mode",
            "ar",
            "--seq",
            "32",
            "--new-tokens",
            "3",
        ],
        &[
            "simulate",
            "--model",
            "vit-b",
            "--clusters",
            "1",
            "--isa",
            "baseline",
            "--no-fused",
        ],
        &[
            "simulate",
            "--model",
            "gpt-j",
            "--mode",
            "ar",
            "--seq",
            "0",
            "--new-tokens",
            "1",
            "--fmt",
            "fp64",
        ],
    ];
    for args in runs {
        let r = report(args);
        let errors: Vec<String> = v.iter_errors(&r).map(|e| e.to_string()).collect();
        assert!(errors.is_empty(), "{args:?}: {errors:?}");
    }
}

#[test]
fn schema_rejects_drift() {
    let v = validator();
    let mut r = report(&["simulate", "--model", "vit-b"]);
    assert!(v.is_valid(&r));
    r["unexpected"] = 1.into();
    assert!(!v.is_valid(&r));
    r.as_object_mut().unwrap().remove("unexpected");
    r.as_object_mut().unwrap().remove("fpu_utilization");
    assert!(!v.is_valid(&r));
}

#[test]
fn bundled_machine_matches_default() {
    let file: tfsim::machine::MachineConfig =
        serde_json::from_str(tfsim::machine::DEFAULT_MACHINE_JSON).unwrap();
    assert_eq!(file, tfsim::machine::MachineConfig::default());
}

#[test]
fn shipped_model_files_match_presets() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("data/models");
    for name in tfsim::models::PRESET_NAMES {
        let file = tfsim::models::ModelConfig::load(dir.join(format!("{name}.json"))).unwrap();
        assert_eq!(file, tfsim::models::ModelConfig::preset(name).unwrap());
    }
}
