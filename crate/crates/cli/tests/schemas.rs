mod common;

use std::fs;
use std::path::Path;

use serde_json::Value;

fn schema(name: &str) -> jsonschema::Validator {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schemas").join(format!("{name}.schema.json"));
    let v: Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    jsonschema::validator_for(&v).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn assert_valid(name: &str, doc: &Value) {
    let errors: Vec<String> = schema(name).iter_errors(doc).map(|e| format!("{} at {}", e, e.instance_path())).collect();
    assert!(errors.is_empty(), "{name}: {errors:?}");
}

fn load(dir: &Path, rel: &str) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join(rel)).unwrap()).unwrap()
}

#[test]
fn reports_match_their_schemas() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    common::run_pipeline(p, 1);
    for (schema_name, file) in [
        ("synth", "synth.json"),
        ("train", "train.json"),
        ("sample", "runs/s.sample.json"),
        ("sample", "tiled.json"),
        ("analyze", "runs/vol_000.analyze.json"),
        ("lbm", "runs/vol_000.lbm.json"),
        ("novelty", "novelty.json"),
        ("repro-desk", "quick/summary.json"),
    ] {
        assert_valid(schema_name, &load(p, file));
    }

    let o = common::poredit(p, &["analyze", "--in", "nope.pdtv"]);
    let line = String::from_utf8(o.stderr).unwrap();
    assert_valid("error", &serde_json::from_str(line.trim()).unwrap());
}

#[test]
fn schemas_reject_malformed_reports() {
    let good = serde_json::json!({
        "command": "novelty", "input": "a.pdtv", "references": 3, "d_min": 0.4
    });
    assert_valid("novelty", &good);
    let mut extra = good.clone();
    extra["speed"] = 1.into();
    assert!(!schema("novelty").is_valid(&extra));
    let mut missing = good.clone();
    missing.as_object_mut().unwrap().remove("d_min");
    assert!(!schema("novelty").is_valid(&missing));
    let wrong = serde_json::json!({ "error": "oops", "message": "x" });
    assert!(!schema("error").is_valid(&wrong));
}
