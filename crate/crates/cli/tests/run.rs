use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

use medforge_core::filter::{run_pipeline, FilterParams, FilterStage};
use medforge_core::{load_manifest, write_manifest, DatasetManifest, ImageRef, Sample, TaskKind};

fn medforge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_medforge")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn corpus() -> DatasetManifest {
    let mut v = Vec::new();
    for i in 0..30 {
        let mut c = Sample::new(format!("cap{i:02}"), "captions", TaskKind::Caption);
        let dim = if i % 5 == 0 { 40 } else { 128 };
        let mut img = ImageRef::new(format!("{i}.png")).with_dims(dim, 200);
        img.phash = Some(medforge_core::PerceptualHash(if i % 7 == 0 { 1 } else { 100 + i as u64 }));
        c.images.push(img);
        let words = if i % 4 == 0 { 5 } else { 14 };
        c.answer = Some(vec!["opacity"; words].join(" ") + &format!(" case {i}"));
        v.push(c);
    }
    for i in 0..20 {
        let mut q = Sample::new(format!("qa{i:02}"), "qa", TaskKind::VqaOpen);
        q.question = Some(format!("Is there an effusion in study {i}?"));
        q.answer = Some(if i % 2 == 0 {
            "yes".into()
        } else {
            format!("small effusion on side {i}")
        });
        v.push(q);
    }
    DatasetManifest::new("corpus", v)
}

fn write_config(dir: &Path, stages: &str) -> std::path::PathBuf {
    let cfg = dir.join("pipeline.toml");
    let text = format!("input = \"corpus.jsonl\"\noutput = \"out.jsonl\"\nreport = \"report.json\"\nseed = 5\n\n{stages}");
    std::fs::write(&cfg, text).unwrap();
    cfg
}

#[test]
fn filter_only_recipe_equals_direct_call() {
    let dir = tempfile::tempdir().unwrap();
    let m = corpus();
    write_manifest(&m, dir.path().join("corpus.jsonl")).unwrap();
    let cfg = write_config(
        dir.path(),
        "[[stages]]\nkind = \"filter\"\nrules = [\"image_size\", \"caption_length\"]\n",
    );
    let out = medforge(&["run", "--config", s(&cfg)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stages = FilterStage::parse_list("image_size,caption_length", &FilterParams::default()).unwrap();
    let (direct, _) = run_pipeline(&m, &stages).unwrap();
    let via_run = load_manifest(dir.path().join("out.jsonl")).unwrap();
    assert_eq!(via_run.samples, direct.samples);
}

#[test]
fn full_recipe_report_balances() {
    let dir = tempfile::tempdir().unwrap();
    write_manifest(&corpus(), dir.path().join("corpus.jsonl")).unwrap();
    let stages = r#"
[[stages]]
kind = "filter"
rules = ["image_size", "caption_length"]

[[stages]]
kind = "dedup"
mode = "both"
classes = "classes.jsonl"

[[stages]]
kind = "rl"
"#;
    let cfg = write_config(dir.path(), stages);
    let out = medforge(&["run", "--config", s(&cfg)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    let stages = report["stages"].as_array().unwrap();
    assert_eq!(stages.len(), 3);
    let mut n = report["input_count"].as_u64().unwrap();
    assert_eq!(n, 50);
    for st in stages {
        let (i, o, r) = (
            st["input_count"].as_u64().unwrap(),
            st["output_count"].as_u64().unwrap(),
            st["removed_count"].as_u64().unwrap(),
        );
        assert_eq!(i, n);
        assert_eq!(o, i - r);
        n = o;
    }
    assert_eq!(report["output_count"].as_u64().unwrap(), n);
    assert_eq!(load_manifest(dir.path().join("out.jsonl")).unwrap().len() as u64, n);
    assert!(stages[1]["dedup_classes"].as_u64().unwrap() >= 1);
}

#[test]
fn unknown_stage_fails_before_anything_runs() {
    let dir = tempfile::tempdir().unwrap();
    write_manifest(&corpus(), dir.path().join("corpus.jsonl")).unwrap();
    let cfg = write_config(
        dir.path(),
        "[[stages]]\nkind = \"filter\"\nrules = [\"image_size\"]\n\n[[stages]]\nkind = \"sharpen\"\n",
    );
    let out = medforge(&["run", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("out.jsonl").exists());
    assert!(!dir.path().join("report.json").exists());

    let bad_rule = write_config(dir.path(), "[[stages]]\nkind = \"filter\"\nrules = [\"blur\"]\n");
    assert_eq!(medforge(&["run", "--config", s(&bad_rule)]).status.code(), Some(2));
    let missing = write_config(dir.path(), "[[stages]]\nkind = \"scrub\"\nindex = \"nope.idx\"\n");
    assert_eq!(medforge(&["run", "--config", s(&missing)]).status.code(), Some(2));
}

#[test]
fn stage_error_exits_three_and_names_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = corpus();
    m.samples[3].images[0].width_px = None;
    write_manifest(&m, dir.path().join("corpus.jsonl")).unwrap();
    let cfg = write_config(
        dir.path(),
        "[[stages]]\nname = \"sizes\"\nkind = \"filter\"\nrules = [\"image_size\"]\n",
    );
    let out = medforge(&["run", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`sizes`"));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["failed_stage"], "sizes");
}

#[test]
fn flags_override_config_scalars() {
    let dir = tempfile::tempdir().unwrap();
    write_manifest(&corpus(), dir.path().join("corpus.jsonl")).unwrap();
    let cfg = write_config(dir.path(), "[[stages]]\nkind = \"rl\"\n");
    let other = dir.path().join("elsewhere.jsonl");
    let out = medforge(&["run", "--config", s(&cfg), "--output", s(&other), "--seed", "11"]);
    assert!(out.status.success());
    assert!(other.exists() && !dir.path().join("out.jsonl").exists());
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["seed"], 11);
}

#[test]
fn version_and_usage_errors() {
    let out = medforge(&["version"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("schema_version") && text.contains("metric_fingerprint"));
    assert_eq!(text, String::from_utf8(medforge(&["version"]).stdout).unwrap());
    assert_eq!(medforge(&["filter"]).status.code(), Some(2));
    assert_eq!(
        medforge(&[
            "synth",
            "ocr",
            "--questions",
            "q",
            "--image-dir",
            "d",
            "--output",
            "o",
            "--provider",
            "carrier-pigeon"
        ])
        .status
        .code(),
        Some(2)
    );
}
