use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use serde_json::Value;
use tofe_core::config::ExperimentConfig;
use tofe_core::datagen::{real::sample_real_sized, Corpus, CorpusItem, Split};
use tofe_core::denoiser::DenoiserParams;
use tofe_core::store;
use tofe_core::tofe::{Label, SourceInfo};

const STAGES: [&str; 8] = [
    "train-generators",
    "build-dataset",
    "extract",
    "analyze",
    "train-detector",
    "evaluate",
    "robustness",
    "ablate",
];

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml")
}

fn tofe(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tofe"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn error_line(output: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&output.stderr);
    let line = stderr.lines().last().expect("an error line");
    serde_json::from_str(line).unwrap_or_else(|_| panic!("not JSON: {line}"))
}

fn config_keys(prefix: &str, value: &Value, out: &mut Vec<String>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                config_keys(&key, v, out);
            }
        }
        Value::Array(items) if items.first().is_some_and(Value::is_object) => {
            let mut fields = Vec::new();
            config_keys("", &items[0], &mut fields);
            out.extend(fields.into_iter().map(|k| format!("{prefix}[].{k}")));
        }
        _ => out.push(prefix.to_string()),
    }
}

#[test]
fn help_of_every_subcommand_lists_every_config_key() {
    let mut keys = Vec::new();
    config_keys("", &serde_json::to_value(ExperimentConfig::default()).unwrap(), &mut keys);
    assert!(keys.len() > 50);
    let dir = tempfile::tempdir().unwrap();
    for stage in STAGES {
        let output = tofe(&[stage, "--help"], dir.path());
        assert!(output.status.success());
        let help = String::from_utf8(output.stdout).unwrap();
        for key in &keys {
            assert!(help.contains(&format!("  {key} ")), "{stage} --help lacks {key}");
        }
        assert!(help.contains("Exit codes"));
    }
}

#[test]
fn extract_on_ten_images_writes_ten_records() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let cfg = ExperimentConfig::load(&smoke_config()).unwrap();
    let items: Vec<CorpusItem> = sample_real_sized(5, 10, cfg.dataset.image_size)
        .into_iter()
        .enumerate()
        .map(|(i, s)| CorpusItem {
            source: SourceInfo {
                id: format!("{}/test/{i}", cfg.generators[0].id),
                label: if i % 2 == 0 { Label::Real } else { Label::Fake },
                generator: cfg.generators[0].id.clone(),
            },
            split: Split::Test,
            image: s.image,
        })
        .collect();
    let corpus = Corpus {
        generators: cfg.generators.clone(),
        train_generators: vec![cfg.generators[0].id.clone()],
        items,
    };
    store::write_dataset(&out.join("data"), &corpus, &cfg.dataset).unwrap();
    store::write_denoiser(&out.join("models/extractor.tdnz"), &DenoiserParams::init(cfg.denoiser, 3)).unwrap();

    let output = tofe(&["extract", "--config", smoke_config().to_str().unwrap()], out);
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let features = store::read_feature_file(&out.join("features.tfea")).unwrap();
    assert_eq!(features.len(), 10);
    for (f, it) in features.iter().zip(&corpus.items) {
        assert_eq!(f.source, it.source);
        assert_eq!(f.steps(), cfg.tofe.steps);
    }
    let report: Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["descent"]["images"], 10);
}

#[test]
fn evaluate_without_extract_is_a_missing_input() {
    let dir = tempfile::tempdir().unwrap();
    let output = tofe(&["evaluate"], dir.path());
    assert_eq!(output.status.code(), Some(3));
    let err = error_line(&output);
    assert_eq!(err["error"], "missing_input");
    assert_eq!(err["code"], 3);
}

#[test]
fn config_errors_have_their_own_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[tofe]\netaa = 0.1\n").unwrap();
    let output = tofe(&["extract", "--config", bad.to_str().unwrap()], dir.path());
    assert_eq!(output.status.code(), Some(2));
    assert_eq!(error_line(&output)["error"], "config");

    let missing = dir.path().join("nope.toml");
    let output = tofe(&["extract", "--config", missing.to_str().unwrap()], dir.path());
    assert_eq!(output.status.code(), Some(3));

    let output = tofe(&["extract", "--threads", "lots"], dir.path());
    assert_eq!(output.status.code(), Some(2));
    assert_eq!(error_line(&output)["error"], "usage");
}

/// Content hashes of every artifact under `dir`, keyed by relative path.
/// The run log carries wall-clock times and is left out.
fn artifact_hashes(dir: &Path) -> BTreeMap<String, String> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else if path.file_name().unwrap() != "run.jsonl" {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, store::content_hash(&std::fs::read(&path).unwrap()));
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

fn run_pipeline(out: &Path, extra: &[&str]) {
    let config = smoke_config();
    for stage in STAGES {
        let mut args = vec![stage, "--config", config.to_str().unwrap()];
        args.extend_from_slice(extra);
        let start = Instant::now();
        let output = tofe(&args, out);
        assert!(output.status.success(), "{stage}: {}", String::from_utf8_lossy(&output.stderr));
        eprintln!("{stage}: {:.2} s", start.elapsed().as_secs_f64());
    }
}

#[test]
fn smoke_pipeline_completes_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let start = Instant::now();
    run_pipeline(&a, &[]);
    eprintln!("smoke pipeline wall clock: {:.2} s", start.elapsed().as_secs_f64());

    let report: Value = serde_json::from_slice(&std::fs::read(a.join("report.json")).unwrap()).unwrap();
    for section in ["models", "descent", "detection", "separation", "reconstruction", "robustness", "ablation"] {
        assert!(!report[section].is_null(), "report lacks {section}");
    }
    assert_eq!(report["detection"]["rows"].as_array().unwrap().len(), 4);

    let log = std::fs::read_to_string(a.join("run.jsonl")).unwrap();
    let events: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let starts: Vec<&Value> = events.iter().filter(|e| e["event"] == "start").collect();
    assert_eq!(starts.len(), STAGES.len());
    assert!(starts.iter().all(|e| e["config"].is_object() && e["seeds"].is_object()));
    assert!(events.iter().filter(|e| e["event"] == "finish").all(|e| e["status"] == "ok" && e["duration_s"].is_number()));

    // Same config and inputs, different worker count: identical artifacts.
    run_pipeline(&b, &["--threads", "1"]);
    let (ha, hb) = (artifact_hashes(&a), artifact_hashes(&b));
    assert!(ha.len() > 10);
    let differing: Vec<&String> = ha.keys().filter(|k| ha.get(*k) != hb.get(*k)).collect();
    assert!(differing.is_empty() && ha.len() == hb.len(), "artifacts differ: {differing:?}");

    // Rerunning a stage in place reproduces its artifacts.
    let before = std::fs::read(a.join("features.tfea")).unwrap();
    let output = tofe(&["extract", "--config", smoke_config().to_str().unwrap()], &a);
    assert!(output.status.success());
    assert_eq!(std::fs::read(a.join("features.tfea")).unwrap(), before);
    let again = artifact_hashes(&a);
    let changed: Vec<&String> = ha.keys().filter(|k| ha.get(*k) != again.get(*k)).collect();
    assert!(changed.is_empty() && again.len() == ha.len(), "rerun changed {changed:?}");
}

#[test]
fn master_seed_changes_data_but_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let config = smoke_config();
    let mut manifests = Vec::new();
    for (name, seed) in [("x", "5"), ("y", "5"), ("z", "6")] {
        let out = dir.path().join(name);
        for stage in ["train-generators", "build-dataset"] {
            let output = tofe(&[stage, "--config", config.to_str().unwrap(), "--seed", seed], &out);
            assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
        }
        manifests.push(std::fs::read(out.join("data/manifest.json")).unwrap());
    }
    assert_eq!(manifests[0], manifests[1]);
    assert_ne!(manifests[0], manifests[2]);
}
