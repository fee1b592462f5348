use std::path::Path;
use std::process::{Command, Output};

const SMALL_MODEL: &str = r#"{
  "model": {"encoder": "TRANSFORMER", "num_layers": 3, "hidden_size": 8, "heads": 2, "ff_dim": 16,
            "max_seq_len": 32, "text_embed_dim": 8, "max_epochs": 5, "patience": 2},
  "seeds": [0, 1],
  "bootstrap": {"resamples": 200},
  "shap": {"background": 5, "budget": 256, "instances": 4, "top_k": 4}
}"#;

fn climcredit(config: &Path, out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_climcredit"))
        .arg("--config")
        .arg(config)
        .arg("--out-dir")
        .arg(out)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(config: &Path, out: &Path, args: &[&str]) {
    let o = climcredit(config, out, args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
}

fn read(out: &Path, rel: &str) -> Vec<u8> {
    std::fs::read(out.join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

#[test]
fn full_chain_on_test_profile() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.json");
    std::fs::write(&config, SMALL_MODEL).unwrap();
    let out = dir.path().join("out");

    ok(&config, &out, &["gen-data", "--test-profile"]);
    let gen_manifest = read(&out, "manifests/gen-data.json");
    let loans = read(&out, "data/loans.csv");
    assert_eq!(loans.iter().filter(|&&b| b == b'\n').count(), 4001);
    ok(&config, &out, &["gen-data", "--test-profile"]);
    assert_eq!(gen_manifest, read(&out, "manifests/gen-data.json"));
    assert_eq!(loans, read(&out, "data/loans.csv"));

    for stage in ["compute-indices", "build-panels", "prep-features"] {
        ok(&config, &out, &[stage]);
    }
    ok(&config, &out, &["train", "--modality", "S"]);
    ok(&config, &out, &["train", "--modality", "structured,climate", "--encoder", "transformer"]);

    let manifest: serde_json::Value =
        serde_json::from_slice(&read(&out, "manifests/train-S+C-transformer.json")).unwrap();
    assert_eq!(manifest["details"]["mask"], "S+C");
    assert_eq!(manifest["details"]["encoder"], "TRANSFORMER");
    assert_eq!(manifest["details"]["runs"].as_array().unwrap().len(), 2);
    let split: serde_json::Value = serde_json::from_slice(&read(&out, "manifests/prep-features.json")).unwrap();
    assert_eq!(manifest["details"]["split_checksum"], split["details"]["split_checksum"]);
    assert!(manifest["inputs"]["features/split.json"].is_string());

    ok(&config, &out, &["evaluate"]);
    let report = read(&out, "eval/report.csv");
    let eval_manifest = read(&out, "manifests/evaluate.json");
    ok(&config, &out, &["evaluate"]);
    assert_eq!(report, read(&out, "eval/report.csv"));
    assert_eq!(eval_manifest, read(&out, "manifests/evaluate.json"));
    let text = String::from_utf8(report).unwrap();
    assert_eq!(text.lines().count(), 7);
    assert!(text.lines().any(|l| l.starts_with("S+C-transformer,S+C,AUC,")));

    ok(&config, &out, &["explain", "--model", "S+C-transformer", "--baseline", "S"]);
    for f in ["shap.csv", "factors.csv", "periods.csv", "points.csv", "uncertain.csv"] {
        assert!(out.join("explain/S+C-transformer").join(f).exists(), "{f}");
    }
    let factors = String::from_utf8(read(&out, "explain/S+C-transformer/factors.csv")).unwrap();
    assert_eq!(factors.lines().count(), 5);

    ok(&config, &out, &["correlate"]);
    let corr = String::from_utf8(read(&out, "correlation/correlation.csv")).unwrap();
    assert_eq!(corr.lines().next(), Some("model,S,S+C-transformer"));

    // tampering with an upstream artifact makes every consumer refuse to run
    let panels = out.join("panels/panels.csv");
    let original = std::fs::read(&panels).unwrap();
    std::fs::write(&panels, b"loan_id,month_offset,di,wlr,ht,cf\n").unwrap();
    let o = climcredit(&config, &out, &["evaluate"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    let recorded = serde_json::from_slice::<serde_json::Value>(&read(&out, "manifests/build-panels.json")).unwrap()
        ["outputs"]["panels/panels.csv"]
        .as_str()
        .unwrap()
        .to_string();
    assert!(err.contains("stale artifact panels/panels.csv") && err.contains(&recorded), "{err}");
    std::fs::write(&panels, original).unwrap();
    ok(&config, &out, &["evaluate"]);
}

#[test]
fn invalid_inputs_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let config = dir.path().join("bad.json");
    std::fs::write(&config, r#"{"seeds": [0], "epochs": 3}"#).unwrap();
    let o = climcredit(&config, &out, &["gen-data"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("epochs"));

    std::fs::write(&config, "{}").unwrap();
    let o = climcredit(&config, &out, &["compute-indices"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing artifact data/stations.csv"));

    let o = climcredit(&config, &out, &["train", "--lr", "0.5"]);
    assert_eq!(o.status.code(), Some(1));
    let o = climcredit(&config, &out, &["no-such-stage"]);
    assert_eq!(o.status.code(), Some(1));
}
