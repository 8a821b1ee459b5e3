use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"{
  "widths": [4, 8, 8],
  "train": {"learning_rate": 0.003, "batch_size": 16, "max_epochs": 3, "early_stop_patience": 2,
            "grad_clip_norm": 1.0, "seed": 0, "loss": "cross_entropy"},
  "synth": {"subjects": 2, "channels": 4, "classes": 5, "trials_per_class": 10, "base_hz": 15.0,
            "step_hz": 4.0, "amplitude": 1.0, "noise_std": 0.3, "latency_groups": 5, "seed": 7}
}"#;

fn spectromind(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spectromind"))
        .env("RUST_LOG", "warn")
        .env_remove("SPECTROMIND_CACHE")
        .arg("--config")
        .arg(dir.join("cfg.json"))
        .arg("--out")
        .arg(dir.join("run"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = spectromind(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.json"), CONFIG).unwrap();
    dir
}

#[test]
fn distillation_smoke_run_writes_a_report() {
    let d = workspace();
    for stage in ["synth", "preprocess", "tfd", "distill", "evaluate"] {
        ok(d.path(), &[stage]);
    }
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.path().join("run/reports/kd-stft.json")).unwrap()).unwrap();
    assert_eq!(report["report"]["method"], "kd-stft");
    assert_eq!(report["report"]["subjects"].as_array().unwrap().len(), 2);
    let ckpt_hash = &report["config_hash"];
    let stage: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.path().join("run/stages/model-kd-stft.json")).unwrap()).unwrap();
    assert_eq!(&stage["hash"], ckpt_hash);

    // completed stages are skipped on an identical re-run
    let before = std::fs::metadata(d.path().join("run/models/kd-stft/sub01.ckpt")).unwrap().modified().unwrap();
    assert!(ok(d.path(), &["distill"]).contains("up to date"));
    assert!(ok(d.path(), &["tfd"]).contains("up to date"));
    let after = std::fs::metadata(d.path().join("run/models/kd-stft/sub01.ckpt")).unwrap().modified().unwrap();
    assert_eq!(before, after);
}

#[test]
fn stage_order_violations_are_dependency_errors() {
    let d = workspace();
    let out = spectromind(d.path(), &["evaluate"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model-kd-stft.json"));

    ok(d.path(), &["synth"]);
    let out = spectromind(d.path(), &["train"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("tfd-stft.json"));
}

#[test]
fn config_errors_exit_with_two() {
    let d = workspace();
    std::fs::write(d.path().join("cfg.json"), r#"{"sed": 3}"#).unwrap();
    assert_eq!(spectromind(d.path(), &["synth"]).status.code(), Some(2));

    let d = workspace();
    let out = spectromind(d.path(), &["--alpha", "1.5", "synth"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn report_renders_three_methods_in_table_order() {
    let d = workspace();
    for stage in [&["synth"][..], &["preprocess"], &["tfd"], &["train"], &["distill"]] {
        ok(d.path(), stage);
    }
    ok(d.path(), &["train", "--model", "lr-squared"]);
    for m in ["cnn-stft", "kd-stft", "lr-squared"] {
        ok(d.path(), &["evaluate", "--method", m]);
    }
    let table = ok(d.path(), &["report", "cnn-stft", "kd-stft", "lr-squared"]);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 4, "{table}");
    let header: Vec<&str> = lines[0].split_whitespace().collect();
    assert_eq!(header, ["Method", "Top-1", "Top-3", "Top-5", "F1", "Kappa"]);
    for (line, m) in lines[1..].iter().zip(["cnn-stft", "kd-stft", "lr-squared"]) {
        assert!(line.starts_with(m), "{line}");
    }
    assert!(d.path().join("run/reports/table.csv").exists());

    // a report from another dataset is refused
    let other = workspace();
    std::fs::write(other.path().join("cfg.json"), CONFIG.replace("\"seed\": 7", "\"seed\": 8")).unwrap();
    for stage in [&["synth"][..], &["preprocess"], &["train", "--model", "lr-squared"], &["evaluate", "--method", "lr-squared"]] {
        ok(other.path(), stage);
    }
    std::fs::copy(
        other.path().join("run/reports/lr-squared.json"),
        d.path().join("run/reports/lr-other.json"),
    )
    .unwrap();
    let out = spectromind(d.path(), &["report", "cnn-stft", "lr-other"]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn predict_stream_and_reconstruct() {
    use spectromind_recon::stub::{StubReply, StubServer};

    let d = workspace();
    for stage in ["synth", "preprocess", "tfd", "train"] {
        ok(d.path(), &[stage]);
    }
    ok(d.path(), &["predict", "--method", "cnn-stft"]);
    let preds: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.path().join("run/predictions/cnn-stft.json")).unwrap()).unwrap();
    let rows = preds["rows"].as_array().unwrap().len();
    assert_eq!(rows, 10);

    let stub = StubServer::start(vec![StubReply::png()]).unwrap();
    ok(d.path(), &["--endpoint", &stub.endpoint(), "reconstruct", "--method", "cnn-stft"]);
    assert_eq!(stub.request_count(), rows);
    assert!(d.path().join("run/recon/cnn-stft/index.json").exists());

    let down = StubServer::start(vec![StubReply::status(503)]).unwrap();
    std::fs::remove_dir_all(d.path().join("run/recon")).unwrap();
    let out = spectromind(d.path(), &["--endpoint", &down.endpoint(), "reconstruct", "--method", "cnn-stft"]);
    assert_eq!(out.status.code(), Some(5));

    ok(d.path(), &["stream-sim", "--method", "cnn-stft"]);
    let s: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.path().join("run/stream/cnn-stft.json")).unwrap()).unwrap();
    assert_eq!(s["matches_batch"], true);
    let out = spectromind(d.path(), &["--representation", "wavelet", "stream-sim", "--method", "cnn-stft"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn paced_stream_takes_real_time() {
    let d = workspace();
    for stage in ["synth", "preprocess", "tfd", "train"] {
        ok(d.path(), &[stage]);
    }
    let t0 = std::time::Instant::now();
    ok(d.path(), &["--rt-factor", "1", "stream-sim", "--method", "cnn-stft"]);
    // five held-out trials per subject, 0.5 s each
    assert!(t0.elapsed().as_secs_f64() >= 2.5);
    let s: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.path().join("run/stream/cnn-stft.json")).unwrap()).unwrap();
    assert!(s["latency"]["wall_s"].as_f64().unwrap() >= 2.5);
    assert_eq!(s["latency"]["dropped"], 0);
}
