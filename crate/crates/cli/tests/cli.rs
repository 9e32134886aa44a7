use std::path::Path;
use std::process::{Command, Output};

fn mgsv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mgsv")).args(args).env_remove("MGSV_DATA_ROOT").env("RUST_LOG", "warn").output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SYNTH: &str = r#"{"n_tracks": 4, "videos_per_track": 4, "seed": 3}"#;
const TRAIN: &str = r#"{"lr": 0.001, "epochs": 2, "batch_size": 4,
    "model": {"d": 16, "heads": 2, "fusion_sa_layers": 1, "decoder_ca_layers": 2}}"#;

fn setup(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let synth = dir.join("synth.json");
    let train = dir.join("train.json");
    std::fs::write(&synth, SYNTH).unwrap();
    std::fs::write(&train, TRAIN).unwrap();
    (synth, train)
}

#[test]
fn end_to_end_gen_train_eval_predict() {
    let dir = tempfile::tempdir().unwrap();
    let (synth, train) = setup(dir.path());
    let data = dir.path().join("data");
    let run = dir.path().join("run");

    let out = mgsv(&["gen-synth", "--config", s(&synth), "--out", s(&data)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(data.join("manifests/test.jsonl").exists());
    assert!(data.join("tracks/m0000.feat").exists());

    let out = Command::new(env!("CARGO_BIN_EXE_mgsv"))
        .args(["train", "--config", s(&train), "--out", s(&run)])
        .env("MGSV_DATA_ROOT", &data)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["epochs"].as_array().unwrap().len(), 2);
    assert!(run.join("best.ckpt").exists() && run.join("last.ckpt").exists());
    assert_eq!(std::fs::read_to_string(run.join("train_log.jsonl")).unwrap().lines().count(), 2);

    let ckpt = run.join("best.ckpt");
    let report = dir.path().join("out/report.json");
    let out = mgsv(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--mode", "msg", "--report", s(&report)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["mode"], "msg");
    assert_eq!(r["candidates"], 4);
    let first = std::fs::read(&report).unwrap();
    let preds = std::fs::read_to_string(dir.path().join("out/report.predictions.jsonl")).unwrap();
    assert_eq!(preds.lines().count(), r["queries"].as_u64().unwrap() as usize);
    let rec: serde_json::Value = serde_json::from_str(preds.lines().next().unwrap()).unwrap();
    assert_eq!(rec["ranked"].as_array().unwrap().len(), 4);

    // Re-evaluation reproduces the report byte for byte.
    let out = mgsv(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--mode", "msg", "--report", s(&report)]);
    assert!(out.status.success());
    assert_eq!(std::fs::read(&report).unwrap(), first);

    let smg = dir.path().join("smg.json");
    let out = mgsv(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--mode", "smg", "--report", s(&smg), "--split", "val"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let out = mgsv(&[
        "predict",
        "--ckpt",
        s(&ckpt),
        "--video",
        s(&data.join("videos/v00000.feat")),
        "--tracks",
        s(&data.join("tracks/m0001.feat")),
        s(&data.join("tracks/m0000.feat")),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rec: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(rec["query_id"], "v00000");
    assert_eq!(rec["ranked"].as_array().unwrap().len(), 2);
}

#[test]
fn exit_codes_classify_failures() {
    let dir = tempfile::tempdir().unwrap();
    let (synth, train) = setup(dir.path());
    let data = dir.path().join("data");

    // Unknown configuration field.
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"n_trakcs": 3}"#).unwrap();
    assert_eq!(mgsv(&["gen-synth", "--config", s(&bad), "--out", s(&data)]).status.code(), Some(2));
    // Missing required flag.
    assert_eq!(mgsv(&["eval", "--report", "x"]).status.code(), Some(2));
    // Missing dataset.
    let missing = dir.path().join("nope");
    let out = mgsv(&["train", "--data", s(&missing), "--config", s(&train), "--out", s(&dir.path().join("r"))]);
    assert_eq!(out.status.code(), Some(3));

    assert!(mgsv(&["gen-synth", "--config", s(&synth), "--out", s(&data)]).status.success());
    // Corrupt checkpoint.
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let out = mgsv(&["eval", "--ckpt", s(&junk), "--data", s(&data), "--report", s(&dir.path().join("r.json"))]);
    assert_eq!(out.status.code(), Some(3));

    // Divergent learning rate.
    let hot = dir.path().join("hot.json");
    std::fs::write(
        &hot,
        r#"{"lr": 1e30, "epochs": 2, "batch_size": 4, "clip_grad_norm": null,
            "model": {"d": 16, "heads": 2, "fusion_sa_layers": 1, "decoder_ca_layers": 2}}"#,
    )
    .unwrap();
    let out = mgsv(&["train", "--data", s(&data), "--config", s(&hot), "--out", s(&dir.path().join("hot"))]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}
