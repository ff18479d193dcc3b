use std::path::Path;
use std::process::{Command, Output};

fn bitflip(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bitflip"))
        .args(args)
        .env_remove("JUDGE_API_BASE")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = bitflip(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_attack_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("v.tlm1");
    let vocab = dir.path().join("vocab.txt");
    let out_dir = dir.path().join("run");

    let train = ok(&["train-toy", "--out", s(&ckpt), "--steps", "3", "--vocab-out", s(&vocab)]);
    assert!(train.contains("trained 3 steps"));
    assert!(ckpt.exists());
    assert!(std::fs::read_to_string(&vocab).unwrap().lines().count() > 100);

    let eval = ok(&["eval", s(&ckpt), "--scheme", "fp4"]);
    assert!(eval.contains("tasks 56"), "{eval}");

    // Flags override the file.
    let cfg = dir.path().join("attack.toml");
    std::fs::write(&cfg, "n-bits = 40\ntop-k = 5\nrun-epoch = 1700000000\n").unwrap();
    ok(&[
        "attack", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--out-dir", s(&out_dir),
        "--n-bits", "10", "--module", "layer0.up", "--module", "layer1.gate",
    ]);
    for f in ["report.json", "report.csv", "fliplog.jsonl", "manifest.json"] {
        assert!(out_dir.join(f).exists(), "missing {f}");
    }

    let json: serde_json::Value = serde_json::from_str(&ok(&["report", s(&out_dir), "--format", "json"])).unwrap();
    assert_eq!(json["n_bits"], 10);
    assert_eq!(json["top_k"], 5);
    assert_eq!(json["flips_committed"], 10);
    assert_eq!(json["iterations"], 2);

    let log = std::fs::read_to_string(out_dir.join("fliplog.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 10);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["timestamp"], 1_700_000_000u64);
        let m = (v["module"]["layer"].as_u64().unwrap(), v["module"]["kind"].as_str().unwrap());
        assert!(m == (0, "up") || m == (1, "gate"), "{m:?}");
    }

    let csv = ok(&["report", s(&out_dir), "--format", "csv"]);
    assert_eq!(csv.lines().count(), 2);
    assert!(ok(&["report", s(&out_dir)]).contains("flips 10 over 2 iterations"));

    // A quantized checkpoint is also accepted by eval.
    let q = bitflip_core::quant::QuantizedModel::quantize(
        &bitflip_core::model::load_checkpoint(&ckpt).unwrap(),
        bitflip_core::quant::Scheme::Int8,
        &Default::default(),
    )
    .unwrap();
    let qpath = dir.path().join("v.tlq1");
    bitflip_core::quant::save_quantized(&q, &qpath).unwrap();
    assert!(ok(&["eval", s(&qpath)]).contains("accuracy"));
}

#[test]
fn bad_inputs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = bitflip(&["attack", "--top-k", "0"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("top-k"));

    let out = bitflip(&["attack", "--scheme", "int4"]);
    assert!(!out.status.success());

    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "topk = 3\n").unwrap();
    assert!(!bitflip(&["attack", "--config", s(&cfg)]).status.success());

    let junk = dir.path().join("junk.tlm1");
    std::fs::write(&junk, b"TLM1garbage").unwrap();
    let out = bitflip(&["eval", s(&junk)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    assert!(!bitflip(&["report", s(dir.path())]).status.success());
}
