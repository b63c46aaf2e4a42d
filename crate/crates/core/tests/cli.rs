use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

use lusnet::imaging::{encode_pgm, ImageU8};

const BIN: &str = env!("CARGO_BIN_EXE_lusnet");
const SMALL: &str = "2xC(16x16x4) - MP(8x8x4) - F(256) - FC(2)";

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn json(args: &[&str]) -> Value {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn write_dataset(root: &Path, per_class: usize) {
    for (label, base) in [("covid", 20u8), ("healthy", 200u8)] {
        let d = root.join(label);
        std::fs::create_dir_all(&d).unwrap();
        for i in 0..per_class {
            let px = (0..20 * 20).map(|j| base.saturating_add(((i + j) % 30) as u8)).collect();
            std::fs::write(d.join(format!("{label}{i}.pgm")), encode_pgm(&ImageU8::new(20, 20, px).unwrap())).unwrap();
        }
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn classify_prints_label_and_probabilities() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path().join("w.lusw");
    let img = dir.path().join("a.pgm");
    std::fs::write(&img, encode_pgm(&ImageU8::new(30, 20, vec![90; 600]).unwrap())).unwrap();
    json(&["init", "--arch", SMALL, "--seed", "1", "--out", s(&w)]);
    let v = json(&["classify", "--arch", SMALL, "--weights", s(&w), "--image", s(&img)]);
    let (c, h) = (v["probabilities"]["covid"].as_f64().unwrap(), v["probabilities"]["healthy"].as_f64().unwrap());
    assert!((c + h - 1.0).abs() < 1e-6);
    assert_eq!(v["label"], if c >= h { "covid" } else { "healthy" });
    let r = json(&["classify", "--arch", SMALL, "--weights", s(&w), "--image", s(&img), "--mode", "reference"]);
    assert_eq!(r, v);
}

#[test]
fn transfer_training_leaves_conv_fingerprints() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    write_dataset(&data, 10);
    let m = dir.path().join("m.jsonl");
    let split = dir.path().join("split.jsonl");
    let w0 = dir.path().join("w0.lusw");
    let w1 = dir.path().join("w1.lusw");
    assert_eq!(json(&["manifest", "--data-root", s(&data), "--out", s(&m)])["records"], 20);
    let sv = json(&["split", "--manifest", s(&m), "--seed", "2", "--out", s(&split)]);
    assert_eq!(sv["splits"]["train"]["covid"], 7);
    json(&["init", "--arch", SMALL, "--seed", "3", "--out", s(&w0)]);
    let t = json(&[
        "train", "--arch", SMALL, "--weights", s(&w0), "--manifest", s(&split), "--epochs", "3", "--transfer", "--out", s(&w1),
    ]);
    assert_eq!(t["history"].as_array().unwrap().len(), 3);
    assert_eq!(t["history"][0]["epoch"], 1);

    let info = |p: &Path| json(&["weights-info", "--weights", s(p)])["tensors"].as_array().unwrap().clone();
    let (a, b) = (info(&w0), info(&w1));
    for (x, y) in a.iter().zip(&b) {
        let name = x["name"].as_str().unwrap();
        if name.starts_with("conv") {
            assert_eq!(x["crc32"], y["crc32"], "{name}");
        }
    }
    assert_ne!(a.last().unwrap()["crc32"], b.last().unwrap()["crc32"]);

    let e = json(&["evaluate", "--arch", SMALL, "--weights", s(&w1), "--manifest", s(&split)]);
    assert_eq!(e["samples"], 2);
}

#[test]
fn seeded_commands_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    write_dataset(&data, 4);
    let m = dir.path().join("m.jsonl");
    json(&["manifest", "--data-root", s(&data), "--out", s(&m)]);
    let a = run(&["split", "--manifest", s(&m), "--seed", "9"]);
    let b = run(&["split", "--manifest", s(&m), "--seed", "9"]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);

    let aug = dir.path().join("aug");
    let v = json(&["augment", "--manifest", s(&m), "--seed", "1", "--out", s(&aug)]);
    assert_eq!(v["records"], 80);
    assert_eq!(v["input_records"], 8);
}

#[test]
fn bench_reports_every_expanded_layer() {
    let v = json(&["bench", "--arch", SMALL, "--iters", "2"]);
    let layers = v["layers"].as_array().unwrap();
    assert_eq!(layers.len(), 5);
    assert_eq!(v["total_macs"], 16 * 16 * 9 * 4 + 16 * 16 * 9 * 16 + 256 * 2);
    assert_eq!(layers[2]["output_shape"], serde_json::json!([8, 8, 4]));
}

#[test]
fn config_flags_take_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"arch": "2xQ(3x3x3)", "iters": 1}"#).unwrap();
    assert_eq!(run(&["bench", "--config", s(&cfg)]).status.code(), Some(1));
    assert!(run(&["bench", "--config", s(&cfg), "--arch", SMALL]).status.success());
}

#[test]
fn exit_codes() {
    assert_eq!(run(&["nonsense"]).status.code(), Some(1));
    assert_eq!(run(&["classify", "--arch", SMALL]).status.code(), Some(1));
    assert_eq!(run(&["weights-info", "--weights", "/nonexistent/w.lusw"]).status.code(), Some(2));
    let help = run(&["bench", "--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&help.stdout).contains("1 MAC = 2 FLOP"));
}
