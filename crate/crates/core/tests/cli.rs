use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mssm::pipeline::{load_checkpoint, RunConfig};

fn mssm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mssm")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = mssm(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn end_to_end_micro() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("micro.cfg");
    fs::write(&cfg_path, RunConfig::micro().to_text()).unwrap();
    let cfg = p(&cfg_path);
    let data = dir.path().join("data");
    let ckpt = dir.path().join("pre.ckpt");
    let metrics = dir.path().join("pre.jsonl");

    let s = ok(&["gen-data", "--out", p(&data), "--episodes", "6", "--seed", "3", "--config", cfg]);
    assert!(s.contains("6 episodes"), "{s}");

    ok(&["pretrain", "--data", p(&data), "--out", p(&ckpt), "--metrics", p(&metrics), "--config", cfg, "--set", "steps=3"]);
    let ck = load_checkpoint(&ckpt).unwrap();
    assert_eq!(ck.step, 3);
    let lines = fs::read_to_string(&metrics).unwrap();
    assert_eq!(lines.lines().count(), 3);
    for line in lines.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["run_id"].as_str().unwrap().starts_with("pretrain-"));
        assert!(v["values"]["total"].is_f64());
    }

    let report = dir.path().join("eval.json");
    let s = ok(&["eval", "--ckpt", p(&ckpt), "--data", p(&data), "--out", p(&report)]);
    let v: serde_json::Value = serde_json::from_str(s.trim()).unwrap();
    assert!(v["values"]["future_iou_2"].is_f64());
    assert!(report.exists());

    let dump = dir.path().join("rollout.json");
    ok(&["rollout", "--ckpt", p(&ckpt), "--data", p(&data), "--episode", "1", "--out", p(&dump)]);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&dump).unwrap()).unwrap();
    let frames = v["frames"].as_array().unwrap();
    assert_eq!(frames.len(), 5);
    assert_eq!(frames[4]["kind"], "imagined");
    assert_eq!(frames[4]["prediction"].as_array().unwrap().len(), 2 * 8 * 8);

    let s = ok(&["finetune", "--task", "map-static", "--data", p(&data), "--ckpt", p(&ckpt), "--set", "finetune_steps=2"]);
    assert!(s.starts_with("map-static (pretrained)"), "{s}");
    let s = ok(&["finetune", "--task", "detect-dynamic", "--data", p(&data), "--config", cfg, "--set", "finetune_steps=2"]);
    assert!(s.starts_with("detect-dynamic (scratch)"), "{s}");

    let table = dir.path().join("ablate.tsv");
    ok(&["ablate", "--data", p(&data), "--seeds", "0", "--out", p(&table), "--config", cfg, "--set", "steps=1"]);
    let text = fs::read_to_string(&table).unwrap();
    assert_eq!(text.lines().count(), 7);
    assert!(text.lines().nth(1).unwrap().starts_with("rssm\t"));
}

#[test]
fn errors_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("micro.cfg");
    fs::write(&cfg_path, RunConfig::micro().to_text()).unwrap();
    let cfg = p(&cfg_path);
    let data = dir.path().join("data");
    let ckpt = dir.path().join("pre.ckpt");
    ok(&["gen-data", "--out", p(&data), "--episodes", "4", "--config", cfg]);
    ok(&["pretrain", "--data", p(&data), "--out", p(&ckpt), "--config", cfg, "--set", "steps=1"]);

    let out = mssm(&["eval", "--ckpt", p(&ckpt), "--data", p(&data), "--config", cfg, "--set", "d_h=6"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("fingerprint"));

    let out = mssm(&["finetune", "--task", "segment", "--data", p(&data), "--config", cfg]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("segment"));

    let out = mssm(&["pretrain", "--data", p(&data), "--out", p(&ckpt), "--set", "colour=red"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("colour"));

    let mut bytes = fs::read(&ckpt).unwrap();
    bytes.truncate(bytes.len() - 9);
    fs::write(&ckpt, bytes).unwrap();
    let out = mssm(&["eval", "--ckpt", p(&ckpt), "--data", p(&data)]);
    assert!(!out.status.success());
}

#[test]
fn keys_lists_every_config_key() {
    let s = ok(&["keys"]);
    for (k, _) in mssm::pipeline::KEYS {
        assert!(s.lines().any(|l| l.split_whitespace().next() == Some(k)), "{k}");
    }
}
