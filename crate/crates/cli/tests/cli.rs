use std::path::Path;
use std::process::Command;

fn chunkstream(dir: &Path, args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_chunkstream")).current_dir(dir).args(args).output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn generate_run_and_score() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    chunkstream(d, &["gen-data", "--out", "eval.jsonl", "--count", "30", "--seed", "3"]);
    chunkstream(d, &["run", "--model", "stable", "--in", "eval.jsonl", "--out", "off.jsonl", "--strategy", "offline"]);
    chunkstream(d, &["run", "--model", "synthetic", "--in", "eval.jsonl", "--out", "h0.jsonl", "--strategy", "hold-0", "--mode", "buffered"]);
    let summary = chunkstream(d, &["eval", "--commits", "off.jsonl", "--refs", "eval.jsonl", "--baseline", "h0.jsonl"]);
    let v: serde_json::Value = serde_json::from_str(&summary).unwrap();
    assert_eq!(v["WER"], 0.0);
    assert_eq!(v["S"], 0);
    assert!(v["delta_vs_baseline"].as_f64().unwrap() > 0.0);
    let first = std::fs::read_to_string(d.join("h0.jsonl")).unwrap();
    let rec: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    assert_eq!(rec["t_out"].as_f64().unwrap(), rec["chunk"].as_f64().unwrap() * 0.5);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("gen.cfg"), "# dataset\ncount = 7\nseed = 4\nout = a.jsonl\n").unwrap();
    chunkstream(d, &["gen-data", "--config", "gen.cfg"]);
    assert_eq!(std::fs::read_to_string(d.join("a.jsonl")).unwrap().lines().count(), 7);
    chunkstream(d, &["gen-data", "--config", "gen.cfg", "--count", "3"]);
    assert_eq!(std::fs::read_to_string(d.join("a.jsonl")).unwrap().lines().count(), 3);
}

#[test]
fn sweep_output_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    chunkstream(d, &["gen-data", "--out", "eval.jsonl", "--count", "25", "--seed", "9"]);
    for out in ["a.csv", "b.csv"] {
        chunkstream(d, &["sweep", "--model", "unstable=synthetic", "--model", "stable=stable", "--in", "eval.jsonl", "--out", out]);
    }
    let a = std::fs::read(d.join("a.csv")).unwrap();
    assert_eq!(a, std::fs::read(d.join("b.csv")).unwrap());
    let text = String::from_utf8(a).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("model,strategy,params,wer,mean_t_out,delta_latency"));
    let baseline = lines.find(|l| l.starts_with("unstable,hold-n,n=0,")).unwrap();
    assert!(baseline.ends_with(",0.000000"));
    assert_eq!(text.lines().count(), 1 + 2 * 12);
}
