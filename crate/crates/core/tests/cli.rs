use std::path::Path;
use std::process::{Command, Output};

fn pkmem(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pkmem")).args(args).output().unwrap()
}

fn tiny_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("tiny.json");
    let json = format!(
        r#"{{"vocab": 40, "model_dim": 16, "layers": 2, "heads": 2, "ffn_hidden": 16,
            "memory_placement": [1], "half_n": 8, "v_dim": 24, "k": 4, "key_dim": 16,
            "steps": 12, "batch_size": 8, "num_facts": 60,
            "num_relations": 4, "eval_interval": 4, "eval_size": 30{extra}}}"#
    );
    std::fs::write(&path, json).unwrap();
    path.to_str().unwrap().to_string()
}

fn first_line(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

#[test]
fn verify_topk_passes_and_fault_exits_3_with_diff() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let ok = pkmem(&["verify-topk", "--seeds", "3", "--out", out]);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("verify_topk.json")).unwrap()).unwrap();
    assert!(report["header"].as_str().unwrap().starts_with("# pkmem"));
    assert_eq!(report["report"]["cases"], 24);

    let bad = pkmem(&["verify-topk", "--seeds", "2", "--inject-fault", "--out", out]);
    assert_eq!(bad.status.code(), Some(3));
    let diff = std::fs::read_to_string(dir.path().join("verify_topk_diff.txt")).unwrap();
    assert!(diff.starts_with("# pkmem") && diff.contains("expected"));
}

#[test]
fn shard_check_and_faults() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let ok = pkmem(&["shard-check", "--num-rows", "256", "--dim", "16", "--bags", "4", "--out", out]);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    assert!(dir.path().join("shard_check.json").exists());
    for fault in ["drop:gather:1:0", "duplicate:exchange:0:1", "drop:grad_route:2:2"] {
        let r = pkmem(&["shard-check", "--groups", "4", "--dim", "16", "--inject-fault", fault, "--out", out]);
        assert_eq!(r.status.code(), Some(3), "{fault}");
    }
    let r = pkmem(&["shard-check", "--inject-fault", "lose:gather:1:0", "--out", out]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn bench_bag_writes_headed_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let r = pkmem(&[
        "bench-bag", "--n", "8", "--worker-counts", "1,2", "--num-rows", "128", "--bags", "16", "--bag-size", "4",
        "--repeats", "2", "--out", out,
    ]);
    assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
    for name in ["bench_uniform.csv", "bench_zipf.csv"] {
        let text = std::fs::read_to_string(dir.path().join(name)).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with("# pkmem"));
        assert_eq!(lines[1], "strategy,N_v,n,B,k,workers,repeat,elapsed_ns,bytes,gbps,checksum");
        assert_eq!(lines.len(), 2 + 3 * 2 * 2);
    }
    assert!(first_line(&dir.path().join("bench_ranking.txt")).starts_with("# pkmem"));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cfg = tiny_config(dir.path(), r#", "bogus": 1"#);
    let r = pkmem(&["train", "--config", &cfg, "--out", out]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("bogus"));
    let cfg = tiny_config(dir.path(), r#", "memory_placement": [7]"#);
    assert_eq!(pkmem(&["train", "--config", &cfg, "--out", out]).status.code(), Some(2));
    assert_eq!(pkmem(&["ablate", "--axis", "depth", "--out", out]).status.code(), Some(2));
    assert_eq!(pkmem(&["no-such-command"]).status.code(), Some(2));
}

#[test]
fn numeric_blow_up_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), r#", "lr": 1e30, "warmup_steps": 0, "clip_norm": 1e30"#);
    let r = pkmem(&["train", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(4), "{}", String::from_utf8_lossy(&r.stderr));
}

#[test]
fn train_outputs_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let full = dir.path().join("full");
    let r = pkmem(&["train", "--config", &cfg, "--out", full.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
    let header = first_line(&full.join("metrics.jsonl"));
    assert!(header.starts_with("# pkmem") && header.contains("config="));
    assert_eq!(first_line(&full.join("curve.csv")), header);

    let part = dir.path().join("part");
    let r = pkmem(&["train", "--config", &cfg, "--steps", "12", "--checkpoint-every", "8", "--out", part.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(0));
    let ckpt = part.join("checkpoint.bin");
    let resumed = dir.path().join("resumed");
    let r = pkmem(&[
        "train", "--config", &cfg, "--resume", ckpt.to_str().unwrap(), "--out", resumed.to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
    let read = |p: &Path| std::fs::read_to_string(p.join("metrics.jsonl")).unwrap();
    assert_eq!(read(&full), read(&resumed));

    let other = tiny_config(dir.path(), r#", "seed": 9"#);
    let r = pkmem(&["train", "--config", &other, "--resume", ckpt.to_str().unwrap(), "--out", resumed.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn paired_and_ablate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let out = dir.path().to_str().unwrap();
    let r = pkmem(&["train", "--paired", "--config", &cfg, "--out", out]);
    assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
    let paired: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("paired.json")).unwrap()).unwrap();
    assert_eq!(paired["report"]["dense_params"]["memory"], 0);
    assert!(dir.path().join("dense/metrics.jsonl").exists());

    let r = pkmem(&["ablate", "--axis", "memory_size", "--values", "16,64", "--config", &cfg, "--steps", "4", "--out", out]);
    assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
    let text = std::fs::read_to_string(dir.path().join("ablation_memory_size.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("# pkmem"));
    assert!(lines[1].starts_with("axis,value,final_train_nll"));
    assert_eq!(lines.len(), 4);
    assert!(lines[2].starts_with("memory_size,16,"));
}

#[test]
fn gradcheck_command_passes() {
    let dir = tempfile::tempdir().unwrap();
    let r = pkmem(&["gradcheck", "--seeds", "1", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
    let text = std::fs::read_to_string(dir.path().join("gradcheck.csv")).unwrap();
    assert!(text.lines().skip(2).all(|l| l.ends_with(",true")));
}
