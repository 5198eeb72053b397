use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--image_size=8",
    "--cells=2",
    "--patch_size=4",
    "--embed_dim=8",
    "--depth=1",
    "--heads=2",
    "--mlp_ratio=2",
    "--pred_dim=8",
    "--pred_depth=1",
    "--pred_heads=2",
    "--cond_heads=2",
    "--text_dim=8",
    "--batch_size=2",
    "--train_size=4",
    "--epochs=2",
    "--warmup_epochs=1",
    "--num_targets=1",
    "--target_scale=[0.25,0.25]",
    "--context_scale=[1.0,1.0]",
    "--n_captions=2",
    "--checkpoint_every=1",
];

fn tcjepa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tcjepa")).args(args).env("TCJEPA_THREADS", "1").output().unwrap()
}

fn ok(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn train(out: &Path, extra: &[&str]) -> Output {
    let mut a = vec!["train", "--out", out.to_str().unwrap()];
    a.extend_from_slice(extra);
    a.extend_from_slice(TINY);
    tcjepa(&a)
}

#[test]
fn dry_run_prints_resolved_config() {
    let mut a = vec!["train", "--dry-run", "--conditioner", "holistic"];
    a.extend_from_slice(TINY);
    let s = ok(&tcjepa(&a));
    assert!(s.contains("conditioner = \"holistic\""), "{s}");
    assert!(s.contains("image_size = 8"));
}

#[test]
fn unknown_keys_are_listed() {
    let o = tcjepa(&["train", "--dry-run", "--imgsize=8", "--depht=2"]);
    assert!(!o.status.success());
    let e = String::from_utf8_lossy(&o.stderr);
    assert!(e.contains("imgsize") && e.contains("depht"), "{e}");
}

#[test]
fn missing_config_leaves_no_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = tcjepa(&["train", "--config", "/nonexistent/cfg.toml", "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(!out.exists());
}

#[test]
fn train_is_deterministic_and_checkpoints_resume() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&train(&a, &[]));
    ok(&train(&b, &[]));
    let ma = fs::read(a.join("metrics.csv")).unwrap();
    assert_eq!(ma, fs::read(b.join("metrics.csv")).unwrap());
    let text = String::from_utf8(ma).unwrap();
    assert!(text.starts_with("step,l_predict,l_sparse,l_consistency,total,lr,wd,ema_m\n"));
    assert_eq!(text.lines().count(), 1 + 4);
    for f in ["epoch_0001.tcjp", "epoch_0002.tcjp", "final.tcjp", "config.toml"] {
        assert!(a.join(f).exists(), "{f}");
    }

    let c = dir.path().join("c");
    ok(&tcjepa(&["train", "--resume", a.join("epoch_0001.tcjp").to_str().unwrap(), "--out", c.to_str().unwrap()]));
    let full: Vec<String> = text.lines().map(String::from).collect();
    let resumed = fs::read_to_string(c.join("metrics.csv")).unwrap();
    assert_eq!(resumed.lines().skip(1).collect::<Vec<_>>(), full[3..].iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(fs::read(c.join("final.tcjp")).unwrap(), fs::read(a.join("final.tcjp")).unwrap());

    let json = ok(&tcjepa(&[
        "probe",
        "--checkpoint",
        a.join("final.tcjp").to_str().unwrap(),
        "--train-n",
        "128",
        "--val-n",
        "32",
        "--probe-epochs",
        "5",
    ]));
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert!((0.0..=1.0).contains(&v["val_acc"].as_f64().unwrap()));

    let maps = ok(&tcjepa(&["export-maps", "--checkpoint", a.join("final.tcjp").to_str().unwrap(), "--index", "1"]));
    let v: serde_json::Value = serde_json::from_str(&maps).unwrap();
    assert!(!v["records"].as_array().unwrap().is_empty());
}

#[test]
fn none_conditioner_rejects_map_export() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    ok(&train(&a, &["--conditioner", "none"]));
    let o = tcjepa(&["export-maps", "--checkpoint", a.join("final.tcjp").to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("unsupported"));
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.tcjp");
    fs::write(&p, b"TCJP\x01\x00\x00\x00garbage-bytes").unwrap();
    let o = tcjepa(&["probe", "--checkpoint", p.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("checkpoint"));
}

#[test]
fn stats_reports_overhead() {
    let s = ok(&tcjepa(&["stats", "--depth=0"]));
    let v: serde_json::Value = serde_json::from_str(&s).unwrap();
    assert_eq!(v["block_params"], 0);
    assert!(v["flops_with_conditioner"].as_u64() >= v["flops_without_conditioner"].as_u64());
}

#[test]
fn ablate_rows_and_usage_errors() {
    let o = tcjepa(&["ablate", "--kind", "fusion", "--grid", ""]);
    assert_eq!(o.status.code(), Some(2));
    let mut a = vec![
        "ablate",
        "--kind",
        "loss_coeff",
        "--steps",
        "2",
        "--train-n",
        "128",
        "--val-n",
        "16",
        "--probe-epochs",
        "2",
    ];
    a.extend_from_slice(TINY);
    let s = ok(&tcjepa(&a));
    let lines: Vec<&str> = s.lines().collect();
    assert_eq!(lines.len(), 4, "{s}");
    assert!(lines[0].starts_with("kind,label,config_hash,status"));
    assert!(lines[1..].iter().all(|l| l.starts_with("loss_coeff,") && l.contains(",ok,")));
}

#[test]
fn gradcheck_passes() {
    let s = ok(&tcjepa(&["gradcheck", "--seeds", "2"]));
    assert!(s.lines().all(|l| !l.starts_with("FAIL")), "{s}");
    assert!(s.contains("composite loss"));
}
