use std::path::Path;
use std::process::Command;

fn dropens(dir: &Path, args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_dropens"))
        .current_dir(dir)
        .env_remove("DROPENS_DATA_DIR")
        .args(args)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "dropens {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn train_then_evaluate_then_enumerate() {
    let dir = tempfile::tempdir().unwrap();
    let hyper = r#"{"lr0":0.1,"lr_decay":0.99,"momentum0":0.5,"momentum_final":0.9,
        "momentum_saturation_epoch":10,"batch_size":10,"max_epochs":20,"patience_epochs":20,
        "init_range":0.5,"hidden_sizes":[4,3],"max_norms":null}"#;
    std::fs::write(dir.path().join("hyper.json"), hyper).unwrap();
    let summary = dropens(
        dir.path(),
        &["train", "--task", "synthetic", "--criterion", "dropout", "--hyper", "hyper.json", "--model-out", "net.bin"],
    );
    let summary: serde_json::Value = serde_json::from_str(&summary).unwrap();
    assert_eq!(summary["epochs_run"], 20);
    for f in ["net.bin", "net.bin.history.csv", "net.bin.train.json"] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }

    // On a 7-unit net the factorized and enumerated geometric means agree.
    let eval = |rule: &str| -> serde_json::Value {
        let s = dropens(dir.path(), &["evaluate", "--model", "net.bin", "--task", "synthetic", "--rule", rule, "--limit", "50"]);
        serde_json::from_str(&s).unwrap()
    };
    assert_eq!(eval("exact-geometric")["test_err"], eval("factorized-geometric")["test_err"]);
    assert_eq!(eval("weight-scaled")["n"], 50);

    let listing = dropens(dir.path(), &["enumerate", "--model", "net.bin", "--count", "3"]);
    assert_eq!(listing.lines().count(), 4);
    assert_eq!(listing.lines().nth(2), Some("1,1 0"));
}

#[test]
fn fixed_mask_training_writes_its_mask() {
    let dir = tempfile::tempdir().unwrap();
    dropens(
        dir.path(),
        &["train", "--task", "synthetic", "--criterion", "fixed-mask", "--max-epochs", "5", "--model-out", "m.bin"],
    );
    let mask = std::fs::read_to_string(dir.path().join("m.bin.mask")).unwrap();
    assert!(!mask.trim().is_empty());
}

#[test]
fn wilcoxon_over_a_records_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.csv");
    let mut text = String::from("# comment\ntask,config_id,failed,a,b\n");
    for (i, d) in [0.01, 0.02, 0.03, 0.04, 0.05, 0.06].iter().enumerate() {
        text.push_str(&format!("t,{i},false,{},0.1\n", 0.1 + d));
    }
    std::fs::write(&path, text).unwrap();
    let out = dropens(dir.path(), &["stats", "wilcoxon", "--records", "r.csv", "--a", "a", "--b", "b"]);
    assert!(out.contains("0.03125"), "{out}");
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), r#"{"taskz":["synthetic"]}"#).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_dropens"))
        .current_dir(dir.path())
        .args(["--config", "c.json", "experiment", "scaling"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}
