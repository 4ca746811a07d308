use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn tiny_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.toml")
}

fn ulab(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ulab"))
        .args(args)
        .env("ULAB_OUT", root)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn ulab")
}

fn ok(root: &Path, args: &[&str]) -> Output {
    let out = ulab(root, args);
    assert!(out.status.success(), "ulab {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn tiny_pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = tiny_config();
    let cfg = s(&cfg);

    ok(root, &["gen-data", "--config", cfg]);
    let bench = root.join("data/bench.json");
    assert!(bench.exists() && root.join("data/manifest.json").exists());

    ok(root, &["train", "--config", cfg, "--bench", s(&bench)]);
    let model = root.join("train/model.ulck");
    ok(
        root,
        &["train", "--config", cfg, "--bench", s(&bench), "--retrain", "--out", s(&root.join("base/retrain.ulck"))],
    );
    let retrain = root.join("base/retrain.ulck");

    ok(
        root,
        &["select", "--config", cfg, "--method", "mink", "--ratio", "0.25", "--bench", s(&bench), "--ckpt", s(&model)],
    );
    let selection = root.join("select/selection.json");
    let sel: serde_json::Value = serde_json::from_slice(&std::fs::read(&selection).unwrap()).unwrap();
    assert_eq!(sel["indices"].as_array().unwrap().len(), 4);

    let unlearned = root.join("u/npo.ulck");
    ok(
        root,
        &[
            "unlearn",
            "--config",
            cfg,
            "--method",
            "npo",
            "--ratio",
            "0.25",
            "--selection",
            s(&selection),
            "--bench",
            s(&bench),
            "--ckpt-in",
            s(&model),
            "--ckpt-out",
            s(&unlearned),
            "--beta",
            "0.5",
        ],
    );
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(root.join("u/manifest.json")).unwrap()).unwrap();
    assert!(m["config"].as_str().unwrap().contains("beta = 0.5"));
    assert!(root.join("u/trace.json").exists());

    let out = ok(
        root,
        &["eval", "--config", cfg, "--ckpt", s(&unlearned), "--bench", s(&bench), "--retrain-ckpt", s(&retrain)],
    );
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let ue = report["ue"].as_f64().unwrap();
    assert!((0.0..=100.0).contains(&ue));
    assert!(report["privleak"].is_number());

    ok(root, &["report", s(&root.join("eval/report.json")), "--format", "csv"]);
    let table = std::fs::read_to_string(root.join("report/report.csv")).unwrap();
    assert_eq!(table.lines().count(), 2);

    ok(root, &["sweep", "--config", cfg, "--bench", s(&bench), "--ckpt", s(&model)]);
    let first = std::fs::read(root.join("sweep/sweep.csv")).unwrap();
    let header = String::from_utf8_lossy(&first).lines().next().unwrap().to_string();
    assert!(header.starts_with("method,selector,ratio,trial"), "{header}");
    let replay = root.join("replay");
    ok(root, &["sweep", "--manifest", s(&root.join("sweep/manifest.json")), "--out", s(&replay)]);
    assert_eq!(first, std::fs::read(replay.join("sweep.csv")).unwrap());

    ok(
        root,
        &["connectivity", "--config", cfg, "--ckpt-a", s(&unlearned), "--ckpt-b", s(&model), "--bench", s(&bench)],
    );
    let lmc = std::fs::read_to_string(root.join("connectivity/connectivity.csv")).unwrap();
    assert_eq!(lmc.lines().count(), 12);

    ok(root, &["attack", "--config", cfg, "--ckpt", s(&unlearned), "--bench", s(&bench), "--m", "4", "--iters", "2"]);
    assert!(root.join("attack/attack.csv").exists());

    ok(root, &["relearn", "--config", cfg, "--ckpt", s(&unlearned), "--bench", s(&bench)]);
    let curve = std::fs::read_to_string(root.join("relearn/relearn.csv")).unwrap();
    assert_eq!(curve.lines().next().unwrap(), "count,ue_mean,ue_seed0,ue_seed1");
    assert_eq!(curve.lines().count(), 4);
}

#[test]
fn replay_detects_changed_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = tiny_config();
    let cfg = s(&cfg);
    ok(root, &["gen-data", "--config", cfg]);
    let bench = root.join("data/bench.json");
    ok(root, &["train", "--config", cfg, "--bench", s(&bench), "--set", "pretrain.epochs=1"]);
    let model = root.join("train/model.ulck");
    ok(root, &["sweep", "--config", cfg, "--bench", s(&bench), "--ckpt", s(&model), "--set", "sweep.ratios=[0.5]"]);

    let mut bytes = std::fs::read(&model).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&model, &bytes).unwrap();
    let out = ulab(root, &["sweep", "--manifest", s(&root.join("sweep/manifest.json"))]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();

    assert_eq!(ulab(root, &["train", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(ulab(root, &[]).status.code(), Some(1));
    assert_eq!(ulab(root, &["--help"]).status.code(), Some(0));

    let out = ulab(root, &["gen-data", "--set", "data.typo=3"]);
    assert_eq!(out.status.code(), Some(1));
    let bad = root.join("bad.toml");
    std::fs::write(&bad, "[model]\nwidth = 4\n").unwrap();
    assert_eq!(ulab(root, &["gen-data", "--config", s(&bad)]).status.code(), Some(1));

    let cfg = tiny_config();
    ok(root, &["gen-data", "--config", s(&cfg)]);
    let bench = root.join("data/bench.json");
    let junk = root.join("junk.ulck");
    std::fs::write(&junk, b"ULCK but not really").unwrap();
    let out = ulab(root, &["eval", "--config", s(&cfg), "--ckpt", s(&junk), "--bench", s(&bench)]);
    assert_eq!(out.status.code(), Some(2));
    let out = ulab(root, &["eval", "--ckpt", s(&root.join("missing.ulck")), "--bench", s(&bench)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn root_flag_overrides_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let env_root = tmp.path().join("env");
    let flag_root = tmp.path().join("flag");
    let cfg = tiny_config();
    ok(&env_root, &["gen-data", "--config", s(&cfg), "--root", s(&flag_root)]);
    assert!(flag_root.join("data/bench.json").exists());
    assert!(!env_root.exists());
    ok(&env_root, &["gen-data", "--config", s(&cfg)]);
    assert!(env_root.join("data/bench.json").exists());
}
