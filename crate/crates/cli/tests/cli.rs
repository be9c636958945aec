use std::path::Path;
use std::process::{Command, Output};

fn sris(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sris"))
        .args(args)
        .env("SRIS_NUM_WORKERS", "2")
        .output()
        .expect("spawn sris")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn indivisible_canvas_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = sris(&["gen", "--canvas", "63", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("divisible"));
}

#[test]
fn unknown_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let out = sris(&["--set", "no_such_key=3", "count", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));

    let out = sris(&["--set", "lr=fast", "count", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lr"));
}

#[test]
fn config_file_and_overrides_stack() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.conf");
    std::fs::write(&cfg, "# smaller model\nembed_dim = 64\nlr = 5e-4\n").unwrap();
    let out = sris(&["--config", p(&cfg), "--set", "lr=2e-4", "--seed", "9", "count", "--out", p(dir.path())]);
    ok(&out);
    let run = json(&dir.path().join("run.json"));
    assert_eq!(run["config"]["model"]["embed_dim"], 64);
    assert_eq!(run["config"]["train"]["lr"], 2e-4);
    assert_eq!(run["seed"], 9);
    assert_eq!(run["success"], true);
    assert!(run["finished"].is_number());
}

#[test]
fn generation_is_reproducible_across_worker_counts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ok(&sris(&["--seed", "4", "gen", "--train", "6", "--val", "3", "--out", p(a.path())]));
    let out = Command::new(env!("CARGO_BIN_EXE_sris"))
        .args(["--seed", "4", "gen", "--train", "6", "--val", "3", "--out", p(b.path())])
        .env("SRIS_NUM_WORKERS", "1")
        .output()
        .unwrap();
    ok(&out);
    let read = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(read(a.path(), "manifest.json"), read(b.path(), "manifest.json"));
    for name in std::fs::read_dir(a.path().join("train")).unwrap() {
        let name = name.unwrap().file_name();
        let f = format!("train/{}", name.to_str().unwrap());
        assert_eq!(read(a.path(), &f), read(b.path(), &f), "{f}");
    }
}

#[test]
fn paper_budgets_hold_for_base_preset() {
    let dir = tempfile::tempdir().unwrap();
    let out = sris(&["--preset", "base", "count", "--assert-paper-budgets", "--out", p(dir.path())]);
    ok(&out);
    let report = json(&dir.path().join("complexity.json"));
    assert!(report["budgets"].as_array().unwrap().iter().all(|b| b["pass"] == true));

    // The toy model is far from the base budgets.
    let out = sris(&["count", "--assert-paper-budgets", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_eval_probe_round_trip() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    let run = root.path().join("run");
    ok(&sris(&["gen", "--train", "8", "--val", "4", "--out", p(&data)]));

    let tiny = ["--set", "epochs=2", "--set", "batch_size=4", "--set", "embed_dim=32", "--set", "fpn_dim=32"];
    let mut args: Vec<&str> = tiny.to_vec();
    args.extend(["--out", p(&run), "train", "--data", p(&data)]);
    ok(&sris(&args));
    for f in ["loss.jsonl", "evals.jsonl", "best.ckpt", "last.ckpt", "config.txt", "run.json"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let losses = std::fs::read_to_string(run.join("loss.jsonl")).unwrap();
    assert_eq!(losses.lines().count(), 4);
    assert_eq!(std::fs::read_to_string(run.join("evals.jsonl")).unwrap().lines().count(), 2);

    // Evaluating the checkpoint, then rescoring its dumped masks, agrees.
    let ev = root.path().join("eval");
    let ckpt = run.join("best.ckpt");
    let mut args: Vec<&str> = tiny.to_vec();
    args.extend(["--out", p(&ev), "eval", "--ckpt", p(&ckpt), "--data", p(&data), "--dump-masks"]);
    ok(&sris(&args));
    let from_model = json(&ev.join("metrics.json"));
    assert!(from_model["metrics"]["size_buckets"].is_array());
    assert!(from_model["per_family"].is_array());

    let ev2 = root.path().join("eval2");
    let masks = ev.join("masks");
    let mut args: Vec<&str> = tiny.to_vec();
    args.extend(["--out", p(&ev2), "eval", "--pred-dir", p(&masks), "--data", p(&data)]);
    ok(&sris(&args));
    assert_eq!(from_model["metrics"], json(&ev2.join("metrics.json"))["metrics"]);

    // A checkpoint from a different architecture is refused.
    let out = sris(&["--out", p(&ev2), "eval", "--ckpt", p(&ckpt), "--data", p(&data)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("embed_dim"));

    // Resuming for one more epoch continues the step count.
    let resumed = root.path().join("resumed");
    let last = run.join("last.ckpt");
    let mut args: Vec<&str> = tiny.to_vec();
    args[1] = "epochs=3";
    args.extend(["--out", p(&resumed), "train", "--data", p(&data), "--resume", p(&last)]);
    let out = sris(&args);
    assert_eq!(out.status.code(), Some(2), "changed epochs must be refused without --force");
    args.push("--force");
    ok(&sris(&args));
    let first: serde_json::Value =
        serde_json::from_str(std::fs::read_to_string(resumed.join("loss.jsonl")).unwrap().lines().next().unwrap()).unwrap();
    assert_eq!(first["step"], 4);

    let probe = root.path().join("probe");
    let mut args: Vec<&str> = tiny.to_vec();
    args.extend(["--out", p(&probe), "probe-attn", "--ckpt", p(&ckpt), "--data", p(&data), "--limit", "2"]);
    ok(&sris(&args));
    for i in 0..2 {
        for s in ["encoder", "fpn", "decoder"] {
            assert!(probe.join(format!("{i}_{s}.png")).exists());
            let (h, w, v) = shared_ris::io::read_grid(&probe.join(format!("{i}_{s}.bin"))).unwrap();
            assert_eq!((h, w), (8, 8));
            assert!(v.iter().all(|&x| x >= 0.0) && v.iter().sum::<f32>() <= 1.0 + 1e-4);
        }
    }
}

#[test]
fn ablate_writes_a_row_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let out = sris(&[
        "--set", "embed_dim=32", "--set", "fpn_dim=32", "--set", "batch_size=4",
        "--out", p(dir.path()),
        "ablate", "--n-train", "4", "--n-val", "2", "--fpn", "none", "--decoder", "shared", "--seeds", "0,1", "--steps", "1",
    ]);
    ok(&out);
    let rows = json(&dir.path().join("ablation.json"));
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0]["variant"]["name"], "fpn=none,decoder=shared");
    assert_eq!(rows[0]["miou"].as_array().unwrap().len(), 2);
    assert!(String::from_utf8_lossy(&out.stdout).contains("mIoU"));
}
