use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--preset", "desk", "--seed", "3", "--set", "model.d=8", "--set", "model.n_heads=2",
    "--set", "model.expert_hidden=8", "--set", "model.gating_hidden=8", "--set", "train.epochs=1",
    "--set", "train.eval_every=1", "--set", "train.val_queries=8", "--set",
    "window.n_queries_train=8", "--set", "data.n_sims=13",
];

fn detno(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_detno"))
        .current_dir(dir)
        .args(args)
        .env_remove("DETNO_SEED")
        .output()
        .unwrap()
}

fn small(dir: &Path, args: &[&str]) -> Output {
    let mut all = args.to_vec();
    all.extend_from_slice(SMALL);
    let out = detno(dir, &all);
    assert!(
        out.status.success(),
        "detno {}: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&detno(dir.path(), &["generate"])), 2);
    assert_eq!(code(&detno(dir.path(), &["frobnicate"])), 2);
    assert_eq!(code(&detno(dir.path(), &["--set", "model.nope=1", "--dump-config"])), 2);
    assert_eq!(code(&detno(dir.path(), &["--set", "model.d=7", "--dump-config"])), 2);
}

#[test]
fn unreadable_inputs_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = detno(dir.path(), &["eval", "--preds", "none.dtpr", "--data", "none.dtno"]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    std::fs::write(dir.path().join("junk.dtno"), b"not a dataset").unwrap();
    let out = detno(
        dir.path(),
        &["rollout", "--data", "junk.dtno", "--model", "m.dtck", "--out", "p.dtpr"],
    );
    assert_eq!(code(&out), 3);
}

#[test]
fn dumped_config_reads_back_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let first = detno(dir.path(), &["--preset", "desk", "--seed", "11", "--dump-config"]);
    assert!(first.status.success());
    std::fs::write(dir.path().join("run.cfg"), &first.stdout).unwrap();
    let second = detno(dir.path(), &["--config", "run.cfg", "--dump-config"]);
    assert!(second.status.success());
    assert_eq!(first.stdout, second.stdout);
    let text = String::from_utf8(first.stdout).unwrap();
    assert!(text.contains("seed = 11"));
    assert!(text.contains("model.d = 32"));
}

#[test]
fn seed_flag_overrides_environment_and_file() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.cfg"), "seed = 4\n").unwrap();
    let run = |args: &[&str], env: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_detno"));
        cmd.current_dir(dir.path()).args(args).env_remove("DETNO_SEED");
        if let Some(v) = env {
            cmd.env("DETNO_SEED", v);
        }
        String::from_utf8(cmd.output().unwrap().stdout).unwrap()
    };
    assert!(run(&["--config", "run.cfg", "--dump-config"], None).contains("seed = 4\n"));
    assert!(run(&["--config", "run.cfg", "--dump-config"], Some("5")).contains("seed = 5\n"));
    assert!(run(&["--config", "run.cfg", "--seed", "6", "--dump-config"], Some("5")).contains("seed = 6\n"));
}

#[test]
fn self_test_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = detno(dir.path(), &["--self-test"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(code(&out), 0, "{text}");
    assert!(!text.contains("[FAIL]"));
}

#[test]
fn end_to_end_pipeline_writes_every_artefact() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small(dir, &["generate", "--out", "d.dtno"]);
    small(dir, &["train", "--data", "d.dtno", "--out", "m.dtck"]);
    let log = std::fs::read_to_string(dir.join("m.csv")).unwrap();
    assert!(log.starts_with("epoch,train_loss,val_mse"));
    assert_eq!(log.lines().count(), 2);

    let out = small(dir, &["rollout", "--data", "d.dtno", "--model", "m.dtck", "--out", "p.dtpr"]);
    let curve = String::from_utf8(out.stdout).unwrap();
    assert!(curve.starts_with("step,mse,mae"));
    assert_eq!(curve.lines().count(), 1 + 8);

    small(dir, &["eval", "--preds", "p.dtpr", "--data", "d.dtno", "--out", "metrics.csv"]);
    let metrics = std::fs::read_to_string(dir.join("metrics.csv")).unwrap();
    // 13 simulations leave 3 held out, 8 windows each.
    assert_eq!(metrics.lines().count(), 1 + 3 * 8);

    small(
        dir,
        &["spectrum", "--preds", "p.dtpr", "--out", "s.csv", "--truth-out", "t.csv", "--data", "d.dtno"],
    );
    for name in ["s.csv", "t.csv"] {
        let text = std::fs::read_to_string(dir.join(name)).unwrap();
        assert_eq!(text.lines().count(), 1 + 51);
    }
}

#[test]
fn ablation_retrains_each_grid_value() {
    let tmp = tempfile::tempdir().unwrap();
    small(tmp.path(), &["ablate", "--axis", "refine_steps", "--out", "a.csv"]);
    let text = std::fs::read_to_string(tmp.path().join("a.csv")).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    for (row, k) in rows.iter().zip(["1", "5", "10"]) {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols[..3], ["refine_steps", k, "3"]);
        assert!(cols[3].parse::<f64>().unwrap().is_finite());
    }
}
