//! Acceptance criteria 1-10, one line each.
//!
//! Exits non-zero if a correctness check fails. The desk-scale learning
//! outcomes (7a-7c, 9b) are reported but only gate the exit status when
//! `DETNO_ACCEPT_STRICT=1` is set.

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use detno::config::RunConfig;
use detno_cli::checks::{self, timed, CheckResult};

/// Runtime budgets in seconds, per criterion.
const BUDGET_1: f64 = 5.0;
const BUDGET_2: f64 = 120.0;
const BUDGET_3: f64 = 10.0;
const BUDGET_4: f64 = 120.0;
const BUDGET_7_D32: f64 = 15.0 * 60.0;
const BUDGET_8: f64 = 30.0;

const LEARNING_OUTCOMES: [&str; 4] = ["7a", "7b", "7c", "9b"];

fn within(mut r: CheckResult, budget: f64) -> CheckResult {
    if r.seconds > budget {
        r.passed = false;
        r.detail = format!("{}; over the {budget} s budget", r.detail);
    }
    r
}

fn detno(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_detno"))
        .current_dir(dir)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "`detno {}` exited with {}: {}",
            args.join(" "),
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

fn same_bytes(a: &Path, b: &Path) -> Result<bool, String> {
    let read = |p: &Path| std::fs::read(p).map_err(|e| format!("{}: {e}", p.display()));
    Ok(read(a)? == read(b)?)
}

/// Runs generate, train and rollout twice each through the binary.
fn determinism() -> Result<(bool, String), String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path();
    let small = [
        "--preset", "desk", "--seed", "7", "--set", "model.d=8", "--set", "model.n_heads=2",
        "--set", "model.expert_hidden=8", "--set", "model.gating_hidden=8", "--set",
        "train.epochs=2", "--set", "train.eval_every=1", "--set", "train.val_queries=16",
        "--set", "window.n_queries_train=8",
    ];
    let mut verdicts = Vec::new();
    for run in ["a", "b"] {
        let data = format!("data_{run}.dtno");
        let mut args = vec!["generate", "--out", &data, "--n-sims", "13"];
        args.extend(small);
        detno(dir, &args)?;
    }
    verdicts.push(("generate", same_bytes(&dir.join("data_a.dtno"), &dir.join("data_b.dtno"))?));
    for run in ["a", "b"] {
        let model = format!("model_{run}.dtck");
        let mut args = vec!["train", "--data", "data_a.dtno", "--out", &model];
        args.extend(small);
        detno(dir, &args)?;
    }
    verdicts.push(("train", same_bytes(&dir.join("model_a.dtck"), &dir.join("model_b.dtck"))?));
    for run in ["a", "b"] {
        let preds = format!("preds_{run}.dtpr");
        let mut args = vec![
            "rollout", "--data", "data_a.dtno", "--model", "model_a.dtck", "--out", &preds,
        ];
        args.extend(small);
        detno(dir, &args)?;
    }
    verdicts.push(("rollout", same_bytes(&dir.join("preds_a.dtpr"), &dir.join("preds_b.dtpr"))?));
    Ok((
        verdicts.iter().all(|(_, ok)| *ok),
        verdicts
            .iter()
            .map(|(name, ok)| format!("{name} byte-identical: {ok}"))
            .collect::<Vec<_>>()
            .join(", "),
    ))
}

fn main() -> ExitCode {
    let mut results = Vec::new();
    let mut report = |r: CheckResult| {
        println!("{r}");
        results.push((r.id.clone(), r.passed));
    };

    report(within(timed("1", "godunov riemann", checks::godunov_riemann), BUDGET_1));
    report(within(timed("2", "conservation", || checks::conservation(1000, 2)), BUDGET_2));
    report(within(
        timed("3", "diffusion algebra", || checks::diffusion_algebra(10_000, 3)),
        BUDGET_3,
    ));
    report(within(timed("4", "gradient oracle", || checks::gradients(4)), BUDGET_4));
    report(timed("5", "attention oracle and invariance", || {
        checks::attention_and_invariance(5)
    }));
    report(timed("6", "parameter count", checks::parameter_count));

    let start = Instant::now();
    let study = checks::desk_study(&RunConfig::desk_scale(), 1);
    let study_seconds = start.elapsed().as_secs_f64();
    match &study {
        Ok(s) => {
            for v in [&s.detno, &s.direct, &s.one_step] {
                println!(
                    "       {}: val {:.4}, growth {:.3}, top-quartile amplitude {:.4}, train {:.0} s, rollout {:.0} s",
                    v.name, v.val_mse, v.growth, v.high_freq, v.train_seconds, v.rollout_seconds
                );
            }
            let [a, b, c] = s.criterion_7();
            for (sub, (passed, detail)) in ["7a", "7b", "7c"].into_iter().zip([a, b, c]) {
                report(CheckResult {
                    id: sub.into(),
                    name: "desk-scale training".into(),
                    passed,
                    detail,
                    seconds: study_seconds,
                });
            }
            report(within(
                CheckResult {
                    id: "7".into(),
                    name: "desk-scale runtime".into(),
                    passed: true,
                    detail: format!("three variants trained and rolled out at d = {}", s.d),
                    seconds: study_seconds,
                },
                BUDGET_7_D32,
            ));
        }
        Err(e) => report(CheckResult {
            id: "7".into(),
            name: "desk-scale training".into(),
            passed: false,
            detail: format!("error: {e}"),
            seconds: study_seconds,
        }),
    }

    report(within(timed("8", "rollout oracle", || checks::rollout_oracle(23, 8)), BUDGET_8));
    report(timed("9a", "pure-mode spectrum", checks::pure_mode));
    match &study {
        Ok(s) => {
            let (passed, detail) = s.criterion_9();
            report(CheckResult {
                id: "9b".into(),
                name: "spectrum DETNO vs direct".into(),
                passed,
                detail,
                seconds: 0.0,
            });
        }
        Err(e) => report(CheckResult {
            id: "9b".into(),
            name: "spectrum DETNO vs direct".into(),
            passed: false,
            detail: format!("desk study failed: {e}"),
            seconds: 0.0,
        }),
    }

    report(timed("10", "determinism", || {
        determinism().map_err(detno::Error::State)
    }));

    let strict = std::env::var("DETNO_ACCEPT_STRICT").is_ok_and(|v| v == "1");
    let failed: Vec<&str> = results
        .iter()
        .filter(|(_, ok)| !ok)
        .map(|(id, _)| id.as_str())
        .collect();
    let gating: Vec<&str> = failed
        .iter()
        .copied()
        .filter(|id| strict || !LEARNING_OUTCOMES.contains(id))
        .collect();
    println!(
        "{} checks, {} failed [{}], {} gating",
        results.len(),
        failed.len(),
        failed.join(", "),
        gating.len()
    );
    if gating.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
