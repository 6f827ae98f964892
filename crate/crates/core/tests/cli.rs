//! End-to-end tests of the `maltml` binary: exit codes and golden CSV files.
//!
//! Set `MALTML_BLESS=1` to rewrite the golden files from the current build.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use maltml_core::experiment::{Checkpoint, TrainConfig, Trainer};

fn maltml(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_maltml"))
        .args(args)
        .env_remove("MALTML_LOG")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Same header and shape; text fields equal, numbers within 1e-9 relative.
fn assert_matches_golden(actual_path: &Path, name: &str) {
    let actual = std::fs::read_to_string(actual_path).unwrap();
    let path = golden(name);
    if std::env::var_os("MALTML_BLESS").is_some() {
        std::fs::write(&path, &actual).unwrap();
        return;
    }
    let expected = std::fs::read_to_string(&path).unwrap();
    let (a, e): (Vec<_>, Vec<_>) = (actual.lines().collect(), expected.lines().collect());
    assert_eq!(a.len(), e.len(), "{name}: row count");
    assert_eq!(a[0], e[0], "{name}: header");
    for (i, (la, le)) in a.iter().zip(&e).enumerate().skip(1) {
        let (fa, fe): (Vec<_>, Vec<_>) = (la.split(',').collect(), le.split(',').collect());
        assert_eq!(fa.len(), fe.len(), "{name} line {}", i + 1);
        for (x, y) in fa.iter().zip(&fe) {
            match (x.parse::<f64>(), y.parse::<f64>()) {
                (Ok(x), Ok(y)) => assert!(
                    (x - y).abs() <= 1e-9 * x.abs().max(y.abs()).max(1.0),
                    "{name} line {}: {x} vs {y}",
                    i + 1
                ),
                _ => assert_eq!(x, y, "{name} line {}", i + 1),
            }
        }
    }
}

#[test]
fn golden_train_eval_plotdata_and_dump() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let out = maltml(&[
        "train",
        "--config",
        s(&golden("small.cfg")),
        "--out",
        s(&run),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_matches_golden(&run.join("train_loss.csv"), "train_loss.csv");
    assert_matches_golden(&run.join("eval_snapshots.csv"), "eval_snapshots.csv");

    let ev = dir.path().join("eval");
    let dump = dir.path().join("dump.csv");
    let out = maltml(&[
        "eval",
        "--checkpoint",
        s(&run.join("checkpoint.txt")),
        "--out",
        s(&ev),
        "--episodes",
        "3",
        "--dump-episodes",
        s(&dump),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_matches_golden(&ev.join("eval_maltml.csv"), "eval_maltml.csv");
    assert_matches_golden(&dump, "episode_dump.csv");

    let plot = dir.path().join("plot.csv");
    let out = maltml(&[
        "plotdata",
        s(&ev.join("eval_maltml.csv")),
        "--out",
        s(&plot),
    ]);
    assert_eq!(code(&out), 0);
    assert_matches_golden(&plot, "plotdata.csv");
}

#[test]
fn csv_headers_are_as_documented() {
    let read = |n| std::fs::read_to_string(golden(n)).unwrap();
    assert!(read("train_loss.csv").starts_with("step,mean_outer_loss\n"));
    assert!(read("eval_snapshots.csv")
        .starts_with("step,algorithm,mse_pre_meta,mse_step_0,mse_step_final\n"));
    assert!(read("eval_maltml.csv")
        .starts_with("algorithm,episode,family_phase,goal_amplitude,mse_pre_meta,mse_step_0,mse_step_1,mse_step_2\n"));
    assert!(read("plotdata.csv").starts_with("algorithm,step,mean_mse,ci_low,ci_high\n"));
    assert!(
        read("episode_dump.csv").starts_with("episode,family_phase,task_id,amplitude,role,x,y\n")
    );
    // 3 episodes x (5 meta + 1 goal) tasks x (5 support + 5 query) samples
    assert_eq!(read("episode_dump.csv").lines().count(), 1 + 3 * 6 * 10);
}

#[test]
fn zero_outer_steps_checkpoints_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let out = maltml(&[
        "train",
        "--algorithm",
        "pretrain",
        "--seed",
        "4",
        "--outer-steps",
        "0",
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(code(&out), 0);
    let ckpt = Checkpoint::load(&dir.path().join("checkpoint.txt")).unwrap();
    assert_eq!(ckpt.step, 0);
    assert_eq!(ckpt.adam.t, 0);
    let cfg = TrainConfig {
        output_dir: ckpt.config.output_dir.clone(),
        ..ckpt.config.clone()
    };
    assert_eq!(&ckpt.params, Trainer::new(cfg).unwrap().params());
    let loss = std::fs::read_to_string(dir.path().join("train_loss.csv")).unwrap();
    assert_eq!(loss, "step,mean_outer_loss\n");
}

#[test]
fn usage_and_config_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&maltml(&[])), 1);
    assert_eq!(code(&maltml(&["train", "--bogus"])), 1);
    assert_eq!(code(&maltml(&["train", "--algorithm", "reptile"])), 1);
    assert_eq!(
        code(&maltml(&["train", "--beta", "-1", "--out", s(dir.path())])),
        1
    );
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "alpha = 0.1\nnot a setting\n").unwrap();
    let out = maltml(&["train", "--config", s(&bad), "--out", s(dir.path())]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
    assert_eq!(
        code(&maltml(&[
            "eval",
            "--checkpoint",
            "/nonexistent",
            "--out",
            s(dir.path())
        ])),
        1
    );
    assert_eq!(code(&maltml(&["plotdata", s(&bad)])), 1);
    assert_eq!(code(&maltml(&["--help"])), 0);
}

#[test]
fn numerical_failures_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = maltml(&[
        "train",
        "--beta",
        "1e300",
        "--outer-steps",
        "2",
        "--family-batch",
        "1",
        "--eval-every",
        "0",
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(code(&maltml(&["gradcheck", "--corrupt"])), 2);
    let out = maltml(&["gradcheck", "--seed", "5"]);
    assert_eq!(code(&out), 0);
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 3);
}

#[test]
fn eval_rejects_unknown_series_and_mismatched_plotdata() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let out = maltml(&[
        "train",
        "--config",
        s(&golden("small.cfg")),
        "--eval-every",
        "0",
        "--out",
        s(&run),
    ]);
    assert_eq!(code(&out), 0);
    let ckpt = run.join("checkpoint.txt");
    let out = maltml(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--out",
        s(dir.path()),
        "--variant",
        "maml_fair",
    ]);
    assert_eq!(code(&out), 1);
    for (r, sub) in [("2", "a"), ("3", "b")] {
        let out = maltml(&[
            "eval",
            "--checkpoint",
            s(&ckpt),
            "--out",
            s(&dir.path().join(sub)),
            "--episodes",
            "2",
            "--r-eval",
            r,
        ]);
        assert_eq!(code(&out), 0);
    }
    let a = dir.path().join("a/eval_maltml.csv");
    let b = dir.path().join("b/eval_maltml.csv");
    let out = maltml(&["plotdata", s(&a), s(&b)]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("r_eval"));
}
