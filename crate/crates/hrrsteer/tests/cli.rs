//! The command-line tool at toy scale: the full subcommand chain, repeat
//! runs, and the documented exit codes.

use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "d_s=512",
    "data.train_per_type=24",
    "data.eval_per_type=6",
    "data.readout_per_type=40",
    "finetune.samples_per_type=12",
    "finetune.epochs=3",
    "finetune.eval_every=1",
    "capacity.dims=[64, 128]",
    "capacity.ns=[40, 80]",
    "capacity.seeds=2",
];

fn hrrsteer(dir: &Path, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_hrrsteer"));
    cmd.arg("--run-dir").arg(dir);
    for s in SMALL {
        cmd.arg("--set").arg(s);
    }
    cmd.args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

#[test]
fn full_chain_then_repeat_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path();
    for sub in [
        "gen-data",
        "build-surrogate",
        "train-readout",
        "export-traces",
        "train-encoder",
        "train-decoder",
        "finetune-decoder",
        "evaluate",
        "capacity",
        "sweep-threshold",
        "report",
    ] {
        let o = hrrsteer(run, &[sub]);
        assert_eq!(code(&o), 0, "{sub}: {}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["eval.json", "eval.csv", "finetune.csv", "capacity.csv", "threshold_sweep.csv", "report/score_table.csv"] {
        assert!(run.join(f).is_file(), "{f} missing");
        assert!(run.join(format!("{f}.meta.json")).is_file(), "{f} has no sidecar");
    }
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("eval.csv.meta.json")).unwrap()).unwrap();
    assert_eq!(meta["seed"], 1);
    assert_eq!(meta["producer"], "evaluate");

    let first = std::fs::read(run.join("eval.json")).unwrap();
    let o = hrrsteer(run, &["evaluate"]);
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::read(run.join("eval.json")).unwrap(), first, "evaluate is not idempotent");

    // A second variant writes its own files and leaves the first alone.
    assert_eq!(code(&hrrsteer(run, &["evaluate", "--exact", "--untuned"])), 0);
    assert!(run.join("eval_exact_untuned.json").is_file());
    assert_eq!(std::fs::read(run.join("eval.json")).unwrap(), first);
}

#[test]
fn missing_artifact_names_the_producer() {
    let dir = tempfile::tempdir().unwrap();
    let o = hrrsteer(dir.path(), &["evaluate"]);
    assert_eq!(code(&o), 3);
    let msg = String::from_utf8_lossy(&o.stderr);
    assert!(msg.contains("run `"), "{msg}");

    assert_eq!(code(&hrrsteer(dir.path(), &["gen-data"])), 0);
    let o = hrrsteer(dir.path(), &["train-encoder"]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("export-traces"));
}

#[test]
fn report_refuses_empty_input() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&hrrsteer(dir.path(), &["report"])), 3);
    std::fs::write(dir.path().join("eval.csv"), "ptype,trained,count,baseline_score,baseline_ce,score,ce,intervention_rate\n")
        .unwrap();
    let o = hrrsteer(dir.path(), &["report"]);
    assert_ne!(code(&o), 0);
    assert!(!dir.path().join("report/score_table.csv").exists());
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    for bad in [&["--set", "gate.mix=2", "gen-data"][..], &["--set", "nosuch.key=1", "gen-data"], &["--jobs", "0", "gen-data"]] {
        assert_eq!(code(&hrrsteer(dir.path(), bad)), 2, "{bad:?}");
    }
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "seed = \"one\"\n").unwrap();
    assert_eq!(code(&hrrsteer(dir.path(), &["--config", cfg.to_str().unwrap(), "gen-data"])), 2);
    // Unknown subcommand is a usage error too.
    assert_eq!(code(&hrrsteer(dir.path(), &["frobnicate"])), 2);
}

#[test]
fn config_file_and_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "seed = 5\n[data]\neval_per_type = 3\n").unwrap();
    let o = hrrsteer(dir.path(), &["--config", cfg.to_str().unwrap(), "--seed", "9", "gen-data"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let written = std::fs::read_to_string(dir.path().join("config.toml")).unwrap();
    // The flag beats the file, the file beats the built-in default.
    assert!(written.contains("seed = 9"), "{written}");
    let eval = std::fs::read_to_string(dir.path().join("data/eval.jsonl")).unwrap();
    assert_eq!(eval.lines().count(), 6 * 10, "SMALL overrides come after the file");
}
