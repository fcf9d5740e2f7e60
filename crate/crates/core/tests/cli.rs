use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_disengcd");

fn run(args: &[&str], cwd: &Path) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(cwd)
        .env_remove("DISENGCD_THREADS")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Small synthetic dataset in `dir/data`.
fn synth(dir: &Path) {
    let out = run(
        &[
            "synth", "--students", "30", "--exercises", "20", "--concepts", "4", "--logs-per-student", "12",
            "--seed", "3", "--out", "data",
        ],
        dir,
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

const DATA: [&str; 6] = ["--logs", "data/logs.csv", "--q", "data/q.csv", "--dependency", "data/dependency.csv"];

fn train(dir: &Path, out_dir: &str, extra: &[&str]) -> Output {
    let mut args = vec!["train"];
    args.extend(DATA);
    args.extend([
        "--split", "0.6,0.1,0.3", "--seed", "7", "--hyper-nodes", "3", "--layers", "1", "--lr", "0.01",
        "--batch-size", "64", "--epochs", "15", "--out", out_dir,
    ]);
    args.extend(extra);
    run(&args, dir)
}

#[test]
fn synth_writes_reloadable_files_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let out = run(&["synth", "--students", "30", "--exercises", "20", "--concepts", "4", "--logs-per-student", "12", "--seed", "3", "--out", "again"], dir.path());
    assert_eq!(code(&out), 0);
    for f in ["logs.csv", "q.csv", "dependency.csv", "ids.json", "truth.json"] {
        let a = std::fs::read(dir.path().join("data").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("again").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
    let d = dir.path().join("data");
    let ds = disengcd::dataset::load_dataset(
        &d.join("logs.csv"),
        &d.join("q.csv"),
        Some(&d.join("dependency.csv")),
        &Default::default(),
    )
    .unwrap();
    assert_eq!(ds.logs().len(), 30 * 12);
    assert_eq!((ds.n_students(), ds.n_exercises(), ds.n_concepts()), (30, 20, 4));
    assert!(d.join("run_log.json").exists());
}

#[test]
fn default_synth_has_expected_log_count() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["synth", "--out", "d"], dir.path());
    assert_eq!(code(&out), 0);
    let text = std::fs::read_to_string(dir.path().join("d/logs.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 200 * 50);
}

#[test]
fn train_eval_diagnose_export_round() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    synth(p);
    let out = train(p, "run", &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for f in ["model.ckpt", "history.csv", "metagraph.json", "metagraph.dot", "config.toml", "run_log.json", "train_summary.json"] {
        assert!(p.join("run").join(f).exists(), "{f}");
    }
    let summary = stdout_json(&out);
    assert_eq!(summary["config_digest"].as_str().unwrap().len(), 16);

    let eval = |split: &str| {
        let out = run(&["eval", "--config", "run/config.toml", "--checkpoint", "run/model.ckpt", "--split", split], p);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        stdout_json(&out)
    };
    let train_report = eval("train");
    assert!(train_report["auc"].as_f64().unwrap() > 0.5);
    let test_a = eval("test");
    assert_eq!(test_a, eval("test"));
    assert_ne!(test_a, eval("val"));
    assert_eq!(test_a["split"], "test");

    let out = run(&["diagnose", "--config", "run/config.toml", "--checkpoint", "run/model.ckpt", "s0", "ghost"], p);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let d = stdout_json(&out);
    assert_eq!(d["reports"].as_array().unwrap().len(), 1);
    assert_eq!(d["reports"][0]["mastery"].as_array().unwrap().len(), 4);
    assert_eq!(d["unknown"], serde_json::json!(["ghost"]));

    let out = run(&["diagnose", "--config", "run/config.toml", "--checkpoint", "run/model.ckpt", "--all"], p);
    assert_eq!(stdout_json(&out)["reports"].as_array().unwrap().len(), 30);

    let out = run(&["export-metagraph", "--checkpoint", "run/model.ckpt", "--out", "structure"], p);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = std::fs::read_to_string(p.join("structure/metagraph.json")).unwrap();
    let export = disengcd::student_meta::MetaGraphExport::from_json(&text).unwrap();
    assert_eq!(export.hyper_nodes, 3);
    assert_eq!(text, std::fs::read_to_string(p.join("run/metagraph.json")).unwrap());
}

#[test]
fn training_is_reproducible_apart_from_the_run_log() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    synth(p);
    assert_eq!(code(&train(p, "a", &[])), 0);
    assert_eq!(code(&train(p, "b", &[])), 0);
    for f in ["model.ckpt", "history.csv", "metagraph.json", "train_summary.json"] {
        assert_eq!(std::fs::read(p.join("a").join(f)).unwrap(), std::fs::read(p.join("b").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn variant_flag_selects_interaction_variant() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    synth(p);
    let out = train(p, "run", &["--variant", "disengcd_i", "--epochs", "2"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(stdout_json(&out)["variant"], "disengcd_i");
    let ck = disengcd::trainer::load_checkpoint(&p.join("run/model.ckpt")).unwrap();
    assert_eq!(ck.model.config().variant, disengcd::model::Variant::Interaction);
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    synth(p);
    std::fs::write(
        p.join("run.toml"),
        "logs = \"data/logs.csv\"\nq = \"data/q.csv\"\nout = \"from_file\"\n[train]\nmax_epochs = 1\nhyper_nodes = 3\nlayers = 1\n",
    )
    .unwrap();
    let out = run(&["train", "--config", "run.toml", "--epochs", "2", "--out", "from_flag"], p);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(p.join("from_flag/model.ckpt").exists());
    assert!(!p.join("from_file").exists());
    assert_eq!(stdout_json(&out)["epochs_run"], 2);
}

#[test]
fn configuration_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    synth(p);

    let out = run(&["train", "--logs", "data/logs.csv", "--q", "nowhere/q.csv", "--out", "x"], p);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("nowhere/q.csv"));

    std::fs::write(p.join("bad.toml"), "logz = \"data/logs.csv\"\n").unwrap();
    let out = run(&["train", "--config", "bad.toml"], p);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("logz"));

    let out = run(&["train", "--logs", "data/logs.csv", "--q", "data/q.csv", "--split", "0.5,0.5", "--out", "x"], p);
    assert_eq!(code(&out), 2);

    let out = run(&["train", "--bogus-flag"], p);
    assert_eq!(code(&out), 2);

    let out = Command::new(BIN)
        .args(["synth", "--out", "t"])
        .current_dir(p)
        .env("DISENGCD_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
}

#[test]
fn dimension_mismatch_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    synth(p);
    assert_eq!(code(&train(p, "run", &["--epochs", "1"])), 0);
    let out = run(&["synth", "--students", "30", "--exercises", "20", "--concepts", "5", "--seed", "3", "--out", "k5"], p);
    assert_eq!(code(&out), 0);
    let out = run(
        &["eval", "--config", "run/config.toml", "--logs", "k5/logs.csv", "--q", "k5/q.csv", "--dependency", "k5/dependency.csv", "--checkpoint", "run/model.ckpt"],
        p,
    );
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    let err: Value = serde_json::from_str(stderr(&out).trim()).unwrap();
    assert_eq!(err["exit_code"], 2);
}

#[test]
fn bad_data_exits_3_and_divergence_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    synth(p);
    let logs = std::fs::read_to_string(p.join("data/logs.csv")).unwrap();
    std::fs::write(p.join("bad_logs.csv"), logs.replacen(",1\n", ",2\n", 1)).unwrap();
    let out = run(&["train", "--logs", "bad_logs.csv", "--q", "data/q.csv", "--out", "x"], p);
    assert_eq!(code(&out), 3, "{}", stderr(&out));

    let out = train(p, "boom", &["--lr", "1e300", "--epochs", "1"]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
}

fn report_rows(dir: &Path, sub: &str) -> usize {
    let csv = std::fs::read_dir(dir.join(sub))
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|e| e == "csv"))
        .expect("report csv");
    std::fs::read_to_string(csv).unwrap().lines().count() - 1
}

#[test]
fn experiments_emit_expected_rows() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    synth(p);
    let base = ["--hyper-nodes", "3", "--layers", "1", "--epochs", "1", "--lr", "0.01"];
    let exp = |kind: &str, extra: &[&str], out: &str| {
        let mut args = vec!["experiment", kind];
        args.extend(DATA);
        args.extend(base);
        args.extend(extra);
        args.extend(["--out", out]);
        let o = run(&args, p);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    };
    exp("robustness", &["--ratios", "0,0.1,0.3,0.5"], "rob");
    assert_eq!(report_rows(p, "rob"), 4);
    exp("sensitivity", &["--P", "4,5,6,7"], "sens");
    assert_eq!(report_rows(p, "sens"), 4);
    exp("sparsity", &["--deletions", "0,0.3"], "sparse");
    assert_eq!(report_rows(p, "sparse"), 2);
    exp("ablation", &[], "abl");
    assert_eq!(report_rows(p, "abl"), 8);
}
