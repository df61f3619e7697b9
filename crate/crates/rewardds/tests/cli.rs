//! End-to-end CLI flows: generate data, train proxies, synthesize, run
//! modes, attack, evaluate, and diff reports, all through the binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_rewardds")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {:?} failed:\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

struct Workspace {
    _dir: tempfile::TempDir,
    sets: Vec<String>,
    root: PathBuf,
}

impl Workspace {
    fn new() -> Workspace {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let sets = vec![
            format!("paths.data_dir={:?}", root.join("data")),
            format!("paths.checkpoint_dir={:?}", root.join("ckpt")),
            format!("paths.report_dir={:?}", root.join("rep")),
            "counts.private_train=60".into(),
            "counts.dev=6".into(),
            "counts.test=12".into(),
            "pipeline.synth_count=120".into(),
            "pipeline.candidates=2".into(),
            "pipeline.fold=2".into(),
            "pipeline.epochs=2".into(),
            "dp_gen.epochs=4".into(),
            "dp_rwd.epochs=4".into(),
            "master_seed=5".into(),
        ];
        Workspace {
            _dir: dir,
            sets,
            root,
        }
    }

    fn args<'a>(&'a self, head: &[&'a str]) -> Vec<String> {
        let mut v: Vec<String> = head.iter().map(|s| s.to_string()).collect();
        for s in &self.sets {
            v.push("--set".into());
            v.push(s.clone());
        }
        v
    }

    fn run_ok(&self, head: &[&str]) -> String {
        let args = self.args(head);
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        run_ok(&refs)
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }
}

#[test]
fn full_cli_workflow() {
    let ws = Workspace::new();

    // gen-toy-data writes the three corpora.
    let out = ws.run_ok(&["gen-toy-data"]);
    assert!(out.contains("PrivateTrain"), "{out}");
    for f in ["data/private_train.jsonl", "data/dev.jsonl", "data/test.jsonl"] {
        assert!(ws.path(f).exists(), "missing {f}");
    }

    // train-proxies writes checkpoints, budgets, histories, pairs.
    let out = ws.run_ok(&["train-proxies"]);
    assert!(out.contains("sigma"), "{out}");
    for f in [
        "ckpt/w0.rwds",
        "ckpt/wgen.rwds",
        "ckpt/wrwd.rwds",
        "ckpt/budgets.json",
        "ckpt/history_gen.jsonl",
        "ckpt/history_rwd.jsonl",
        "ckpt/pairs.jsonl",
    ] {
        assert!(ws.path(f).exists(), "missing {f}");
    }
    // History lines carry the documented keys.
    let history = std::fs::read_to_string(ws.path("ckpt/history_gen.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(history.lines().next().unwrap()).unwrap();
    for key in ["step", "loss", "mean_clipped_norm", "epsilon_so_far"] {
        assert!(first.get(key).is_some(), "history missing {key}");
    }

    // synthesize writes the initial pool.
    let out = ws.run_ok(&["synthesize"]);
    assert!(out.contains("pool"), "{out}");
    let pool = std::fs::read_to_string(ws.path("rep/pool_d0.jsonl")).unwrap();
    assert_eq!(pool.lines().count(), 120);

    // vanilla run: zero spent budget, no training steps.
    ws.run_ok(&["run", "--mode", "vanilla"]);
    let vanilla_path = find_report(&ws.path("rep"), "vanilla");
    let vanilla: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&vanilla_path).unwrap()).unwrap();
    assert_eq!(vanilla["budget_total"]["epsilon"], 0.0);
    assert_eq!(vanilla["train_steps"], 0);

    // Re-running the identical config refuses to overwrite its report.
    let args = ws.args(&["run", "--mode", "vanilla"]);
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    let out = run(&refs);
    assert!(!out.status.success());
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("append-only"),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    // reward_ds run with an explicit out path; budgets compose to the total.
    let rds_out = ws.path("rep/rds.json");
    ws.run_ok(&["run", "--mode", "reward-ds", "--out", rds_out.to_str().unwrap()]);
    let rds: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&rds_out).unwrap()).unwrap();
    let (eg, er, et) = (
        rds["budget_gen"]["epsilon"].as_f64().unwrap(),
        rds["budget_rwd"]["epsilon"].as_f64().unwrap(),
        rds["budget_total"]["epsilon"].as_f64().unwrap(),
    );
    assert_eq!(eg + er, et);
    assert_eq!(
        rds["budget_gen"]["delta"].as_f64().unwrap()
            + rds["budget_rwd"]["delta"].as_f64().unwrap(),
        rds["budget_total"]["delta"].as_f64().unwrap()
    );
    // Pool snapshots: epochs 0..=2 at constant length L.
    for t in 0..=2 {
        let pool = std::fs::read_to_string(ws.path(&format!("rep/rds_pools/epoch_{t}.jsonl"))).unwrap();
        assert_eq!(pool.lines().count(), 120, "epoch {t}");
    }

    // dp_generation run judged against the reward_ds baseline.
    let dpg_out = ws.path("rep/dpg.json");
    ws.run_ok(&[
        "run",
        "--mode",
        "dp-generation",
        "--out",
        dpg_out.to_str().unwrap(),
        "--judge-baseline",
        rds_out.to_str().unwrap(),
    ]);
    let dpg: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&dpg_out).unwrap()).unwrap();
    let judge = &dpg["judge_vs_baseline"];
    let total = judge["win"].as_u64().unwrap()
        + judge["tie"].as_u64().unwrap()
        + judge["lose"].as_u64().unwrap();
    assert_eq!(total, 12, "one verdict per test query");

    // report-diff renders the table and writes CSV.
    let csv_path = ws.path("rep/diff.csv");
    let out = run_ok(&[
        "report-diff",
        rds_out.to_str().unwrap(),
        dpg_out.to_str().unwrap(),
        "--csv",
        csv_path.to_str().unwrap(),
    ]);
    assert!(out.contains("rougeL"), "{out}");
    assert!(out.contains("judge_win"), "{out}");
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    assert!(csv.starts_with("metric,ours,baseline"));

    // evaluate re-scores a checkpoint.
    let out = ws.run_ok(&[
        "evaluate",
        "--checkpoint",
        ws.path("ckpt/wgen.rwds").to_str().unwrap(),
    ]);
    assert!(out.contains("rouge_l"), "{out}");

    // attack works against both checkpoint kinds.
    let out = ws.run_ok(&[
        "attack",
        "--model",
        ws.path("ckpt/wgen.rwds").to_str().unwrap(),
    ]);
    let report: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert!(report["extraction_rouge_l"].is_number());
    assert!(report["mia_f1"].is_number());
    let out = ws.run_ok(&[
        "attack",
        "--model",
        ws.path("ckpt/wrwd.rwds").to_str().unwrap(),
    ]);
    let report: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert!(report["extraction_rouge_l"].is_null());
    assert!(report["mia_f1"].is_number());
}

#[test]
fn run_without_proxies_names_the_missing_artifact() {
    let ws = Workspace::new();
    ws.run_ok(&["gen-toy-data"]);
    let args = ws.args(&["run", "--mode", "reward-ds"]);
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    let out = run(&refs);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("train-proxies"), "{stderr}");
}

#[test]
fn invalid_config_fails_before_running() {
    let ws = Workspace::new();
    let mut args = ws.args(&["gen-toy-data"]);
    args.push("--set".into());
    args.push("pipeline.fold=1".into());
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    let out = run(&refs);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("fold"), "{stderr}");
}

#[test]
fn unknown_flag_and_unknown_override_fail() {
    let out = run(&["run", "--mode", "vanilla", "--nonsense"]);
    assert!(!out.status.success());

    let out = run(&["gen-toy-data", "--set", "no.such.key=1"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no.such.key"));
}

fn find_report(dir: &Path, mode: &str) -> PathBuf {
    std::fs::read_dir(dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .find(|p| {
            p.file_name()
                .map(|n| n.to_string_lossy().starts_with(mode))
                .unwrap_or(false)
                && p.extension().map(|x| x == "json").unwrap_or(false)
        })
        .unwrap_or_else(|| panic!("no {mode} report in {dir:?}"))
}
