mod common;

use std::path::Path;
use std::process::Command;

use coevo_core::harness::export::{read_log, STAGES};
use coevo_core::harness::*;
use coevo_core::morphology::Morphology;
use common::tiny_config;

fn config(dir: &Path) -> ExperimentConfig {
    let mut train = tiny_config();
    train.budget = 64 * 6;
    ExperimentConfig {
        seeds: vec![0, 1],
        output_dir: dir.to_path_buf(),
        eval_suite: SuiteConfig { horizon: Some(30), episodes: 1, ..SuiteConfig::default() },
        train,
        ..ExperimentConfig::default()
    }
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap()
}

#[test]
fn zero_budget_evaluates_the_initial_agent() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(tmp.path());
    cfg.train.budget = 0;
    let s = run_experiment(&cfg).unwrap();
    assert_eq!(s.seeds.len(), 2);
    for r in &s.seeds {
        assert!(r.ok);
        assert_eq!((r.steps, r.morph_changes, r.env_changes), (0, 0, 0));
        assert_eq!(r.suite_returns.len(), 12);
    }
    assert!(cfg.run_dir().join("summary.json").exists());
}

#[test]
fn repeated_runs_write_identical_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_experiment(&config(a.path())).unwrap();
    run_experiment(&config(b.path())).unwrap();
    for f in ["summary.json", "eval_suite.json", "seed_0/metrics.jsonl", "seed_1/checkpoint.json"] {
        assert_eq!(read(&a.path().join("original").join(f)), read(&b.path().join("original").join(f)), "{f}");
    }
}

#[test]
fn held_out_suite_never_trains() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(tmp.path());
    cfg.mode = AblationMode::PeriodicEnvsRandom;
    let s = run_experiment(&cfg).unwrap();
    assert!(s.seeds.iter().all(|r| r.ok && r.held_out_overlap == 0));
    let suite: EvalSuite = serde_json::from_str(&read(&cfg.run_dir().join("eval_suite.json"))).unwrap();
    for seed in &cfg.seeds {
        let log = read_log(&cfg.run_dir().join(format!("seed_{seed}/metrics.jsonl"))).unwrap();
        let seen: Vec<_> = log.iter().map(|r| r.theta_e).collect();
        assert!(suite.intersection(&seen).is_empty());
    }
}

#[test]
fn fixed_morph_initial_ends_with_the_initial_design() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(tmp.path());
    cfg.mode = AblationMode::FixedMorphInitial;
    run_experiment(&cfg).unwrap();
    let ck = load_checkpoint(&cfg.run_dir().join("seed_0/checkpoint.json")).unwrap();
    assert_eq!(ck.morphology().unwrap(), Morphology::initial(2).unwrap());
}

#[test]
fn final_modes_start_from_a_prior_run() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(tmp.path());
    cfg.seeds = vec![3];
    cfg.mode = AblationMode::RandomMorph;
    run_experiment(&cfg).unwrap();
    let path = cfg.run_dir().join("seed_3/checkpoint.json");
    let source = load_checkpoint(&path).unwrap();
    assert_ne!(source.morphology().unwrap(), Morphology::initial(2).unwrap());

    let base = ExperimentConfig { final_checkpoint: Some(path), ..cfg.clone() };
    let report = run_ablation(AblationMode::FixedMorphFinal, &base).unwrap();
    assert!(report.summary.seeds[0].ok);
    let out = load_checkpoint(&base.output_dir.join("fixed_morph_final/seed_3/checkpoint.json")).unwrap();
    assert_eq!(out.morphology, source.morphology);

    run_ablation(AblationMode::FixedEnvsFinal, &base).unwrap();
    let log = read_log(&base.output_dir.join("fixed_envs_final/seed_3/metrics.jsonl")).unwrap();
    assert!(log.iter().all(|r| r.theta_e == source.theta_e));

    let missing = ExperimentConfig { final_checkpoint: Some(tmp.path().join("nope.json")), ..cfg };
    assert!(matches!(run_ablation(AblationMode::FixedEnvsFinal, &missing), Err(HarnessError::Io { .. })));
}

#[test]
fn ablation_report_compares_with_original() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path());
    let orig = run_experiment(&cfg).unwrap();
    let r = run_ablation(AblationMode::RewardI, &cfg).unwrap();
    assert_eq!(r.original_mean_return, orig.seed_mean_return);
    let diff = r.summary.seed_mean_return.unwrap() - orig.seed_mean_return.unwrap();
    assert_eq!(r.difference, Some(diff));
}

#[test]
fn failing_seeds_are_recorded() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(tmp.path());
    cfg.train.sim.max_body_depth = 0.01;
    let s = run_experiment(&cfg).unwrap();
    assert_eq!(s.seeds.len(), 2);
    assert!(s.seeds.iter().all(|r| !r.ok && r.error.is_some()));
    assert_eq!(s.mean_return, None);
}

#[test]
fn stage_table_matches_raw_recomputation() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(tmp.path());
    cfg.train.budget = 64 * 20;
    run_experiment(&cfg).unwrap();
    let written = export_metrics(&cfg.run_dir()).unwrap();
    let table = read(&written[1]);

    let budget = cfg.train.budget as f64;
    let mut stages: Vec<Vec<f64>> = vec![Vec::new(); STAGES];
    for seed in &cfg.seeds {
        let text = read(&cfg.run_dir().join(format!("seed_{seed}/metrics.jsonl")));
        for line in text.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            if v["event"] == "ppo_update" && v["policy"] == "control" {
                let step = v["step"].as_f64().unwrap();
                let k = ((step - 1.0) / (budget / STAGES as f64)).floor() as usize;
                stages[k.min(STAGES - 1)].push(v["roughness"].as_f64().unwrap());
            }
        }
    }
    let rows: Vec<Vec<f64>> = table
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|f| f.parse().unwrap()).collect())
        .collect();
    let nonempty: Vec<&Vec<f64>> = stages.iter().filter(|s| !s.is_empty()).collect();
    assert_eq!(rows.len(), nonempty.len());
    for row in rows {
        let vals = &stages[row[0] as usize - 1];
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let std = (vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
        assert!((row[3] - mean).abs() < 1e-12 && (row[4] - std).abs() < 1e-12);
        assert_eq!(row[5] as usize, vals.len());
    }
    let curve = read(&written[0]);
    assert!(curve.starts_with("step,mean_return,std_return,seeds\n"));
}

#[test]
fn corrupt_log_reports_its_line() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path());
    run_experiment(&cfg).unwrap();
    let log = cfg.run_dir().join("seed_1/metrics.jsonl");
    let mut text = read(&log);
    let lines = text.lines().count();
    text.push_str("{\"step\": oops}\n");
    std::fs::write(&log, text).unwrap();
    match export_metrics(&cfg.run_dir()) {
        Err(HarnessError::Parse { line, .. }) => assert_eq!(line, lines + 1),
        other => panic!("{other:?}"),
    }
}

fn coevo() -> Command {
    Command::new(env!("CARGO_BIN_EXE_coevo"))
}

#[test]
fn cli_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let out = coevo().arg("init-config").output().unwrap();
    assert!(out.status.success());
    let defaults: ExperimentConfig = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(defaults, ExperimentConfig::default());

    let mut cfg = config(Path::new("ignored"));
    cfg.seeds = vec![0];
    cfg.train.budget = 128;
    let cpath = tmp.path().join("config.json");
    std::fs::write(&cpath, serde_json::to_string(&cfg).unwrap()).unwrap();
    let runs = tmp.path().join("runs");
    let out = coevo().args(["train", "--config"]).arg(&cpath).env(OUTPUT_DIR_ENV, &runs).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: RunSummary = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary.seeds[0].steps, 128);
    assert!(!Path::new("ignored").exists());

    let ck = runs.join("original/seed_0/checkpoint.json");
    let out = coevo().args(["evaluate", "--checkpoint"]).arg(&ck).output().unwrap();
    assert!(out.status.success());
    let report: EvalReport = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report.returns.len(), 12);

    let out = coevo().args(["export", "--run-dir"]).arg(runs.join("original")).output().unwrap();
    assert!(out.status.success());
    assert!(runs.join("original/roughness_stages.csv").exists());

    let out = coevo().args(["ablate", "--mode", "fixed_envs_final", "--config"]).arg(&cpath)
        .arg("--checkpoint").arg(&ck).env(OUTPUT_DIR_ENV, &runs).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn cli_failures_are_json() {
    let tmp = tempfile::tempdir().unwrap();
    let cpath = tmp.path().join("c.json");
    std::fs::write(&cpath, "{\"train\": {\"budget\": \"lots\"}}").unwrap();
    let cases: Vec<(Vec<String>, &str, i32)> = vec![
        (vec!["train".into(), "--config".into(), cpath.display().to_string()], "invalid_config", 2),
        (vec!["ablate".into(), "--mode".into(), "nope".into(), "--config".into(), cpath.display().to_string()], "invalid_config", 2),
        (vec!["evaluate".into(), "--checkpoint".into(), "/missing.json".into()], "io", 1),
        (vec!["frobnicate".into()], "usage", 2),
    ];
    for (args, code, exit) in cases {
        let out = coevo().args(&args).output().unwrap();
        assert_eq!(out.status.code(), Some(exit), "{args:?}");
        let v: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
        assert_eq!(v["error"], code, "{args:?}");
    }
    let out = coevo().args(["train", "--config"]).arg(&cpath).output().unwrap();
    let v: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(v["message"].as_str().unwrap().contains("train.budget"));
}
