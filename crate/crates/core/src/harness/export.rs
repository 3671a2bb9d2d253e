//! CSV tables derived from the JSONL metrics of a run directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::stats::mean_std;
use super::{read_to_string, ExperimentConfig, HarnessError};
use crate::coevo::{parse_jsonl, Event, MetricRecord};
use crate::ppo::PolicyId;

pub const STAGES: usize = 10;
pub const LEARNING_CURVE_HEADER: &str = "step,mean_return,std_return,seeds";
pub const STAGE_HEADER: &str = "stage,step_start,step_end,mean_roughness,std_roughness,samples";

/// Control updates: one record per batch, carrying the training
/// environment of that batch.
pub fn control_updates(records: &[MetricRecord]) -> impl Iterator<Item = &MetricRecord> {
    records
        .iter()
        .filter(|r| r.event == Event::PpoUpdate && r.policy == Some(PolicyId::Control))
}

/// Stage (0-based) of a cumulative step count in a budget split into
/// `STAGES` equal parts.
pub fn stage_of(step: u64, budget: u64) -> usize {
    if budget == 0 || step == 0 {
        return 0;
    }
    (((step - 1) as u128 * STAGES as u128 / budget as u128) as usize).min(STAGES - 1)
}

/// Roughness values of the control updates of one or more logs, by stage.
pub fn roughness_by_stage<'a>(
    logs: impl IntoIterator<Item = &'a [MetricRecord]>,
    budget: u64,
) -> Vec<Vec<f64>> {
    let mut stages = vec![Vec::new(); STAGES];
    for log in logs {
        for r in control_updates(log) {
            stages[stage_of(r.step, budget)].push(r.roughness);
        }
    }
    stages
}

/// Per-stage mean roughness of a single log.
pub fn stage_means(records: &[MetricRecord], budget: u64) -> Vec<Option<f64>> {
    roughness_by_stage([records], budget)
        .iter()
        .map(|v| mean_std(v).map(|(m, _)| m))
        .collect()
}

pub fn learning_curve_csv(logs: &[Vec<MetricRecord>]) -> String {
    let mut by_step: std::collections::BTreeMap<u64, Vec<f64>> = Default::default();
    for log in logs {
        for r in control_updates(log) {
            if let Some(m) = r.mean_return {
                by_step.entry(r.step).or_default().push(m);
            }
        }
    }
    let mut out = String::from(LEARNING_CURVE_HEADER);
    out.push('\n');
    for (step, vals) in by_step {
        let (m, s) = mean_std(&vals).expect("non-empty");
        writeln!(out, "{step},{m},{s},{}", vals.len()).unwrap();
    }
    out
}

pub fn stage_table_csv(logs: &[Vec<MetricRecord>], budget: u64) -> String {
    let mut out = String::from(STAGE_HEADER);
    out.push('\n');
    let stages = roughness_by_stage(logs.iter().map(|l| l.as_slice()), budget);
    for (i, vals) in stages.iter().enumerate() {
        if let Some((m, s)) = mean_std(vals) {
            let lo = budget * i as u64 / STAGES as u64;
            let hi = budget * (i as u64 + 1) / STAGES as u64;
            writeln!(out, "{},{lo},{hi},{m},{s},{}", i + 1, vals.len()).unwrap();
        }
    }
    out
}

/// Seed directories of a run, sorted by name.
pub fn seed_dirs(run_dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let entries = std::fs::read_dir(run_dir).map_err(|e| HarnessError::io(run_dir, e))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_dir()
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("seed_"))
        })
        .collect();
    dirs.sort();
    Ok(dirs)
}

pub fn read_log(path: &Path) -> Result<Vec<MetricRecord>, HarnessError> {
    parse_jsonl(&read_to_string(path)?).map_err(|(line, message)| HarnessError::Parse {
        path: path.display().to_string(),
        line,
        message,
    })
}

/// Reads every seed log of `run_dir` and writes `learning_curve.csv` and
/// `roughness_stages.csv` next to them.
pub fn export_metrics(run_dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let cfg: ExperimentConfig = super::load_config(&run_dir.join("config.json"))?;
    let mut logs = Vec::new();
    for d in seed_dirs(run_dir)? {
        let p = d.join("metrics.jsonl");
        if p.exists() {
            logs.push(read_log(&p)?);
        }
    }
    let curve = run_dir.join("learning_curve.csv");
    let stages = run_dir.join("roughness_stages.csv");
    std::fs::write(&curve, learning_curve_csv(&logs)).map_err(|e| HarnessError::io(&curve, e))?;
    std::fs::write(&stages, stage_table_csv(&logs, cfg.train.budget))
        .map_err(|e| HarnessError::io(&stages, e))?;
    Ok(vec![curve, stages])
}
