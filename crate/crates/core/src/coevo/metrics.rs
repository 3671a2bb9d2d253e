//! JSONL metrics: one record per training event.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::sew::ReturnsMatrix;
use crate::morphology::MorphologyDocument;
use crate::ppo::{LossStats, PolicyId};
use crate::sim2d::EnvParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Event {
    PpoUpdate,
    MorphChange,
    EnvChange,
    SewEval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    /// Control steps taken so far.
    pub step: u64,
    pub coevo_step: u64,
    pub event: Event,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<PolicyId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossStats>,
    #[serde(default)]
    pub r_m: Option<f64>,
    #[serde(default)]
    pub r_e: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_e: Option<f64>,
    /// Learning progress `P` at this step (sew_eval only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub progress: Option<f64>,
    /// Cost charged against `r_m` at this step (sew_eval) or incurred by the
    /// change (morph_change).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action_cost: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub returns_matrix: Option<ReturnsMatrix>,
    #[serde(rename = "theta_E")]
    pub theta_e: EnvParams,
    pub morph_node_count: usize,
    pub roughness: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_return: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub episodes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub morphology: Option<MorphologyDocument>,
}

/// Records kept in memory and, when opened on a path, streamed to a file.
#[derive(Debug, Default)]
pub struct MetricsLog {
    pub records: Vec<MetricRecord>,
    writer: Option<BufWriter<File>>,
}

impl MetricsLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn create(path: &Path) -> std::io::Result<Self> {
        Ok(Self {
            records: Vec::new(),
            writer: Some(BufWriter::new(File::create(path)?)),
        })
    }

    pub fn push(&mut self, r: MetricRecord) -> std::io::Result<()> {
        if let Some(w) = &mut self.writer {
            writeln!(w, "{}", to_line(&r))?;
        }
        self.records.push(r);
        Ok(())
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        if let Some(w) = &mut self.writer {
            w.flush()?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        self.records.iter().map(|r| to_line(r) + "\n").collect()
    }
}

pub fn to_line(r: &MetricRecord) -> String {
    serde_json::to_string(r).expect("metric record serializes")
}

/// Parses a JSONL log; errors carry the 1-based line number.
pub fn parse_jsonl(text: &str) -> Result<Vec<MetricRecord>, (usize, String)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| (i + 1, e.to_string())))
        .collect()
}
