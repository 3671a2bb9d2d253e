//! Experiment configuration, ablation modes, the held-out evaluation suite,
//! and run directories.
//!
//! Layout of a run directory (`<output_dir>/<mode>/`):
//! `config.json`, `eval_suite.json`, `summary.json`, and per seed
//! `seed_<n>/metrics.jsonl`, `seed_<n>/checkpoint.json` plus any scheduled
//! `seed_<n>/checkpoint_<step>.json`. `export` adds `learning_curve.csv` and
//! `roughness_stages.csv`.

pub mod export;
pub mod stats;

use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coevo::{
    evaluate_return, train, CoEvoError, InitOverride, MetricsLog, RewardForm, Source, Strategy,
    TrainCheckpoint, TrainConfig, Trigger,
};
use crate::morphology::Morphology;
use crate::policies::ControlPolicy;
use crate::rng::{derive_seed, rng_from_seed, streams};
use crate::sim2d::{EnvBounds, EnvKind, EnvParams, SimConfig};

pub use export::export_metrics;

/// Environment variable that overrides `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "COEVO_OUTPUT_DIR";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
    #[error(transparent)]
    Train(#[from] CoEvoError),
}

impl HarnessError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io { path: path.display().to_string(), source }
    }

    /// Stable identifier for machine-readable error reports.
    pub fn code(&self) -> &'static str {
        match self {
            HarnessError::Config(_) => "invalid_config",
            HarnessError::Io { .. } => "io",
            HarnessError::Parse { .. } => "parse",
            HarnessError::Checkpoint { .. } => "checkpoint",
            HarnessError::Train(_) => "training",
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut v = serde_json::json!({ "error": self.code(), "message": self.to_string() });
        if let HarnessError::Parse { path, line, .. } = self {
            v["path"] = path.clone().into();
            v["line"] = (*line).into();
        }
        v
    }
}

pub(crate) fn read_to_string(path: &Path) -> Result<String, HarnessError> {
    std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))
}

fn write(path: &Path, text: &str) -> Result<(), HarnessError> {
    std::fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    Original,
    PeriodicEnvsRandom,
    FixedEnvsInitial,
    FixedEnvsFinal,
    RandomMorph,
    FixedMorphInitial,
    FixedMorphFinal,
    FixedUpdateWindow,
    RewardI,
    RewardIi,
    RewardIii,
    /// Both the initial morphology and the initial environment kept fixed.
    FixedMorphEnvInitial,
}

impl AblationMode {
    pub const ALL: [AblationMode; 12] = [
        AblationMode::Original,
        AblationMode::PeriodicEnvsRandom,
        AblationMode::FixedEnvsInitial,
        AblationMode::FixedEnvsFinal,
        AblationMode::RandomMorph,
        AblationMode::FixedMorphInitial,
        AblationMode::FixedMorphFinal,
        AblationMode::FixedUpdateWindow,
        AblationMode::RewardI,
        AblationMode::RewardIi,
        AblationMode::RewardIii,
        AblationMode::FixedMorphEnvInitial,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::Original => "original",
            AblationMode::PeriodicEnvsRandom => "periodic_envs_random",
            AblationMode::FixedEnvsInitial => "fixed_envs_initial",
            AblationMode::FixedEnvsFinal => "fixed_envs_final",
            AblationMode::RandomMorph => "random_morph",
            AblationMode::FixedMorphInitial => "fixed_morph_initial",
            AblationMode::FixedMorphFinal => "fixed_morph_final",
            AblationMode::FixedUpdateWindow => "fixed_update_window",
            AblationMode::RewardI => "reward_i",
            AblationMode::RewardIi => "reward_ii",
            AblationMode::RewardIii => "reward_iii",
            AblationMode::FixedMorphEnvInitial => "fixed_morph_env_initial",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    pub fn needs_checkpoint(self) -> bool {
        matches!(self, AblationMode::FixedEnvsFinal | AblationMode::FixedMorphFinal)
    }

    /// The strategy hooks this mode overrides; everything else stays at the
    /// defaults.
    pub fn strategy(self, fixed_period: u64) -> Strategy {
        let mut s = Strategy::default();
        match self {
            AblationMode::Original => {}
            AblationMode::PeriodicEnvsRandom => s.env = Source::Random,
            AblationMode::FixedEnvsInitial | AblationMode::FixedEnvsFinal => s.env = Source::Fixed,
            AblationMode::RandomMorph => s.morph = Source::Random,
            AblationMode::FixedMorphInitial | AblationMode::FixedMorphFinal => s.morph = Source::Fixed,
            AblationMode::FixedUpdateWindow => s.trigger = Trigger::FixedPeriod(fixed_period),
            AblationMode::RewardI => s.train_morph_policy = false,
            AblationMode::RewardIi => s.morph_reward = RewardForm::Progress,
            AblationMode::RewardIii => s.env_reward = RewardForm::Improvement,
            AblationMode::FixedMorphEnvInitial => {
                s.morph = Source::Fixed;
                s.env = Source::Fixed;
            }
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    pub seed: u64,
    pub size: usize,
    pub episodes: usize,
    /// Episode horizon; the simulator horizon when absent.
    pub horizon: Option<usize>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self { seed: 20_240_101, size: 12, episodes: 2, horizon: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: AblationMode,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Period, in co-evolution steps, of `fixed_update_window`.
    pub fixed_period: u64,
    /// Source of the final morphology or environment for the `*_final`
    /// modes.
    pub final_checkpoint: Option<PathBuf>,
    pub eval_suite: SuiteConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: AblationMode::Original,
            seeds: vec![0, 1, 2],
            output_dir: PathBuf::from("runs"),
            fixed_period: 4,
            final_checkpoint: None,
            eval_suite: SuiteConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        self.train.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        let b = &self.train.sim.bounds;
        if !(0.0 <= b.variance_min && b.variance_min <= b.variance_max && b.max_height >= 0.0)
            || !(0.0 < b.gap_min && b.gap_min <= b.gap_max)
        {
            return Err(HarnessError::Config("environment bounds are inconsistent".into()));
        }
        if self.seeds.is_empty() {
            return Err(HarnessError::Config("seed list is empty".into()));
        }
        if self.mode == AblationMode::FixedUpdateWindow && self.fixed_period == 0 {
            return Err(HarnessError::Config("fixed_period must be positive".into()));
        }
        if self.mode.needs_checkpoint() && self.final_checkpoint.is_none() {
            return Err(HarnessError::Config(format!(
                "mode {} needs final_checkpoint",
                self.mode.name()
            )));
        }
        if self.eval_suite.size == 0 || self.eval_suite.episodes == 0 {
            return Err(HarnessError::Config("evaluation suite must be non-empty".into()));
        }
        Ok(())
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(self.mode.name())
    }
}

/// Parses a config file, reporting the offending field path on error.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, HarnessError> {
    let text = read_to_string(path)?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        HarnessError::Config(format!("{}: {} ({})", path.display(), e.inner(), e.path()))
    })
}

pub fn load_checkpoint(path: &Path) -> Result<TrainCheckpoint, HarnessError> {
    TrainCheckpoint::from_json(&read_to_string(path)?).map_err(|e| HarnessError::Checkpoint {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Starting design and environment for a mode.
pub fn initial_override(cfg: &ExperimentConfig) -> Result<InitOverride, HarnessError> {
    let mut init = InitOverride::default();
    if !cfg.mode.needs_checkpoint() {
        return Ok(init);
    }
    let path = cfg.final_checkpoint.as_deref().expect("validated");
    let ck = load_checkpoint(path)?;
    let bad = |message: String| HarnessError::Checkpoint { path: path.display().to_string(), message };
    match cfg.mode {
        AblationMode::FixedEnvsFinal => {
            if ck.theta_e.env_kind != cfg.train.env_kind {
                return Err(bad("environment kind differs from the configuration".into()));
            }
            init.params = Some(ck.theta_e);
        }
        _ => init.morph = Some(ck.morphology().map_err(|e| bad(e.to_string()))?),
    }
    Ok(init)
}

/// Held-out environments sampled uniformly from the bounds with their own
/// seed, never produced by training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSuite {
    pub seed: u64,
    pub params: Vec<EnvParams>,
    pub episodes: usize,
    pub horizon: usize,
}

impl EvalSuite {
    pub fn sample(kind: EnvKind, bounds: &EnvBounds, cfg: &SuiteConfig, sim: &SimConfig) -> Self {
        let mut rng = rng_from_seed(derive_seed(cfg.seed, streams::EVAL_SUITE));
        let base = EnvParams::easy(kind, bounds);
        let params = (0..cfg.size)
            .map(|_| {
                let vals: Vec<f64> = bounds
                    .ranges(kind)
                    .iter()
                    .map(|&(lo, hi)| rng.random_range(lo..=hi))
                    .collect();
                base.with_tunable(&vals)
            })
            .collect();
        Self {
            seed: cfg.seed,
            params,
            episodes: cfg.episodes,
            horizon: cfg.horizon.unwrap_or(sim.horizon),
        }
    }

    /// Suite environments that also occur among `training`.
    pub fn intersection(&self, training: &[EnvParams]) -> Vec<EnvParams> {
        self.params.iter().filter(|p| training.contains(p)).copied().collect()
    }

    /// Terrain seeds of environment `j`, shared by every agent evaluated.
    pub fn terrain_seeds(&self, j: usize) -> Vec<u64> {
        (0..self.episodes as u64)
            .map(|k| derive_seed(derive_seed(self.seed, j as u64 + 1), k))
            .collect()
    }

    /// Mean return per suite environment.
    pub fn evaluate(
        &self,
        control: &ControlPolicy,
        morph: &Morphology,
        sim: &SimConfig,
    ) -> Result<Vec<f64>, CoEvoError> {
        (0..self.params.len())
            .map(|j| evaluate_return(control, morph, &self.params[j], &self.terrain_seeds(j), self.horizon, sim))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub suite_returns: Vec<f64>,
    pub mean_return: Option<f64>,
    pub steps: u64,
    pub morph_changes: u64,
    pub env_changes: u64,
    pub final_node_count: usize,
    pub final_theta_e: Option<EnvParams>,
    /// Held-out environments also seen in training (must be empty).
    pub held_out_overlap: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: AblationMode,
    pub env_kind: EnvKind,
    pub budget: u64,
    pub seeds: Vec<SeedResult>,
    /// Over all successful seeds and suite environments.
    pub mean_return: Option<f64>,
    pub std_return: Option<f64>,
    /// Mean of the per-seed suite means.
    pub seed_mean_return: Option<f64>,
}

fn run_seed(
    cfg: &ExperimentConfig,
    strategy: Strategy,
    init: &InitOverride,
    suite: &EvalSuite,
    seed: u64,
    dir: &Path,
) -> Result<SeedResult, HarnessError> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let log_path = dir.join("metrics.jsonl");
    let mut log = MetricsLog::create(&log_path).map_err(|e| HarnessError::io(&log_path, e))?;
    let state = train(cfg.train.clone(), strategy, seed, init.clone(), &mut log, Some(dir))?;
    write(&dir.join("checkpoint.json"), &state.checkpoint().to_json())?;
    let mut seen: Vec<EnvParams> = log.records.iter().map(|r| r.theta_e).collect();
    seen.push(state.params);
    let returns = suite.evaluate(&state.control, &state.morph, &cfg.train.sim)?;
    Ok(SeedResult {
        seed,
        ok: true,
        error: None,
        mean_return: stats::mean_std(&returns).map(|(m, _)| m),
        suite_returns: returns,
        steps: state.t,
        morph_changes: state.alpha,
        env_changes: state.beta,
        final_node_count: state.morph.len(),
        final_theta_e: Some(state.params),
        held_out_overlap: suite.intersection(&seen).len(),
    })
}

/// Trains every seed of `cfg`, evaluates each final agent on the held-out
/// suite and writes the run directory. A failing seed is recorded in the
/// summary and the remaining seeds still run.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary, HarnessError> {
    cfg.validate()?;
    let dir = cfg.run_dir();
    std::fs::create_dir_all(&dir).map_err(|e| HarnessError::io(&dir, e))?;
    write(&dir.join("config.json"), &serde_json::to_string_pretty(cfg).expect("config serializes"))?;
    let sim = cfg.train.sim;
    let suite = EvalSuite::sample(cfg.train.env_kind, &sim.bounds, &cfg.eval_suite, &sim);
    write(&dir.join("eval_suite.json"), &serde_json::to_string_pretty(&suite).expect("suite serializes"))?;
    let strategy = cfg.mode.strategy(cfg.fixed_period);
    let init = initial_override(cfg)?;
    let mut seeds = Vec::new();
    for &seed in &cfg.seeds {
        let sdir = dir.join(format!("seed_{seed}"));
        let r = run_seed(cfg, strategy, &init, &suite, seed, &sdir).unwrap_or_else(|e| SeedResult {
            seed,
            ok: false,
            error: Some(e.to_string()),
            suite_returns: Vec::new(),
            mean_return: None,
            steps: 0,
            morph_changes: 0,
            env_changes: 0,
            final_node_count: 0,
            final_theta_e: None,
            held_out_overlap: 0,
        });
        seeds.push(r);
    }
    let all: Vec<f64> = seeds.iter().flat_map(|s| s.suite_returns.iter().copied()).collect();
    let per_seed: Vec<f64> = seeds.iter().filter_map(|s| s.mean_return).collect();
    let ms = stats::mean_std(&all);
    let summary = RunSummary {
        mode: cfg.mode,
        env_kind: cfg.train.env_kind,
        budget: cfg.train.budget,
        seeds,
        mean_return: ms.map(|x| x.0),
        std_return: ms.map(|x| x.1),
        seed_mean_return: stats::mean_std(&per_seed).map(|x| x.0),
    };
    write(&dir.join("summary.json"), &serde_json::to_string_pretty(&summary).expect("summary serializes"))?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub summary: RunSummary,
    /// Seed-averaged held-out return of `original` in the same output
    /// directory, when that run exists.
    pub original_mean_return: Option<f64>,
    pub difference: Option<f64>,
}

/// Runs `base` under `mode` and compares with a prior `original` run in the
/// same output directory.
pub fn run_ablation(mode: AblationMode, base: &ExperimentConfig) -> Result<AblationReport, HarnessError> {
    let cfg = ExperimentConfig { mode, ..base.clone() };
    let summary = run_experiment(&cfg)?;
    let orig_path = cfg.output_dir.join(AblationMode::Original.name()).join("summary.json");
    let original_mean_return = if orig_path.exists() {
        let s: RunSummary = serde_json::from_str(&read_to_string(&orig_path)?)
            .map_err(|e| HarnessError::Parse { path: orig_path.display().to_string(), line: e.line(), message: e.to_string() })?;
        s.seed_mean_return
    } else {
        None
    };
    let difference = summary.seed_mean_return.zip(original_mean_return).map(|(a, b)| a - b);
    let report = AblationReport { summary, original_mean_return, difference };
    write(
        &cfg.run_dir().join("ablation_report.json"),
        &serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: String,
    pub suite: EvalSuite,
    pub returns: Vec<f64>,
    pub mean_return: f64,
    pub std_return: f64,
}

/// Evaluates a checkpoint's control policy and morphology on the held-out
/// suite built from its own configuration.
pub fn evaluate_checkpoint(path: &Path, suite_cfg: &SuiteConfig) -> Result<EvalReport, HarnessError> {
    let ck = load_checkpoint(path)?;
    let bad = |message: String| HarnessError::Checkpoint { path: path.display().to_string(), message };
    let morph = ck.morphology().map_err(|e| bad(e.to_string()))?;
    let control = ck.control_policy().map_err(|e| bad(e.to_string()))?;
    let sim = ck.config.sim;
    let suite = EvalSuite::sample(ck.config.env_kind, &sim.bounds, suite_cfg, &sim);
    let returns = suite.evaluate(&control, &morph, &sim)?;
    let (mean_return, std_return) = stats::mean_std(&returns).unwrap_or((0.0, 0.0));
    Ok(EvalReport { checkpoint: path.display().to_string(), suite, returns, mean_return, std_return })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_names_round_trip() {
        for m in AblationMode::ALL {
            assert_eq!(AblationMode::parse(m.name()), Some(m));
            let js = serde_json::to_string(&m).unwrap();
            assert_eq!(js, format!("\"{}\"", m.name()));
        }
        assert_eq!(AblationMode::parse("bogus"), None);
    }

    #[test]
    fn each_mode_touches_one_hook() {
        let base = Strategy::default();
        for m in AblationMode::ALL {
            let s = m.strategy(3);
            let diffs = [
                s.morph != base.morph,
                s.env != base.env,
                s.trigger != base.trigger,
                s.morph_reward != base.morph_reward,
                s.env_reward != base.env_reward,
                s.train_morph_policy != base.train_morph_policy,
            ]
            .iter()
            .filter(|d| **d)
            .count();
            let expected = match m {
                AblationMode::Original => 0,
                AblationMode::FixedMorphEnvInitial => 2,
                _ => 1,
            };
            assert_eq!(diffs, expected, "{}", m.name());
        }
    }

    #[test]
    fn default_config_round_trips_and_validates() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let back: ExperimentConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn final_modes_need_a_checkpoint() {
        let c = ExperimentConfig { mode: AblationMode::FixedMorphFinal, ..Default::default() };
        assert!(matches!(c.validate(), Err(HarnessError::Config(_))));
    }

    #[test]
    fn suite_is_reproducible_and_in_bounds() {
        let sim = SimConfig::default();
        let cfg = SuiteConfig::default();
        let a = EvalSuite::sample(EnvKind::RoughTerrain, &sim.bounds, &cfg, &sim);
        let b = EvalSuite::sample(EnvKind::RoughTerrain, &sim.bounds, &cfg, &sim);
        assert_eq!(a, b);
        assert_eq!(a.params.len(), 12);
        for p in &a.params {
            p.validate(&sim.bounds).unwrap();
        }
        assert!(a.intersection(&[EnvParams::easy(EnvKind::RoughTerrain, &sim.bounds)]).is_empty());
        assert_eq!(a.intersection(&a.params[3..5]).len(), 2);
    }
}
