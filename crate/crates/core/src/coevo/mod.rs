//! The co-evolution engine: control phases, short evaluation windows, the
//! morphology and environment rewards, and the threshold-triggered updates of
//! the morphology and the environment.

pub mod metrics;
pub mod sew;

use std::sync::Arc;

use rand::{Rng as _, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::morphology::{
    MorphAction, MorphError, Morphology, MorphologyDocument, TopologyChoice, ATTR_DIM,
    DEFAULT_MAX_NODES,
};
use crate::nets::{Checkpoint, NetError};
use crate::policies::{
    ControlObs, ControlPolicy, EnvObs, EnvironmentPolicy, GraphInfo, MorphObs, MorphSample,
    MorphologyPolicy, PolicyConfig,
};
use crate::ppo::{ppo_update, ActorCritic, PolicyId, PpoConfig, PpoError, PpoOptimizer, Trajectory};
use crate::rng::{derive_seed, rng_from_seed, streams, Rng};
use crate::sim2d::{generate_terrain, roughness, EnvKind, EnvParams, SimConfig, SimError, World};

pub use metrics::{parse_jsonl, Event, MetricRecord, MetricsLog};
pub use sew::{
    compute_env_reward, compute_morph_reward, env_improvement, env_progress, morph_progress,
    ReturnsMatrix, SewEnv, SewError, SewHistory, SewMorph,
};

#[derive(Debug, Error)]
pub enum CoEvoError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Ppo(#[from] PpoError),
    #[error(transparent)]
    Morph(#[from] MorphError),
    #[error(transparent)]
    Sew(#[from] SewError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// A trigger threshold, either fixed or a fraction of the running mean
/// absolute evaluation return.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Threshold {
    Relative(f64),
    Absolute(f64),
}

impl Threshold {
    pub fn resolve(self, mean_abs_return: f64) -> f64 {
        match self {
            Threshold::Relative(f) => f * mean_abs_return,
            Threshold::Absolute(v) => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub env_kind: EnvKind,
    /// Total control steps across all phases.
    pub budget: u64,
    /// Control steps per phase.
    pub tau_max: u64,
    pub sew_morphs: usize,
    pub sew_envs: usize,
    pub eval_episodes: usize,
    pub eval_horizon: usize,
    pub delta_m: Threshold,
    pub delta_e: Threshold,
    /// Weight of the morphology action cost.
    pub lambda: f64,
    /// Decisions per trajectory (and per update) of the morphology and
    /// environment policies.
    pub meta_batch: usize,
    pub initial_joints: usize,
    pub max_nodes: usize,
    /// Write a checkpoint every this many co-evolution steps.
    pub checkpoint_every: Option<u64>,
    pub ppo: PpoConfig,
    pub policy: PolicyConfig,
    pub sim: SimConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            env_kind: EnvKind::RoughTerrain,
            budget: 500_000,
            tau_max: 16_384,
            sew_morphs: 3,
            sew_envs: 4,
            eval_episodes: 4,
            eval_horizon: 256,
            delta_m: Threshold::Relative(0.05),
            delta_e: Threshold::Relative(0.05),
            lambda: 0.01,
            meta_batch: 16,
            initial_joints: 2,
            max_nodes: DEFAULT_MAX_NODES,
            checkpoint_every: None,
            ppo: PpoConfig::default(),
            policy: PolicyConfig::default(),
            sim: SimConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), CoEvoError> {
        self.ppo.validate()?;
        let bad = |m: &str| Err(CoEvoError::Config(m.to_string()));
        if self.sew_morphs == 0 || self.sew_envs == 0 {
            return bad("window sizes must be positive");
        }
        if self.eval_episodes == 0 || self.eval_horizon == 0 {
            return bad("evaluation episodes and horizon must be positive");
        }
        if self.meta_batch == 0 {
            return bad("meta_batch must be positive");
        }
        if self.tau_max == 0 && self.budget > 0 {
            return bad("tau_max must be positive");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be non-negative");
        }
        if self.initial_joints > crate::morphology::MAX_CHILDREN
            || self.initial_joints + 1 > self.max_nodes
        {
            return bad("initial_joints exceeds the child or node limit");
        }
        if !(self.policy.attr_delta_bound > 0.0 && self.policy.env_step_fraction > 0.0) {
            return bad("step sizes must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    /// The learned policy acts.
    Policy,
    /// Uniform random changes at the same trigger points.
    Random,
    /// Never changes.
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trigger {
    Thresholds,
    /// A change every `n` co-evolution steps, alternating morphology and
    /// environment.
    FixedPeriod(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardForm {
    /// Average improvement over the other axis against the previous window.
    Improvement,
    /// Change in learning progress between the current and previous entry.
    Progress,
}

/// Strategy hooks that the ablation modes override.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Strategy {
    pub morph: Source,
    pub env: Source,
    pub trigger: Trigger,
    pub morph_reward: RewardForm,
    pub env_reward: RewardForm,
    pub train_morph_policy: bool,
}

impl Default for Strategy {
    fn default() -> Self {
        Self {
            morph: Source::Policy,
            env: Source::Policy,
            trigger: Trigger::Thresholds,
            morph_reward: RewardForm::Improvement,
            env_reward: RewardForm::Progress,
            train_morph_policy: true,
        }
    }
}

/// Replacements for the default starting morphology and environment.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InitOverride {
    pub morph: Option<Morphology>,
    pub params: Option<EnvParams>,
}

#[derive(Debug, Clone, PartialEq)]
struct Pending<O, A> {
    obs: O,
    action: A,
    log_prob: f64,
    value: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseStats {
    pub steps: u64,
    pub episodes: usize,
    pub mean_return: Option<f64>,
    pub updates: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoEvoOutcome {
    pub r_m: Option<f64>,
    pub r_e: Option<f64>,
    pub morph_changed: bool,
    pub env_changed: bool,
}

struct Rngs {
    control: Rng,
    terrain: Rng,
    morph: Rng,
    env: Rng,
    shuffle: Rng,
    ablation: Rng,
}

/// Full training state.
pub struct CoEvoState {
    pub cfg: TrainConfig,
    pub strategy: Strategy,
    pub seed: u64,
    pub morph: Morphology,
    pub params: EnvParams,
    pub sew: SewHistory,
    pub prev_matrix: Option<ReturnsMatrix>,
    pub prev_progress: Option<f64>,
    pub prev_morph_progress: Option<f64>,
    pub control: ControlPolicy,
    pub morph_policy: MorphologyPolicy,
    pub env_policy: EnvironmentPolicy,
    /// Transitions of the latest control phase.
    pub dataset: Trajectory<ControlObs, Vec<f64>>,
    /// Control steps taken.
    pub t: u64,
    /// Morphology changes so far.
    pub alpha: u64,
    /// Environment changes so far.
    pub beta: u64,
    pub coevo_steps: u64,
    control_opt: PpoOptimizer,
    morph_opt: PpoOptimizer,
    env_opt: PpoOptimizer,
    morph_traj: Trajectory<MorphObs, MorphSample>,
    env_traj: Trajectory<EnvObs, Vec<f64>>,
    pending_morph: Option<Pending<MorphObs, MorphSample>>,
    pending_env: Option<Pending<EnvObs, Vec<f64>>>,
    pending_cost: f64,
    abs_return_sum: f64,
    abs_return_count: u64,
    next_morph_id: u64,
    next_env_id: u64,
    rngs: Rngs,
}

/// Roughness of a parameter set averaged over fixed reporting seeds, so
/// that it depends on the parameters only.
pub fn report_roughness(params: &EnvParams, sim: &SimConfig) -> f64 {
    const SEEDS: u64 = 4;
    (0..SEEDS)
        .map(|i| roughness(params, derive_seed(0x5EED, i), &sim.terrain, &sim.bounds))
        .sum::<f64>()
        / SEEDS as f64
}

/// Mean undiscounted return of the deterministic control policy over one
/// episode per terrain seed, each at most `horizon` steps.
pub fn evaluate_return(
    control: &ControlPolicy,
    morph: &Morphology,
    params: &EnvParams,
    terrain_seeds: &[u64],
    horizon: usize,
    sim: &SimConfig,
) -> Result<f64, CoEvoError> {
    let graph = Arc::new(GraphInfo::of(morph));
    let mut total = 0.0;
    for &seed in terrain_seeds {
        let hf = generate_terrain(params, seed, &sim.terrain, &sim.bounds)?;
        let mut world = World::reset(morph, Arc::new(hf), params.env_kind, sim)?;
        for _ in 0..horizon {
            let obs = ControlObs::new(&world.observe(), morph, graph.clone());
            let torques = control.mean_torques(&obs)?;
            let r = world.step(&torques)?;
            total += r.reward;
            if r.done {
                break;
            }
        }
    }
    Ok(total / terrain_seeds.len().max(1) as f64)
}

/// A uniformly random modification round with bounded attribute deltas.
pub fn random_morph_action(m: &Morphology, bound: f64, rng: &mut Rng) -> MorphAction {
    let n = m.len();
    MorphAction {
        topology: (0..n)
            .map(|_| TopologyChoice::from_index(rng.random_range(0..3)))
            .collect(),
        attr_deltas: (0..n)
            .map(|_| std::array::from_fn(|_| rng.random_range(-bound..=bound)))
            .collect::<Vec<[f64; ATTR_DIM]>>(),
    }
}

/// Parameters drawn uniformly from the bounds.
pub fn random_env_params(kind: EnvKind, sim: &SimConfig, rng: &mut Rng) -> EnvParams {
    let vals: Vec<f64> = sim
        .bounds
        .ranges(kind)
        .iter()
        .map(|&(lo, hi)| rng.random_range(lo..=hi))
        .collect();
    EnvParams::easy(kind, &sim.bounds).with_tunable(&vals)
}

impl CoEvoState {
    pub fn new(
        cfg: TrainConfig,
        strategy: Strategy,
        seed: u64,
        init: InitOverride,
    ) -> Result<Self, CoEvoError> {
        cfg.validate()?;
        let kind = cfg.env_kind;
        let morph = match init.morph {
            Some(m) => {
                m.validate().map_err(|v| CoEvoError::Config(format!("initial morphology: {v:?}")))?;
                m
            }
            None => Morphology::initial_with_cap(cfg.initial_joints, cfg.max_nodes)?,
        };
        let params = init.params.unwrap_or_else(|| EnvParams::easy(kind, &cfg.sim.bounds));
        if params.env_kind != kind {
            return Err(CoEvoError::Config("initial environment kind differs from env_kind".into()));
        }
        params.validate(&cfg.sim.bounds)?;
        let mut init_rng = rng_from_seed(derive_seed(seed, streams::INIT));
        let control = ControlPolicy::new(&cfg.policy, &mut init_rng);
        let morph_policy = MorphologyPolicy::new(&cfg.policy, &mut init_rng);
        let env_policy = EnvironmentPolicy::new(kind, cfg.sim.bounds, &cfg.policy, &mut init_rng);
        let p = &cfg.ppo;
        let control_opt = PpoOptimizer::new(&control, p.lr_control, p.lr_value);
        let morph_opt = PpoOptimizer::new(&morph_policy, p.lr_morph, p.lr_value);
        let env_opt = PpoOptimizer::new(&env_policy, p.lr_env, p.lr_value);
        let stream = |s| rng_from_seed(derive_seed(seed, s));
        let mut rngs = Rngs {
            control: stream(streams::CONTROL),
            terrain: stream(streams::TERRAIN),
            morph: stream(streams::MORPH),
            env: stream(streams::ENV),
            shuffle: stream(streams::SHUFFLE),
            ablation: stream(streams::ABLATION),
        };
        let mut sew = SewHistory::new(cfg.sew_morphs, cfg.sew_envs);
        sew.push_morph(SewMorph { id: 0, morph: morph.clone() });
        sew.push_env(SewEnv { id: 0, params, seed: rngs.terrain.next_u64() });
        Ok(Self {
            cfg,
            strategy,
            seed,
            morph,
            params,
            sew,
            prev_matrix: None,
            prev_progress: None,
            prev_morph_progress: None,
            control,
            morph_policy,
            env_policy,
            dataset: Trajectory::new(PolicyId::Control),
            t: 0,
            alpha: 0,
            beta: 0,
            coevo_steps: 0,
            control_opt,
            morph_opt,
            env_opt,
            morph_traj: Trajectory::new(PolicyId::Morph),
            env_traj: Trajectory::new(PolicyId::Env),
            pending_morph: None,
            pending_env: None,
            pending_cost: 0.0,
            abs_return_sum: 0.0,
            abs_return_count: 0,
            next_morph_id: 1,
            next_env_id: 1,
            rngs,
        })
    }

    fn record(&self, event: Event) -> MetricRecord {
        MetricRecord {
            step: self.t,
            coevo_step: self.coevo_steps,
            event,
            policy: None,
            loss: None,
            r_m: None,
            r_e: None,
            delta_m: None,
            delta_e: None,
            progress: None,
            action_cost: None,
            returns_matrix: None,
            theta_e: self.params,
            morph_node_count: self.morph.len(),
            roughness: report_roughness(&self.params, &self.cfg.sim),
            mean_return: None,
            episodes: None,
            morphology: None,
        }
    }

    pub fn mean_abs_return(&self) -> f64 {
        if self.abs_return_count == 0 {
            0.0
        } else {
            self.abs_return_sum / self.abs_return_count as f64
        }
    }

    /// Collects `tau` control steps with the current morphology and
    /// environment, updating the control policy every `batch_size` steps.
    pub fn train_control_phase(&mut self, tau: u64, log: &mut MetricsLog) -> Result<PhaseStats, CoEvoError> {
        let mut stats = PhaseStats::default();
        if tau == 0 {
            return Ok(stats);
        }
        self.dataset.clear();
        let graph = Arc::new(GraphInfo::of(&self.morph));
        let sim = self.cfg.sim;
        let batch = self.cfg.ppo.batch_size as u64;
        let mut chunk: Trajectory<ControlObs, Vec<f64>> = Trajectory::new(PolicyId::Control);
        let mut world: Option<World> = None;
        let mut episode_return = 0.0;
        let mut finished: Vec<f64> = Vec::new();
        let mut chunk_finished: Vec<f64> = Vec::new();
        while stats.steps < tau {
            let w = match &mut world {
                Some(w) if !w.state().done => w,
                _ => {
                    let seed = self.rngs.terrain.next_u64();
                    let hf = generate_terrain(&self.params, seed, &sim.terrain, &sim.bounds)?;
                    world = Some(World::reset(&self.morph, Arc::new(hf), self.params.env_kind, &sim)?);
                    episode_return = 0.0;
                    world.as_mut().expect("just reset")
                }
            };
            let obs = ControlObs::new(&w.observe(), &self.morph, graph.clone());
            let step = self.control.act(&obs, false, &mut self.rngs.control)?;
            let r = w.step(&step.torques)?;
            episode_return += r.reward;
            if r.done {
                finished.push(episode_return);
                chunk_finished.push(episode_return);
            }
            chunk.push(obs, step.action, step.log_prob, r.reward, step.value, r.done);
            stats.steps += 1;
            self.t += 1;
            if chunk.len() as u64 == batch || stats.steps == tau {
                chunk.bootstrap_value = match &world {
                    Some(w) if !w.state().done => {
                        let next = ControlObs::new(&w.observe(), &self.morph, graph.clone());
                        self.control.value(&next)?
                    }
                    _ => 0.0,
                };
                let mut rec = self.record(Event::PpoUpdate);
                rec.policy = Some(PolicyId::Control);
                match ppo_update(
                    &mut self.control,
                    &mut self.control_opt,
                    std::slice::from_ref(&chunk),
                    &self.cfg.ppo,
                    &mut self.rngs.shuffle,
                ) {
                    Ok(loss) => rec.loss = Some(loss),
                    Err(PpoError::NonFinite(_)) => {}
                    Err(e) => return Err(e.into()),
                }
                stats.updates += 1;
                rec.episodes = Some(chunk_finished.len());
                rec.mean_return = mean(&chunk_finished);
                log.push(rec)?;
                chunk_finished.clear();
                append(&mut self.dataset, &mut chunk);
            }
        }
        stats.episodes = finished.len();
        stats.mean_return = mean(&finished);
        Ok(stats)
    }

    /// Evaluates every (morphology, environment) pair of the window with
    /// deterministic actions.
    pub fn short_eval_window(&self) -> Result<ReturnsMatrix, CoEvoError> {
        let cfg = &self.cfg;
        let mut returns = Vec::with_capacity(self.sew.morphs.len());
        for m in &self.sew.morphs {
            let mut row = Vec::with_capacity(self.sew.envs.len());
            for e in &self.sew.envs {
                let seeds: Vec<u64> = (0..cfg.eval_episodes as u64).map(|k| derive_seed(e.seed, k)).collect();
                row.push(evaluate_return(&self.control, &m.morph, &e.params, &seeds, cfg.eval_horizon, &cfg.sim)?);
            }
            returns.push(row);
        }
        Ok(ReturnsMatrix {
            morph_ids: self.sew.morphs.iter().map(|m| m.id).collect(),
            env_ids: self.sew.envs.iter().map(|e| e.id).collect(),
            returns,
        })
    }

    /// One step of the co-evolution loop: evaluate the window, compute the
    /// rewards, and change at most one of morphology and environment.
    pub fn co_evo_step(&mut self, log: &mut MetricsLog) -> Result<CoEvoOutcome, CoEvoError> {
        self.coevo_steps += 1;
        let matrix = self.short_eval_window()?;
        for v in matrix.entries() {
            self.abs_return_sum += v.abs();
            self.abs_return_count += 1;
        }
        let cost = self.pending_cost;
        let lambda = self.cfg.lambda;

        let r_m = match self.strategy.morph_reward {
            RewardForm::Improvement => match &self.prev_matrix {
                Some(prev) => compute_morph_reward(&matrix, prev, cost, lambda).ok(),
                None => None,
            },
            RewardForm::Progress => {
                let p = morph_progress(&matrix)?;
                let r = self.prev_morph_progress.map(|prev| p - prev - lambda * cost);
                self.prev_morph_progress = Some(p);
                r
            }
        };
        let progress = env_progress(&matrix)?;
        let r_e = match self.strategy.env_reward {
            RewardForm::Progress => self.prev_progress.map(|prev| compute_env_reward(progress, 0.0, prev).0),
            RewardForm::Improvement => match &self.prev_matrix {
                Some(prev) => env_improvement(&matrix, prev).ok(),
                None => None,
            },
        };
        self.prev_progress = Some(progress);

        if let (Some(p), Some(r)) = (self.pending_morph.take(), r_m) {
            self.morph_traj.push(p.obs, p.action, p.log_prob, r, p.value, false);
        }
        if let (Some(p), Some(r)) = (self.pending_env.take(), r_e) {
            self.env_traj.push(p.obs, p.action, p.log_prob, r, p.value, false);
        }

        let scale = self.mean_abs_return();
        let delta_m = self.cfg.delta_m.resolve(scale);
        let delta_e = self.cfg.delta_e.resolve(scale);
        let (do_morph, do_env) = self.decide(r_m, r_e, delta_m, delta_e);

        let mut rec = self.record(Event::SewEval);
        rec.r_m = r_m;
        rec.r_e = r_e;
        rec.delta_m = Some(delta_m);
        rec.delta_e = Some(delta_e);
        rec.progress = Some(progress);
        rec.action_cost = Some(cost);
        rec.returns_matrix = Some(matrix.clone());
        log.push(rec)?;
        self.prev_matrix = Some(matrix);
        self.pending_cost = 0.0;

        if do_morph {
            self.change_morphology(r_m, log)?;
        } else if do_env {
            self.change_environment(r_e, log)?;
        }
        self.update_meta_policies(log)?;
        Ok(CoEvoOutcome { r_m, r_e, morph_changed: do_morph, env_changed: do_env && !do_morph })
    }

    fn decide(&self, r_m: Option<f64>, r_e: Option<f64>, delta_m: f64, delta_e: f64) -> (bool, bool) {
        let can_morph = self.strategy.morph != Source::Fixed;
        let can_env = self.strategy.env != Source::Fixed;
        match self.strategy.trigger {
            Trigger::Thresholds => {
                let morph = can_morph && r_m.is_some_and(|r| r <= delta_m);
                let env = !morph && can_env && r_e.is_some_and(|r| r <= delta_e);
                (morph, env)
            }
            Trigger::FixedPeriod(p) => {
                if p == 0 || self.coevo_steps % p != 0 {
                    return (false, false);
                }
                let morph_turn = (self.coevo_steps / p) % 2 == 1;
                match (morph_turn, can_morph, can_env) {
                    (true, true, _) | (false, true, false) => (true, false),
                    (_, _, true) => (false, true),
                    _ => (false, false),
                }
            }
        }
    }

    fn change_morphology(&mut self, r_m: Option<f64>, log: &mut MetricsLog) -> Result<(), CoEvoError> {
        let action = match self.strategy.morph {
            Source::Policy => {
                let obs = MorphObs::new(&self.morph);
                let step = self.morph_policy.act(&obs, false, &mut self.rngs.morph)?;
                self.pending_morph = Some(Pending {
                    obs,
                    action: step.sample,
                    log_prob: step.log_prob,
                    value: step.value,
                });
                step.action
            }
            Source::Random => random_morph_action(&self.morph, self.cfg.policy.attr_delta_bound, &mut self.rngs.ablation),
            Source::Fixed => return Ok(()),
        };
        let (next, info) = self.morph.apply_action(&action)?;
        self.pending_cost = info.topology_changes() as f64 + info.attr_delta_sq;
        self.morph = next;
        self.alpha += 1;
        let id = self.next_morph_id;
        self.next_morph_id += 1;
        self.sew.push_morph(SewMorph { id, morph: self.morph.clone() });
        let mut rec = self.record(Event::MorphChange);
        rec.r_m = r_m;
        rec.action_cost = Some(self.pending_cost);
        rec.morphology = Some(self.morph.to_document());
        log.push(rec)?;
        Ok(())
    }

    fn change_environment(&mut self, r_e: Option<f64>, log: &mut MetricsLog) -> Result<(), CoEvoError> {
        let params = match self.strategy.env {
            Source::Policy => {
                let obs = EnvObs::new(&self.morph, self.params);
                let step = self.env_policy.act(&obs, false, &mut self.rngs.env)?;
                self.pending_env = Some(Pending {
                    obs,
                    action: step.action,
                    log_prob: step.log_prob,
                    value: step.value,
                });
                step.params
            }
            Source::Random => random_env_params(self.cfg.env_kind, &self.cfg.sim, &mut self.rngs.ablation),
            Source::Fixed => return Ok(()),
        };
        self.params = params;
        self.beta += 1;
        let id = self.next_env_id;
        self.next_env_id += 1;
        let seed = self.rngs.terrain.next_u64();
        self.sew.push_env(SewEnv { id, params, seed });
        let mut rec = self.record(Event::EnvChange);
        rec.r_e = r_e;
        log.push(rec)?;
        Ok(())
    }

    fn update_meta_policies(&mut self, log: &mut MetricsLog) -> Result<(), CoEvoError> {
        if self.morph_traj.len() >= self.cfg.meta_batch {
            if self.strategy.train_morph_policy {
                self.morph_traj.bootstrap_value = self.morph_policy.value(&MorphObs::new(&self.morph))?;
                let mut rec = self.record(Event::PpoUpdate);
                rec.policy = Some(PolicyId::Morph);
                rec.loss = meta_update(
                    &mut self.morph_policy,
                    &mut self.morph_opt,
                    &self.morph_traj,
                    &self.cfg.ppo,
                    &mut self.rngs.shuffle,
                )?;
                log.push(rec)?;
            }
            self.morph_traj.clear();
        }
        if self.env_traj.len() >= self.cfg.meta_batch {
            self.env_traj.bootstrap_value = self.env_policy.value(&EnvObs::new(&self.morph, self.params))?;
            let mut rec = self.record(Event::PpoUpdate);
            rec.policy = Some(PolicyId::Env);
            rec.loss = meta_update(
                &mut self.env_policy,
                &mut self.env_opt,
                &self.env_traj,
                &self.cfg.ppo,
                &mut self.rngs.shuffle,
            )?;
            log.push(rec)?;
            self.env_traj.clear();
        }
        Ok(())
    }

    /// Parameters of all six networks plus the current design and terrain.
    pub fn checkpoint(&self) -> TrainCheckpoint {
        let mut nets = Checkpoint::new();
        nets.push("control.policy", &self.control.policy);
        nets.push("control.value", &self.control.value);
        nets.push("morph.policy", &self.morph_policy.policy);
        nets.push("morph.value", &self.morph_policy.value);
        nets.push("env.policy", &self.env_policy.policy);
        nets.push("env.value", &self.env_policy.value);
        TrainCheckpoint {
            version: crate::nets::CHECKPOINT_VERSION,
            seed: self.seed,
            step: self.t,
            morphology: self.morph.to_document(),
            theta_e: self.params,
            config: self.cfg.clone(),
            nets,
        }
    }
}

fn meta_update<M: ActorCritic>(
    model: &mut M,
    opt: &mut PpoOptimizer,
    traj: &Trajectory<M::Obs, M::Action>,
    ppo: &PpoConfig,
    rng: &mut Rng,
) -> Result<Option<crate::ppo::LossStats>, CoEvoError> {
    let cfg = PpoConfig { minibatch_size: ppo.minibatch_size.min(traj.len()).max(1), ..ppo.clone() };
    match ppo_update(model, opt, std::slice::from_ref(traj), &cfg, rng) {
        Ok(loss) => Ok(Some(loss)),
        Err(PpoError::NonFinite(_)) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn append<O, A>(dst: &mut Trajectory<O, A>, src: &mut Trajectory<O, A>) {
    dst.obs.append(&mut src.obs);
    dst.actions.append(&mut src.actions);
    dst.log_probs.append(&mut src.log_probs);
    dst.rewards.append(&mut src.rewards);
    dst.values.append(&mut src.values);
    dst.dones.append(&mut src.dones);
    src.bootstrap_value = 0.0;
}

/// Everything needed to evaluate or resume from a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainCheckpoint {
    pub version: u32,
    pub seed: u64,
    pub step: u64,
    pub morphology: MorphologyDocument,
    #[serde(rename = "theta_E")]
    pub theta_e: EnvParams,
    pub config: TrainConfig,
    pub nets: Checkpoint,
}

impl TrainCheckpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, CoEvoError> {
        let c: TrainCheckpoint = serde_json::from_str(text)
            .map_err(|e| CoEvoError::Config(format!("checkpoint: {e}")))?;
        if c.version != crate::nets::CHECKPOINT_VERSION {
            return Err(CoEvoError::Config(format!("unsupported checkpoint version {}", c.version)));
        }
        Ok(c)
    }

    pub fn morphology(&self) -> Result<Morphology, CoEvoError> {
        Ok(Morphology::from_document(self.morphology.clone())?)
    }

    /// Rebuilds the control policy with the stored weights.
    pub fn control_policy(&self) -> Result<ControlPolicy, CoEvoError> {
        let mut rng = rng_from_seed(0);
        let mut pi = ControlPolicy::new(&self.config.policy, &mut rng);
        self.nets.restore("control.policy", &mut pi.policy)?;
        self.nets.restore("control.value", &mut pi.value)?;
        Ok(pi)
    }
}

/// Alternates control phases and co-evolution steps until the step budget
/// is spent. Checkpoints go to `checkpoint_dir` when given.
pub fn train(
    cfg: TrainConfig,
    strategy: Strategy,
    seed: u64,
    init: InitOverride,
    log: &mut MetricsLog,
    checkpoint_dir: Option<&std::path::Path>,
) -> Result<CoEvoState, CoEvoError> {
    let mut state = CoEvoState::new(cfg, strategy, seed, init)?;
    while state.t < state.cfg.budget {
        let tau = state.cfg.tau_max.min(state.cfg.budget - state.t);
        state.train_control_phase(tau, log)?;
        state.co_evo_step(log)?;
        if let (Some(dir), Some(every)) = (checkpoint_dir, state.cfg.checkpoint_every) {
            if every > 0 && state.coevo_steps % every == 0 {
                let path = dir.join(format!("checkpoint_{:06}.json", state.coevo_steps));
                std::fs::write(path, state.checkpoint().to_json())?;
            }
        }
    }
    log.flush()?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny() -> TrainConfig {
        TrainConfig {
            budget: 256,
            tau_max: 128,
            eval_episodes: 1,
            eval_horizon: 16,
            meta_batch: 2,
            ppo: PpoConfig { batch_size: 64, minibatch_size: 32, epochs: 2, ..PpoConfig::default() },
            policy: PolicyConfig::with_width(8),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_tau_phase_is_a_no_op() {
        let mut s = CoEvoState::new(tiny(), Strategy::default(), 1, InitOverride::default()).unwrap();
        let mut log = MetricsLog::in_memory();
        let before = s.control.policy.clone();
        let stats = s.train_control_phase(0, &mut log).unwrap();
        assert_eq!(stats.steps, 0);
        assert!(s.dataset.is_empty());
        assert_eq!(s.control.policy, before);
        assert!(log.records.is_empty());
    }

    #[test]
    fn phase_advances_counter_exactly_and_replays() {
        let run = || {
            let mut s = CoEvoState::new(tiny(), Strategy::default(), 7, InitOverride::default()).unwrap();
            let mut log = MetricsLog::in_memory();
            s.train_control_phase(100, &mut log).unwrap();
            assert_eq!(s.t, 100);
            assert_eq!(s.dataset.len(), 100);
            (s.dataset.rewards.clone(), s.dataset.actions.clone(), s.dataset.log_probs.clone())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn budget_of_one_phase_runs_one_step() {
        let mut cfg = tiny();
        cfg.budget = cfg.tau_max;
        let mut log = MetricsLog::in_memory();
        let s = train(cfg, Strategy::default(), 3, InitOverride::default(), &mut log, None).unwrap();
        assert_eq!(s.coevo_steps, 1);
        assert_eq!(s.t, s.cfg.tau_max);
        let evals = log.records.iter().filter(|r| r.event == Event::SewEval).count();
        assert_eq!(evals, 1);
    }

    #[test]
    fn zero_budget_returns_initial_state() {
        let mut cfg = tiny();
        cfg.budget = 0;
        let mut log = MetricsLog::in_memory();
        let s = train(cfg, Strategy::default(), 3, InitOverride::default(), &mut log, None).unwrap();
        assert_eq!((s.t, s.coevo_steps), (0, 0));
        assert!(log.records.is_empty());
    }

    #[test]
    fn window_shapes_and_duplicate_columns() {
        let mut s = CoEvoState::new(tiny(), Strategy::default(), 5, InitOverride::default()).unwrap();
        let m = s.short_eval_window().unwrap();
        assert_eq!((m.returns.len(), m.returns[0].len()), (1, 1));
        let e = *s.sew.current_env().unwrap();
        s.sew.push_env(SewEnv { id: 9, ..e });
        let m = s.short_eval_window().unwrap();
        assert_eq!(m.returns[0][0], m.returns[0][1]);
    }

    #[test]
    fn thresholds_pick_one_branch() {
        let s = CoEvoState::new(tiny(), Strategy::default(), 5, InitOverride::default()).unwrap();
        assert_eq!(s.decide(Some(1.0), Some(1.0), 0.5, 0.5), (false, false));
        assert_eq!(s.decide(Some(0.1), Some(0.1), 0.5, 0.5), (true, false));
        assert_eq!(s.decide(Some(1.0), Some(0.1), 0.5, 0.5), (false, true));
        assert_eq!(s.decide(None, None, 0.5, 0.5), (false, false));
    }
}
