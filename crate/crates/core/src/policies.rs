//! The three actors and their critics: control (per-joint torques),
//! morphology (topology and attribute edits) and environment (terrain
//! parameter edits).

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::morphology::{MorphAction, Morphology, TopologyChoice, ATTR_DIM};
use crate::nets::{
    categorical_log_prob_grad, categorical_sample, gaussian_log_prob, gaussian_log_prob_grad,
    gaussian_sample, log_softmax, Dense, GraphCache, GraphNet, Mlp, NetError, ParamVector,
};
use crate::ppo::ActorCritic;
use crate::rng::Rng;
use crate::sim2d::{EnvBounds, EnvKind, EnvParams, OBS_DIM};

/// Per-node input width of the control networks: observation and attributes.
pub const CONTROL_FEATURES: usize = OBS_DIM + ATTR_DIM;
/// Per-node input width of the morphology and environment encoders.
pub const MORPH_FEATURES: usize = ATTR_DIM + 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub control_hidden: Vec<usize>,
    pub control_value_hidden: Vec<usize>,
    pub morph_hidden: Vec<usize>,
    pub morph_value_hidden: Vec<usize>,
    pub env_encoder_hidden: Vec<usize>,
    pub env_hidden: Vec<usize>,
    pub env_value_hidden: Vec<usize>,
    /// Largest attribute change per morphology step, in normalized units.
    pub attr_delta_bound: f64,
    /// Environment step size as a fraction of each parameter's range.
    pub env_step_fraction: f64,
    pub init_log_std: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            control_hidden: vec![64, 64, 64],
            control_value_hidden: vec![64, 64, 64],
            morph_hidden: vec![256, 256, 256],
            morph_value_hidden: vec![64, 64, 64],
            env_encoder_hidden: vec![64, 64, 64],
            env_hidden: vec![200, 200],
            env_value_hidden: vec![512, 256],
            attr_delta_bound: 0.1,
            env_step_fraction: 0.1,
            init_log_std: 0.0,
        }
    }
}

impl PolicyConfig {
    /// Every hidden width replaced by `w` (used for cheap runs and tests).
    pub fn with_width(w: usize) -> Self {
        let d = Self::default();
        let f = |v: &Vec<usize>| vec![w; v.len()];
        Self {
            control_hidden: f(&d.control_hidden),
            control_value_hidden: f(&d.control_value_hidden),
            morph_hidden: f(&d.morph_hidden),
            morph_value_hidden: f(&d.morph_value_hidden),
            env_encoder_hidden: f(&d.env_encoder_hidden),
            env_hidden: f(&d.env_hidden),
            env_value_hidden: f(&d.env_value_hidden),
            ..d
        }
    }
}

/// Tree structure shared by every observation of one morphology.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphInfo {
    pub nbrs: Vec<Vec<usize>>,
    pub head: usize,
}

impl GraphInfo {
    pub fn of(m: &Morphology) -> Self {
        Self {
            nbrs: m.neighbor_lists(),
            head: m.head_index().unwrap_or(0),
        }
    }

    pub fn len(&self) -> usize {
        self.nbrs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nbrs.is_empty()
    }
}

/// Structural node features: attributes, head flag, depth, child count and
/// tree size, all roughly in `[-1, 1]`.
pub fn morph_features(m: &Morphology) -> Vec<f64> {
    let depths = m.depths();
    let parents = m.parent_indices();
    let mut children = vec![0usize; m.len()];
    for p in parents.iter().flatten() {
        children[*p] += 1;
    }
    let size = m.len() as f64 / m.max_nodes().max(1) as f64;
    let mut out = Vec::with_capacity(m.len() * MORPH_FEATURES);
    for (i, node) in m.nodes().iter().enumerate() {
        out.extend_from_slice(&node.attrs);
        out.push(if parents[i].is_none() { 1.0 } else { 0.0 });
        out.push(depths[i] as f64 / 4.0);
        out.push(children[i] as f64 / 3.0);
        out.push(size);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlObs {
    /// Row-major `nodes x CONTROL_FEATURES`.
    pub features: Vec<f64>,
    pub graph: Arc<GraphInfo>,
}

impl ControlObs {
    pub fn new(obs: &[[f64; OBS_DIM]], m: &Morphology, graph: Arc<GraphInfo>) -> Self {
        let mut features = Vec::with_capacity(obs.len() * CONTROL_FEATURES);
        for (o, node) in obs.iter().zip(m.nodes()) {
            features.extend_from_slice(o);
            features.extend_from_slice(&node.attrs);
        }
        Self { features, graph }
    }
}

/// Per-node outputs of a dense layer applied to every row of `h`.
fn rows_forward(d: &Dense, p: &[f64], h: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * d.out];
    for u in 0..n {
        d.forward(p, &h[u * d.inp..(u + 1) * d.inp], &mut out[u * d.out..(u + 1) * d.out]);
    }
    out
}

fn rows_backward(d: &Dense, p: &[f64], h: &[f64], dy: &[f64], n: usize, grad: &mut [f64]) -> Vec<f64> {
    let mut dh = vec![0.0; n * d.inp];
    for u in 0..n {
        d.backward(
            p,
            &h[u * d.inp..(u + 1) * d.inp],
            &dy[u * d.out..(u + 1) * d.out],
            grad,
            Some(&mut dh[u * d.inp..(u + 1) * d.inp]),
        );
    }
    dh
}

/// GNN trunk with a scalar per node, averaged into one value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphValue {
    pub trunk: GraphNet,
    pub out: Dense,
}

impl GraphValue {
    fn new(params: &mut ParamVector, input: usize, hidden: &[usize]) -> Self {
        let trunk = GraphNet::new(params, "value.gnn", input, hidden);
        let out = Dense::new(params, "value.out", trunk.output_size(), 1);
        Self { trunk, out }
    }

    fn init(&self, p: &mut [f64], rng: &mut Rng) {
        self.trunk.init(p, rng);
        self.out.init(p, 1.0, rng);
    }

    fn eval(
        &self,
        p: &[f64],
        nbrs: &[Vec<usize>],
        x: &[f64],
        grad: Option<(&mut [f64], &mut dyn FnMut(f64) -> f64)>,
    ) -> Result<f64, NetError> {
        let n = nbrs.len();
        let cache = self.trunk.forward(p, nbrs, x)?;
        let per_node = rows_forward(&self.out, p, cache.output(), n);
        let v = per_node.iter().sum::<f64>() / n as f64;
        if let Some((g, scale)) = grad {
            let s = scale(v) / n as f64;
            let dh = rows_backward(&self.out, p, cache.output(), &vec![s; n], n, g);
            self.trunk.backward(p, nbrs, &cache, &dh, g);
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlStep {
    /// Raw Gaussian sample per node; the head entry is unused and zero.
    pub action: Vec<f64>,
    /// Simulator input: the sample clipped to `[-1, 1]`, head zero.
    pub torques: Vec<f64>,
    pub log_prob: f64,
    pub value: f64,
}

/// GNN trunk with a per-node Gaussian torque head. The head node has no
/// motor and contributes nothing to the log-probability.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlPolicy {
    pub policy: ParamVector,
    pub value: ParamVector,
    trunk: GraphNet,
    mean: Dense,
    log_std: usize,
    critic: GraphValue,
}

impl ControlPolicy {
    pub fn new(cfg: &PolicyConfig, rng: &mut Rng) -> Self {
        let mut policy = ParamVector::new();
        let trunk = GraphNet::new(&mut policy, "gnn", CONTROL_FEATURES, &cfg.control_hidden);
        let mean = Dense::new(&mut policy, "mean", trunk.output_size(), 1);
        let log_std = policy.alloc("log_std", &[1]);
        trunk.init(&mut policy.values, rng);
        mean.init(&mut policy.values, 0.01, rng);
        policy.values[log_std] = cfg.init_log_std;
        let mut value = ParamVector::new();
        let critic = GraphValue::new(&mut value, CONTROL_FEATURES, &cfg.control_value_hidden);
        critic.init(&mut value.values, rng);
        Self { policy, value, trunk, mean, log_std, critic }
    }

    fn means(&self, obs: &ControlObs) -> Result<(GraphCache, Vec<f64>), NetError> {
        let p = &self.policy.values;
        let cache = self.trunk.forward(p, &obs.graph.nbrs, &obs.features)?;
        let means = rows_forward(&self.mean, p, cache.output(), obs.graph.len());
        Ok((cache, means))
    }

    pub fn act(&self, obs: &ControlObs, deterministic: bool, rng: &mut Rng) -> Result<ControlStep, NetError> {
        let (_, means) = self.means(obs)?;
        let ls = self.policy.values[self.log_std];
        let mut action = gaussian_sample(&means, &vec![ls; means.len()], deterministic, rng);
        action[obs.graph.head] = 0.0;
        let torques = action.iter().map(|a| a.clamp(-1.0, 1.0)).collect();
        let log_prob = self.log_prob_from_means(&means, ls, &action, obs.graph.head);
        let value = self.value(obs)?;
        Ok(ControlStep { action, torques, log_prob, value })
    }

    /// Deterministic torques (clipped means) without evaluating the critic.
    pub fn mean_torques(&self, obs: &ControlObs) -> Result<Vec<f64>, NetError> {
        let (_, mut means) = self.means(obs)?;
        means[obs.graph.head] = 0.0;
        means.iter_mut().for_each(|m| *m = m.clamp(-1.0, 1.0));
        Ok(means)
    }

    fn log_prob_from_means(&self, means: &[f64], ls: f64, action: &[f64], head: usize) -> f64 {
        (0..means.len())
            .filter(|&u| u != head)
            .map(|u| gaussian_log_prob(&[means[u]], &[ls], &[action[u]]))
            .sum()
    }
}

impl ActorCritic for ControlPolicy {
    type Obs = ControlObs;
    type Action = Vec<f64>;

    fn policy_params(&self) -> &ParamVector {
        &self.policy
    }
    fn policy_params_mut(&mut self) -> &mut ParamVector {
        &mut self.policy
    }
    fn value_params(&self) -> &ParamVector {
        &self.value
    }
    fn value_params_mut(&mut self) -> &mut ParamVector {
        &mut self.value
    }

    fn log_prob(&self, obs: &ControlObs, action: &Vec<f64>) -> Result<f64, NetError> {
        let (_, means) = self.means(obs)?;
        check_action(means.len(), action.len())?;
        Ok(self.log_prob_from_means(&means, self.policy.values[self.log_std], action, obs.graph.head))
    }

    fn log_prob_grad(
        &self,
        obs: &ControlObs,
        action: &Vec<f64>,
        grad: &mut [f64],
        scale: &mut dyn FnMut(f64) -> f64,
    ) -> Result<f64, NetError> {
        let (cache, means) = self.means(obs)?;
        check_action(means.len(), action.len())?;
        let ls = self.policy.values[self.log_std];
        let lp = self.log_prob_from_means(&means, ls, action, obs.graph.head);
        let s = scale(lp);
        if s == 0.0 {
            return Ok(lp);
        }
        let n = means.len();
        let mut dmean = vec![0.0; n];
        for u in (0..n).filter(|&u| u != obs.graph.head) {
            let (dm, dls) = gaussian_log_prob_grad(&[means[u]], &[ls], &[action[u]]);
            dmean[u] = s * dm[0];
            grad[self.log_std] += s * dls[0];
        }
        let p = &self.policy.values;
        let dh = rows_backward(&self.mean, p, cache.output(), &dmean, n, grad);
        self.trunk.backward(p, &obs.graph.nbrs, &cache, &dh, grad);
        Ok(lp)
    }

    fn value(&self, obs: &ControlObs) -> Result<f64, NetError> {
        self.critic.eval(&self.value.values, &obs.graph.nbrs, &obs.features, None)
    }

    fn value_grad(
        &self,
        obs: &ControlObs,
        grad: &mut [f64],
        scale: &mut dyn FnMut(f64) -> f64,
    ) -> Result<f64, NetError> {
        self.critic.eval(&self.value.values, &obs.graph.nbrs, &obs.features, Some((grad, scale)))
    }
}

fn check_action(expected: usize, got: usize) -> Result<(), NetError> {
    if expected == got {
        Ok(())
    } else {
        Err(NetError::Shape { what: "action length", expected, got })
    }
}

/// Raw sample of the morphology policy: a topology class per node and an
/// unbounded attribute delta per node (row-major `nodes x ATTR_DIM`).
#[derive(Debug, Clone, PartialEq)]
pub struct MorphSample {
    pub topology: Vec<usize>,
    pub raw_deltas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MorphStep {
    pub sample: MorphSample,
    pub action: MorphAction,
    pub log_prob: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MorphologyPolicy {
    pub policy: ParamVector,
    pub value: ParamVector,
    trunk: GraphNet,
    logits: Dense,
    delta_mean: Dense,
    log_std: usize,
    critic: GraphValue,
    pub attr_delta_bound: f64,
}

/// A morphology observation with its features precomputed.
#[derive(Debug, Clone, PartialEq)]
pub struct MorphObs {
    pub morph: Morphology,
    pub features: Vec<f64>,
    pub graph: GraphInfo,
}

impl MorphObs {
    pub fn new(morph: &Morphology) -> Self {
        Self {
            morph: morph.clone(),
            features: morph_features(morph),
            graph: GraphInfo::of(morph),
        }
    }
}

struct MorphHeads {
    cache: GraphCache,
    logits: Vec<f64>,
    means: Vec<f64>,
}

impl MorphologyPolicy {
    pub fn new(cfg: &PolicyConfig, rng: &mut Rng) -> Self {
        let mut policy = ParamVector::new();
        let trunk = GraphNet::new(&mut policy, "gnn", MORPH_FEATURES, &cfg.morph_hidden);
        let h = trunk.output_size();
        let logits = Dense::new(&mut policy, "topology", h, TopologyChoice::ALL.len());
        let delta_mean = Dense::new(&mut policy, "attr_mean", h, ATTR_DIM);
        let log_std = policy.alloc("attr_log_std", &[ATTR_DIM]);
        trunk.init(&mut policy.values, rng);
        logits.init(&mut policy.values, 0.01, rng);
        delta_mean.init(&mut policy.values, 0.01, rng);
        policy.values[log_std..log_std + ATTR_DIM].fill(cfg.init_log_std);
        let mut value = ParamVector::new();
        let critic = GraphValue::new(&mut value, MORPH_FEATURES, &cfg.morph_value_hidden);
        critic.init(&mut value.values, rng);
        Self {
            policy,
            value,
            trunk,
            logits,
            delta_mean,
            log_std,
            critic,
            attr_delta_bound: cfg.attr_delta_bound,
        }
    }

    fn heads(&self, obs: &MorphObs) -> Result<MorphHeads, NetError> {
        let p = &self.policy.values;
        let cache = self.trunk.forward(p, &obs.graph.nbrs, &obs.features)?;
        let n = obs.graph.len();
        let logits = rows_forward(&self.logits, p, cache.output(), n);
        let means = rows_forward(&self.delta_mean, p, cache.output(), n);
        Ok(MorphHeads { cache, logits, means })
    }

    fn log_std(&self) -> &[f64] {
        &self.policy.values[self.log_std..self.log_std + ATTR_DIM]
    }

    /// Bounded attribute edits and topology choices ready for `apply_action`.
    pub fn to_action(&self, s: &MorphSample) -> MorphAction {
        let b = self.attr_delta_bound;
        MorphAction {
            topology: s.topology.iter().map(|&k| TopologyChoice::from_index(k)).collect(),
            attr_deltas: s
                .raw_deltas
                .chunks(ATTR_DIM)
                .map(|c| std::array::from_fn(|i| b * c[i].clamp(-1.0, 1.0)))
                .collect(),
        }
    }

    pub fn act(&self, obs: &MorphObs, deterministic: bool, rng: &mut Rng) -> Result<MorphStep, NetError> {
        let h = self.heads(obs)?;
        let n = obs.graph.len();
        let k = TopologyChoice::ALL.len();
        let mut topology = Vec::with_capacity(n);
        let mut raw_deltas = Vec::with_capacity(n * ATTR_DIM);
        for u in 0..n {
            topology.push(categorical_sample(&h.logits[u * k..(u + 1) * k], deterministic, rng)?);
            raw_deltas.extend(gaussian_sample(
                &h.means[u * ATTR_DIM..(u + 1) * ATTR_DIM],
                self.log_std(),
                deterministic,
                rng,
            ));
        }
        let sample = MorphSample { topology, raw_deltas };
        let log_prob = self.log_prob_from_heads(&h, &sample)?;
        Ok(MorphStep {
            action: self.to_action(&sample),
            sample,
            log_prob,
            value: self.value(obs)?,
        })
    }

    fn log_prob_from_heads(&self, h: &MorphHeads, s: &MorphSample) -> Result<f64, NetError> {
        let k = TopologyChoice::ALL.len();
        let mut lp = 0.0;
        for (u, &c) in s.topology.iter().enumerate() {
            lp += log_softmax(&h.logits[u * k..(u + 1) * k])?[c];
            lp += gaussian_log_prob(
                &h.means[u * ATTR_DIM..(u + 1) * ATTR_DIM],
                self.log_std(),
                &s.raw_deltas[u * ATTR_DIM..(u + 1) * ATTR_DIM],
            );
        }
        Ok(lp)
    }

    fn check_sample(&self, n: usize, s: &MorphSample) -> Result<(), NetError> {
        check_action(n, s.topology.len())?;
        check_action(n * ATTR_DIM, s.raw_deltas.len())?;
        if let Some(&bad) = s.topology.iter().find(|&&c| c >= TopologyChoice::ALL.len()) {
            return Err(NetError::Shape { what: "topology class", expected: 3, got: bad });
        }
        Ok(())
    }
}

impl ActorCritic for MorphologyPolicy {
    type Obs = MorphObs;
    type Action = MorphSample;

    fn policy_params(&self) -> &ParamVector {
        &self.policy
    }
    fn policy_params_mut(&mut self) -> &mut ParamVector {
        &mut self.policy
    }
    fn value_params(&self) -> &ParamVector {
        &self.value
    }
    fn value_params_mut(&mut self) -> &mut ParamVector {
        &mut self.value
    }

    fn log_prob(&self, obs: &MorphObs, action: &MorphSample) -> Result<f64, NetError> {
        self.check_sample(obs.graph.len(), action)?;
        let h = self.heads(obs)?;
        self.log_prob_from_heads(&h, action)
    }

    fn log_prob_grad(
        &self,
        obs: &MorphObs,
        action: &MorphSample,
        grad: &mut [f64],
        scale: &mut dyn FnMut(f64) -> f64,
    ) -> Result<f64, NetError> {
        let n = obs.graph.len();
        self.check_sample(n, action)?;
        let h = self.heads(obs)?;
        let lp = self.log_prob_from_heads(&h, action)?;
        let s = scale(lp);
        if s == 0.0 {
            return Ok(lp);
        }
        let k = TopologyChoice::ALL.len();
        let mut dlogits = vec![0.0; n * k];
        let mut dmeans = vec![0.0; n * ATTR_DIM];
        for u in 0..n {
            let g = categorical_log_prob_grad(&h.logits[u * k..(u + 1) * k], action.topology[u])?;
            for (d, gi) in dlogits[u * k..(u + 1) * k].iter_mut().zip(g) {
                *d = s * gi;
            }
            let rows = u * ATTR_DIM..(u + 1) * ATTR_DIM;
            let (dm, dls) = gaussian_log_prob_grad(&h.means[rows.clone()], self.log_std(), &action.raw_deltas[rows.clone()]);
            for i in 0..ATTR_DIM {
                dmeans[rows.start + i] = s * dm[i];
                grad[self.log_std + i] += s * dls[i];
            }
        }
        let p = &self.policy.values;
        let mut dh = rows_backward(&self.logits, p, h.cache.output(), &dlogits, n, grad);
        let dh2 = rows_backward(&self.delta_mean, p, h.cache.output(), &dmeans, n, grad);
        dh.iter_mut().zip(dh2).for_each(|(a, b)| *a += b);
        self.trunk.backward(p, &obs.graph.nbrs, &h.cache, &dh, grad);
        Ok(lp)
    }

    fn value(&self, obs: &MorphObs) -> Result<f64, NetError> {
        self.critic.eval(&self.value.values, &obs.graph.nbrs, &obs.features, None)
    }

    fn value_grad(
        &self,
        obs: &MorphObs,
        grad: &mut [f64],
        scale: &mut dyn FnMut(f64) -> f64,
    ) -> Result<f64, NetError> {
        self.critic.eval(&self.value.values, &obs.graph.nbrs, &obs.features, Some((grad, scale)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvObs {
    pub morph: MorphObs,
    pub params: EnvParams,
}

impl EnvObs {
    pub fn new(morph: &Morphology, params: EnvParams) -> Self {
        Self { morph: MorphObs::new(morph), params }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvStep {
    /// Unclipped Gaussian sample, one entry per tunable parameter.
    pub action: Vec<f64>,
    pub params: EnvParams,
    pub log_prob: f64,
    pub value: f64,
}

/// MLP over the mean-pooled GNN embedding of the morphology and the
/// normalized current parameters, with a Gaussian head over parameter deltas.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvironmentPolicy {
    pub policy: ParamVector,
    pub value: ParamVector,
    encoder: GraphNet,
    mlp: Mlp,
    log_std: usize,
    critic: Mlp,
    pub kind: EnvKind,
    pub bounds: EnvBounds,
    pub step_fraction: f64,
}

impl EnvironmentPolicy {
    pub fn new(kind: EnvKind, bounds: EnvBounds, cfg: &PolicyConfig, rng: &mut Rng) -> Self {
        let k = bounds.ranges(kind).len();
        let mut policy = ParamVector::new();
        let encoder = GraphNet::new(&mut policy, "encoder", MORPH_FEATURES, &cfg.env_encoder_hidden);
        let mut sizes = vec![encoder.output_size() + k];
        sizes.extend(&cfg.env_hidden);
        sizes.push(k);
        let mlp = Mlp::new(&mut policy, "mlp", &sizes);
        let log_std = policy.alloc("log_std", &[k]);
        encoder.init(&mut policy.values, rng);
        mlp.init(&mut policy.values, 0.01, rng);
        policy.values[log_std..log_std + k].fill(cfg.init_log_std);
        let mut value = ParamVector::new();
        let mut vsizes = vec![MORPH_FEATURES + k];
        vsizes.extend(&cfg.env_value_hidden);
        vsizes.push(1);
        let critic = Mlp::new(&mut value, "value", &vsizes);
        critic.init(&mut value.values, 1.0, rng);
        Self {
            policy,
            value,
            encoder,
            mlp,
            log_std,
            critic,
            kind,
            bounds,
            step_fraction: cfg.env_step_fraction,
        }
    }

    pub fn dims(&self) -> usize {
        self.bounds.ranges(self.kind).len()
    }

    /// Tunable parameters mapped linearly onto `[-1, 1]`.
    pub fn normalized(&self, params: &EnvParams) -> Vec<f64> {
        params
            .tunable()
            .iter()
            .zip(self.bounds.ranges(self.kind))
            .map(|(v, (lo, hi))| 2.0 * (v - lo) / (hi - lo) - 1.0)
            .collect()
    }

    /// `clip(theta + step_fraction * range * action)`.
    pub fn apply(&self, params: &EnvParams, action: &[f64]) -> EnvParams {
        let vals: Vec<f64> = params
            .tunable()
            .iter()
            .zip(self.bounds.ranges(self.kind))
            .zip(action)
            .map(|((v, (lo, hi)), a)| v + self.step_fraction * (hi - lo) * a)
            .collect();
        params.with_tunable(&vals).clipped(&self.bounds)
    }

    fn check_obs(&self, obs: &EnvObs) -> Result<(), NetError> {
        if obs.params.env_kind != self.kind {
            return Err(NetError::Shape {
                what: "environment kind",
                expected: self.dims(),
                got: obs.params.tunable().len(),
            });
        }
        Ok(())
    }

    fn mean(&self, obs: &EnvObs) -> Result<(GraphCache, crate::nets::MlpCache), NetError> {
        self.check_obs(obs)?;
        let p = &self.policy.values;
        let g = &obs.morph.graph;
        let cache = self.encoder.forward(p, &g.nbrs, &obs.morph.features)?;
        let width = self.encoder.output_size();
        let n = g.len() as f64;
        let mut x = vec![0.0; width];
        for row in cache.output().chunks(width) {
            x.iter_mut().zip(row).for_each(|(a, b)| *a += b / n);
        }
        x.extend(self.normalized(&obs.params));
        let mcache = self.mlp.forward(p, &x)?;
        Ok((cache, mcache))
    }

    pub fn act(&self, obs: &EnvObs, deterministic: bool, rng: &mut Rng) -> Result<EnvStep, NetError> {
        let (_, m) = self.mean(obs)?;
        let ls = &self.policy.values[self.log_std..self.log_std + self.dims()];
        let action = gaussian_sample(m.output(), ls, deterministic, rng);
        let log_prob = gaussian_log_prob(m.output(), ls, &action);
        Ok(EnvStep {
            params: self.apply(&obs.params, &action),
            action,
            log_prob,
            value: self.value(obs)?,
        })
    }

    fn critic_input(&self, obs: &EnvObs) -> Vec<f64> {
        let n = obs.morph.graph.len() as f64;
        let mut x = vec![0.0; MORPH_FEATURES];
        for row in obs.morph.features.chunks(MORPH_FEATURES) {
            x.iter_mut().zip(row).for_each(|(a, b)| *a += b / n);
        }
        x.extend(self.normalized(&obs.params));
        x
    }
}

impl ActorCritic for EnvironmentPolicy {
    type Obs = EnvObs;
    type Action = Vec<f64>;

    fn policy_params(&self) -> &ParamVector {
        &self.policy
    }
    fn policy_params_mut(&mut self) -> &mut ParamVector {
        &mut self.policy
    }
    fn value_params(&self) -> &ParamVector {
        &self.value
    }
    fn value_params_mut(&mut self) -> &mut ParamVector {
        &mut self.value
    }

    fn log_prob(&self, obs: &EnvObs, action: &Vec<f64>) -> Result<f64, NetError> {
        check_action(self.dims(), action.len())?;
        let (_, m) = self.mean(obs)?;
        let ls = &self.policy.values[self.log_std..self.log_std + self.dims()];
        Ok(gaussian_log_prob(m.output(), ls, action))
    }

    fn log_prob_grad(
        &self,
        obs: &EnvObs,
        action: &Vec<f64>,
        grad: &mut [f64],
        scale: &mut dyn FnMut(f64) -> f64,
    ) -> Result<f64, NetError> {
        check_action(self.dims(), action.len())?;
        let (cache, m) = self.mean(obs)?;
        let k = self.dims();
        let ls = &self.policy.values[self.log_std..self.log_std + k];
        let lp = gaussian_log_prob(m.output(), ls, action);
        let s = scale(lp);
        if s == 0.0 {
            return Ok(lp);
        }
        let (dm, dls) = gaussian_log_prob_grad(m.output(), ls, action);
        for i in 0..k {
            grad[self.log_std + i] += s * dls[i];
        }
        let dout: Vec<f64> = dm.iter().map(|d| s * d).collect();
        let p = &self.policy.values;
        let dx = self.mlp.backward(p, &m, &dout, grad);
        let width = self.encoder.output_size();
        let n = obs.morph.graph.len();
        let dpool: Vec<f64> = dx[..width].iter().map(|d| d / n as f64).collect();
        let dh: Vec<f64> = (0..n).flat_map(|_| dpool.iter().copied()).collect();
        self.encoder.backward(p, &obs.morph.graph.nbrs, &cache, &dh, grad);
        Ok(lp)
    }

    fn value(&self, obs: &EnvObs) -> Result<f64, NetError> {
        self.check_obs(obs)?;
        let c = self.critic.forward(&self.value.values, &self.critic_input(obs))?;
        Ok(c.output()[0])
    }

    fn value_grad(
        &self,
        obs: &EnvObs,
        grad: &mut [f64],
        scale: &mut dyn FnMut(f64) -> f64,
    ) -> Result<f64, NetError> {
        self.check_obs(obs)?;
        let c = self.critic.forward(&self.value.values, &self.critic_input(obs))?;
        let v = c.output()[0];
        let s = scale(v);
        self.critic.backward(&self.value.values, &c, &[s], grad);
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::morphology::JointNode;
    use crate::rng::rng_from_seed;

    fn small() -> PolicyConfig {
        PolicyConfig::with_width(8)
    }

    fn chain4() -> Morphology {
        let mut nodes = vec![JointNode { id: 0, parent: None, attrs: [0.0; 5] }];
        for i in 1..4 {
            nodes.push(JointNode { id: i, parent: Some(i - 1), attrs: [0.1 * i as f64; 5] });
        }
        Morphology::from_nodes(nodes, 16)
    }

    fn control_obs(m: &Morphology) -> ControlObs {
        let obs: Vec<[f64; OBS_DIM]> = (0..m.len()).map(|i| [0.1 * i as f64; OBS_DIM]).collect();
        ControlObs::new(&obs, m, Arc::new(GraphInfo::of(m)))
    }

    #[test]
    fn head_only_agent_gets_one_torque() {
        let mut rng = rng_from_seed(0);
        let pi = ControlPolicy::new(&small(), &mut rng);
        let m = Morphology::initial(0).unwrap();
        let step = pi.act(&control_obs(&m), false, &mut rng).unwrap();
        assert_eq!(step.torques, vec![0.0]);
        assert_eq!(step.log_prob, 0.0);
    }

    #[test]
    fn control_deterministic_is_mean_and_seeded_is_reproducible() {
        let mut rng = rng_from_seed(1);
        let pi = ControlPolicy::new(&small(), &mut rng);
        let m = chain4();
        let obs = control_obs(&m);
        let (_, means) = pi.means(&obs).unwrap();
        let det = pi.act(&obs, true, &mut rng).unwrap();
        assert_eq!(&det.action[1..], &means[1..]);
        let a = pi.act(&obs, false, &mut rng_from_seed(5)).unwrap();
        let b = pi.act(&obs, false, &mut rng_from_seed(5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.log_prob, pi.log_prob(&obs, &a.action).unwrap());
    }

    #[test]
    fn forced_no_change_gives_identity_action() {
        let mut rng = rng_from_seed(2);
        let mut pm = MorphologyPolicy::new(&small(), &mut rng);
        let (lw, lb) = (pm.logits.w, pm.logits.b);
        let h = pm.logits.inp;
        pm.policy.values[lw..lw + 3 * h].fill(0.0);
        pm.policy.values[lb..lb + 3].copy_from_slice(&[0.0, 0.0, 10.0]);
        let (mw, mb) = (pm.delta_mean.w, pm.delta_mean.b);
        pm.policy.values[mw..mb + ATTR_DIM].fill(0.0);
        let m = chain4();
        let step = pm.act(&MorphObs::new(&m), true, &mut rng).unwrap();
        assert_eq!(step.action, MorphAction::identity(m.len()));
        let (next, _) = m.apply_action(&step.action).unwrap();
        assert_eq!(next, m);
    }

    #[test]
    fn morph_log_prob_is_consistent_and_actions_apply() {
        let mut rng = rng_from_seed(3);
        let pm = MorphologyPolicy::new(&small(), &mut rng);
        let mut m = Morphology::initial(2).unwrap();
        for _ in 0..30 {
            let obs = MorphObs::new(&m);
            let step = pm.act(&obs, false, &mut rng).unwrap();
            assert!((step.log_prob - pm.log_prob(&obs, &step.sample).unwrap()).abs() < 1e-12);
            assert!(step.action.attr_deltas.iter().flatten().all(|d| d.abs() <= 0.1));
            m = m.apply_action(&step.action).unwrap().0;
            assert!(m.validate().is_ok());
        }
    }

    #[test]
    fn env_zero_head_keeps_params_and_clips_variance() {
        let mut rng = rng_from_seed(4);
        let bounds = EnvBounds::default();
        let mut pe = EnvironmentPolicy::new(EnvKind::RoughTerrain, bounds, &small(), &mut rng);
        let last = *pe.mlp.layers.last().unwrap();
        pe.policy.values[last.w..last.b + last.out].fill(0.0);
        let params = EnvParams::rough(1.0, 3.0);
        let obs = EnvObs::new(&Morphology::initial(2).unwrap(), params);
        let step = pe.act(&obs, true, &mut rng).unwrap();
        assert_eq!(step.params, params);
        let pushed = pe.apply(&EnvParams::rough(1.0, 7.0), &[0.0, 5.0]);
        assert_eq!(pushed.height_variance, 7.2);
        let a = pe.act(&obs, false, &mut rng_from_seed(9)).unwrap();
        let b = pe.act(&obs, false, &mut rng_from_seed(9)).unwrap();
        assert_eq!(a, b);
        assert!(a.params.validate(&bounds).is_ok());
        assert_eq!(a.log_prob, pe.log_prob(&obs, &a.action).unwrap());
    }

    #[test]
    fn env_pooling_ignores_node_relabeling() {
        let mut rng = rng_from_seed(6);
        let pe = EnvironmentPolicy::new(EnvKind::RoughTerrain, EnvBounds::default(), &small(), &mut rng);
        let m = chain4();
        let mut nodes = m.nodes().to_vec();
        nodes.reverse();
        for n in &mut nodes {
            n.id += 10;
            n.parent = n.parent.map(|p| p + 10);
        }
        let relabeled = Morphology::from_nodes(nodes, 16);
        let params = EnvParams::rough(1.0, 3.0);
        let a = pe.act(&EnvObs::new(&m, params), true, &mut rng).unwrap();
        let b = pe.act(&EnvObs::new(&relabeled, params), true, &mut rng).unwrap();
        for (x, y) in a.action.iter().zip(&b.action) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
