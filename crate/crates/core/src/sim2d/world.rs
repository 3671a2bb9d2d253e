//! Planar articulated dynamics in generalized coordinates with penalty
//! ground contact and per-step locomotion rewards.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::body::{Body, BodyConfig, Kinematics};
use super::terrain::{EnvBounds, EnvKind, Heightfield, TerrainConfig};
use super::SimError;
use crate::morphology::Morphology;

/// Length of every per-joint observation vector:
/// `[angle, angular_velocity, root_height, root_vx, root_vz, phase]`.
pub const OBS_DIM: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KindConfig {
    pub control_dt: f64,
    pub substeps: usize,
    pub alive_bonus: f64,
    pub min_root_height: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub rough: KindConfig,
    pub gap: KindConfig,
    pub horizon: usize,
    /// Gap left between the lowest body point and the terrain at reset.
    pub clearance: f64,
    pub gravity: f64,
    /// Normal contact stiffness per unit of total body mass.
    pub contact_stiffness: f64,
    /// Contact damping per unit of total body mass, capped by `contact_damping_max`.
    pub contact_damping: f64,
    pub contact_damping_max: f64,
    pub friction: f64,
    pub joint_damping: f64,
    /// Bodies hanging deeper than this below the head cannot be placed.
    pub max_body_depth: f64,
    /// Any generalized velocity beyond this aborts the episode.
    pub state_cap: f64,
    pub body: BodyConfig,
    pub terrain: TerrainConfig,
    pub bounds: EnvBounds,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            rough: KindConfig {
                control_dt: 0.008,
                substeps: 8,
                alive_bonus: 1.0,
                min_root_height: 1.4,
            },
            gap: KindConfig {
                control_dt: 0.08,
                substeps: 80,
                alive_bonus: 0.1,
                min_root_height: 1.5,
            },
            horizon: 1000,
            clearance: 0.05,
            gravity: 9.81,
            contact_stiffness: 3000.0,
            contact_damping: 20.0,
            contact_damping_max: 250.0,
            friction: 1.0,
            joint_damping: 1.0,
            max_body_depth: 64.0,
            state_cap: 1e3,
            body: BodyConfig::default(),
            terrain: TerrainConfig::default(),
            bounds: EnvBounds::default(),
        }
    }
}

impl SimConfig {
    pub fn kind(&self, kind: EnvKind) -> &KindConfig {
        match kind {
            EnvKind::RoughTerrain => &self.rough,
            EnvKind::GapCrosser => &self.gap,
        }
    }
}

/// Generalized state: `q = [root_x, root_z, head_angle, joint angles...]`
/// with joint `j` of link `l` at index `2 + l`.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    pub q: Vec<f64>,
    pub qd: Vec<f64>,
    pub sim_time: f64,
    pub steps: usize,
    pub done: bool,
}

impl WorldState {
    pub fn root_x(&self) -> f64 {
        self.q[0]
    }

    pub fn root_z(&self) -> f64 {
        self.q[1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkState {
    pub x: f64,
    pub z: f64,
    pub angle: f64,
    pub vx: f64,
    pub vz: f64,
    pub omega: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    RootTooLow,
    Horizon,
    Unstable,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub speed: f64,
    pub alive_bonus: f64,
    pub termination: Option<Termination>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Vec<[f64; OBS_DIM]>,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

/// Reward of one control step: `|dx| / dt + alive_bonus`.
pub fn step_reward(x_before: f64, x_after: f64, kind: &KindConfig) -> (f64, f64) {
    let speed = (x_after - x_before).abs() / kind.control_dt;
    (speed + kind.alive_bonus, speed)
}

#[derive(Debug, Clone)]
pub struct World {
    body: Body,
    terrain: Arc<Heightfield>,
    kind: EnvKind,
    cfg: SimConfig,
    state: WorldState,
    kin: Kinematics,
    mass: Vec<f64>,
    rhs: Vec<f64>,
}

fn perp(r: [f64; 2]) -> [f64; 2] {
    [-r[1], r[0]]
}

fn cross(r: [f64; 2], f: [f64; 2]) -> f64 {
    r[0] * f[1] - r[1] * f[0]
}

fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

/// Factors symmetric positive definite `a` (row-major, `n x n`) in place;
/// the lower triangle then holds `L` with `a = L L^T`.
fn cholesky_factor(a: &mut [f64], n: usize) -> bool {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if d <= 0.0 || !d.is_finite() {
            return false;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    true
}

fn cholesky_solve_factored(l: &[f64], b: &mut [f64], n: usize) {
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in (i + 1)..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

#[cfg(test)]
fn cholesky_solve(a: &mut [f64], b: &mut [f64], n: usize) -> bool {
    if !cholesky_factor(a, n) {
        return false;
    }
    cholesky_solve_factored(a, b, n);
    true
}

impl World {
    /// Assembles the body at rest pose with its lowest point `clearance`
    /// above the highest terrain under its footprint, centered at `x = 0`.
    pub fn reset(
        morph: &Morphology,
        terrain: Arc<Heightfield>,
        kind: EnvKind,
        cfg: &SimConfig,
    ) -> Result<World, SimError> {
        morph.validate().map_err(SimError::InvalidMorphology)?;
        if terrain.samples.iter().any(|h| !h.is_finite()) || terrain.samples.is_empty() {
            return Err(SimError::InvalidTerrain);
        }
        let body = Body::from_morphology(morph, &cfg.body);
        let n = body.dof();
        let mut kin = Kinematics::default();
        let zeros = vec![0.0; n];
        kin.compute(&body, &zeros, &zeros);
        let (depth, lo, hi) = rest_extent(&body, &kin);
        if depth > cfg.max_body_depth {
            return Err(SimError::Placement { depth });
        }
        let ground = terrain.max_over(lo, hi);
        let mut q = zeros.clone();
        q[1] = ground + depth + cfg.clearance;
        Ok(World {
            body,
            terrain,
            kind,
            cfg: *cfg,
            state: WorldState {
                q,
                qd: zeros,
                sim_time: 0.0,
                steps: 0,
                done: false,
            },
            kin,
            mass: vec![0.0; n * n],
            rhs: vec![0.0; n],
        })
    }

    pub fn state(&self) -> &WorldState {
        &self.state
    }

    pub fn body(&self) -> &Body {
        &self.body
    }

    pub fn terrain(&self) -> &Heightfield {
        &self.terrain
    }

    pub fn kind(&self) -> EnvKind {
        self.kind
    }

    pub fn joint_count(&self) -> usize {
        self.body.links.len()
    }

    /// Overrides the generalized state (for tests and tooling).
    pub fn set_state(&mut self, q: Vec<f64>, qd: Vec<f64>) {
        assert_eq!(q.len(), self.body.dof());
        assert_eq!(qd.len(), self.body.dof());
        self.state.q = q;
        self.state.qd = qd;
    }

    pub fn link_states(&mut self) -> Vec<LinkState> {
        self.kin.compute(&self.body, &self.state.q, &self.state.qd);
        (0..self.body.links.len())
            .map(|l| {
                let c = self.kin.com(l);
                let v = self.point_velocity(l, c);
                LinkState {
                    x: c[0],
                    z: c[1],
                    angle: self.kin.angle[l],
                    vx: v[0],
                    vz: v[1],
                    omega: self.kin.omega[l],
                }
            })
            .collect()
    }

    /// Per-joint observation vectors in morphology node order.
    pub fn observe(&self) -> Vec<[f64; OBS_DIM]> {
        let s = &self.state;
        let phase = match (self.kind, self.terrain.gaps) {
            (EnvKind::GapCrosser, Some(g)) => s.q[0].rem_euclid(g.period) / g.period,
            _ => 0.0,
        };
        self.body
            .node_to_link
            .iter()
            .map(|&l| {
                if l == 0 {
                    [s.q[2], s.qd[2], s.q[1], s.qd[0], s.qd[1], phase]
                } else {
                    [s.q[2 + l], s.qd[2 + l], 0.0, 0.0, 0.0, 0.0]
                }
            })
            .collect()
    }

    fn point_velocity(&self, l: usize, p: [f64; 2]) -> [f64; 2] {
        let qd = &self.state.qd;
        let r = perp(sub(p, self.kin.origin[0]));
        let mut v = [qd[0] + r[0] * qd[2], qd[1] + r[1] * qd[2]];
        for &d in &self.body.links[l].chain {
            let r = perp(sub(p, self.kin.origin[self.body.link_of_dof(d)]));
            v[0] += r[0] * qd[d];
            v[1] += r[1] * qd[d];
        }
        v
    }

    fn apply_force(&mut self, l: usize, p: [f64; 2], f: [f64; 2]) {
        self.rhs[0] += f[0];
        self.rhs[1] += f[1];
        self.rhs[2] += cross(sub(p, self.kin.origin[0]), f);
        for &d in &self.body.links[l].chain {
            let o = self.kin.origin[self.body.link_of_dof(d)];
            self.rhs[d] += cross(sub(p, o), f);
        }
    }

    /// Advances one control step with normalized torques (one per joint, in
    /// morphology node order; the head entry is unactuated).
    pub fn step(&mut self, torques: &[f64]) -> Result<StepResult, SimError> {
        if self.state.done {
            return Err(SimError::Terminated);
        }
        if torques.len() != self.body.links.len() {
            return Err(SimError::ActionShape {
                expected: self.body.links.len(),
                got: torques.len(),
            });
        }
        if torques.iter().any(|t| !t.is_finite()) {
            return Err(SimError::NonFiniteAction);
        }
        let kc = *self.cfg.kind(self.kind);
        let mut motor = vec![0.0; self.body.dof()];
        for (node, &a) in torques.iter().enumerate() {
            let l = self.body.node_to_link[node];
            if l > 0 {
                motor[2 + l] = a.clamp(-1.0, 1.0) * self.body.links[l].gear;
            }
        }
        let saved = (self.state.q.clone(), self.state.qd.clone());
        let x_before = self.state.q[0];
        let dt = kc.control_dt / kc.substeps as f64;
        let mut stable = true;
        for _ in 0..kc.substeps {
            if !self.substep(&motor, dt) {
                stable = false;
                break;
            }
        }
        self.state.steps += 1;
        self.state.sim_time = self.state.steps as f64 * kc.control_dt;
        if !stable {
            self.state.q = saved.0;
            self.state.qd = saved.1;
            self.state.done = true;
            return Ok(StepResult {
                observation: self.observe(),
                reward: 0.0,
                done: true,
                info: StepInfo {
                    speed: 0.0,
                    alive_bonus: 0.0,
                    termination: Some(Termination::Unstable),
                },
            });
        }
        let (reward, speed) = step_reward(x_before, self.state.q[0], &kc);
        let termination = if self.state.q[1] < kc.min_root_height {
            Some(Termination::RootTooLow)
        } else if self.state.steps >= self.cfg.horizon {
            Some(Termination::Horizon)
        } else {
            None
        };
        self.state.done = termination.is_some();
        Ok(StepResult {
            observation: self.observe(),
            reward,
            done: self.state.done,
            info: StepInfo {
                speed,
                alive_bonus: kc.alive_bonus,
                termination,
            },
        })
    }

    /// Joint limits as unilateral velocity constraints: impulses along each
    /// violating hinge, resolved through the factored mass matrix so that
    /// momentum is exchanged with the rest of the body.
    fn enforce_limits(&mut self, dt: f64) {
        let n = self.body.dof();
        let nl = self.body.links.len();
        let mut accumulated = vec![0.0; nl];
        let mut col = vec![0.0; n];
        for _ in 0..4 {
            let mut active = false;
            for l in 1..nl {
                let d = 2 + l;
                let lim = self.body.links[l].limit;
                let q = self.state.q[d];
                // velocity that lands exactly on the bound, or no bound if slack
                let upper = (lim - q) / dt;
                let lower = (-lim - q) / dt;
                let qd = self.state.qd[d];
                let (target, sign) = if qd > upper || accumulated[l] < 0.0 {
                    (upper, -1.0)
                } else if qd < lower || accumulated[l] > 0.0 {
                    (lower, 1.0)
                } else {
                    continue;
                };
                col.iter_mut().for_each(|c| *c = 0.0);
                col[d] = 1.0;
                cholesky_solve_factored(&self.mass, &mut col, n);
                let mut lambda = (target - qd) / col[d];
                let total = accumulated[l] + lambda;
                // impulses may only push back inside the range
                let clamped = if sign < 0.0 { total.min(0.0) } else { total.max(0.0) };
                lambda = clamped - accumulated[l];
                accumulated[l] = clamped;
                if lambda != 0.0 {
                    active = true;
                    for k in 0..n {
                        self.state.qd[k] += lambda * col[k];
                    }
                }
            }
            if !active {
                break;
            }
        }
    }

    fn substep(&mut self, motor: &[f64], dt: f64) -> bool {
        let n = self.body.dof();
        self.kin.compute(&self.body, &self.state.q, &self.state.qd);
        self.mass.iter_mut().for_each(|m| *m = 0.0);
        self.rhs.copy_from_slice(motor);
        for d in 3..n {
            self.rhs[d] -= self.cfg.joint_damping * self.state.qd[d];
        }

        // tip bias accelerations: centripetal terms of every rotating bone
        let nl = self.body.links.len();
        let mut tip_bias = vec![[0.0; 2]; nl];
        let g = self.cfg.gravity;
        let mut cols: Vec<usize> = Vec::with_capacity(n);
        let mut jv: Vec<[f64; 2]> = Vec::with_capacity(n);
        for l in 0..nl {
            let link = &self.body.links[l];
            let w2 = self.kin.omega[l] * self.kin.omega[l];
            let bone = self.kin.bone[l];
            let parent_bias = link.parent.map_or([0.0; 2], |p| tip_bias[p]);
            tip_bias[l] = [parent_bias[0] - w2 * bone[0], parent_bias[1] - w2 * bone[1]];
            let com_bias = [
                parent_bias[0] - 0.5 * w2 * bone[0],
                parent_bias[1] - 0.5 * w2 * bone[1],
            ];
            let c = self.kin.com(l);

            cols.clear();
            jv.clear();
            cols.extend([0, 1, 2]);
            jv.extend([[1.0, 0.0], [0.0, 1.0], perp(sub(c, self.kin.origin[0]))]);
            for &d in &link.chain {
                cols.push(d);
                jv.push(perp(sub(c, self.kin.origin[self.body.link_of_dof(d)])));
            }
            let (m, inertia) = (link.mass, link.inertia);
            for (a, &ca) in cols.iter().enumerate() {
                for (b, &cb) in cols.iter().enumerate() {
                    let rot = if a >= 2 && b >= 2 { inertia } else { 0.0 };
                    self.mass[ca * n + cb] += m * (jv[a][0] * jv[b][0] + jv[a][1] * jv[b][1]) + rot;
                }
            }
            let f = [-m * com_bias[0], m * (-g - com_bias[1])];
            for (a, &ca) in cols.iter().enumerate() {
                self.rhs[ca] += jv[a][0] * f[0] + jv[a][1] * f[1];
            }
        }

        let mt = self.body.total_mass;
        let k = self.cfg.contact_stiffness * mt;
        let c = (self.cfg.contact_damping * mt).min(self.cfg.contact_damping_max);
        for l in 0..nl {
            let center = if l == 0 {
                self.kin.origin[0]
            } else {
                self.kin.contact_center(l)
            };
            let Some(h) = self.terrain.height(center[0]) else {
                continue;
            };
            let s = self.terrain.slope(center[0]);
            let norm = (1.0 + s * s).sqrt();
            let nrm = [-s / norm, 1.0 / norm];
            let r = self.body.links[l].radius;
            let pen = r - (center[1] - h) / norm;
            if pen <= 0.0 {
                continue;
            }
            let p = [center[0] - r * nrm[0], center[1] - r * nrm[1]];
            let v = self.point_velocity(l, p);
            let tan = [nrm[1], -nrm[0]];
            let vn = v[0] * nrm[0] + v[1] * nrm[1];
            let vt = v[0] * tan[0] + v[1] * tan[1];
            let fn_ = (k * pen - c * vn).max(0.0);
            let lim = self.cfg.friction * fn_;
            let ft = (-c * vt).clamp(-lim, lim);
            let f = [fn_ * nrm[0] + ft * tan[0], fn_ * nrm[1] + ft * tan[1]];
            self.apply_force(l, p, f);
        }

        if !cholesky_factor(&mut self.mass, n) {
            return false;
        }
        let mut qdd = self.rhs.clone();
        cholesky_solve_factored(&self.mass, &mut qdd, n);
        let cap = self.cfg.state_cap;
        for d in 0..n {
            self.state.qd[d] += dt * qdd[d];
        }
        self.enforce_limits(dt);
        for d in 0..n {
            self.state.q[d] += dt * self.state.qd[d];
        }
        for l in 1..nl {
            let d = 2 + l;
            let lim = self.body.links[l].limit;
            self.state.q[d] = self.state.q[d].clamp(-lim, lim);
        }
        self.state
            .qd
            .iter()
            .chain(self.state.q.iter())
            .all(|v| v.is_finite())
            && self.state.qd.iter().all(|v| v.abs() <= cap)
            && self.state.q[..2].iter().all(|v| v.abs() <= cap * 100.0)
    }
}

/// Depth of the lowest contact point below the head and the horizontal
/// footprint at rest pose.
fn rest_extent(body: &Body, kin: &Kinematics) -> (f64, f64, f64) {
    let root = kin.origin[0];
    let mut depth: f64 = 0.0;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (l, link) in body.links.iter().enumerate() {
        let c = if l == 0 { root } else { kin.contact_center(l) };
        depth = depth.max(root[1] - (c[1] - link.radius));
        lo = lo.min(c[0] - link.radius);
        hi = hi.max(c[0] + link.radius);
    }
    (depth, lo, hi)
}
