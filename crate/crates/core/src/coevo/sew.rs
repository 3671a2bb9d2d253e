//! Short-evaluation-window bookkeeping and the morphology and environment
//! rewards computed from it.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::morphology::Morphology;
use crate::sim2d::EnvParams;

#[derive(Debug, Error, PartialEq)]
pub enum SewError {
    #[error("returns matrices share no {0}")]
    NoSharedAxis(&'static str),
    #[error("returns matrix has no entry for {0}")]
    Missing(&'static str),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SewMorph {
    pub id: u64,
    pub morph: Morphology,
}

/// A training environment: parameters plus the base seed its evaluation
/// terrains derive from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SewEnv {
    pub id: u64,
    pub params: EnvParams,
    pub seed: u64,
}

/// The most recent morphologies and environments, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct SewHistory {
    pub morphs: VecDeque<SewMorph>,
    pub envs: VecDeque<SewEnv>,
    pub morph_capacity: usize,
    pub env_capacity: usize,
}

impl SewHistory {
    pub fn new(morph_capacity: usize, env_capacity: usize) -> Self {
        Self {
            morphs: VecDeque::with_capacity(morph_capacity),
            envs: VecDeque::with_capacity(env_capacity),
            morph_capacity: morph_capacity.max(1),
            env_capacity: env_capacity.max(1),
        }
    }

    pub fn push_morph(&mut self, m: SewMorph) {
        if self.morphs.len() == self.morph_capacity {
            self.morphs.pop_front();
        }
        self.morphs.push_back(m);
    }

    pub fn push_env(&mut self, e: SewEnv) {
        if self.envs.len() == self.env_capacity {
            self.envs.pop_front();
        }
        self.envs.push_back(e);
    }

    pub fn current_morph(&self) -> Option<&SewMorph> {
        self.morphs.back()
    }

    pub fn current_env(&self) -> Option<&SewEnv> {
        self.envs.back()
    }

    pub fn is_empty(&self) -> bool {
        self.morphs.is_empty() || self.envs.is_empty()
    }
}

/// `returns[i][j]`: mean episode return of morphology `morph_ids[i]` in
/// environment `env_ids[j]`. The last id on each axis is the current one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReturnsMatrix {
    pub morph_ids: Vec<u64>,
    pub env_ids: Vec<u64>,
    pub returns: Vec<Vec<f64>>,
}

impl ReturnsMatrix {
    pub fn get(&self, morph: u64, env: u64) -> Option<f64> {
        let i = self.morph_ids.iter().position(|&m| m == morph)?;
        let j = self.env_ids.iter().position(|&e| e == env)?;
        Some(self.returns[i][j])
    }

    pub fn current_morph(&self) -> Option<u64> {
        self.morph_ids.last().copied()
    }

    pub fn current_env(&self) -> Option<u64> {
        self.env_ids.last().copied()
    }

    /// The environment before the current one, if the window holds two.
    pub fn previous_env(&self) -> Option<u64> {
        let n = self.env_ids.len();
        (n >= 2).then(|| self.env_ids[n - 2])
    }

    pub fn previous_morph(&self) -> Option<u64> {
        let n = self.morph_ids.len();
        (n >= 2).then(|| self.morph_ids[n - 2])
    }

    pub fn entries(&self) -> impl Iterator<Item = f64> + '_ {
        self.returns.iter().flatten().copied()
    }
}

/// Average improvement, over the environments both matrices evaluated, of
/// the current morphology's returns now against the previously current
/// morphology's returns in `prev`, minus `lambda * action_cost`.
pub fn compute_morph_reward(
    curr: &ReturnsMatrix,
    prev: &ReturnsMatrix,
    action_cost: f64,
    lambda: f64,
) -> Result<f64, SewError> {
    let now = curr.current_morph().ok_or(SewError::Missing("current morphology"))?;
    let before = prev.current_morph().ok_or(SewError::Missing("previous morphology"))?;
    let shared: Vec<u64> = curr
        .env_ids
        .iter()
        .copied()
        .filter(|e| prev.env_ids.contains(e))
        .collect();
    if shared.is_empty() {
        return Err(SewError::NoSharedAxis("environments"));
    }
    let mut total = 0.0;
    for &e in &shared {
        let a = curr.get(now, e).ok_or(SewError::Missing("current row"))?;
        let b = prev.get(before, e).ok_or(SewError::Missing("previous row"))?;
        total += a - b;
    }
    Ok(total / shared.len() as f64 - lambda * action_cost)
}

/// Learning progress of the current morphology between the current and the
/// previous environment: `R(theta_now, G) - R(theta_before, G)`, zero while
/// the window holds a single environment.
pub fn env_progress(curr: &ReturnsMatrix) -> Result<f64, SewError> {
    let g = curr.current_morph().ok_or(SewError::Missing("current morphology"))?;
    let now = curr.current_env().ok_or(SewError::Missing("current environment"))?;
    match curr.previous_env() {
        None => Ok(0.0),
        Some(before) => {
            let a = curr.get(g, now).ok_or(SewError::Missing("current environment"))?;
            let b = curr.get(g, before).ok_or(SewError::Missing("previous environment"))?;
            Ok(a - b)
        }
    }
}

/// `(r_e, P)` with `P = R(theta_now, G) - R(theta_before, G)` and
/// `r_e = P - P_prev`.
pub fn compute_env_reward(r_now: f64, r_before: f64, prev_progress: f64) -> (f64, f64) {
    let p = r_now - r_before;
    (p - prev_progress, p)
}

/// Morphology counterpart of [`env_progress`]: the current morphology against
/// the previous one, both in the current environment.
pub fn morph_progress(curr: &ReturnsMatrix) -> Result<f64, SewError> {
    let e = curr.current_env().ok_or(SewError::Missing("current environment"))?;
    let now = curr.current_morph().ok_or(SewError::Missing("current morphology"))?;
    match curr.previous_morph() {
        None => Ok(0.0),
        Some(before) => {
            let a = curr.get(now, e).ok_or(SewError::Missing("current morphology"))?;
            let b = curr.get(before, e).ok_or(SewError::Missing("previous morphology"))?;
            Ok(a - b)
        }
    }
}

/// Environment counterpart of [`compute_morph_reward`]: average over shared
/// morphologies of the current environment's returns now against the
/// previously current environment's returns in `prev`.
pub fn env_improvement(curr: &ReturnsMatrix, prev: &ReturnsMatrix) -> Result<f64, SewError> {
    let now = curr.current_env().ok_or(SewError::Missing("current environment"))?;
    let before = prev.current_env().ok_or(SewError::Missing("previous environment"))?;
    let shared: Vec<u64> = curr
        .morph_ids
        .iter()
        .copied()
        .filter(|m| prev.morph_ids.contains(m))
        .collect();
    if shared.is_empty() {
        return Err(SewError::NoSharedAxis("morphologies"));
    }
    let mut total = 0.0;
    for &m in &shared {
        total += curr.get(m, now).ok_or(SewError::Missing("current column"))?
            - prev.get(m, before).ok_or(SewError::Missing("previous column"))?;
    }
    Ok(total / shared.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(morphs: &[u64], envs: &[u64], rows: &[&[f64]]) -> ReturnsMatrix {
        ReturnsMatrix {
            morph_ids: morphs.to_vec(),
            env_ids: envs.to_vec(),
            returns: rows.iter().map(|r| r.to_vec()).collect(),
        }
    }

    #[test]
    fn identical_rows_zero_cost() {
        let m = matrix(&[0], &[0, 1], &[&[3.0, 4.0]]);
        assert_eq!(compute_morph_reward(&m, &m, 0.0, 0.01).unwrap(), 0.0);
    }

    #[test]
    fn constant_offset() {
        let prev = matrix(&[0], &[0, 1, 2], &[&[1.0, 2.0, 3.0]]);
        let curr = matrix(&[0, 1], &[0, 1, 2], &[&[9.0, 9.0, 9.0], &[3.5, 4.5, 5.5]]);
        assert!((compute_morph_reward(&curr, &prev, 0.0, 0.01).unwrap() - 2.5).abs() < 1e-15);
    }

    #[test]
    fn random_rows_match_hand_sum() {
        let prev = matrix(&[4], &[1, 2, 3, 4], &[&[0.3, -1.2, 5.5, 2.0]]);
        let curr = matrix(&[4, 5], &[1, 2, 3, 4], &[&[0.0; 4], &[1.1, 0.4, 4.0, 2.9]]);
        let hand = ((1.1 - 0.3) + (0.4 + 1.2) + (4.0 - 5.5) + (2.9 - 2.0)) / 4.0 - 0.01 * 2.5;
        assert!((compute_morph_reward(&curr, &prev, 2.5, 0.01).unwrap() - hand).abs() < 1e-12);
    }

    #[test]
    fn disjoint_axes_error() {
        let prev = matrix(&[0], &[0], &[&[1.0]]);
        let curr = matrix(&[0], &[1], &[&[1.0]]);
        assert!(compute_morph_reward(&curr, &prev, 0.0, 0.0).is_err());
        let other = matrix(&[1], &[0], &[&[1.0]]);
        assert!(env_improvement(&other, &prev).is_err());
    }

    #[test]
    fn env_reward_examples() {
        assert_eq!(compute_env_reward(2.0, 2.0, 0.0).0, 0.0);
        assert_eq!(compute_env_reward(3.0, 1.0, 2.0).0, 0.0);
        assert_eq!(compute_env_reward(5.0, 3.0, 1.0), (1.0, 2.0));
        let m = matrix(&[0], &[7, 8], &[&[3.0, 5.0]]);
        assert_eq!(env_progress(&m).unwrap(), 2.0);
        assert_eq!(env_progress(&matrix(&[0], &[7], &[&[3.0]])).unwrap(), 0.0);
    }

    #[test]
    fn history_keeps_most_recent_in_order() {
        let mut h = SewHistory::new(3, 4);
        for id in 0..5 {
            h.push_morph(SewMorph { id, morph: Morphology::initial(0).unwrap() });
        }
        let ids: Vec<u64> = h.morphs.iter().map(|m| m.id).collect();
        assert_eq!(ids, vec![2, 3, 4]);
    }
}
