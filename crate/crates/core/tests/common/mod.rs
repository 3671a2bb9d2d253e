#![allow(dead_code)]

use coevo_core::morphology::{MorphAction, Morphology, TopologyChoice};
use coevo_core::ppo::ActorCritic;
use coevo_core::rng::rng_from_seed;
use rand::Rng;

pub fn random_morph(seed: u64, rounds: usize) -> Morphology {
    let mut rng = rng_from_seed(seed);
    let mut m = Morphology::initial(rng.random_range(0..=3)).unwrap();
    for _ in 0..rng.random_range(0..=rounds) {
        let n = m.len();
        let act = MorphAction {
            topology: (0..n)
                .map(|_| TopologyChoice::from_index(rng.random_range(0..3)))
                .collect(),
            attr_deltas: (0..n)
                .map(|_| std::array::from_fn(|_| rng.random_range(-0.5..0.5)))
                .collect(),
        };
        m = m.apply_action(&act).unwrap().0;
    }
    m
}

/// Step of the five-point stencil. Large log-probabilities make a two-point
/// difference with a tiny step lose ~1e-4 of relative accuracy to roundoff.
pub const FD_STEP: f64 = 1e-3;
/// Denominator floor for relative errors of near-zero partials.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Fourth-order central difference of `f` around 0.
pub fn stencil(mut f: impl FnMut(f64) -> f64) -> f64 {
    let h = FD_STEP;
    (f(-2.0 * h) - 8.0 * f(-h) + 8.0 * f(h) - f(2.0 * h)) / (12.0 * h)
}

/// Worst relative error between analytic and central-difference gradients of
/// `log pi(action | obs)` and `V(obs)` over the given coordinates (all when
/// `coords` is `None`).
pub fn grad_check<M: ActorCritic>(
    model: &mut M,
    obs: &M::Obs,
    action: &M::Action,
    coords: Option<(usize, u64)>,
) -> (f64, f64) {
    let mut pg = model.policy_params().zeros_like();
    model.log_prob_grad(obs, action, &mut pg, &mut |_| 1.0).unwrap();
    let mut vg = model.value_params().zeros_like();
    model.value_grad(obs, &mut vg, &mut |_| 1.0).unwrap();

    let pick = |len: usize, salt: u64| -> Vec<usize> {
        match coords {
            None => (0..len).collect(),
            Some((k, seed)) => {
                let mut rng = rng_from_seed(seed ^ salt);
                (0..k.min(len)).map(|_| rng.random_range(0..len)).collect()
            }
        }
    };
    let mut worst_p: f64 = 0.0;
    for i in pick(pg.len(), 1) {
        let x = model.policy_params().values[i];
        let fd = stencil(|d| {
            model.policy_params_mut().values[i] = x + d;
            model.log_prob(obs, action).unwrap()
        });
        model.policy_params_mut().values[i] = x;
        worst_p = worst_p.max(rel_err(pg[i], fd));
    }
    let mut worst_v: f64 = 0.0;
    for i in pick(vg.len(), 2) {
        let x = model.value_params().values[i];
        let fd = stencil(|d| {
            model.value_params_mut().values[i] = x + d;
            model.value(obs).unwrap()
        });
        model.value_params_mut().values[i] = x;
        worst_v = worst_v.max(rel_err(vg[i], fd));
    }
    (worst_p, worst_v)
}

use coevo_core::coevo::{Event, MetricRecord, ReturnsMatrix, TrainConfig};
use coevo_core::policies::PolicyConfig;
use coevo_core::ppo::PpoConfig;

/// A configuration small enough to run many co-evolution steps in seconds.
pub fn tiny_config() -> TrainConfig {
    TrainConfig {
        budget: 64 * 40,
        tau_max: 64,
        eval_episodes: 1,
        eval_horizon: 24,
        meta_batch: 4,
        ppo: PpoConfig { batch_size: 64, minibatch_size: 32, epochs: 1, ..PpoConfig::default() },
        policy: PolicyConfig::with_width(6),
        ..TrainConfig::default()
    }
}

fn entry(m: &ReturnsMatrix, morph: u64, env: u64) -> Option<f64> {
    let i = m.morph_ids.iter().position(|&x| x == morph)?;
    let j = m.env_ids.iter().position(|&x| x == env)?;
    Some(m.returns[i][j])
}

/// Largest deviations of the logged `r_m` and `r_e` from values recomputed
/// straight from the logged matrices, the logged action cost and `lambda`,
/// plus the number of steps where each reward was checked.
pub fn reward_oracle(records: &[MetricRecord], lambda: f64) -> (f64, f64, usize, usize) {
    let evals: Vec<&MetricRecord> = records.iter().filter(|r| r.event == Event::SewEval).collect();
    let (mut worst_m, mut worst_e, mut n_m, mut n_e) = (0.0f64, 0.0f64, 0, 0);
    let mut prev_p: Option<f64> = None;
    for (k, rec) in evals.iter().enumerate() {
        let cur = rec.returns_matrix.as_ref().expect("matrix logged");
        let g = *cur.morph_ids.last().unwrap();
        let e = *cur.env_ids.last().unwrap();
        let p = if cur.env_ids.len() >= 2 {
            let before = cur.env_ids[cur.env_ids.len() - 2];
            entry(cur, g, e).unwrap() - entry(cur, g, before).unwrap()
        } else {
            0.0
        };
        match prev_p {
            Some(pp) => {
                let logged = rec.r_e.expect("r_e logged after the first step");
                worst_e = worst_e.max((logged - (p - pp)).abs());
                n_e += 1;
            }
            None => assert!(rec.r_e.is_none()),
        }
        prev_p = Some(p);
        if k == 0 {
            assert!(rec.r_m.is_none());
            continue;
        }
        let prev = evals[k - 1].returns_matrix.as_ref().unwrap();
        let g_before = *prev.morph_ids.last().unwrap();
        let mut sum = 0.0;
        let mut count = 0;
        for &env in &cur.env_ids {
            if let (Some(a), Some(b)) = (entry(cur, g, env), entry(prev, g_before, env)) {
                sum += a - b;
                count += 1;
            }
        }
        if count == 0 {
            assert!(rec.r_m.is_none());
            continue;
        }
        let oracle = sum / count as f64 - lambda * rec.action_cost.unwrap();
        worst_m = worst_m.max((rec.r_m.expect("r_m logged") - oracle).abs());
        n_m += 1;
    }
    (worst_m, worst_e, n_m, n_e)
}

/// The logged cost charged at each evaluation equals the cost of the
/// morphology change made at the previous step, or zero.
pub fn costs_follow_changes(records: &[MetricRecord]) -> bool {
    let mut pending = 0.0;
    for r in records {
        match r.event {
            Event::SewEval => {
                if r.action_cost != Some(pending) {
                    return false;
                }
                pending = 0.0;
            }
            Event::MorphChange => pending = r.action_cost.unwrap(),
            _ => {}
        }
    }
    true
}

use std::sync::Arc;

use coevo_core::policies::{
    ControlObs, ControlPolicy, EnvObs, EnvironmentPolicy, GraphInfo, MorphObs, MorphologyPolicy,
};
use coevo_core::sim2d::{EnvBounds, EnvKind, EnvParams, OBS_DIM};

fn perturb(values: &mut [f64], seed: u64) {
    let mut rng = rng_from_seed(seed);
    for v in values {
        *v += rng.random_range(-0.3..0.3);
    }
}

fn control_obs(m: &Morphology, seed: u64) -> ControlObs {
    let mut rng = rng_from_seed(seed);
    let obs: Vec<[f64; OBS_DIM]> = (0..m.len())
        .map(|_| std::array::from_fn(|_| rng.random_range(-1.5..1.5)))
        .collect();
    ControlObs::new(&obs, m, Arc::new(GraphInfo::of(m)))
}

/// Worst (policy, value) relative errors of the control, morphology and
/// environment policies for one random draw of weights, morphology,
/// observation and action.
pub fn grad_draw(draw: u64, cfg: &PolicyConfig, coords: Option<(usize, u64)>) -> [(&'static str, f64, f64); 3] {
    let mut rng = rng_from_seed(draw);
    let m = random_morph(draw, 4);

    let mut pi = ControlPolicy::new(cfg, &mut rng);
    perturb(&mut pi.policy.values, draw + 100);
    perturb(&mut pi.value.values, draw + 200);
    let obs = control_obs(&m, draw);
    let a = pi.act(&obs, false, &mut rng).unwrap().action;
    let (cp, cv) = grad_check(&mut pi, &obs, &a, coords);

    let mut pm = MorphologyPolicy::new(cfg, &mut rng);
    perturb(&mut pm.policy.values, draw + 300);
    perturb(&mut pm.value.values, draw + 400);
    let obs = MorphObs::new(&m);
    let a = pm.act(&obs, false, &mut rng).unwrap().sample;
    let (mp, mv) = grad_check(&mut pm, &obs, &a, coords);

    let kind = if draw % 2 == 0 { EnvKind::RoughTerrain } else { EnvKind::GapCrosser };
    let mut pe = EnvironmentPolicy::new(kind, EnvBounds::default(), cfg, &mut rng);
    perturb(&mut pe.policy.values, draw + 500);
    perturb(&mut pe.value.values, draw + 600);
    let params = match kind {
        EnvKind::RoughTerrain => EnvParams::rough(1.3, 4.0),
        EnvKind::GapCrosser => EnvParams::gap(1.7),
    };
    let obs = EnvObs::new(&m, params);
    let a = pe.act(&obs, false, &mut rng).unwrap().action;
    let (ep, ev) = grad_check(&mut pe, &obs, &a, coords);

    [("control", cp, cv), ("morphology", mp, mv), ("environment", ep, ev)]
}
