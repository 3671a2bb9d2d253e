use std::sync::Arc;

use coevo_core::morphology::{JointNode, MorphAction, Morphology, TopologyChoice, ATTR_BONE_X};
use coevo_core::rng::rng_from_seed;
use coevo_core::sim2d::{
    generate_terrain, EnvKind, EnvParams, Heightfield, SimConfig, Termination, World,
};
use proptest::prelude::*;
use rand::Rng;

fn random_morph(seed: u64) -> Morphology {
    let mut rng = rng_from_seed(seed);
    let mut m = Morphology::initial(rng.random_range(0..=3)).unwrap();
    for _ in 0..rng.random_range(0..6) {
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

/// Head with one mirrored pair of limb chains (bone x-components negated).
fn symmetric_morph(seed: u64) -> Morphology {
    let mut rng = rng_from_seed(seed);
    let mut nodes = vec![JointNode { id: 0, parent: None, attrs: [0.0; 5] }];
    let depth = rng.random_range(1..=2);
    let mut next = 1;
    {
        let chain: Vec<[f64; 5]> = (0..depth)
            .map(|_| std::array::from_fn(|_| rng.random_range(-0.8..0.8)))
            .collect();
        for sign in [1.0, -1.0] {
            let mut parent = 0;
            for a in &chain {
                let mut attrs = *a;
                attrs[ATTR_BONE_X] *= sign;
                nodes.push(JointNode { id: next, parent: Some(parent), attrs });
                parent = next;
                next += 1;
            }
        }
    }
    Morphology::from_nodes(nodes, 16)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_torques_never_escape_as_non_finite(seed in 0u64..10_000, max_h in 0.0f64..2.4, var in 2.4f64..7.2) {
        let cfg = SimConfig::default();
        let m = random_morph(seed);
        let hf = generate_terrain(&EnvParams::rough(max_h, var), seed, &cfg.terrain, &cfg.bounds).unwrap();
        let mut w = World::reset(&m, Arc::new(hf), EnvKind::RoughTerrain, &cfg).unwrap();
        let mut rng = rng_from_seed(seed ^ 0xabc);
        let mut a = vec![0.0; m.len()];
        for _ in 0..400 {
            for v in &mut a {
                *v = (0.8 * *v + 0.2 * rng.random_range(-3.0..3.0f64)).clamp(-1.0, 1.0);
            }
            let r = w.step(&a).unwrap();
            prop_assert!(r.reward.is_finite());
            prop_assert!(r.observation.iter().flatten().all(|v| v.is_finite()));
            prop_assert_ne!(r.info.termination, Some(Termination::Unstable));
            if r.done {
                break;
            }
        }
        // a few meters per second at most, no catapulting
        prop_assert!(w.state().root_x().abs() < 40.0, "x = {}", w.state().root_x());
        for (l, link) in w.body().links.iter().enumerate().skip(1) {
            prop_assert!(w.state().q[2 + l].abs() <= link.limit + 1e-12);
        }
    }

    #[test]
    fn balanced_body_does_not_slip_without_torque(seed in 0u64..10_000) {
        let cfg = SimConfig::default();
        let m = symmetric_morph(seed);
        let mut w = World::reset(&m, Arc::new(Heightfield::flat(0.0, &cfg.terrain)), EnvKind::RoughTerrain, &cfg).unwrap();
        let zeros = vec![0.0; m.len()];
        for _ in 0..100 {
            if w.step(&zeros).unwrap().done {
                break;
            }
        }
        prop_assert!(w.state().root_x().abs() < 1e-3, "x = {}", w.state().root_x());
    }
}
