//! Physical body assembled from a morphology: a floating head disc with a
//! tree of hinged bones.

use serde::{Deserialize, Serialize};

use crate::morphology::{Morphology, ATTR_BONE_X, ATTR_BONE_Z, ATTR_GEAR, ATTR_RANGE, ATTR_SIZE};

/// Physical ranges that normalized attributes in `[-1, 1]` map onto.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BodyConfig {
    pub head_radius: (f64, f64),
    pub bone_x: (f64, f64),
    pub bone_z: (f64, f64),
    pub bone_radius: (f64, f64),
    pub gear: (f64, f64),
    pub joint_range: (f64, f64),
    pub density: f64,
}

impl Default for BodyConfig {
    fn default() -> Self {
        Self {
            head_radius: (1.0, 2.0),
            bone_x: (-2.0, 2.0),
            bone_z: (-3.0, -1.0),
            bone_radius: (0.1, 0.3),
            gear: (20.0, 120.0),
            joint_range: (0.3, 1.5),
            density: 1.0,
        }
    }
}

pub fn denormalize(v: f64, (lo, hi): (f64, f64)) -> f64 {
    lo + 0.5 * (v.clamp(-1.0, 1.0) + 1.0) * (hi - lo)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Link {
    /// Index of the morphology node this link was built from.
    pub node: usize,
    pub parent: Option<usize>,
    /// Bone vector in the parent frame at zero joint angle (zero for the head).
    pub bone: [f64; 2],
    /// Contact radius: the head disc, or the disc at the bone tip.
    pub radius: f64,
    pub mass: f64,
    pub inertia: f64,
    pub gear: f64,
    pub limit: f64,
    /// Generalized coordinates of the hinges from the head down to this link.
    pub chain: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Body {
    pub links: Vec<Link>,
    /// Link index of each morphology node.
    pub node_to_link: Vec<usize>,
    pub total_mass: f64,
}

impl Body {
    /// Builds links in breadth-first order from the head; link `l >= 1` owns
    /// generalized coordinate `2 + l`.
    pub fn from_morphology(m: &Morphology, cfg: &BodyConfig) -> Self {
        let nodes = m.nodes();
        let head = m.head_index().expect("validated morphology has a head");
        let parents = m.parent_indices();
        let mut order = vec![head];
        let mut i = 0;
        while i < order.len() {
            let u = order[i];
            order.extend((0..nodes.len()).filter(|&c| parents[c] == Some(u)));
            i += 1;
        }
        let mut node_to_link = vec![usize::MAX; nodes.len()];
        for (l, &n) in order.iter().enumerate() {
            node_to_link[n] = l;
        }
        let mut links: Vec<Link> = Vec::with_capacity(order.len());
        for (l, &n) in order.iter().enumerate() {
            let a = &nodes[n].attrs;
            if l == 0 {
                let r = denormalize(a[ATTR_SIZE], cfg.head_radius);
                let mass = cfg.density * std::f64::consts::PI * r * r;
                links.push(Link {
                    node: n,
                    parent: None,
                    bone: [0.0, 0.0],
                    radius: r,
                    mass,
                    inertia: 0.5 * mass * r * r,
                    gear: 0.0,
                    limit: 0.0,
                    chain: Vec::new(),
                });
                continue;
            }
            let parent = node_to_link[parents[n].expect("non-head has a parent")];
            let bone = [
                denormalize(a[ATTR_BONE_X], cfg.bone_x),
                denormalize(a[ATTR_BONE_Z], cfg.bone_z),
            ];
            let len = bone[0].hypot(bone[1]);
            let r = denormalize(a[ATTR_SIZE], cfg.bone_radius);
            let mass = cfg.density * 2.0 * r * len;
            let mut chain = links[parent].chain.clone();
            chain.push(2 + l);
            links.push(Link {
                node: n,
                parent: Some(parent),
                bone,
                radius: r,
                mass,
                inertia: mass * (len * len / 12.0 + r * r / 4.0),
                gear: denormalize(a[ATTR_GEAR], cfg.gear),
                limit: denormalize(a[ATTR_RANGE], cfg.joint_range),
                chain,
            });
        }
        let total_mass = links.iter().map(|l| l.mass).sum();
        Self {
            links,
            node_to_link,
            total_mass,
        }
    }

    pub fn dof(&self) -> usize {
        2 + self.links.len()
    }

    pub fn link_of_dof(&self, d: usize) -> usize {
        d - 2
    }
}

/// World-frame kinematic quantities for a configuration.
#[derive(Debug, Clone, Default)]
pub struct Kinematics {
    pub angle: Vec<f64>,
    pub origin: Vec<[f64; 2]>,
    pub bone: Vec<[f64; 2]>,
    pub omega: Vec<f64>,
}

pub fn rotate(phi: f64, v: [f64; 2]) -> [f64; 2] {
    let (s, c) = phi.sin_cos();
    [v[0] * c - v[1] * s, v[0] * s + v[1] * c]
}

impl Kinematics {
    pub fn compute(&mut self, body: &Body, q: &[f64], qd: &[f64]) {
        let n = body.links.len();
        self.angle.resize(n, 0.0);
        self.origin.resize(n, [0.0; 2]);
        self.bone.resize(n, [0.0; 2]);
        self.omega.resize(n, 0.0);
        self.angle[0] = q[2];
        self.origin[0] = [q[0], q[1]];
        self.bone[0] = [0.0, 0.0];
        self.omega[0] = qd[2];
        for l in 1..n {
            let p = body.links[l].parent.expect("non-head link");
            let d = 2 + l;
            self.angle[l] = self.angle[p] + q[d];
            self.origin[l] = [
                self.origin[p][0] + self.bone[p][0],
                self.origin[p][1] + self.bone[p][1],
            ];
            self.bone[l] = rotate(self.angle[l], body.links[l].bone);
            self.omega[l] = self.omega[p] + qd[d];
        }
    }

    pub fn com(&self, l: usize) -> [f64; 2] {
        [
            self.origin[l][0] + 0.5 * self.bone[l][0],
            self.origin[l][1] + 0.5 * self.bone[l][1],
        ]
    }

    /// Center of the contact disc of link `l`.
    pub fn contact_center(&self, l: usize) -> [f64; 2] {
        [
            self.origin[l][0] + self.bone[l][0],
            self.origin[l][1] + self.bone[l][1],
        ]
    }
}
