//! Agent design: a rooted tree of joints, each carrying a normalized
//! attribute vector, plus the mutation actions that evolve it.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type NodeId = u32;

/// Attribute layout: `[bone_x, bone_z, size, gear, joint_range]`, each in `[-1, 1]`.
pub const ATTR_DIM: usize = 5;
pub const ATTR_BONE_X: usize = 0;
pub const ATTR_BONE_Z: usize = 1;
pub const ATTR_SIZE: usize = 2;
pub const ATTR_GEAR: usize = 3;
pub const ATTR_RANGE: usize = 4;

pub const MAX_CHILDREN: usize = 3;
pub const DEFAULT_MAX_NODES: usize = 16;
pub const SCHEMA_VERSION: u32 = 1;

pub type Attrs = [f64; ATTR_DIM];

#[derive(Debug, Error, PartialEq)]
pub enum MorphError {
    #[error("head can have at most {MAX_CHILDREN} children, requested {0}")]
    ChildLimit(usize),
    #[error("action covers {got} nodes but morphology has {expected}")]
    ActionShape { expected: usize, got: usize },
    #[error("schema error at `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("invalid morphology: {0:?}")]
    Invalid(Vec<Violation>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    NoHead,
    MultipleHeads(Vec<NodeId>),
    DuplicateId(NodeId),
    UnknownParent { id: NodeId, parent: NodeId },
    Unreachable(NodeId),
    TooManyChildren { id: NodeId, count: usize },
    TooManyNodes { count: usize, cap: usize },
    AttrOutOfRange { id: NodeId, index: usize, value: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoHead => write!(f, "no head node"),
            Violation::MultipleHeads(ids) => write!(f, "multiple heads {ids:?}"),
            Violation::DuplicateId(id) => write!(f, "duplicate node id {id}"),
            Violation::UnknownParent { id, parent } => {
                write!(f, "node {id} references unknown parent {parent}")
            }
            Violation::Unreachable(id) => write!(f, "node {id} not reachable from head"),
            Violation::TooManyChildren { id, count } => {
                write!(f, "node {id} has {count} children (max {MAX_CHILDREN})")
            }
            Violation::TooManyNodes { count, cap } => write!(f, "{count} nodes exceeds cap {cap}"),
            Violation::AttrOutOfRange { id, index, value } => {
                write!(f, "node {id} attr {index} = {value} out of [-1,1]")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointNode {
    pub id: NodeId,
    pub parent: Option<NodeId>,
    pub attrs: Attrs,
}

/// A rooted joint tree. Node order is stable and is the order used for
/// observations, policy outputs and morphology actions.
#[derive(Debug, Clone, PartialEq)]
pub struct Morphology {
    nodes: Vec<JointNode>,
    max_nodes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TopologyChoice {
    AddJoint,
    DelJoint,
    NoChange,
}

impl TopologyChoice {
    pub const ALL: [TopologyChoice; 3] = [
        TopologyChoice::AddJoint,
        TopologyChoice::DelJoint,
        TopologyChoice::NoChange,
    ];

    pub fn index(self) -> usize {
        match self {
            TopologyChoice::AddJoint => 0,
            TopologyChoice::DelJoint => 1,
            TopologyChoice::NoChange => 2,
        }
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i]
    }
}

/// One modification round: a topology choice and an attribute delta per node,
/// indexed by the node order of the morphology it is applied to.
#[derive(Debug, Clone, PartialEq)]
pub struct MorphAction {
    pub topology: Vec<TopologyChoice>,
    pub attr_deltas: Vec<Attrs>,
}

impl MorphAction {
    pub fn identity(n: usize) -> Self {
        Self {
            topology: vec![TopologyChoice::NoChange; n],
            attr_deltas: vec![[0.0; ATTR_DIM]; n],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ApplyInfo {
    pub added: usize,
    pub deleted: usize,
    pub rejected_add: usize,
    pub rejected_del: usize,
    /// Squared norm of the attribute change actually applied (after clipping).
    pub attr_delta_sq: f64,
}

impl ApplyInfo {
    pub fn topology_changes(&self) -> usize {
        self.added + self.deleted
    }
}

impl Morphology {
    /// Head plus `num_lv1` level-1 joints, all with zero (mid-range) attributes.
    pub fn initial(num_lv1: usize) -> Result<Self, MorphError> {
        Self::initial_with_cap(num_lv1, DEFAULT_MAX_NODES)
    }

    pub fn initial_with_cap(num_lv1: usize, max_nodes: usize) -> Result<Self, MorphError> {
        if num_lv1 > MAX_CHILDREN {
            return Err(MorphError::ChildLimit(num_lv1));
        }
        let mut nodes = vec![JointNode {
            id: 0,
            parent: None,
            attrs: [0.0; ATTR_DIM],
        }];
        for i in 0..num_lv1 {
            nodes.push(JointNode {
                id: i as NodeId + 1,
                parent: Some(0),
                attrs: [0.0; ATTR_DIM],
            });
        }
        Ok(Self { nodes, max_nodes })
    }

    /// Builds a morphology without validation; callers check with [`Morphology::validate`].
    pub fn from_nodes(nodes: Vec<JointNode>, max_nodes: usize) -> Self {
        Self { nodes, max_nodes }
    }

    pub fn nodes(&self) -> &[JointNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn max_nodes(&self) -> usize {
        self.max_nodes
    }

    pub fn head_index(&self) -> Option<usize> {
        self.nodes.iter().position(|n| n.parent.is_none())
    }

    pub fn index_of(&self, id: NodeId) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    pub fn child_count(&self, id: NodeId) -> usize {
        self.nodes.iter().filter(|n| n.parent == Some(id)).count()
    }

    pub fn children_indices(&self, id: NodeId) -> Vec<usize> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.parent == Some(id))
            .map(|(i, _)| i)
            .collect()
    }

    /// Parent index per node (by position), `None` for the head.
    pub fn parent_indices(&self) -> Vec<Option<usize>> {
        let pos: HashMap<NodeId, usize> =
            self.nodes.iter().enumerate().map(|(i, n)| (n.id, i)).collect();
        self.nodes
            .iter()
            .map(|n| n.parent.and_then(|p| pos.get(&p).copied()))
            .collect()
    }

    /// Undirected tree neighbors (parent and children) per node index.
    pub fn neighbor_lists(&self) -> Vec<Vec<usize>> {
        let parents = self.parent_indices();
        let mut nbrs = vec![Vec::new(); self.nodes.len()];
        for (i, p) in parents.iter().enumerate() {
            if let Some(p) = *p {
                nbrs[i].push(p);
                nbrs[p].push(i);
            }
        }
        for l in &mut nbrs {
            l.sort_unstable();
        }
        nbrs
    }

    /// Depth of each node (head = 0). Assumes a valid tree.
    pub fn depths(&self) -> Vec<usize> {
        let parents = self.parent_indices();
        (0..self.nodes.len())
            .map(|mut i| {
                let mut d = 0;
                while let Some(p) = parents[i] {
                    d += 1;
                    i = p;
                    if d > self.nodes.len() {
                        break;
                    }
                }
                d
            })
            .collect()
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        self.child_count(id) == 0
    }

    /// Returns every constraint violation; an empty list means the design is valid.
    pub fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let heads: Vec<NodeId> = self
            .nodes
            .iter()
            .filter(|n| n.parent.is_none())
            .map(|n| n.id)
            .collect();
        match heads.len() {
            0 => out.push(Violation::NoHead),
            1 => {}
            _ => out.push(Violation::MultipleHeads(heads.clone())),
        }
        let mut seen = HashSet::new();
        for n in &self.nodes {
            if !seen.insert(n.id) {
                out.push(Violation::DuplicateId(n.id));
            }
        }
        for n in &self.nodes {
            if let Some(p) = n.parent {
                if !seen.contains(&p) {
                    out.push(Violation::UnknownParent { id: n.id, parent: p });
                }
            }
            let c = self.child_count(n.id);
            if c > MAX_CHILDREN {
                out.push(Violation::TooManyChildren { id: n.id, count: c });
            }
            for (index, &value) in n.attrs.iter().enumerate() {
                if !(-1.0..=1.0).contains(&value) {
                    out.push(Violation::AttrOutOfRange { id: n.id, index, value });
                }
            }
        }
        if self.nodes.len() > self.max_nodes {
            out.push(Violation::TooManyNodes {
                count: self.nodes.len(),
                cap: self.max_nodes,
            });
        }
        if let [head] = heads[..] {
            let mut reached = HashSet::from([head]);
            let mut queue = VecDeque::from([head]);
            while let Some(u) = queue.pop_front() {
                for n in self.nodes.iter().filter(|n| n.parent == Some(u)) {
                    if reached.insert(n.id) {
                        queue.push_back(n.id);
                    }
                }
            }
            for n in &self.nodes {
                if !reached.contains(&n.id) && !out.contains(&Violation::DuplicateId(n.id)) {
                    out.push(Violation::Unreachable(n.id));
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), Vec<Violation>> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(v)
        }
    }

    /// Applies one modification round and returns the new design. Topology
    /// choices are applied first in node order (leaf and child-limit checks
    /// use the input tree), then attribute deltas on the surviving original
    /// nodes. Infeasible choices are soft-rejected and counted.
    pub fn apply_action(&self, act: &MorphAction) -> Result<(Morphology, ApplyInfo), MorphError> {
        let n = self.nodes.len();
        if act.topology.len() != n || act.attr_deltas.len() != n {
            return Err(MorphError::ActionShape {
                expected: n,
                got: act.topology.len().min(act.attr_deltas.len()),
            });
        }
        let mut info = ApplyInfo::default();
        let mut next_id = self.nodes.iter().map(|n| n.id).max().map_or(0, |m| m + 1);
        let mut removed = vec![false; n];
        let mut appended = Vec::new();
        let mut count = n;

        for (i, node) in self.nodes.iter().enumerate() {
            match act.topology[i] {
                TopologyChoice::NoChange => {}
                TopologyChoice::AddJoint => {
                    if self.child_count(node.id) < MAX_CHILDREN && count < self.max_nodes {
                        appended.push(JointNode {
                            id: next_id,
                            parent: Some(node.id),
                            attrs: [0.0; ATTR_DIM],
                        });
                        next_id += 1;
                        count += 1;
                        info.added += 1;
                    } else {
                        info.rejected_add += 1;
                    }
                }
                TopologyChoice::DelJoint => {
                    if node.parent.is_some() && self.is_leaf(node.id) {
                        removed[i] = true;
                        count -= 1;
                        info.deleted += 1;
                    } else {
                        info.rejected_del += 1;
                    }
                }
            }
        }

        let mut nodes = Vec::with_capacity(count);
        for (i, node) in self.nodes.iter().enumerate() {
            if removed[i] {
                continue;
            }
            let mut attrs = node.attrs;
            for (k, a) in attrs.iter_mut().enumerate() {
                let updated = (*a + act.attr_deltas[i][k]).clamp(-1.0, 1.0);
                let applied = updated - *a;
                info.attr_delta_sq += applied * applied;
                *a = updated;
            }
            nodes.push(JointNode {
                id: node.id,
                parent: node.parent,
                attrs,
            });
        }
        // Deleted nodes chose DelJoint, so none of them received a child above.
        nodes.extend(appended);
        let out = Morphology {
            nodes,
            max_nodes: self.max_nodes,
        };
        Ok((out, info))
    }

    pub fn to_document(&self) -> MorphologyDocument {
        MorphologyDocument {
            schema_version: SCHEMA_VERSION,
            head: self.head_index().map(|i| self.nodes[i].id).unwrap_or(0),
            max_nodes: self.max_nodes,
            nodes: self.nodes.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("morphology serializes")
    }

    /// Parses the JSON document form. Structural errors carry the JSON path.
    pub fn from_json(text: &str) -> Result<Self, MorphError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let doc: MorphologyDocument =
            serde_path_to_error::deserialize(de).map_err(|e| MorphError::Schema {
                path: e.path().to_string(),
                message: e.inner().to_string(),
            })?;
        Self::from_document(doc)
    }

    pub fn from_document(doc: MorphologyDocument) -> Result<Self, MorphError> {
        if doc.schema_version != SCHEMA_VERSION {
            return Err(MorphError::Schema {
                path: "schema_version".into(),
                message: format!("unsupported version {}", doc.schema_version),
            });
        }
        let head_ok = doc
            .nodes
            .iter()
            .any(|n| n.id == doc.head && n.parent.is_none());
        if !head_ok {
            return Err(MorphError::Schema {
                path: "head".into(),
                message: format!("head id {} is not a parentless node", doc.head),
            });
        }
        Ok(Self {
            nodes: doc.nodes,
            max_nodes: doc.max_nodes,
        })
    }
}

fn default_max_nodes() -> usize {
    DEFAULT_MAX_NODES
}

/// Serialized form: `{"schema_version", "head", "max_nodes", "nodes": [{"id", "parent", "attrs"}]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MorphologyDocument {
    pub schema_version: u32,
    pub head: NodeId,
    #[serde(default = "default_max_nodes")]
    pub max_nodes: usize,
    pub nodes: Vec<JointNode>,
}
