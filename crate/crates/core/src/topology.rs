//! Shard plans and tree topologies of learner nodes.
//!
//! Leaves learn over a feature shard; every internal node learns over the
//! predictions of its children (plus an optional constant feature). Layers
//! count up from the leaves, so a node's layer is always above each of its
//! children's.

use std::collections::HashSet;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::sparse::SparseVector;

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShardKind {
    Instance,
    Feature,
}

/// How weight indices map to feature shards.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Assignment {
    /// `index mod n_shards`
    Modulo,
    /// Equal contiguous ranges of a `2^bits` table.
    Contiguous { bits: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShardPlan {
    pub kind: ShardKind,
    pub n_shards: usize,
    pub assignment: Assignment,
}

pub fn make_shard_plan(kind: ShardKind, n_shards: usize, bits: u32) -> Result<ShardPlan> {
    if n_shards == 0 {
        return Err(Error::config("n_shards must be at least 1"));
    }
    let _ = bits;
    Ok(ShardPlan { kind, n_shards, assignment: Assignment::Modulo })
}

impl ShardPlan {
    pub fn contiguous(n_shards: usize, bits: u32) -> Result<Self> {
        if n_shards == 0 {
            return Err(Error::config("n_shards must be at least 1"));
        }
        Ok(ShardPlan { kind: ShardKind::Feature, n_shards, assignment: Assignment::Contiguous { bits } })
    }

    pub fn shard_of_index(&self, index: u32) -> usize {
        match self.assignment {
            Assignment::Modulo => index as usize % self.n_shards,
            Assignment::Contiguous { bits } => {
                let size = 1u64 << bits;
                let width = size.div_ceil(self.n_shards as u64);
                ((index as u64 / width) as usize).min(self.n_shards - 1)
            }
        }
    }

    /// Instance shard of the instance with arrival id `t`.
    pub fn shard_of_instance(&self, t: u64) -> usize {
        (t % self.n_shards as u64) as usize
    }

    /// Splits `x` into one sub-vector per shard (entries keep their order).
    pub fn split(&self, x: &SparseVector) -> Vec<SparseVector> {
        let mut parts = vec![Vec::new(); self.n_shards];
        for (i, v) in x.iter() {
            parts[self.shard_of_index(i)].push((i, v));
        }
        parts
            .into_iter()
            .map(|p| SparseVector::from_sorted(p).expect("subsequence of a sorted vector"))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeRole {
    Leaf { shard: usize },
    Internal,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeSpec {
    pub id: NodeId,
    pub layer: u32,
    pub role: NodeRole,
    pub fan_in: usize,
    pub threshold_output: bool,
    pub has_constant_feature: bool,
}

impl NodeSpec {
    pub fn is_leaf(&self) -> bool {
        matches!(self.role, NodeRole::Leaf { .. })
    }

    pub fn shard(&self) -> Option<usize> {
        match self.role {
            NodeRole::Leaf { shard } => Some(shard),
            NodeRole::Internal => None,
        }
    }

    /// Weights held by an internal node: one per child plus the constant.
    pub fn internal_width(&self) -> usize {
        self.fan_in + usize::from(self.has_constant_feature)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edge {
    pub child: NodeId,
    pub parent: NodeId,
    pub link_delay: u64,
}

/// Tree shape used to build custom topologies; leaves name shard ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TreeShape {
    Leaf(usize),
    Node(Vec<TreeShape>),
}

impl TreeShape {
    /// Parses an s-expression such as `((0 1) (2))`.
    pub fn parse(s: &str) -> Result<Self> {
        let toks: Vec<String> = s
            .replace('(', " ( ")
            .replace(')', " ) ")
            .replace(',', " ")
            .split_whitespace()
            .map(str::to_string)
            .collect();
        let mut pos = 0;
        let shape = Self::parse_at(&toks, &mut pos)?;
        if pos != toks.len() {
            return Err(Error::config(format!("trailing input in tree shape {s:?}")));
        }
        Ok(shape)
    }

    fn parse_at(toks: &[String], pos: &mut usize) -> Result<Self> {
        let tok = toks.get(*pos).ok_or_else(|| Error::config("unexpected end of tree shape"))?;
        *pos += 1;
        if tok == "(" {
            let mut children = Vec::new();
            loop {
                match toks.get(*pos).map(String::as_str) {
                    Some(")") => {
                        *pos += 1;
                        break;
                    }
                    Some(_) => children.push(Self::parse_at(toks, pos)?),
                    None => return Err(Error::config("unbalanced parentheses in tree shape")),
                }
            }
            if children.is_empty() {
                return Err(Error::config("empty group in tree shape"));
            }
            Ok(TreeShape::Node(children))
        } else {
            tok.parse()
                .map(TreeShape::Leaf)
                .map_err(|_| Error::config(format!("bad shard id {tok:?} in tree shape")))
        }
    }

    fn height(&self) -> u32 {
        match self {
            TreeShape::Leaf(_) => 0,
            TreeShape::Node(c) => 1 + c.iter().map(TreeShape::height).max().unwrap_or(0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Flat,
    Binary,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    nodes: Vec<NodeSpec>,
    edges: Vec<Edge>,
    root: NodeId,
    children: Vec<Vec<NodeId>>,
    parent: Vec<Option<(NodeId, u64)>>,
}

impl Topology {
    /// Validates that `nodes`/`edges` describe a layered tree.
    pub fn new(nodes: Vec<NodeSpec>, edges: Vec<Edge>) -> Result<Self> {
        let n = nodes.len();
        if n == 0 {
            return Err(Error::config("topology has no nodes"));
        }
        for (pos, node) in nodes.iter().enumerate() {
            if node.id != pos {
                return Err(Error::config(format!("node ids must be 0..n in order; found {} at {pos}", node.id)));
            }
        }
        let mut parent: Vec<Option<(NodeId, u64)>> = vec![None; n];
        let mut children = vec![Vec::new(); n];
        for e in &edges {
            if e.child >= n || e.parent >= n {
                return Err(Error::config(format!("edge {} -> {} names a missing node", e.child, e.parent)));
            }
            if parent[e.child].is_some() {
                return Err(Error::config(format!("node {} has two parents", e.child)));
            }
            if nodes[e.parent].layer <= nodes[e.child].layer {
                return Err(Error::config(format!(
                    "edge {} -> {} does not go up a layer",
                    e.child, e.parent
                )));
            }
            parent[e.child] = Some((e.parent, e.link_delay));
            children[e.parent].push(e.child);
        }
        let roots: Vec<NodeId> = (0..n).filter(|&i| parent[i].is_none()).collect();
        if roots.len() != 1 {
            return Err(Error::config(format!("topology must have exactly one root, found {}", roots.len())));
        }
        // Layers strictly increase along edges, so there are no cycles and
        // every node reaches the single root.
        let root = roots[0];
        let mut shards = HashSet::new();
        for node in &nodes {
            children[node.id].sort_unstable();
            match node.role {
                NodeRole::Leaf { shard } => {
                    if !children[node.id].is_empty() {
                        return Err(Error::config(format!("leaf {} has children", node.id)));
                    }
                    if !shards.insert(shard) {
                        return Err(Error::config(format!("shard {shard} assigned to two leaves")));
                    }
                }
                NodeRole::Internal => {
                    if children[node.id].is_empty() {
                        return Err(Error::config(format!("internal node {} has no children", node.id)));
                    }
                    if node.fan_in != children[node.id].len() {
                        return Err(Error::config(format!(
                            "node {} declares fan_in {} but has {} children",
                            node.id,
                            node.fan_in,
                            children[node.id].len()
                        )));
                    }
                }
            }
        }
        let n_shards = shards.len();
        if (0..n_shards).any(|s| !shards.contains(&s)) {
            return Err(Error::config("leaf shard ids must be exactly 0..n_shards"));
        }
        Ok(Topology { nodes, edges, root, children, parent })
    }

    pub fn flat(n_shards: usize, link_delay: u64) -> Result<Self> {
        if n_shards == 0 {
            return Err(Error::config("n_shards must be at least 1"));
        }
        let mut nodes: Vec<NodeSpec> = (0..n_shards)
            .map(|s| NodeSpec {
                id: s,
                layer: 0,
                role: NodeRole::Leaf { shard: s },
                fan_in: 0,
                threshold_output: true,
                has_constant_feature: false,
            })
            .collect();
        nodes.push(NodeSpec {
            id: n_shards,
            layer: 1,
            role: NodeRole::Internal,
            fan_in: n_shards,
            threshold_output: false,
            has_constant_feature: true,
        });
        let edges = (0..n_shards).map(|s| Edge { child: s, parent: n_shards, link_delay }).collect();
        Topology::new(nodes, edges)
    }

    pub fn binary(n_shards: usize, link_delay: u64) -> Result<Self> {
        if n_shards == 0 || !n_shards.is_power_of_two() {
            return Err(Error::config(format!("binary topology needs a power-of-two shard count, got {n_shards}")));
        }
        let mut nodes: Vec<NodeSpec> = (0..n_shards)
            .map(|s| NodeSpec {
                id: s,
                layer: 0,
                role: NodeRole::Leaf { shard: s },
                fan_in: 0,
                threshold_output: true,
                has_constant_feature: false,
            })
            .collect();
        let mut edges = Vec::new();
        let mut level: Vec<NodeId> = (0..n_shards).collect();
        let mut layer = 0;
        while level.len() > 1 {
            layer += 1;
            let mut next = Vec::new();
            for pair in level.chunks(2) {
                let id = nodes.len();
                nodes.push(NodeSpec {
                    id,
                    layer,
                    role: NodeRole::Internal,
                    fan_in: 2,
                    threshold_output: false,
                    has_constant_feature: false,
                });
                for &c in pair {
                    edges.push(Edge { child: c, parent: id, link_delay });
                }
                next.push(id);
            }
            level = next;
        }
        Topology::new(nodes, edges)
    }

    /// Builds a tree from a nested shape. Flags start off; leaves are
    /// numbered in depth-first order, internal nodes by layer.
    pub fn from_shape(shape: &TreeShape, link_delay: u64) -> Result<Self> {
        struct Pending {
            layer: u32,
            children: Vec<usize>,
        }
        // Collect internal nodes in DFS order with their child slots.
        fn walk(
            shape: &TreeShape,
            leaves: &mut Vec<usize>,
            internals: &mut Vec<Pending>,
        ) -> (bool, usize) {
            match shape {
                TreeShape::Leaf(s) => {
                    leaves.push(*s);
                    (true, leaves.len() - 1)
                }
                TreeShape::Node(cs) => {
                    let slot = internals.len();
                    internals.push(Pending { layer: shape.height(), children: Vec::new() });
                    let mut kids = Vec::new();
                    for c in cs {
                        let (is_leaf, idx) = walk(c, leaves, internals);
                        kids.push(if is_leaf { idx } else { usize::MAX - idx });
                    }
                    internals[slot].children = kids;
                    (false, slot)
                }
            }
        }
        let mut leaves = Vec::new();
        let mut internals = Vec::new();
        walk(shape, &mut leaves, &mut internals);
        let n_leaves = leaves.len();
        let mut order: Vec<usize> = (0..internals.len()).collect();
        order.sort_by_key(|&k| (internals[k].layer, k));
        let mut id_of_internal = vec![0; internals.len()];
        for (rank, &k) in order.iter().enumerate() {
            id_of_internal[k] = n_leaves + rank;
        }
        let mut nodes: Vec<NodeSpec> = leaves
            .iter()
            .enumerate()
            .map(|(id, &shard)| NodeSpec {
                id,
                layer: 0,
                role: NodeRole::Leaf { shard },
                fan_in: 0,
                threshold_output: false,
                has_constant_feature: false,
            })
            .collect();
        let mut edges = Vec::new();
        for &k in &order {
            let id = id_of_internal[k];
            nodes.push(NodeSpec {
                id,
                layer: internals[k].layer,
                role: NodeRole::Internal,
                fan_in: internals[k].children.len(),
                threshold_output: false,
                has_constant_feature: false,
            });
            for &c in &internals[k].children {
                let child = if c >= usize::MAX - internals.len() { id_of_internal[usize::MAX - c] } else { c };
                edges.push(Edge { child, parent: id, link_delay });
            }
        }
        Topology::new(nodes, edges)
    }

    pub fn nodes(&self) -> &[NodeSpec] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &NodeSpec {
        &self.nodes[id]
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    /// Children in ascending id order (the fixed reduction order).
    pub fn children(&self, id: NodeId) -> &[NodeId] {
        &self.children[id]
    }

    pub fn parent(&self, id: NodeId) -> Option<NodeId> {
        self.parent[id].map(|(p, _)| p)
    }

    pub fn link_delay(&self, child: NodeId) -> Option<u64> {
        self.parent[child].map(|(_, d)| d)
    }

    /// Position of `child` among its parent's inputs.
    pub fn slot_in_parent(&self, child: NodeId) -> Option<usize> {
        let p = self.parent(child)?;
        self.children[p].iter().position(|&c| c == child)
    }

    pub fn leaves(&self) -> impl Iterator<Item = &NodeSpec> {
        self.nodes.iter().filter(|n| n.is_leaf())
    }

    pub fn n_shards(&self) -> usize {
        self.leaves().count()
    }

    pub fn leaf_for_shard(&self, shard: usize) -> Option<NodeId> {
        self.leaves().find(|n| n.shard() == Some(shard)).map(|n| n.id)
    }

    /// Number of edges on the longest leaf-to-root path.
    pub fn depth(&self) -> u32 {
        self.nodes[self.root].layer
    }

    /// Nodes ordered by (layer, id): every child precedes its parent.
    pub fn bottom_up(&self) -> Vec<NodeId> {
        let mut ids: Vec<NodeId> = (0..self.nodes.len()).collect();
        ids.sort_by_key(|&i| (self.nodes[i].layer, i));
        ids
    }

    /// Nodes grouped by layer, lowest first.
    pub fn layers(&self) -> Vec<Vec<NodeId>> {
        let mut out: Vec<Vec<NodeId>> = vec![Vec::new(); self.depth() as usize + 1];
        for n in &self.nodes {
            out[n.layer as usize].push(n.id);
        }
        out.retain(|l| !l.is_empty());
        out
    }

    /// Edge weights on the path from `id` up to the root, as child slots.
    pub fn path_to_root(&self, id: NodeId) -> Vec<(NodeId, usize)> {
        let mut out = Vec::new();
        let mut cur = id;
        while let Some(p) = self.parent(cur) {
            out.push((p, self.slot_in_parent(cur).expect("child of its parent")));
            cur = p;
        }
        out
    }

    pub fn set_threshold_output(&mut self, id: NodeId, on: bool) {
        self.nodes[id].threshold_output = on;
    }

    pub fn set_constant_feature(&mut self, id: NodeId, on: bool) {
        self.nodes[id].has_constant_feature = on;
    }

    /// Turns thresholding and constant features off everywhere.
    pub fn linear(mut self) -> Self {
        for n in &mut self.nodes {
            n.threshold_output = false;
            n.has_constant_feature = false;
        }
        self
    }

    pub fn check_plan(&self, plan: &ShardPlan) -> Result<()> {
        if plan.kind != ShardKind::Feature {
            return Err(Error::config("tree topologies need a feature shard plan"));
        }
        if plan.n_shards != self.n_shards() {
            return Err(Error::config(format!(
                "shard plan has {} shards but topology has {} leaves",
                plan.n_shards,
                self.n_shards()
            )));
        }
        Ok(())
    }

    /// Plain-text adjacency: node lines `id layer kind fan_in threshold
    /// constant` (kind is a shard id or `internal`), then edge lines `child
    /// parent delay`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for n in &self.nodes {
            let kind = match n.role {
                NodeRole::Leaf { shard } => shard.to_string(),
                NodeRole::Internal => "internal".to_string(),
            };
            let _ = writeln!(
                s,
                "{} {} {} {} {} {}",
                n.id,
                n.layer,
                kind,
                n.fan_in,
                u8::from(n.threshold_output),
                u8::from(n.has_constant_feature)
            );
        }
        for e in &self.edges {
            let _ = writeln!(s, "{} {} {}", e.child, e.parent, e.link_delay);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut nodes = Vec::new();
        let mut edges = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            let bad = |what: &str| Error::config(format!("topology line {}: bad {what}: {line:?}", lineno + 1));
            let num = |s: &str, what: &str| s.parse::<u64>().map_err(|_| bad(what));
            let flag = |s: &str, what: &str| match s {
                "0" => Ok(false),
                "1" => Ok(true),
                _ => Err(bad(what)),
            };
            match f.len() {
                6 => {
                    let role = if f[2] == "internal" {
                        NodeRole::Internal
                    } else {
                        NodeRole::Leaf { shard: num(f[2], "shard")? as usize }
                    };
                    nodes.push(NodeSpec {
                        id: num(f[0], "id")? as usize,
                        layer: num(f[1], "layer")? as u32,
                        role,
                        fan_in: num(f[3], "fan_in")? as usize,
                        threshold_output: flag(f[4], "threshold flag")?,
                        has_constant_feature: flag(f[5], "constant flag")?,
                    });
                }
                3 => edges.push(Edge {
                    child: num(f[0], "child")? as usize,
                    parent: num(f[1], "parent")? as usize,
                    link_delay: num(f[2], "delay")?,
                }),
                _ => return Err(bad("field count")),
            }
        }
        Topology::new(nodes, edges)
    }
}

pub fn build_topology(preset: Preset, n_shards: usize, link_delay: u64) -> Result<Topology> {
    match preset {
        Preset::Flat => Topology::flat(n_shards, link_delay),
        Preset::Binary => Topology::binary(n_shards, link_delay),
    }
}

/// One leaf's share of a routed instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Routed {
    pub leaf: NodeId,
    pub x: SparseVector,
    pub y: f64,
}

/// Splits `x` across the leaves and replicates the label to each.
pub fn route_instance(topo: &Topology, plan: &ShardPlan, x: &SparseVector, y: f64) -> Result<Vec<Routed>> {
    topo.check_plan(plan)?;
    let parts = plan.split(x);
    let mut out: Vec<Routed> = parts
        .into_iter()
        .enumerate()
        .map(|(shard, part)| Routed {
            leaf: topo.leaf_for_shard(shard).expect("checked plan"),
            x: part,
            y,
        })
        .collect();
    out.sort_by_key(|r| r.leaf);
    Ok(out)
}
