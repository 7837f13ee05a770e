//! Store geometry: a graph of straight walkable segments with bays, tills and
//! spawn/despawn points, plus shortest-path routing over it.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Two path lengths closer than this are treated as equal when breaking ties.
const LENGTH_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum LayoutError {
    #[error("layout not found: {0}")]
    NotFound(String),
    #[error("io error reading layout: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed layout file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid layout: {0}")]
    Invalid(String),
    #[error("unknown node: {0}")]
    UnknownNode(String),
    #[error("node {to} is unreachable from {from}")]
    Unreachable { from: String, to: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Position {
    pub x: f64,
    pub y: f64,
}

impl Position {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Position) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn lerp(&self, other: &Position, frac: f64) -> Position {
        Position::new(
            self.x + (other.x - self.x) * frac,
            self.y + (other.y - self.y) * frac,
        )
    }

    pub fn midpoint(&self, other: &Position) -> Position {
        self.lerp(other, 0.5)
    }
}

/// Index of a node inside a [`StoreLayout`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeIdx(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: String,
    pub position: Position,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub a: NodeIdx,
    pub b: NodeIdx,
    pub length: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bay {
    pub id: String,
    pub node: NodeIdx,
    pub position: Position,
    pub products: BTreeSet<String>,
}

/// A routed path: node indices from start to goal inclusive.
#[derive(Debug, Clone, PartialEq)]
pub struct Route {
    pub nodes: Vec<NodeIdx>,
    pub length: f64,
}

/// On-disk form of a layout (`version: 1`). Edge lengths are never stored.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutFile {
    pub version: u32,
    pub id: String,
    pub nodes: Vec<NodeSpec>,
    pub edges: Vec<(String, String)>,
    pub bays: Vec<BaySpec>,
    pub spawn: String,
    pub despawn: String,
    pub tills: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub id: String,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaySpec {
    pub id: String,
    pub node: String,
    #[serde(default)]
    pub products: Vec<String>,
}

/// A validated store layout. Immutable once built.
#[derive(Debug, Clone)]
pub struct StoreLayout {
    id: String,
    nodes: Vec<Node>,
    edges: Vec<Edge>,
    // adjacency[n] = (neighbor, edge index), sorted by neighbor id
    adjacency: Vec<Vec<(NodeIdx, usize)>>,
    node_index: HashMap<String, NodeIdx>,
    bays: Vec<Bay>,
    spawn: NodeIdx,
    despawn: NodeIdx,
    tills: Vec<NodeIdx>,
    product_bay: HashMap<String, usize>,
}

/// Minimum number of bays a layout must carry.
pub const MIN_BAYS: usize = 5;

pub fn load_layout(path: impl AsRef<Path>) -> Result<StoreLayout, LayoutError> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(LayoutError::NotFound(path.display().to_string()));
    }
    let text = std::fs::read_to_string(path)?;
    StoreLayout::from_json(&text)
}

impl StoreLayout {
    pub fn from_json(text: &str) -> Result<Self, LayoutError> {
        let file: LayoutFile = serde_json::from_str(text)?;
        Self::from_file(file)
    }

    pub fn from_file(file: LayoutFile) -> Result<Self, LayoutError> {
        let invalid = |msg: String| Err(LayoutError::Invalid(msg));
        if file.version != 1 {
            return invalid(format!("unsupported layout version {}", file.version));
        }

        let mut node_index = HashMap::new();
        let mut nodes = Vec::with_capacity(file.nodes.len());
        for spec in &file.nodes {
            if !spec.x.is_finite() || !spec.y.is_finite() {
                return invalid(format!("node {} has a non-finite position", spec.id));
            }
            let idx = NodeIdx(nodes.len());
            if node_index.insert(spec.id.clone(), idx).is_some() {
                return invalid(format!("duplicate node id {}", spec.id));
            }
            nodes.push(Node {
                id: spec.id.clone(),
                position: Position::new(spec.x, spec.y),
            });
        }
        let lookup = |id: &str, what: &str| -> Result<NodeIdx, LayoutError> {
            node_index
                .get(id)
                .copied()
                .ok_or_else(|| LayoutError::Invalid(format!("{what} references unknown node {id}")))
        };

        let mut edges = Vec::with_capacity(file.edges.len());
        let mut adjacency = vec![Vec::new(); nodes.len()];
        let mut seen_edges = BTreeSet::new();
        for (a, b) in &file.edges {
            let ia = lookup(a, "edge")?;
            let ib = lookup(b, "edge")?;
            if ia == ib {
                return invalid(format!("edge {a}-{b} is a self-loop"));
            }
            if !seen_edges.insert((ia.min(ib), ia.max(ib))) {
                return invalid(format!("duplicate edge {a}-{b}"));
            }
            let length = nodes[ia.0].position.distance(&nodes[ib.0].position);
            if length <= 0.0 {
                return invalid(format!("edge {a}-{b} has zero length"));
            }
            let e = edges.len();
            edges.push(Edge { a: ia, b: ib, length });
            adjacency[ia.0].push((ib, e));
            adjacency[ib.0].push((ia, e));
        }
        for list in &mut adjacency {
            list.sort_by(|x, y| nodes[x.0 .0].id.cmp(&nodes[y.0 .0].id));
        }

        let spawn = lookup(&file.spawn, "spawn")?;
        let despawn = lookup(&file.despawn, "despawn")?;
        if spawn == despawn {
            return invalid("spawn and despawn must be different nodes".into());
        }
        if file.tills.is_empty() {
            return invalid("layout needs at least one till".into());
        }
        let mut tills = Vec::new();
        for t in &file.tills {
            let idx = lookup(t, "till")?;
            if tills.contains(&idx) {
                return invalid(format!("duplicate till {t}"));
            }
            tills.push(idx);
        }

        if file.bays.len() < MIN_BAYS {
            return invalid(format!(
                "layout has {} bays, at least {MIN_BAYS} required",
                file.bays.len()
            ));
        }
        let mut bays = Vec::with_capacity(file.bays.len());
        let mut product_bay = HashMap::new();
        let mut bay_ids = BTreeSet::new();
        for spec in &file.bays {
            if !bay_ids.insert(spec.id.clone()) {
                return invalid(format!("duplicate bay id {}", spec.id));
            }
            let node = node_index.get(&spec.node).copied().ok_or_else(|| {
                LayoutError::Invalid(format!(
                    "bay {} is off-graph: node {} does not exist",
                    spec.id, spec.node
                ))
            })?;
            for p in &spec.products {
                if let Some(other) = product_bay.insert(p.clone(), bays.len()) {
                    let other: &Bay = &bays[other];
                    return invalid(format!(
                        "product {p} is stocked in both bay {} and bay {}",
                        other.id, spec.id
                    ));
                }
            }
            bays.push(Bay {
                id: spec.id.clone(),
                node,
                position: nodes[node.0].position,
                products: spec.products.iter().cloned().collect(),
            });
        }

        let layout = StoreLayout {
            id: file.id,
            nodes,
            edges,
            adjacency,
            node_index,
            bays,
            spawn,
            despawn,
            tills,
            product_bay,
        };
        layout.check_connected()?;
        Ok(layout)
    }

    fn check_connected(&self) -> Result<(), LayoutError> {
        let reach = self.reachable_from(self.spawn);
        for bay in &self.bays {
            if !reach[bay.node.0] {
                return Err(LayoutError::Invalid(format!(
                    "bay {} is disconnected from spawn",
                    bay.id
                )));
            }
        }
        for &t in &self.tills {
            if !reach[t.0] {
                return Err(LayoutError::Invalid(format!(
                    "till {} is disconnected from spawn",
                    self.nodes[t.0].id
                )));
            }
        }
        if !reach[self.despawn.0] {
            return Err(LayoutError::Invalid(format!(
                "despawn {} is unreachable from the tills",
                self.nodes[self.despawn.0].id
            )));
        }
        Ok(())
    }

    fn reachable_from(&self, start: NodeIdx) -> Vec<bool> {
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![start];
        seen[start.0] = true;
        while let Some(n) = stack.pop() {
            for &(m, _) in &self.adjacency[n.0] {
                if !seen[m.0] {
                    seen[m.0] = true;
                    stack.push(m);
                }
            }
        }
        seen
    }

    pub fn to_file(&self) -> LayoutFile {
        LayoutFile {
            version: 1,
            id: self.id.clone(),
            nodes: self
                .nodes
                .iter()
                .map(|n| NodeSpec {
                    id: n.id.clone(),
                    x: n.position.x,
                    y: n.position.y,
                })
                .collect(),
            edges: self
                .edges
                .iter()
                .map(|e| (self.node_id(e.a).to_owned(), self.node_id(e.b).to_owned()))
                .collect(),
            bays: self
                .bays
                .iter()
                .map(|b| BaySpec {
                    id: b.id.clone(),
                    node: self.node_id(b.node).to_owned(),
                    products: b.products.iter().cloned().collect(),
                })
                .collect(),
            spawn: self.node_id(self.spawn).to_owned(),
            despawn: self.node_id(self.despawn).to_owned(),
            tills: self.tills.iter().map(|&t| self.node_id(t).to_owned()).collect(),
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn bays(&self) -> &[Bay] {
        &self.bays
    }

    pub fn spawn(&self) -> NodeIdx {
        self.spawn
    }

    pub fn despawn(&self) -> NodeIdx {
        self.despawn
    }

    pub fn tills(&self) -> &[NodeIdx] {
        &self.tills
    }

    pub fn node_id(&self, idx: NodeIdx) -> &str {
        &self.nodes[idx.0].id
    }

    pub fn position(&self, idx: NodeIdx) -> Position {
        self.nodes[idx.0].position
    }

    pub fn node(&self, id: &str) -> Option<NodeIdx> {
        self.node_index.get(id).copied()
    }

    /// Neighbors of `idx` with the connecting edge index, sorted by node id.
    pub fn neighbors(&self, idx: NodeIdx) -> &[(NodeIdx, usize)] {
        &self.adjacency[idx.0]
    }

    pub fn bay(&self, id: &str) -> Option<usize> {
        self.bays.iter().position(|b| b.id == id)
    }

    /// Bay index stocking `product`, if any.
    pub fn bay_of_product(&self, product: &str) -> Option<usize> {
        self.product_bay.get(product).copied()
    }

    /// All products stocked anywhere in the store.
    pub fn catalog(&self) -> BTreeSet<String> {
        self.product_bay.keys().cloned().collect()
    }

    /// Length of the edge between two adjacent nodes.
    pub fn edge_length(&self, a: NodeIdx, b: NodeIdx) -> Option<f64> {
        self.adjacency[a.0]
            .iter()
            .find(|(n, _)| *n == b)
            .map(|&(_, e)| self.edges[e].length)
    }

    /// Shortest route between two nodes given by id.
    pub fn route(&self, from: &str, to: &str) -> Result<Route, LayoutError> {
        let f = self.node(from).ok_or_else(|| LayoutError::UnknownNode(from.into()))?;
        let t = self.node(to).ok_or_else(|| LayoutError::UnknownNode(to.into()))?;
        self.route_idx(f, t)
    }

    pub fn route_idx(&self, from: NodeIdx, to: NodeIdx) -> Result<Route, LayoutError> {
        self.route_weighted(from, to, |_| 1.0)
    }

    /// Shortest route where each edge's length is scaled by `cost(edge index)`
    /// (≥ 1). The returned length is the true walking distance.
    ///
    /// Among equal-cost routes the lexicographically smallest node-id sequence
    /// wins: distances to the goal are computed first, then the path is built
    /// greedily by always stepping to the smallest-id neighbor that stays on
    /// a shortest route.
    pub fn route_weighted(
        &self,
        from: NodeIdx,
        to: NodeIdx,
        cost: impl Fn(usize) -> f64,
    ) -> Result<Route, LayoutError> {
        let dist = self.costs_to(to, &cost);
        if !dist[from.0].is_finite() {
            return Err(LayoutError::Unreachable {
                from: self.node_id(from).into(),
                to: self.node_id(to).into(),
            });
        }
        let mut nodes = vec![from];
        let mut length = 0.0;
        let mut cur = from;
        while cur != to {
            let here = dist[cur.0];
            let (next, e) = self.adjacency[cur.0]
                .iter()
                .copied()
                .find(|&(m, e)| {
                    let step = self.edges[e].length * cost(e);
                    (step + dist[m.0] - here).abs() <= LENGTH_EPS * here.max(1.0)
                })
                .expect("a shortest-path successor exists for every reachable node");
            length += self.edges[e].length;
            nodes.push(next);
            cur = next;
        }
        Ok(Route { nodes, length })
    }

    fn costs_to(&self, target: NodeIdx, cost: &impl Fn(usize) -> f64) -> Vec<f64> {
        let mut dist = vec![f64::INFINITY; self.nodes.len()];
        let mut heap = BinaryHeap::new();
        dist[target.0] = 0.0;
        heap.push(HeapItem(0.0, target));
        while let Some(HeapItem(d, n)) = heap.pop() {
            if d > dist[n.0] {
                continue;
            }
            for &(m, e) in &self.adjacency[n.0] {
                let nd = d + self.edges[e].length * cost(e);
                if nd < dist[m.0] {
                    dist[m.0] = nd;
                    heap.push(HeapItem(nd, m));
                }
            }
        }
        dist
    }

    /// Route lengths from `from` to every node.
    pub fn distances_from(&self, from: NodeIdx) -> Vec<f64> {
        self.costs_to(from, &|_| 1.0)
    }
}

#[derive(PartialEq)]
struct HeapItem(f64, NodeIdx);

impl Eq for HeapItem {}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .0
            .total_cmp(&self.0)
            .then_with(|| other.1.cmp(&self.1))
    }
}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Position {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:.3}, {:.3})", self.x, self.y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corridor() -> StoreLayout {
        StoreLayout::from_json(
            r#"{"version":1,"id":"corridor",
            "nodes":[{"id":"a","x":0,"y":0},{"id":"b","x":3,"y":0},{"id":"c","x":3,"y":4},
                     {"id":"d","x":10,"y":4},{"id":"e","x":12,"y":4},{"id":"f","x":14,"y":4}],
            "edges":[["a","b"],["b","c"],["c","d"],["d","e"],["e","f"]],
            "bays":[{"id":"B1","node":"b","products":["p1"]},{"id":"B2","node":"c","products":["p2"]},
                    {"id":"B3","node":"d","products":["p3"]},{"id":"B4","node":"e","products":["p4"]},
                    {"id":"B5","node":"f","products":["p5"]}],
            "spawn":"a","despawn":"f","tills":["e"]}"#,
        )
        .unwrap()
    }

    #[test]
    fn route_to_self_is_trivial() {
        let l = corridor();
        let r = l.route("c", "c").unwrap();
        assert_eq!(r.nodes.len(), 1);
        assert_eq!(r.length, 0.0);
    }

    #[test]
    fn corridor_route_follows_the_only_path() {
        let l = corridor();
        let r = l.route("a", "d").unwrap();
        let ids: Vec<_> = r.nodes.iter().map(|&n| l.node_id(n)).collect();
        assert_eq!(ids, ["a", "b", "c", "d"]);
        assert!((r.length - (3.0 + 4.0 + 7.0)).abs() < 1e-12);
    }

    #[test]
    fn edge_lengths_are_euclidean() {
        let l = corridor();
        for e in l.edges() {
            let d = l.position(e.a).distance(&l.position(e.b));
            assert!((e.length - d).abs() < 1e-9);
        }
    }

    #[test]
    fn unknown_node_is_rejected() {
        assert!(matches!(
            corridor().route("a", "zz"),
            Err(LayoutError::UnknownNode(_))
        ));
    }

    #[test]
    fn disconnected_bay_is_named() {
        let mut file = corridor().to_file();
        file.nodes.push(NodeSpec { id: "island".into(), x: 50.0, y: 50.0 });
        file.bays[2].node = "island".into();
        let err = StoreLayout::from_file(file).unwrap_err().to_string();
        assert!(err.contains("B3"), "{err}");
    }

    #[test]
    fn validation_rules() {
        let base = corridor().to_file();

        let mut f = base.clone();
        f.despawn = f.spawn.clone();
        assert!(StoreLayout::from_file(f).is_err());

        let mut f = base.clone();
        f.tills.clear();
        assert!(StoreLayout::from_file(f).is_err());

        let mut f = base.clone();
        f.bays.pop();
        assert!(StoreLayout::from_file(f).unwrap_err().to_string().contains("bays"));

        let mut f = base.clone();
        f.bays[1].products.push("p1".into());
        assert!(StoreLayout::from_file(f).unwrap_err().to_string().contains("p1"));

        let mut f = base.clone();
        f.version = 2;
        assert!(StoreLayout::from_file(f).is_err());

        let mut f = base;
        f.edges.push(("a".into(), "a".into()));
        assert!(StoreLayout::from_file(f).is_err());
    }

    #[test]
    fn weighted_route_detours_around_costly_edge() {
        // square a-b-c-d with diagonal-free sides; penalize a-b
        let l = StoreLayout::from_json(
            r#"{"version":1,"id":"sq",
            "nodes":[{"id":"a","x":0,"y":0},{"id":"b","x":1,"y":0},{"id":"c","x":1,"y":1},{"id":"d","x":0,"y":1}],
            "edges":[["a","b"],["b","c"],["c","d"],["d","a"]],
            "bays":[{"id":"1","node":"a"},{"id":"2","node":"b"},{"id":"3","node":"c"},{"id":"4","node":"d"},{"id":"5","node":"a"}],
            "spawn":"a","despawn":"c","tills":["d"]}"#,
        )
        .unwrap();
        let a = l.node("a").unwrap();
        let b = l.node("b").unwrap();
        let direct = l.route_idx(a, b).unwrap();
        assert_eq!(direct.nodes.len(), 2);
        let detour = l.route_weighted(a, b, |e| if e == 0 { 10.0 } else { 1.0 }).unwrap();
        assert_eq!(detour.nodes.len(), 4);
        assert!((detour.length - 3.0).abs() < 1e-12);
    }
}
