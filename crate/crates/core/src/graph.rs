//! Embodiment graphs and the attention masks derived from them.
//!
//! Each node groups the sensors and actuators of one limb. Nodes are tokens,
//! in declaration order. The body-induced mask lets every token attend to
//! itself and to its direct neighbours in the graph.

use std::collections::{BTreeSet, VecDeque};
use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("malformed graph document: {0}")]
    Malformed(String),
    #[error("graph has no nodes")]
    Empty,
    #[error("graph is disconnected ({components} components)")]
    Disconnected { components: usize },
    #[error("graph must have exactly one root, found {0}")]
    RootCount(usize),
    #[error("self-loop on node {0}")]
    SelfLoop(usize),
    #[error("duplicate edge {0}-{1}")]
    DuplicateEdge(usize, usize),
    #[error("edge {0}-{1} references a node outside 0..{2}")]
    EdgeOutOfRange(usize, usize, usize),
    #[error("zero fraction {zero_fraction} outside [0, {max}] for n={n}")]
    ZeroFractionOutOfRange { zero_fraction: f64, max: f64, n: usize },
    #[error("invalid mask: {0}")]
    InvalidMask(String),
    #[error("layout entry '{name}' references node {node}, graph has {n} nodes")]
    UnknownNode { name: String, node: usize, n: usize },
    #[error("node {node} {kind} widths sum to {got}, node declares {expected}")]
    WidthMismatch { node: usize, kind: &'static str, got: usize, expected: usize },
    #[error("invalid permutation")]
    InvalidPermutation,
    #[error("io error: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: usize,
    pub name: String,
    pub obs_dim: usize,
    pub action_dim: usize,
    pub is_root: bool,
}

/// On-disk form of a node: the id is implied by position.
#[derive(Debug, Serialize, Deserialize)]
struct NodeDoc {
    name: String,
    obs_dim: usize,
    action_dim: usize,
    #[serde(default)]
    root: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct GraphDoc {
    nodes: Vec<NodeDoc>,
    #[serde(default)]
    edges: Vec<[usize; 2]>,
}

/// Undirected, simple, connected graph with exactly one root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmbodimentGraph {
    nodes: Vec<NodeSpec>,
    edges: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
}

impl EmbodimentGraph {
    /// Builds and validates a graph. Edge order is preserved; each pair is
    /// stored as given.
    pub fn new(nodes: Vec<NodeSpec>, edges: Vec<(usize, usize)>) -> Result<Self, GraphError> {
        let n = nodes.len();
        if n == 0 {
            return Err(GraphError::Empty);
        }
        let roots = nodes.iter().filter(|s| s.is_root).count();
        if roots != 1 {
            return Err(GraphError::RootCount(roots));
        }
        let mut seen = BTreeSet::new();
        let mut neighbors = vec![Vec::new(); n];
        for &(a, b) in &edges {
            if a >= n || b >= n {
                return Err(GraphError::EdgeOutOfRange(a, b, n));
            }
            if a == b {
                return Err(GraphError::SelfLoop(a));
            }
            if !seen.insert((a.min(b), a.max(b))) {
                return Err(GraphError::DuplicateEdge(a, b));
            }
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        let nodes = nodes
            .into_iter()
            .enumerate()
            .map(|(id, s)| NodeSpec { id, ..s })
            .collect();
        let g = Self { nodes, edges, neighbors };
        let components = g.component_count();
        if components != 1 {
            return Err(GraphError::Disconnected { components });
        }
        Ok(g)
    }

    /// Parses the JSON graph document (`nodes` + `edges`).
    pub fn parse(document: &str) -> Result<Self, GraphError> {
        let doc: GraphDoc =
            serde_json::from_str(document).map_err(|e| GraphError::Malformed(e.to_string()))?;
        let nodes = doc
            .nodes
            .into_iter()
            .enumerate()
            .map(|(id, d)| NodeSpec {
                id,
                name: d.name,
                obs_dim: d.obs_dim,
                action_dim: d.action_dim,
                is_root: d.root,
            })
            .collect();
        let edges = doc.edges.into_iter().map(|[a, b]| (a, b)).collect();
        Self::new(nodes, edges)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GraphError> {
        let text = std::fs::read_to_string(path).map_err(|e| GraphError::Io(e.to_string()))?;
        Self::parse(&text)
    }

    pub fn to_document(&self) -> String {
        let doc = GraphDoc {
            nodes: self
                .nodes
                .iter()
                .map(|s| NodeDoc {
                    name: s.name.clone(),
                    obs_dim: s.obs_dim,
                    action_dim: s.action_dim,
                    root: s.is_root,
                })
                .collect(),
            edges: self.edges.iter().map(|&(a, b)| [a, b]).collect(),
        };
        serde_json::to_string_pretty(&doc).expect("graph document serializes")
    }

    /// Chain 0-1-...-(len-1) with node 0 as root.
    pub fn chain(len: usize, obs_dim: usize, action_dim: usize) -> Result<Self, GraphError> {
        let nodes = (0..len)
            .map(|i| NodeSpec {
                id: i,
                name: format!("link{i}"),
                obs_dim,
                action_dim,
                is_root: i == 0,
            })
            .collect();
        let edges = (1..len).map(|i| (i - 1, i)).collect();
        Self::new(nodes, edges)
    }

    /// Star with centre 0 (the root) and `leaves` leaves.
    pub fn star(leaves: usize, obs_dim: usize, action_dim: usize) -> Result<Self, GraphError> {
        let nodes = (0..=leaves)
            .map(|i| NodeSpec {
                id: i,
                name: if i == 0 { "center".into() } else { format!("leaf{i}") },
                obs_dim,
                action_dim,
                is_root: i == 0,
            })
            .collect();
        let edges = (1..=leaves).map(|i| (0, i)).collect();
        Self::new(nodes, edges)
    }

    /// Complete graph on `n` nodes, node 0 root.
    pub fn complete(n: usize, obs_dim: usize, action_dim: usize) -> Result<Self, GraphError> {
        let nodes = (0..n)
            .map(|i| NodeSpec {
                id: i,
                name: format!("n{i}"),
                obs_dim,
                action_dim,
                is_root: i == 0,
            })
            .collect();
        let edges = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
        Self::new(nodes, edges)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[NodeSpec] {
        &self.nodes
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.neighbors[node]
    }

    pub fn root(&self) -> usize {
        self.nodes.iter().position(|s| s.is_root).expect("validated graph has a root")
    }

    pub fn total_obs_dim(&self) -> usize {
        self.nodes.iter().map(|s| s.obs_dim).sum()
    }

    pub fn total_action_dim(&self) -> usize {
        self.nodes.iter().map(|s| s.action_dim).sum()
    }

    pub fn is_tree(&self) -> bool {
        self.edges.len() + 1 == self.len()
    }

    fn component_count(&self) -> usize {
        let mut seen = vec![false; self.len()];
        let mut count = 0;
        for start in 0..self.len() {
            if seen[start] {
                continue;
            }
            count += 1;
            seen[start] = true;
            let mut queue = VecDeque::from([start]);
            while let Some(u) = queue.pop_front() {
                for &v in &self.neighbors[u] {
                    if !seen[v] {
                        seen[v] = true;
                        queue.push_back(v);
                    }
                }
            }
        }
        count
    }

    pub fn adjacency_matrix(&self) -> Vec<Vec<u8>> {
        let n = self.len();
        let mut a = vec![vec![0u8; n]; n];
        for &(i, j) in &self.edges {
            a[i][j] = 1;
            a[j][i] = 1;
        }
        a
    }

    /// The body-induced mask `I + A`.
    pub fn build_mask(&self) -> AttentionMask {
        let n = self.len();
        let mut mask = AttentionMask::identity(n);
        for &(i, j) in &self.edges {
            mask.entries[i * n + j] = true;
            mask.entries[j * n + i] = true;
        }
        mask
    }

    fn bfs_from(&self, source: usize) -> Vec<usize> {
        let mut dist = vec![usize::MAX; self.len()];
        dist[source] = 0;
        let mut queue = VecDeque::from([source]);
        while let Some(u) = queue.pop_front() {
            for &v in &self.neighbors[u] {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    /// Hop distances between all node pairs (one BFS per source).
    pub fn shortest_path_matrix(&self) -> Vec<Vec<usize>> {
        (0..self.len()).map(|s| self.bfs_from(s)).collect()
    }

    pub fn diameter(&self) -> usize {
        self.shortest_path_matrix()
            .iter()
            .flat_map(|row| row.iter().copied())
            .max()
            .unwrap_or(0)
    }

    /// Nodes within `radius` hops of `node`, sorted.
    pub fn ball(&self, node: usize, radius: usize) -> Vec<usize> {
        self.bfs_from(node)
            .into_iter()
            .enumerate()
            .filter(|&(_, d)| d <= radius)
            .map(|(j, _)| j)
            .collect()
    }

    /// Relabels nodes so that old node `i` becomes new node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self, GraphError> {
        let n = self.len();
        let mut inverse = vec![usize::MAX; n];
        if perm.len() != n {
            return Err(GraphError::InvalidPermutation);
        }
        for (old, &new) in perm.iter().enumerate() {
            if new >= n || inverse[new] != usize::MAX {
                return Err(GraphError::InvalidPermutation);
            }
            inverse[new] = old;
        }
        let nodes = inverse.iter().map(|&old| self.nodes[old].clone()).collect();
        let edges = self.edges.iter().map(|&(a, b)| (perm[a], perm[b])).collect();
        Self::new(nodes, edges)
    }

    /// SHA-256 over the canonical document; used to bind checkpoints to a body.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_document().as_bytes());
        hex::encode(hasher.finalize())
    }
}

/// Square binary mask with unit diagonal. Entry `(i, j) = 1` means query `i`
/// may attend to key `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    n: usize,
    entries: Vec<bool>,
}

impl AttentionMask {
    pub fn identity(n: usize) -> Self {
        let mut entries = vec![false; n * n];
        for i in 0..n {
            entries[i * n + i] = true;
        }
        Self { n, entries }
    }

    pub fn ones(n: usize) -> Self {
        Self { n, entries: vec![true; n * n] }
    }

    /// Validates symmetry, binary entries and the unit diagonal.
    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self, GraphError> {
        let n = rows.len();
        let mut entries = Vec::with_capacity(n * n);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(GraphError::InvalidMask(format!("row {i} has {} entries", row.len())));
            }
            for &x in row {
                match x {
                    0 => entries.push(false),
                    1 => entries.push(true),
                    other => return Err(GraphError::InvalidMask(format!("entry {other}"))),
                }
            }
        }
        let mask = Self { n, entries };
        for i in 0..n {
            if !mask.get(i, i) {
                return Err(GraphError::InvalidMask(format!("diagonal entry {i} is 0")));
            }
            for j in 0..i {
                if mask.get(i, j) != mask.get(j, i) {
                    return Err(GraphError::InvalidMask(format!("asymmetric at ({i},{j})")));
                }
            }
        }
        Ok(mask)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.entries[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.entries[i * self.n..(i + 1) * self.n]
    }

    pub fn to_rows(&self) -> Vec<Vec<u8>> {
        (0..self.n).map(|i| self.row(i).iter().map(|&b| b as u8).collect()).collect()
    }

    pub fn nonzeros(&self) -> usize {
        self.entries.iter().filter(|&&b| b).count()
    }

    pub fn zeros(&self) -> usize {
        self.entries.len() - self.nonzeros()
    }

    /// Fraction of zero entries.
    pub fn zero_fraction(&self) -> f64 {
        self.zeros() as f64 / (self.n * self.n) as f64
    }

    /// Fraction of nonzero entries.
    pub fn density(&self) -> f64 {
        self.nonzeros() as f64 / (self.n * self.n) as f64
    }

    /// `P M Pᵀ` for the permutation sending old index `i` to `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.n;
        let mut entries = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                entries[perm[i] * n + perm[j]] = self.get(i, j);
            }
        }
        Self { n, entries }
    }

    /// Plain-text export: `n=<n>` followed by space-separated 0/1 rows.
    pub fn to_text(&self) -> String {
        let mut out = format!("n={}\n", self.n);
        for i in 0..self.n {
            let row: Vec<&str> = self.row(i).iter().map(|&b| if b { "1" } else { "0" }).collect();
            let _ = writeln!(out, "{}", row.join(" "));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, GraphError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| GraphError::InvalidMask("empty".into()))?;
        let n: usize = header
            .trim()
            .strip_prefix("n=")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| GraphError::InvalidMask(format!("bad header '{header}'")))?;
        let rows = lines
            .map(|l| {
                l.split_whitespace()
                    .map(|t| t.parse::<u8>().map_err(|e| GraphError::InvalidMask(e.to_string())))
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        if rows.len() != n {
            return Err(GraphError::InvalidMask(format!("header says n={n}, found {} rows", rows.len())));
        }
        Self::from_rows(&rows)
    }
}

/// Largest admissible zero count not exceeding `zero_fraction * n^2`: the
/// diagonal never holds zeros and off-diagonal zeros come in symmetric pairs.
pub fn quantized_zero_count(n: usize, zero_fraction: f64) -> Result<usize, GraphError> {
    let max = if n == 0 { 0.0 } else { 1.0 - 1.0 / n as f64 };
    if !zero_fraction.is_finite() || zero_fraction < 0.0 || zero_fraction > max + 1e-12 {
        return Err(GraphError::ZeroFractionOutOfRange { zero_fraction, max, n });
    }
    let target = (zero_fraction * (n * n) as f64 + 1e-9).floor() as usize;
    Ok((target - target % 2).min(n * n - n))
}

/// Random symmetric mask with unit diagonal and (quantized) zero fraction.
/// Deterministic in `(n, zero_fraction, seed)`.
pub fn random_mask(n: usize, zero_fraction: f64, seed: u64) -> Result<AttentionMask, GraphError> {
    let zeros = quantized_zero_count(n, zero_fraction)?;
    let mut pairs: Vec<(usize, usize)> =
        (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pairs.shuffle(&mut rng);
    let mut mask = AttentionMask::ones(n);
    for &(i, j) in pairs.iter().take(zeros / 2) {
        mask.entries[i * n + j] = false;
        mask.entries[j * n + i] = false;
    }
    Ok(mask)
}

/// One named quantity placed on a node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub name: String,
    pub width: usize,
    pub node: usize,
}

impl LayoutEntry {
    pub fn new(name: impl Into<String>, width: usize, node: usize) -> Self {
        Self { name: name.into(), width, node }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantitySlot {
    pub name: String,
    pub node: usize,
    pub range: Range<usize>,
}

/// Where each node's observations and actions live in the flat vectors.
/// Flat vectors are laid out node by node in token order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Allocation {
    pub obs_ranges: Vec<Range<usize>>,
    pub action_ranges: Vec<Range<usize>>,
    pub observations: Vec<QuantitySlot>,
    pub actions: Vec<QuantitySlot>,
}

impl Allocation {
    /// Contiguous per-node slices sized by the node specs, with one anonymous
    /// quantity per nonempty slice.
    pub fn from_graph(g: &EmbodimentGraph) -> Self {
        let obs: Vec<LayoutEntry> = g
            .nodes()
            .iter()
            .filter(|s| s.obs_dim > 0)
            .map(|s| LayoutEntry::new(format!("{}.obs", s.name), s.obs_dim, s.id))
            .collect();
        let act: Vec<LayoutEntry> = g
            .nodes()
            .iter()
            .filter(|s| s.action_dim > 0)
            .map(|s| LayoutEntry::new(format!("{}.action", s.name), s.action_dim, s.id))
            .collect();
        allocate(g, &obs, &act).expect("node dims are self-consistent")
    }

    pub fn obs_width(&self) -> usize {
        self.obs_ranges.last().map_or(0, |r| r.end)
    }

    pub fn action_width(&self) -> usize {
        self.action_ranges.last().map_or(0, |r| r.end)
    }
}

fn place(
    g: &EmbodimentGraph,
    layout: &[LayoutEntry],
    kind: &'static str,
    dim: impl Fn(&NodeSpec) -> usize,
) -> Result<(Vec<Range<usize>>, Vec<QuantitySlot>), GraphError> {
    let n = g.len();
    let mut per_node: Vec<Vec<&LayoutEntry>> = vec![Vec::new(); n];
    for e in layout {
        if e.node >= n {
            return Err(GraphError::UnknownNode { name: e.name.clone(), node: e.node, n });
        }
        per_node[e.node].push(e);
    }
    let mut ranges = Vec::with_capacity(n);
    let mut slots = Vec::with_capacity(layout.len());
    let mut offset = 0;
    for (node, entries) in per_node.iter().enumerate() {
        let got: usize = entries.iter().map(|e| e.width).sum();
        let expected = dim(&g.nodes()[node]);
        if got != expected {
            return Err(GraphError::WidthMismatch { node, kind, got, expected });
        }
        let start = offset;
        for e in entries {
            slots.push(QuantitySlot { name: e.name.clone(), node, range: offset..offset + e.width });
            offset += e.width;
        }
        ranges.push(start..offset);
    }
    Ok((ranges, slots))
}

/// Assigns named observation/action quantities to nodes. Widths per node must
/// sum to the node's declared dims.
pub fn allocate(
    g: &EmbodimentGraph,
    observation_layout: &[LayoutEntry],
    action_layout: &[LayoutEntry],
) -> Result<Allocation, GraphError> {
    let (obs_ranges, observations) = place(g, observation_layout, "observation", |s| s.obs_dim)?;
    let (action_ranges, actions) = place(g, action_layout, "action", |s| s.action_dim)?;
    Ok(Allocation { obs_ranges, action_ranges, observations, actions })
}
