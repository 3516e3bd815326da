//! Random DAGs, three-class edge labels, CPDAGs, and Meek orientation rules.
//!
//! Nodes are `0..d`. Directed edges are `(parent, child)` pairs; undirected
//! edges are stored as `(min, max)` pairs. The three edge classes over an
//! unordered node pair are: no edge, skeleton edge (the pair is adjacent in
//! the DAG), and moralized edge (non-adjacent parents of a common child).

use std::collections::BTreeSet;

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors for graph construction and CPDAG manipulation.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum GraphError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("node {node} out of range for d={d}")]
    NodeOutOfRange { node: usize, d: usize },
    #[error("self loop at node {0}")]
    SelfLoop(usize),
    #[error("directed edges contain a cycle")]
    Cyclic,
    #[error("pair ({0}, {1}) appears as both directed and undirected")]
    DuplicatePair(usize, usize),
    #[error("pair ({0}, {1}) is not labeled as a moralized edge")]
    NotAnImmorality(usize, usize),
}

/// Class of an unordered node pair in the three-class labeling.
///
/// The discriminants fix the class-axis order used by label tensors and
/// network outputs everywhere in the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum EdgeClass {
    NoEdge = 0,
    Skeleton = 1,
    Moralized = 2,
}

impl EdgeClass {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(idx: usize) -> Option<Self> {
        match idx {
            0 => Some(EdgeClass::NoEdge),
            1 => Some(EdgeClass::Skeleton),
            2 => Some(EdgeClass::Moralized),
            _ => None,
        }
    }
}

/// A directed acyclic graph over nodes `0..d`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DagSpec {
    d: usize,
    edges: BTreeSet<(usize, usize)>,
}

impl DagSpec {
    /// Builds a DAG, rejecting out-of-range nodes, self loops, and cycles.
    pub fn new(d: usize, edges: BTreeSet<(usize, usize)>) -> Result<Self, GraphError> {
        for &(p, c) in &edges {
            if p >= d {
                return Err(GraphError::NodeOutOfRange { node: p, d });
            }
            if c >= d {
                return Err(GraphError::NodeOutOfRange { node: c, d });
            }
            if p == c {
                return Err(GraphError::SelfLoop(p));
            }
        }
        if !directed_edges_are_acyclic(d, &edges) {
            return Err(GraphError::Cyclic);
        }
        Ok(DagSpec { d, edges })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn edges(&self) -> &BTreeSet<(usize, usize)> {
        &self.edges
    }

    pub fn has_edge(&self, parent: usize, child: usize) -> bool {
        self.edges.contains(&(parent, child))
    }

    /// True when the nodes are connected by an edge in either direction.
    pub fn adjacent(&self, a: usize, b: usize) -> bool {
        self.has_edge(a, b) || self.has_edge(b, a)
    }

    pub fn parents(&self, v: usize) -> Vec<usize> {
        self.edges
            .iter()
            .filter(|&&(_, c)| c == v)
            .map(|&(p, _)| p)
            .collect()
    }

    pub fn children(&self, v: usize) -> Vec<usize> {
        self.edges
            .iter()
            .filter(|&&(p, _)| p == v)
            .map(|&(_, c)| c)
            .collect()
    }

    /// Unordered adjacency pairs `(min, max)`.
    pub fn skeleton(&self) -> BTreeSet<(usize, usize)> {
        self.edges
            .iter()
            .map(|&(p, c)| (p.min(c), p.max(c)))
            .collect()
    }

    /// A deterministic topological order (Kahn's algorithm, smallest id first).
    pub fn topological_order(&self) -> Vec<usize> {
        let mut indegree = vec![0usize; self.d];
        for &(_, c) in &self.edges {
            indegree[c] += 1;
        }
        let mut ready: BTreeSet<usize> = (0..self.d).filter(|&v| indegree[v] == 0).collect();
        let mut order = Vec::with_capacity(self.d);
        while let Some(&v) = ready.iter().next() {
            ready.remove(&v);
            order.push(v);
            for c in self.children(v) {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    ready.insert(c);
                }
            }
        }
        debug_assert_eq!(order.len(), self.d);
        order
    }

    /// Relabels node `v` as `perm[v]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self, GraphError> {
        if perm.len() != self.d {
            return Err(GraphError::InvalidParameter(format!(
                "permutation length {} does not match d={}",
                perm.len(),
                self.d
            )));
        }
        let edges = self
            .edges
            .iter()
            .map(|&(p, c)| (perm[p], perm[c]))
            .collect();
        DagSpec::new(self.d, edges)
    }
}

fn directed_edges_are_acyclic(d: usize, edges: &BTreeSet<(usize, usize)>) -> bool {
    let mut indegree = vec![0usize; d];
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); d];
    for &(p, c) in edges {
        if p >= d || c >= d {
            return false;
        }
        indegree[c] += 1;
        children[p].push(c);
    }
    let mut stack: Vec<usize> = (0..d).filter(|&v| indegree[v] == 0).collect();
    let mut seen = 0;
    while let Some(v) = stack.pop() {
        seen += 1;
        for &c in &children[v] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                stack.push(c);
            }
        }
    }
    seen == d
}

/// Size parameters of one simulated world: node count, expected neighbors,
/// and sample count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WorldParams {
    pub d: usize,
    pub q: usize,
    pub m: usize,
}

/// Inclusive sampling ranges for [`sample_graph_params_in`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldRanges {
    pub d_min: usize,
    pub d_max: usize,
    pub m_min: usize,
    pub m_max: usize,
}

impl Default for WorldRanges {
    fn default() -> Self {
        WorldRanges {
            d_min: 10,
            d_max: 100,
            m_min: 50,
            m_max: 1000,
        }
    }
}

/// Draws `(d, q, m)` from the default training distribution:
/// `d ~ U{10..100}`, `q ~ U{1..min(floor(d/3), 5)}`, `m ~ U{50..1000}`.
pub fn sample_graph_params<R: Rng>(rng: &mut R) -> WorldParams {
    sample_graph_params_in(WorldRanges::default(), rng)
}

/// Draws `(d, q, m)` with custom `d` and `m` ranges; the expected-neighbor
/// cap `min(floor(d/3), 5)` tracks the sampled `d`.
pub fn sample_graph_params_in<R: Rng>(ranges: WorldRanges, rng: &mut R) -> WorldParams {
    let d = rng.random_range(ranges.d_min..=ranges.d_max);
    let q_cap = (d / 3).clamp(1, 5);
    let q = rng.random_range(1..=q_cap);
    let m = rng.random_range(ranges.m_min..=ranges.m_max);
    WorldParams { d, q, m }
}

/// Samples an Erdős–Rényi DAG: each unordered pair is an edge with
/// probability `q/(d-1)` (so each node has `q` expected neighbors), and
/// edges are oriented along a uniformly random topological order.
pub fn sample_er_dag<R: Rng>(d: usize, q: usize, rng: &mut R) -> Result<DagSpec, GraphError> {
    if d < 2 {
        return Err(GraphError::InvalidParameter(format!(
            "d must be at least 2, got {d}"
        )));
    }
    if q < 1 || q >= d {
        return Err(GraphError::InvalidParameter(format!(
            "q must satisfy 1 <= q <= d-1, got q={q} with d={d}"
        )));
    }
    let p = q as f64 / (d - 1) as f64;
    let mut order: Vec<usize> = (0..d).collect();
    order.shuffle(rng);
    // rank[v] = position of node v in the topological order
    let mut rank = vec![0usize; d];
    for (pos, &v) in order.iter().enumerate() {
        rank[v] = pos;
    }
    let mut edges = BTreeSet::new();
    for i in 0..d {
        for j in (i + 1)..d {
            if rng.random::<f64>() < p {
                if rank[i] < rank[j] {
                    edges.insert((i, j));
                } else {
                    edges.insert((j, i));
                }
            }
        }
    }
    DagSpec::new(d, edges)
}

/// Three-class labels over all node pairs, stored one-hot as a `d x d x 3`
/// tensor that is symmetric in the first two axes with a no-edge diagonal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThreeClassLabels {
    d: usize,
    class_ids: Array2<u8>,
}

impl ThreeClassLabels {
    /// Builds labels from a class matrix, enforcing symmetry and a no-edge
    /// diagonal.
    pub fn from_class_matrix(class_ids: Array2<u8>) -> Result<Self, GraphError> {
        let d = class_ids.nrows();
        if class_ids.ncols() != d {
            return Err(GraphError::InvalidParameter(format!(
                "class matrix must be square, got {}x{}",
                class_ids.nrows(),
                class_ids.ncols()
            )));
        }
        for i in 0..d {
            if class_ids[[i, i]] != EdgeClass::NoEdge.index() as u8 {
                return Err(GraphError::InvalidParameter(format!(
                    "diagonal entry ({i}, {i}) must be the no-edge class"
                )));
            }
            for j in 0..d {
                let v = class_ids[[i, j]];
                if EdgeClass::from_index(v as usize).is_none() {
                    return Err(GraphError::InvalidParameter(format!(
                        "invalid class id {v} at ({i}, {j})"
                    )));
                }
                if class_ids[[i, j]] != class_ids[[j, i]] {
                    return Err(GraphError::InvalidParameter(format!(
                        "class matrix not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(ThreeClassLabels { d, class_ids })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn class(&self, i: usize, j: usize) -> EdgeClass {
        EdgeClass::from_index(self.class_ids[[i, j]] as usize).expect("validated on construction")
    }

    pub fn class_matrix(&self) -> &Array2<u8> {
        &self.class_ids
    }

    /// The labels as a one-hot `d x d x 3` tensor.
    pub fn one_hot(&self) -> Array3<f64> {
        let mut t = Array3::zeros((self.d, self.d, 3));
        for i in 0..self.d {
            for j in 0..self.d {
                t[[i, j, self.class_ids[[i, j]] as usize]] = 1.0;
            }
        }
        t
    }

    /// Unordered pairs labeled [`EdgeClass::Skeleton`].
    pub fn skeleton_pairs(&self) -> BTreeSet<(usize, usize)> {
        self.pairs_of_class(EdgeClass::Skeleton)
    }

    /// Unordered pairs labeled [`EdgeClass::Moralized`].
    pub fn moralized_pairs(&self) -> BTreeSet<(usize, usize)> {
        self.pairs_of_class(EdgeClass::Moralized)
    }

    fn pairs_of_class(&self, class: EdgeClass) -> BTreeSet<(usize, usize)> {
        let mut out = BTreeSet::new();
        for i in 0..self.d {
            for j in (i + 1)..self.d {
                if self.class(i, j) == class {
                    out.insert((i, j));
                }
            }
        }
        out
    }

    /// Relabels node `v` as `perm[v]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self, GraphError> {
        if perm.len() != self.d {
            return Err(GraphError::InvalidParameter(format!(
                "permutation length {} does not match d={}",
                perm.len(),
                self.d
            )));
        }
        let mut out = Array2::zeros((self.d, self.d));
        for i in 0..self.d {
            for j in 0..self.d {
                out[[perm[i], perm[j]]] = self.class_ids[[i, j]];
            }
        }
        ThreeClassLabels::from_class_matrix(out)
    }
}

/// Derives the three-class labels of a DAG: adjacent pairs are skeleton
/// edges; non-adjacent pairs that share a common child are moralized edges;
/// everything else is no-edge.
pub fn derive_three_class_labels(g: &DagSpec) -> ThreeClassLabels {
    let d = g.d();
    let mut class_ids = Array2::zeros((d, d));
    for i in 0..d {
        for j in (i + 1)..d {
            let class = if g.adjacent(i, j) {
                EdgeClass::Skeleton
            } else if (0..d).any(|k| g.has_edge(i, k) && g.has_edge(j, k)) {
                EdgeClass::Moralized
            } else {
                EdgeClass::NoEdge
            };
            class_ids[[i, j]] = class.index() as u8;
            class_ids[[j, i]] = class.index() as u8;
        }
    }
    ThreeClassLabels::from_class_matrix(class_ids).expect("construction is symmetric by design")
}

/// A partially directed graph: directed edges plus undirected `(min, max)`
/// pairs, disjoint on unordered pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cpdag {
    d: usize,
    directed: BTreeSet<(usize, usize)>,
    undirected: BTreeSet<(usize, usize)>,
}

impl Cpdag {
    pub fn new(
        d: usize,
        directed: BTreeSet<(usize, usize)>,
        undirected: BTreeSet<(usize, usize)>,
    ) -> Result<Self, GraphError> {
        let mut seen: BTreeSet<(usize, usize)> = BTreeSet::new();
        for &(p, c) in &directed {
            if p >= d {
                return Err(GraphError::NodeOutOfRange { node: p, d });
            }
            if c >= d {
                return Err(GraphError::NodeOutOfRange { node: c, d });
            }
            if p == c {
                return Err(GraphError::SelfLoop(p));
            }
            if !seen.insert((p.min(c), p.max(c))) {
                return Err(GraphError::DuplicatePair(p.min(c), p.max(c)));
            }
        }
        for &(a, b) in &undirected {
            if a >= d {
                return Err(GraphError::NodeOutOfRange { node: a, d });
            }
            if b >= d {
                return Err(GraphError::NodeOutOfRange { node: b, d });
            }
            if a == b {
                return Err(GraphError::SelfLoop(a));
            }
            if a > b {
                return Err(GraphError::InvalidParameter(format!(
                    "undirected pair ({a}, {b}) must be stored as (min, max)"
                )));
            }
            if !seen.insert((a, b)) {
                return Err(GraphError::DuplicatePair(a, b));
            }
        }
        Ok(Cpdag {
            d,
            directed,
            undirected,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn directed(&self) -> &BTreeSet<(usize, usize)> {
        &self.directed
    }

    pub fn undirected(&self) -> &BTreeSet<(usize, usize)> {
        &self.undirected
    }

    pub fn has_directed(&self, parent: usize, child: usize) -> bool {
        self.directed.contains(&(parent, child))
    }

    pub fn has_undirected(&self, a: usize, b: usize) -> bool {
        self.undirected.contains(&(a.min(b), a.max(b)))
    }

    pub fn adjacent(&self, a: usize, b: usize) -> bool {
        self.has_directed(a, b) || self.has_directed(b, a) || self.has_undirected(a, b)
    }

    /// All adjacent pairs as unordered `(min, max)` pairs.
    pub fn skeleton(&self) -> BTreeSet<(usize, usize)> {
        let mut out: BTreeSet<(usize, usize)> = self
            .directed
            .iter()
            .map(|&(p, c)| (p.min(c), p.max(c)))
            .collect();
        out.extend(self.undirected.iter().copied());
        out
    }

    /// True when the directed part contains no cycle.
    pub fn directed_part_is_acyclic(&self) -> bool {
        directed_edges_are_acyclic(self.d, &self.directed)
    }
}

/// Colliders `i -> k <- j` with non-adjacent `i, j`, reported as
/// `(min(i, j), max(i, j), k)`.
pub fn vstructures(g: &DagSpec) -> BTreeSet<(usize, usize, usize)> {
    let d = g.d();
    let mut out = BTreeSet::new();
    for k in 0..d {
        let parents = g.parents(k);
        for (a_idx, &i) in parents.iter().enumerate() {
            for &j in parents.iter().skip(a_idx + 1) {
                if !g.adjacent(i, j) {
                    out.insert((i.min(j), i.max(j), k));
                }
            }
        }
    }
    out
}

/// Converts a DAG to its CPDAG: keep the skeleton, orient v-structure edges,
/// and close under the Meek rules.
pub fn dag_to_cpdag(g: &DagSpec) -> Cpdag {
    let mut directed: BTreeSet<(usize, usize)> = BTreeSet::new();
    for &(i, j, k) in &vstructures(g) {
        directed.insert((i, k));
        directed.insert((j, k));
    }
    let undirected: BTreeSet<(usize, usize)> = g
        .skeleton()
        .into_iter()
        .filter(|&(a, b)| !directed.contains(&(a, b)) && !directed.contains(&(b, a)))
        .collect();
    let seed = Cpdag::new(g.d(), directed, undirected)
        .expect("skeleton split produces disjoint edge sets");
    apply_meek_rules(&seed).expect("v-structure orientations of a DAG are acyclic")
}

/// Closes a partially directed graph under Meek rules R1-R4.
///
/// Orientation happens in place on the undirected pairs; directed edges are
/// never removed or reversed. Fails if the input's directed part already
/// contains a cycle.
pub fn apply_meek_rules(input: &Cpdag) -> Result<Cpdag, GraphError> {
    if !input.directed_part_is_acyclic() {
        return Err(GraphError::Cyclic);
    }
    let d = input.d;
    let mut dir = input.directed.clone();
    let mut und = input.undirected.clone();

    let mut changed = true;
    while changed {
        changed = false;
        let snapshot: Vec<(usize, usize)> = und.iter().copied().collect();
        for (a, b) in snapshot {
            if !und.contains(&(a, b)) {
                continue;
            }
            for (x, y) in [(a, b), (b, a)] {
                if meek_rule_applies(d, &dir, &und, x, y) {
                    // A compelled orientation from a consistent input can
                    // never close a directed cycle; guard anyway so the
                    // closure keeps its acyclicity contract on odd inputs.
                    if has_directed_path(d, &dir, y, x) {
                        continue;
                    }
                    und.remove(&(a, b));
                    dir.insert((x, y));
                    changed = true;
                    break;
                }
            }
        }
    }
    Cpdag::new(d, dir, und)
}

/// True when any of Meek rules R1-R4 orients the undirected pair `{x, y}`
/// as `x -> y`.
fn meek_rule_applies(
    d: usize,
    dir: &BTreeSet<(usize, usize)>,
    und: &BTreeSet<(usize, usize)>,
    x: usize,
    y: usize,
) -> bool {
    let adj = |a: usize, b: usize| {
        dir.contains(&(a, b)) || dir.contains(&(b, a)) || und.contains(&(a.min(b), a.max(b)))
    };

    // R1: w -> x, x - y, w and y non-adjacent  =>  x -> y.
    for w in 0..d {
        if w != y && dir.contains(&(w, x)) && !adj(w, y) {
            return true;
        }
    }
    // R2: x -> w -> y with x - y  =>  x -> y.
    for w in 0..d {
        if dir.contains(&(x, w)) && dir.contains(&(w, y)) {
            return true;
        }
    }
    // R3: x - c, x - e, c -> y, e -> y, c and e non-adjacent  =>  x -> y.
    let und_neighbors: Vec<usize> = (0..d)
        .filter(|&w| w != y && und.contains(&(w.min(x), w.max(x))))
        .collect();
    for (ci, &c) in und_neighbors.iter().enumerate() {
        for &e in und_neighbors.iter().skip(ci + 1) {
            if dir.contains(&(c, y)) && dir.contains(&(e, y)) && !adj(c, e) {
                return true;
            }
        }
    }
    // R4: x - w, w -> c, c -> y, w and y non-adjacent, x and c adjacent
    //     =>  x -> y.
    for &w in &und_neighbors {
        if adj(w, y) {
            continue;
        }
        for c in 0..d {
            if c != x && c != y && dir.contains(&(w, c)) && dir.contains(&(c, y)) && adj(x, c) {
                return true;
            }
        }
    }
    false
}

fn has_directed_path(d: usize, dir: &BTreeSet<(usize, usize)>, from: usize, to: usize) -> bool {
    let mut visited = vec![false; d];
    let mut stack = vec![from];
    visited[from] = true;
    while let Some(v) = stack.pop() {
        if v == to {
            return true;
        }
        for &(p, c) in dir.iter() {
            if p == v && !visited[c] {
                visited[c] = true;
                stack.push(c);
            }
        }
    }
    false
}

/// The node sets around one candidate immorality: the labeled pair itself,
/// common candidate children (skeleton neighbors of both endpoints), and
/// exclusive neighbors (skeleton neighbors of exactly one endpoint).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImmoralityContext {
    pub pair: (usize, usize),
    pub common_children: Vec<usize>,
    pub exclusive_neighbors: Vec<usize>,
}

/// Builds the [`ImmoralityContext`] of a pair labeled as a moralized edge.
pub fn immorality_context(
    labels: &ThreeClassLabels,
    i: usize,
    j: usize,
) -> Result<ImmoralityContext, GraphError> {
    let d = labels.d();
    if i >= d {
        return Err(GraphError::NodeOutOfRange { node: i, d });
    }
    if j >= d {
        return Err(GraphError::NodeOutOfRange { node: j, d });
    }
    if i == j {
        return Err(GraphError::SelfLoop(i));
    }
    if labels.class(i, j) != EdgeClass::Moralized {
        return Err(GraphError::NotAnImmorality(i.min(j), i.max(j)));
    }
    let mut common_children = Vec::new();
    let mut exclusive_neighbors = Vec::new();
    for k in 0..d {
        if k == i || k == j {
            continue;
        }
        let near_i = labels.class(i, k) == EdgeClass::Skeleton;
        let near_j = labels.class(j, k) == EdgeClass::Skeleton;
        match (near_i, near_j) {
            (true, true) => common_children.push(k),
            (true, false) | (false, true) => exclusive_neighbors.push(k),
            (false, false) => {}
        }
    }
    Ok(ImmoralityContext {
        pair: (i, j),
        common_children,
        exclusive_neighbors,
    })
}

/// Enumerates every DAG on `d` nodes (all acyclic orientations of all
/// pair subsets).
#[cfg(test)]
pub(crate) fn all_dags(d: usize) -> Vec<DagSpec> {
    let pairs: Vec<(usize, usize)> = (0..d)
        .flat_map(|i| ((i + 1)..d).map(move |j| (i, j)))
        .collect();
    let mut out = Vec::new();
    let mut states = vec![0u8; pairs.len()];
    loop {
        let mut edges = BTreeSet::new();
        for (idx, &(i, j)) in pairs.iter().enumerate() {
            match states[idx] {
                1 => {
                    edges.insert((i, j));
                }
                2 => {
                    edges.insert((j, i));
                }
                _ => {}
            }
        }
        if let Ok(g) = DagSpec::new(d, edges) {
            out.push(g);
        }
        // Ternary counter over pair states.
        let mut pos = 0;
        loop {
            if pos == states.len() {
                return out;
            }
            states[pos] += 1;
            if states[pos] < 3 {
                break;
            }
            states[pos] = 0;
            pos += 1;
        }
    }
}
