//! Node-classification graphs: bundle I/O, synthetic generators, hop
//! queries and single-edge edits.

use std::collections::{BTreeSet, VecDeque};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diff::{Mat, SparsePattern};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("cannot read graph bundle {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed graph JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("label {label} of node {node} is outside 0..{num_classes}")]
    LabelOutOfRange {
        node: usize,
        label: usize,
        num_classes: usize,
    },
    #[error("self-loop on node {0}")]
    SelfLoop(usize),
    #[error("duplicate edge {{{0}, {1}}}")]
    DuplicateEdge(usize, usize),
    #[error("node {node} out of range for a graph with {num_nodes} nodes")]
    NodeOutOfRange { node: usize, num_nodes: usize },
    #[error("node {node} appears in both the {first} and {second} masks")]
    MaskOverlap {
        node: usize,
        first: &'static str,
        second: &'static str,
    },
    #[error("invalid edit {edit}: {reason}")]
    InvalidEdit { edit: String, reason: &'static str },
    #[error("invalid generator spec: {0}")]
    Generator(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditKind {
    Delete,
    Insert,
}

impl EditKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EditKind::Delete => "delete",
            EditKind::Insert => "insert",
        }
    }

    /// `2·𝕀[{u,v} ∈ E] − 1`: +1 for deletions, −1 for insertions.
    pub fn sign(self) -> f64 {
        match self {
            EditKind::Delete => 1.0,
            EditKind::Insert => -1.0,
        }
    }
}

impl std::str::FromStr for EditKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "delete" | "del" | "d" => Ok(EditKind::Delete),
            "insert" | "ins" | "i" => Ok(EditKind::Insert),
            other => Err(format!("unknown edit kind `{other}`")),
        }
    }
}

/// One undirected edge edit. Endpoints are stored in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CandidateEdit {
    pub u: usize,
    pub v: usize,
    pub kind: EditKind,
}

impl CandidateEdit {
    pub fn new(u: usize, v: usize, kind: EditKind) -> Self {
        Self {
            u: u.min(v),
            v: u.max(v),
            kind,
        }
    }

    pub fn delete(u: usize, v: usize) -> Self {
        Self::new(u, v, EditKind::Delete)
    }

    pub fn insert(u: usize, v: usize) -> Self {
        Self::new(u, v, EditKind::Insert)
    }

    pub fn pair(&self) -> (usize, usize) {
        (self.u, self.v)
    }

    pub fn reversed(&self) -> Self {
        let kind = match self.kind {
            EditKind::Delete => EditKind::Insert,
            EditKind::Insert => EditKind::Delete,
        };
        Self { kind, ..*self }
    }
}

impl std::fmt::Display for CandidateEdit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}{{{},{}}}", self.kind.as_str(), self.u, self.v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EdgeClass {
    Homophilic,
    Heterophilic,
}

impl EdgeClass {
    pub fn as_str(self) -> &'static str {
        match self {
            EdgeClass::Homophilic => "homophilic",
            EdgeClass::Heterophilic => "heterophilic",
        }
    }
}

/// On-disk graph bundle.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphBundle {
    pub num_nodes: usize,
    pub num_classes: usize,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub edges: Vec<[usize; 2]>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Immutable node-classification graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    num_nodes: usize,
    num_classes: usize,
    features: Mat<f64>,
    labels: Vec<usize>,
    edges: BTreeSet<(usize, usize)>,
    train: Vec<usize>,
    val: Vec<usize>,
    test: Vec<usize>,
}

impl Graph {
    pub fn from_bundle(b: GraphBundle) -> Result<Self, GraphError> {
        let n = b.num_nodes;
        if b.features.len() != n {
            return Err(GraphError::Dimension(format!(
                "{} feature rows for {n} nodes",
                b.features.len()
            )));
        }
        let d = b.features.first().map_or(0, Vec::len);
        if let Some((i, row)) = b.features.iter().enumerate().find(|(_, r)| r.len() != d) {
            return Err(GraphError::Dimension(format!(
                "feature row {i} has {} entries, expected {d}",
                row.len()
            )));
        }
        if b.labels.len() != n {
            return Err(GraphError::Dimension(format!(
                "{} labels for {n} nodes",
                b.labels.len()
            )));
        }
        if let Some((node, &label)) = b.labels.iter().enumerate().find(|(_, &l)| l >= b.num_classes) {
            return Err(GraphError::LabelOutOfRange {
                node,
                label,
                num_classes: b.num_classes,
            });
        }
        let mut edges = BTreeSet::new();
        for &[u, v] in &b.edges {
            for x in [u, v] {
                if x >= n {
                    return Err(GraphError::NodeOutOfRange { node: x, num_nodes: n });
                }
            }
            if u == v {
                return Err(GraphError::SelfLoop(u));
            }
            if !edges.insert((u.min(v), u.max(v))) {
                return Err(GraphError::DuplicateEdge(u.min(v), u.max(v)));
            }
        }
        let mut owner: Vec<Option<&'static str>> = vec![None; n];
        let mut masks = Vec::new();
        for (name, mask) in [("train", &b.train), ("val", &b.val), ("test", &b.test)] {
            let mut sorted = Vec::with_capacity(mask.len());
            for &node in mask {
                if node >= n {
                    return Err(GraphError::NodeOutOfRange { node, num_nodes: n });
                }
                if let Some(first) = owner[node] {
                    return Err(GraphError::MaskOverlap {
                        node,
                        first,
                        second: name,
                    });
                }
                owner[node] = Some(name);
                sorted.push(node);
            }
            sorted.sort_unstable();
            masks.push(sorted);
        }
        let test = masks.pop().unwrap();
        let val = masks.pop().unwrap();
        let train = masks.pop().unwrap();
        let features = Mat::from_vec(n, d, b.features.into_iter().flatten().collect());
        Ok(Self {
            num_nodes: n,
            num_classes: b.num_classes,
            features,
            labels: b.labels,
            edges,
            train,
            val,
            test,
        })
    }

    pub fn to_bundle(&self) -> GraphBundle {
        GraphBundle {
            num_nodes: self.num_nodes,
            num_classes: self.num_classes,
            features: (0..self.num_nodes)
                .map(|r| self.features.row(r).to_vec())
                .collect(),
            labels: self.labels.clone(),
            edges: self.edges.iter().map(|&(u, v)| [u, v]).collect(),
            train: self.train.clone(),
            val: self.val.clone(),
            test: self.test.clone(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, GraphError> {
        Self::from_bundle(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_bundle()).expect("bundle serializes")
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols
    }

    pub fn features(&self) -> &Mat<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn edges(&self) -> impl ExactSizeIterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.edges.contains(&(u.min(v), u.max(v)))
    }

    pub fn train(&self) -> &[usize] {
        &self.train
    }

    pub fn val(&self) -> &[usize] {
        &self.val
    }

    pub fn test(&self) -> &[usize] {
        &self.test
    }

    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_nodes];
        for &(u, v) in &self.edges {
            adj[u].push(v);
            adj[v].push(u);
        }
        adj
    }

    /// Same graph with different features; structure and masks kept.
    pub fn with_features(&self, features: Mat<f64>) -> Self {
        assert_eq!(features.rows, self.num_nodes);
        Self {
            features,
            ..self.clone()
        }
    }

    /// Same graph with relabeled classes (testing aid).
    pub fn with_labels(&self, labels: Vec<usize>, num_classes: usize) -> Result<Self, GraphError> {
        let mut b = self.to_bundle();
        b.labels = labels;
        b.num_classes = num_classes;
        Self::from_bundle(b)
    }

    /// Unweighted adjacency with extra zero-weight entries materialized
    /// at `candidates` so gradients exist there.
    pub fn adjacency_with_candidates(&self, candidates: &[(usize, usize)]) -> WeightedAdjacency {
        let pairs: Vec<(usize, usize)> = self
            .edges
            .iter()
            .copied()
            .chain(candidates.iter().map(|&(u, v)| (u.min(v), u.max(v))))
            .collect();
        let pattern = Arc::new(SparsePattern::symmetric(self.num_nodes, pairs));
        let weights = pattern
            .entries()
            .map(|(r, c)| if self.has_edge(r, c) { 1.0 } else { 0.0 })
            .collect();
        WeightedAdjacency { pattern, weights }
    }

    pub fn adjacency(&self) -> WeightedAdjacency {
        self.adjacency_with_candidates(&[])
    }

    pub fn validate_edit(&self, edit: &CandidateEdit) -> Result<(), GraphError> {
        let invalid = |reason| GraphError::InvalidEdit {
            edit: edit.to_string(),
            reason,
        };
        if edit.u >= self.num_nodes || edit.v >= self.num_nodes {
            return Err(invalid("endpoint out of range"));
        }
        if edit.u == edit.v {
            return Err(invalid("self-loop"));
        }
        match (edit.kind, self.has_edge(edit.u, edit.v)) {
            (EditKind::Delete, false) => Err(invalid("edge to delete is absent")),
            (EditKind::Insert, true) => Err(invalid("edge to insert already exists")),
            _ => Ok(()),
        }
    }

    /// Returns the graph with the edit realized; `self` is unchanged.
    pub fn apply_edit(&self, edit: &CandidateEdit) -> Result<Graph, GraphError> {
        self.validate_edit(edit)?;
        let mut g = self.clone();
        match edit.kind {
            EditKind::Delete => g.edges.remove(&edit.pair()),
            EditKind::Insert => g.edges.insert(edit.pair()),
        };
        Ok(g)
    }

    /// Applies several edits in order; each must be valid on the graph
    /// produced by the previous ones.
    pub fn apply_edits(&self, edits: &[CandidateEdit]) -> Result<Graph, GraphError> {
        let mut g = self.clone();
        for e in edits {
            g = g.apply_edit(e)?;
        }
        Ok(g)
    }

    /// `A^ε`: the adjacency with the edit pair carrying
    /// `A_uv + (2𝕀[{u,v} ∈ E] − 1)·N·ε`, `N` the training-set size.
    pub fn reweighted_adjacency(
        &self,
        edit: &CandidateEdit,
        eps: f64,
    ) -> Result<WeightedAdjacency, GraphError> {
        self.validate_edit(edit)?;
        let base = self.adjacency_with_candidates(&[edit.pair()]);
        let n_train = self.train.len() as f64;
        let current = if self.has_edge(edit.u, edit.v) { 1.0 } else { 0.0 };
        Ok(base.with_pair_weight(edit.u, edit.v, current + edit.kind.sign() * n_train * eps))
    }

    pub fn classify_edge(&self, u: usize, v: usize) -> EdgeClass {
        if self.labels[u] == self.labels[v] {
            EdgeClass::Homophilic
        } else {
            EdgeClass::Heterophilic
        }
    }

    /// Shortest-path hop distances from `source` (`None` = unreachable).
    pub fn bfs_distances(&self, source: usize) -> Vec<Option<usize>> {
        bfs(&self.neighbors(), source)
    }

    /// Nodes at shortest-path distance exactly `hops` from `v`.
    pub fn exact_hop_set(&self, v: usize, hops: usize) -> Result<BTreeSet<usize>, GraphError> {
        if v >= self.num_nodes {
            return Err(GraphError::NodeOutOfRange {
                node: v,
                num_nodes: self.num_nodes,
            });
        }
        Ok(exact_hop_set_from(&bfs(&self.neighbors(), v), hops))
    }

    /// `exact_hop_set` for every node at once.
    pub fn all_exact_hop_sets(&self, hops: usize) -> Vec<BTreeSet<usize>> {
        let nb = self.neighbors();
        (0..self.num_nodes)
            .map(|v| exact_hop_set_from(&bfs(&nb, v), hops))
            .collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GraphError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| GraphError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        std::fs::write(path, self.to_json())
    }
}

pub fn load_graph(path: impl AsRef<Path>) -> Result<Graph, GraphError> {
    Graph::load(path)
}

fn bfs(nb: &[Vec<usize>], source: usize) -> Vec<Option<usize>> {
    let mut dist = vec![None; nb.len()];
    dist[source] = Some(0);
    let mut queue = VecDeque::from([source]);
    while let Some(x) = queue.pop_front() {
        let d = dist[x].unwrap();
        for &y in &nb[x] {
            if dist[y].is_none() {
                dist[y] = Some(d + 1);
                queue.push_back(y);
            }
        }
    }
    dist
}

fn exact_hop_set_from(dist: &[Option<usize>], hops: usize) -> BTreeSet<usize> {
    dist.iter()
        .enumerate()
        .filter(|(_, d)| **d == Some(hops))
        .map(|(i, _)| i)
        .collect()
}

/// Symmetric weighted adjacency over a fixed sparsity pattern. Entries
/// outside the pattern are zero; entries inside may be zero too
/// (materialized candidates).
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedAdjacency {
    pattern: Arc<SparsePattern>,
    weights: Vec<f64>,
}

impl WeightedAdjacency {
    pub fn pattern(&self) -> &Arc<SparsePattern> {
        &self.pattern
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn dim(&self) -> usize {
        self.pattern.dim()
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.pattern.entry(i, j).map_or(0.0, |e| self.weights[e])
    }

    pub fn is_materialized(&self, i: usize, j: usize) -> bool {
        self.pattern.entry(i, j).is_some()
    }

    /// Copy with both `(u, v)` and `(v, u)` set to `w`. Panics if the pair
    /// is not materialized.
    pub fn with_pair_weight(&self, u: usize, v: usize, w: f64) -> Self {
        let mut out = self.clone();
        for (r, c) in [(u, v), (v, u)] {
            let e = self
                .pattern
                .entry(r, c)
                .unwrap_or_else(|| panic!("entry ({r},{c}) not materialized"));
            out.weights[e] = w;
        }
        out
    }

    /// Weights as an `nnz x 1` binding for a program's adjacency slot.
    pub fn as_binding(&self) -> Mat<f64> {
        Mat::from_vec(self.weights.len(), 1, self.weights.clone())
    }
}

/// Generator input. Features are the one-hot label plus Gaussian noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum GeneratorSpec {
    Barbell {
        clique_size: usize,
        bridge_length: usize,
        #[serde(default = "default_noise")]
        feature_noise: f64,
        #[serde(default)]
        split: SplitSpec,
    },
    Sbm {
        sizes: Vec<usize>,
        p_in: f64,
        p_out: f64,
        #[serde(default = "default_noise")]
        feature_noise: f64,
        #[serde(default)]
        split: SplitSpec,
    },
}

fn default_noise() -> f64 {
    1.0
}

/// Stratified train/val fractions; the remainder is test. Every class
/// gets at least one training node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { train: 0.2, val: 0.3 }
    }
}

impl GeneratorSpec {
    pub fn barbell(clique_size: usize, bridge_length: usize) -> Self {
        Self::Barbell {
            clique_size,
            bridge_length,
            feature_noise: default_noise(),
            split: SplitSpec::default(),
        }
    }

    pub fn sbm(sizes: Vec<usize>, p_in: f64, p_out: f64) -> Self {
        Self::Sbm {
            sizes,
            p_in,
            p_out,
            feature_noise: default_noise(),
            split: SplitSpec::default(),
        }
    }

    pub fn with_noise(mut self, noise: f64) -> Self {
        match &mut self {
            Self::Barbell { feature_noise, .. } | Self::Sbm { feature_noise, .. } => {
                *feature_noise = noise
            }
        }
        self
    }
}

pub fn generate_graph(spec: &GeneratorSpec, seed: u64) -> Result<Graph, GraphError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (labels, edges, noise, split, num_classes, noise_only) = match spec {
        GeneratorSpec::Barbell {
            clique_size: k,
            bridge_length: b,
            feature_noise,
            split,
        } => {
            let (k, b) = (*k, *b);
            if k < 3 {
                return Err(GraphError::Generator(format!("clique size {k} < 3")));
            }
            if b < 1 {
                return Err(GraphError::Generator("bridge length must be >= 1".into()));
            }
            // clique A: 0..k, bridge interior: k..k+b-1, clique B after that
            let inner = b - 1;
            let b_start = k + inner;
            let n = 2 * k + inner;
            let mut labels = vec![0; n];
            let mut noise_only = vec![false; n];
            for (j, node) in (k..b_start).enumerate() {
                labels[node] = j % 2;
                noise_only[node] = true;
            }
            for l in labels.iter_mut().skip(b_start) {
                *l = 1;
            }
            let mut edges = Vec::new();
            for start in [0, b_start] {
                for u in start..start + k {
                    for v in u + 1..start + k {
                        edges.push((u, v));
                    }
                }
            }
            let mut prev = k - 1;
            for node in (k..b_start).chain([b_start]) {
                edges.push((prev, node));
                prev = node;
            }
            (labels, edges, *feature_noise, *split, 2, noise_only)
        }
        GeneratorSpec::Sbm {
            sizes,
            p_in,
            p_out,
            feature_noise,
            split,
        } => {
            if sizes.is_empty() || sizes.contains(&0) {
                return Err(GraphError::Generator("empty block".into()));
            }
            for p in [*p_in, *p_out] {
                if !(0.0..=1.0).contains(&p) {
                    return Err(GraphError::Generator(format!("probability {p} outside [0,1]")));
                }
            }
            let labels: Vec<usize> = sizes
                .iter()
                .enumerate()
                .flat_map(|(b, &s)| std::iter::repeat(b).take(s))
                .collect();
            let n = labels.len();
            let mut edges = Vec::new();
            for u in 0..n {
                for v in u + 1..n {
                    let p = if labels[u] == labels[v] { *p_in } else { *p_out };
                    if rng.gen::<f64>() < p {
                        edges.push((u, v));
                    }
                }
            }
            (labels, edges, *feature_noise, *split, sizes.len(), vec![false; n])
        }
    };
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(GraphError::Generator(format!("feature noise {noise}")));
    }
    let n = labels.len();
    let normal = Normal::new(0.0, noise.max(0.0)).expect("valid normal");
    let mut features = Mat::zeros(n, num_classes);
    for (i, &y) in labels.iter().enumerate() {
        for c in 0..num_classes {
            let base = if !noise_only[i] && c == y { 1.0 } else { 0.0 };
            let eps = if noise > 0.0 { normal.sample(&mut rng) } else { 0.0 };
            features.set(i, c, base + eps);
        }
    }
    let (train, val, test) = stratified_split(&labels, num_classes, split, &mut rng)?;
    Graph::from_bundle(GraphBundle {
        num_nodes: n,
        num_classes,
        features: (0..n).map(|r| features.row(r).to_vec()).collect(),
        labels,
        edges: edges.into_iter().map(|(u, v)| [u, v]).collect(),
        train,
        val,
        test,
    })
}

type Split = (Vec<usize>, Vec<usize>, Vec<usize>);

fn stratified_split(
    labels: &[usize],
    num_classes: usize,
    split: SplitSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Split, GraphError> {
    if !(split.train > 0.0 && split.val >= 0.0 && split.train + split.val <= 1.0) {
        return Err(GraphError::Generator(format!(
            "split fractions train={} val={}",
            split.train, split.val
        )));
    }
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for c in 0..num_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        members.shuffle(rng);
        let m = members.len();
        let n_train = ((m as f64 * split.train).round() as usize).clamp(1.min(m), m);
        let n_val = ((m as f64 * split.val).round() as usize).min(m - n_train);
        train.extend_from_slice(&members[..n_train]);
        val.extend_from_slice(&members[n_train..n_train + n_val]);
        test.extend_from_slice(&members[n_train + n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok((train, val, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bundle(n: usize, edges: &[[usize; 2]]) -> GraphBundle {
        GraphBundle {
            num_nodes: n,
            num_classes: 2,
            features: vec![vec![0.5]; n],
            labels: (0..n).map(|i| i % 2).collect(),
            edges: edges.to_vec(),
            train: vec![0],
            val: vec![],
            test: vec![],
        }
    }

    pub(crate) fn path3() -> Graph {
        Graph::from_bundle(bundle(3, &[[0, 1], [1, 2]])).unwrap()
    }

    pub(crate) fn triangle() -> Graph {
        Graph::from_bundle(bundle(3, &[[0, 1], [1, 2], [0, 2]])).unwrap()
    }

    #[test]
    fn smallest_valid_bundle() {
        let json = r#"{"num_nodes":2,"num_classes":2,"features":[[1.0],[0.0]],
            "labels":[0,1],"edges":[[0,1]],"train":[0],"val":[1],"test":[]}"#;
        let g = Graph::from_json(json).unwrap();
        assert_eq!(g.num_nodes(), 2);
        assert_eq!(g.num_edges(), 1);
    }

    #[test]
    fn bundle_errors_are_distinct() {
        assert!(matches!(
            Graph::from_bundle(bundle(4, &[[3, 3]])),
            Err(GraphError::SelfLoop(3))
        ));
        assert!(matches!(
            Graph::from_bundle(bundle(2, &[[0, 1], [1, 0]])),
            Err(GraphError::DuplicateEdge(0, 1))
        ));
        assert!(matches!(Graph::from_json("{"), Err(GraphError::Json(_))));
        let mut b = bundle(2, &[]);
        b.features.pop();
        assert!(matches!(Graph::from_bundle(b), Err(GraphError::Dimension(_))));
        let mut b = bundle(2, &[]);
        b.labels[1] = 2;
        assert!(matches!(
            Graph::from_bundle(b),
            Err(GraphError::LabelOutOfRange { node: 1, .. })
        ));
        let mut b = bundle(2, &[]);
        b.val = vec![0];
        assert!(matches!(
            Graph::from_bundle(b),
            Err(GraphError::MaskOverlap { node: 0, .. })
        ));
        assert!(matches!(
            Graph::from_bundle(bundle(2, &[[0, 5]])),
            Err(GraphError::NodeOutOfRange { node: 5, .. })
        ));
    }

    #[test]
    fn edges_are_canonical() {
        let g = Graph::from_bundle(bundle(3, &[[2, 0], [1, 0]])).unwrap();
        assert_eq!(g.edges().collect::<Vec<_>>(), vec![(0, 1), (0, 2)]);
    }

    #[test]
    fn hop_sets_on_small_graphs() {
        assert_eq!(path3().exact_hop_set(0, 2).unwrap(), BTreeSet::from([2]));
        assert!(triangle().exact_hop_set(0, 2).unwrap().is_empty());
        assert!(path3().exact_hop_set(5, 1).is_err());
    }

    #[test]
    fn hop_sets_match_brute_force_on_barbell() {
        let g = generate_graph(&GeneratorSpec::barbell(5, 1), 0).unwrap();
        // Floyd–Warshall oracle
        let n = g.num_nodes();
        let inf = usize::MAX / 4;
        let mut d = vec![vec![inf; n]; n];
        for (i, row) in d.iter_mut().enumerate() {
            row[i] = 0;
        }
        for (u, v) in g.edges() {
            d[u][v] = 1;
            d[v][u] = 1;
        }
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    if d[i][k] + d[k][j] < d[i][j] {
                        d[i][j] = d[i][k] + d[k][j];
                    }
                }
            }
        }
        for v in 0..n {
            for l in 1..=4 {
                let want: BTreeSet<usize> = (0..n).filter(|&u| d[v][u] == l).collect();
                assert_eq!(g.exact_hop_set(v, l).unwrap(), want, "v={v} L={l}");
            }
        }
        // a non-junction node of clique A reaches exactly the far junction in 2 hops
        assert_eq!(g.exact_hop_set(0, 2).unwrap(), BTreeSet::from([5]));
    }

    #[test]
    fn apply_edit_and_inverse() {
        let g = triangle();
        let del = CandidateEdit::delete(0, 1);
        let g2 = g.apply_edit(&del).unwrap();
        assert!(!g2.has_edge(0, 1));
        assert!(g.has_edge(0, 1));
        let back = g2.apply_edit(&del.reversed()).unwrap();
        assert_eq!(back, g);
        let minus = g.apply_edit(&CandidateEdit::delete(0, 2)).unwrap();
        assert_eq!(minus.apply_edit(&CandidateEdit::insert(0, 2)).unwrap(), g);
        assert!(g.apply_edit(&CandidateEdit::insert(0, 1)).is_err());
        assert!(path3().apply_edit(&CandidateEdit::delete(0, 2)).is_err());
    }

    #[test]
    fn reweighted_adjacency_endpoints() {
        let g = path3();
        let n = g.train().len() as f64;
        let del = g.reweighted_adjacency(&CandidateEdit::delete(0, 1), -1.0 / n).unwrap();
        assert_eq!(del.entry(0, 1), 0.0);
        assert_eq!(del.entry(1, 0), 0.0);
        let ins = g.reweighted_adjacency(&CandidateEdit::insert(0, 2), -1.0 / n).unwrap();
        assert_eq!(ins.entry(0, 2), 1.0);
        assert_eq!(ins.entry(2, 0), 1.0);
        for e in [CandidateEdit::delete(0, 1), CandidateEdit::insert(0, 2)] {
            let a0 = g.reweighted_adjacency(&e, 0.0).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    let want = if g.has_edge(i, j) { 1.0 } else { 0.0 };
                    assert_eq!(a0.entry(i, j), want);
                }
            }
        }
    }

    #[test]
    fn classify_edges() {
        let g = path3();
        assert_eq!(g.classify_edge(0, 2), EdgeClass::Homophilic);
        assert_eq!(g.classify_edge(0, 1), EdgeClass::Heterophilic);
    }

    #[test]
    fn barbell_structure() {
        let g = generate_graph(&GeneratorSpec::barbell(5, 1), 3).unwrap();
        assert_eq!(g.num_nodes(), 10);
        assert_eq!(g.num_edges(), 2 * 10 + 1);
        assert!(g.has_edge(4, 5));
        let g = generate_graph(&GeneratorSpec::barbell(4, 3), 3).unwrap();
        assert_eq!(g.num_nodes(), 10);
        assert_eq!(g.labels()[4], 0);
        assert_eq!(g.labels()[5], 1);
        assert_eq!(g.exact_hop_set(3, 3).unwrap(), BTreeSet::from([6]));
        assert!(generate_graph(&GeneratorSpec::barbell(2, 1), 0).is_err());
    }

    #[test]
    fn sbm_degenerate_probabilities() {
        let g = generate_graph(&GeneratorSpec::sbm(vec![10, 10], 1.0, 0.0), 5).unwrap();
        assert_eq!(g.num_edges(), 2 * 45);
        for (u, v) in g.edges() {
            assert_eq!(g.classify_edge(u, v), EdgeClass::Homophilic);
        }
        assert!(generate_graph(&GeneratorSpec::sbm(vec![10, 0], 0.5, 0.1), 0).is_err());
        assert!(generate_graph(&GeneratorSpec::sbm(vec![10], 1.5, 0.1), 0).is_err());
    }

    #[test]
    fn sbm_edge_count_within_three_sigma() {
        let g = generate_graph(&GeneratorSpec::sbm(vec![30, 30, 30], 0.3, 0.02), 0).unwrap();
        // binomial sums: 3·C(30,2) intra pairs, 3·30·30 inter pairs
        let mean = 3.0 * 435.0 * 0.3 + 2700.0 * 0.02;
        let var: f64 = 3.0 * 435.0 * 0.3 * 0.7 + 2700.0 * 0.02 * 0.98;
        let dev = (g.num_edges() as f64 - mean).abs();
        assert!(dev <= 3.0 * var.sqrt(), "{} edges vs mean {mean}", g.num_edges());
    }

    #[test]
    fn generators_are_reproducible() {
        let spec = GeneratorSpec::sbm(vec![8, 9], 0.4, 0.1);
        let a = generate_graph(&spec, 42).unwrap();
        let b = generate_graph(&spec, 42).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        let c = generate_graph(&spec, 43).unwrap();
        assert_ne!(a.to_json(), c.to_json());
    }

    #[test]
    fn split_covers_every_class_in_train() {
        let g = generate_graph(&GeneratorSpec::sbm(vec![30, 30, 30], 0.3, 0.02), 0).unwrap();
        for c in 0..3 {
            assert!(g.train().iter().any(|&i| g.labels()[i] == c));
        }
        assert_eq!(g.train().len() + g.val().len() + g.test().len(), 90);
    }

    #[test]
    fn materialized_candidates_have_zero_weight() {
        let g = path3();
        let a = g.adjacency_with_candidates(&[(2, 0)]);
        assert!(a.is_materialized(0, 2));
        assert_eq!(a.entry(0, 2), 0.0);
        assert_eq!(a.entry(1, 2), 1.0);
    }
}
