//! Graphs, probe specifications and ground-truth traces.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Directed graph without self-loops.
///
/// Undirected graphs carry both `(u, v)` and `(v, u)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Graph {
    n: usize,
    edges: Vec<(usize, usize)>,
    adjacency: Vec<bool>,
}

impl Graph {
    /// Builds a graph from directed edge records; duplicates collapse.
    pub fn new(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        if n == 0 {
            return Err(Error::Domain("a graph needs at least one node".into()));
        }
        let mut adjacency = vec![false; n * n];
        for (u, v) in edges {
            if u >= n || v >= n {
                return Err(Error::Domain(format!(
                    "edge ({u}, {v}) out of range for n = {n}"
                )));
            }
            if u == v {
                return Err(Error::Domain(format!("self-loop at node {u}")));
            }
            adjacency[u * n + v] = true;
        }
        Ok(Self::from_adjacency(n, adjacency))
    }

    fn from_adjacency(n: usize, adjacency: Vec<bool>) -> Self {
        let edges = (0..n * n)
            .filter(|&i| adjacency[i])
            .map(|i| (i / n, i % n))
            .collect();
        Self {
            n,
            edges,
            adjacency,
        }
    }

    /// Complete directed graph, used by the array tasks.
    pub fn complete(n: usize) -> Result<Self> {
        Self::new(
            n,
            (0..n).flat_map(|u| (0..n).filter(move |&v| v != u).map(move |v| (u, v))),
        )
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Directed edge records in row-major `(u, v)` order.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn m(&self) -> usize {
        self.edges.len()
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        u < self.n && v < self.n && self.adjacency[u * self.n + v]
    }

    /// Row-major `n × n` adjacency.
    pub fn adjacency(&self) -> &[bool] {
        &self.adjacency
    }

    /// `N(v) = { u | (v, u) ∈ E }`.
    pub fn neighbors(&self, v: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.n).filter(move |&u| self.adjacency[v * self.n + u])
    }

    pub fn is_undirected(&self) -> bool {
        self.edges.iter().all(|&(u, v)| self.has_edge(v, u))
    }

    /// Hop distances from `source`; `None` for unreachable nodes.
    pub fn bfs_distances(&self, source: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.n];
        dist[source] = Some(0);
        let mut queue = VecDeque::from([source]);
        while let Some(u) = queue.pop_front() {
            let du = dist[u].unwrap();
            for v in self.neighbors(u) {
                if dist[v].is_none() {
                    dist[v] = Some(du + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    /// Every node reachable from node 0 (weakly, for directed graphs the
    /// caller should pass an undirected graph).
    pub fn is_connected(&self) -> bool {
        self.bfs_distances(0).iter().all(Option::is_some)
    }

    /// Node relabeling: node `v` becomes `perm[v]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        Self::new(self.n, self.edges.iter().map(|&(u, v)| (perm[u], perm[v])))
    }
}

/// Erdős–Rényi sample: each ordered (or unordered, when `undirected`) pair
/// is an edge with probability `p`.
pub fn random_graph(n: usize, p: f64, seed: u64, undirected: bool) -> Result<Graph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_graph_with(n, p, &mut rng, undirected)
}

pub fn random_graph_with<R: Rng>(n: usize, p: f64, rng: &mut R, undirected: bool) -> Result<Graph> {
    if n == 0 {
        return Err(Error::Domain("random_graph needs n >= 1".into()));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain(format!(
            "edge probability {p} outside [0, 1]"
        )));
    }
    let mut edges = Vec::new();
    for u in 0..n {
        for v in 0..n {
            if u == v || (undirected && v < u) {
                continue;
            }
            if rng.gen_bool(p) {
                edges.push((u, v));
                if undirected {
                    edges.push((v, u));
                }
            }
        }
    }
    Graph::new(n, edges)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Input,
    Hint,
    Output,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Location {
    Node,
    Edge,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    Scalar,
    Mask,
    NodeIndex,
}

/// A named, typed feature channel.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSpec {
    pub name: String,
    pub stage: Stage,
    pub location: Location,
    pub kind: ProbeKind,
}

impl ProbeSpec {
    pub fn new(name: &str, stage: Stage, location: Location, kind: ProbeKind) -> Self {
        Self {
            name: name.to_string(),
            stage,
            location,
            kind,
        }
    }

    /// Number of values the probe holds on a graph with `n` nodes.
    pub fn len_for(&self, n: usize) -> usize {
        match self.location {
            Location::Node => n,
            Location::Edge => n * n,
        }
    }
}

/// Probe values keyed by probe name.
///
/// Node probes hold `n` values; edge probes hold a dense row-major `n × n`
/// matrix whose off-graph entries are zero. Node-index values are stored as
/// integral numbers.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureBundle(BTreeMap<String, Vec<f64>>);

impl FeatureBundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, values: Vec<f64>) {
        self.0.insert(name.to_string(), values);
    }

    pub fn with(mut self, name: &str, values: Vec<f64>) -> Self {
        self.insert(name, values);
        self
    }

    pub fn with_indices(self, name: &str, idx: &[usize]) -> Self {
        self.with(name, idx.iter().map(|&i| i as f64).collect())
    }

    pub fn with_mask(self, name: &str, mask: &[bool]) -> Self {
        self.with(name, mask.iter().map(|&b| f64::from(u8::from(b))).collect())
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.0.get(name).map(Vec::as_slice)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Vec<f64>> {
        self.0.get_mut(name)
    }

    /// Values of a node-index probe, if present and integral.
    pub fn indices(&self, name: &str) -> Option<Vec<usize>> {
        self.get(name)?
            .iter()
            .map(|&v| (v >= 0.0 && v.fract() == 0.0).then_some(v as usize))
            .collect()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// A ground-truth execution: inputs, one hint bundle per reasoning step,
/// and the final outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    pub graph: Graph,
    pub probe_specs: Vec<ProbeSpec>,
    pub inputs: FeatureBundle,
    pub hints: Vec<FeatureBundle>,
    pub outputs: FeatureBundle,
    pub steps: usize,
}

impl Trace {
    pub fn n(&self) -> usize {
        self.graph.n()
    }

    pub fn specs(&self, stage: Stage) -> impl Iterator<Item = &ProbeSpec> {
        self.probe_specs.iter().filter(move |s| s.stage == stage)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&TraceDoc::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: TraceDoc = serde_json::from_str(text)?;
        doc.try_into()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// On-disk layout of a trace; see `docs/trace.schema.json`.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TraceDoc {
    n: usize,
    edges: Vec<(usize, usize)>,
    probe_specs: Vec<ProbeSpec>,
    inputs: FeatureBundle,
    hints: Vec<FeatureBundle>,
    outputs: FeatureBundle,
    #[serde(rename = "T")]
    steps: usize,
}

impl From<&Trace> for TraceDoc {
    fn from(t: &Trace) -> Self {
        Self {
            n: t.graph.n(),
            edges: t.graph.edges().to_vec(),
            probe_specs: t.probe_specs.clone(),
            inputs: t.inputs.clone(),
            hints: t.hints.clone(),
            outputs: t.outputs.clone(),
            steps: t.steps,
        }
    }
}

impl TryFrom<TraceDoc> for Trace {
    type Error = Error;

    fn try_from(d: TraceDoc) -> Result<Self> {
        Ok(Self {
            graph: Graph::new(d.n, d.edges)?,
            probe_specs: d.probe_specs,
            inputs: d.inputs,
            hints: d.hints,
            outputs: d.outputs,
            steps: d.steps,
        })
    }
}

/// One finding of [`validate_trace`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub probe: Option<String>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.probe {
            Some(p) => write!(f, "{p}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

/// Checks a trace against its probe specifications. Empty means valid.
pub fn validate_trace(t: &Trace) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |probe: Option<&str>, message: String| {
        out.push(Violation {
            probe: probe.map(str::to_string),
            message,
        })
    };

    if t.steps == 0 {
        push(None, "step count T must be at least 1".into());
    }
    if t.hints.len() != t.steps {
        push(
            None,
            format!("T = {} but {} hint bundles", t.steps, t.hints.len()),
        );
    }
    let mut seen = std::collections::HashSet::new();
    for s in &t.probe_specs {
        if !seen.insert(s.name.as_str()) {
            push(Some(&s.name), "duplicate probe name".into());
        }
        if s.kind == ProbeKind::NodeIndex && s.location != Location::Node {
            push(Some(&s.name), "node_index probes must live on nodes".into());
        }
    }

    let n = t.graph.n();
    let mut check_bundle = |bundle: &FeatureBundle, stage: Stage, label: &str| {
        let specs: Vec<&ProbeSpec> = t.specs(stage).collect();
        for name in bundle.names() {
            if !specs.iter().any(|s| s.name == name) {
                push(
                    Some(name),
                    format!("{label}: value without a {stage:?} probe spec"),
                );
            }
        }
        for s in specs {
            let Some(vals) = bundle.get(&s.name) else {
                push(Some(&s.name), format!("{label}: missing"));
                continue;
            };
            let want = s.len_for(n);
            if vals.len() != want {
                push(
                    Some(&s.name),
                    format!("{label}: expected {want} values, found {}", vals.len()),
                );
                continue;
            }
            for (i, &v) in vals.iter().enumerate() {
                let bad = match s.kind {
                    ProbeKind::Scalar => (!v.is_finite()).then(|| format!("non-finite value {v}")),
                    ProbeKind::Mask => {
                        (v != 0.0 && v != 1.0).then(|| format!("mask value {v} is not 0/1"))
                    }
                    ProbeKind::NodeIndex => (!(v >= 0.0 && v.fract() == 0.0 && (v as usize) < n))
                        .then(|| format!("node index {v} outside [0, {n})")),
                };
                let off_graph = s.location == Location::Edge && !t.graph.adjacency()[i] && v != 0.0;
                if let Some(msg) = bad {
                    push(Some(&s.name), format!("{label}[{i}]: {msg}"));
                } else if off_graph {
                    push(
                        Some(&s.name),
                        format!("{label}[{i}]: nonzero value off the edge set"),
                    );
                }
            }
        }
    };

    check_bundle(&t.inputs, Stage::Input, "inputs");
    for (k, h) in t.hints.iter().enumerate() {
        check_bundle(h, Stage::Hint, &format!("hints[{k}]"));
    }
    check_bundle(&t.outputs, Stage::Output, "outputs");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn complete_undirected_sample_has_all_pairs() {
        let g = random_graph(4, 1.0, 3, true).unwrap();
        assert_eq!(g.m(), 12);
        assert!(g.is_undirected());
    }

    #[test]
    fn empty_when_p_is_zero() {
        assert_eq!(random_graph(6, 0.0, 1, false).unwrap().m(), 0);
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let a = random_graph(8, 0.4, 99, true).unwrap();
        let b = random_graph(8, 0.4, 99, true).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_nodes_is_a_domain_error() {
        assert!(matches!(
            random_graph(0, 0.5, 0, true),
            Err(Error::Domain(_))
        ));
        assert!(random_graph(3, 1.5, 0, true).is_err());
    }

    #[test]
    fn self_loops_rejected() {
        assert!(Graph::new(2, [(1, 1)]).is_err());
    }

    #[test]
    fn neighbors_follow_out_edges() {
        let g = Graph::new(3, [(0, 1), (0, 2), (2, 1)]).unwrap();
        assert_eq!(g.neighbors(0).collect::<Vec<_>>(), vec![1, 2]);
        assert_eq!(g.neighbors(1).count(), 0);
    }

    fn tiny_trace() -> Trace {
        let specs = vec![
            ProbeSpec::new("s", Stage::Input, Location::Node, ProbeKind::Mask),
            ProbeSpec::new("p", Stage::Hint, Location::Node, ProbeKind::NodeIndex),
            ProbeSpec::new("out", Stage::Output, Location::Node, ProbeKind::NodeIndex),
        ];
        let hint = FeatureBundle::new().with_indices("p", &[0, 0]);
        Trace {
            graph: Graph::new(2, [(0, 1), (1, 0)]).unwrap(),
            probe_specs: specs,
            inputs: FeatureBundle::new().with_mask("s", &[true, false]),
            hints: vec![hint.clone(), hint],
            outputs: FeatureBundle::new().with_indices("out", &[0, 0]),
            steps: 2,
        }
    }

    #[test]
    fn valid_trace_has_no_violations() {
        assert!(validate_trace(&tiny_trace()).is_empty());
    }

    #[test]
    fn node_index_equal_to_n_is_one_violation() {
        let mut t = tiny_trace();
        t.outputs = FeatureBundle::new().with_indices("out", &[0, 2]);
        let v = validate_trace(&t);
        assert_eq!(v.len(), 1, "{v:?}");
    }

    #[test]
    fn step_count_mismatch_is_one_violation() {
        let mut t = tiny_trace();
        t.steps = 3;
        let v = validate_trace(&t);
        assert_eq!(v.len(), 1, "{v:?}");
    }

    #[test]
    fn non_binary_mask_is_flagged() {
        let mut t = tiny_trace();
        t.inputs = FeatureBundle::new().with("s", vec![0.5, 0.0]);
        assert_eq!(validate_trace(&t).len(), 1);
    }

    proptest! {
        #[test]
        fn graph_round_trips_through_json(n in 1usize..10, p in 0.0f64..1.0, seed in 0u64..500, und in any::<bool>()) {
            let g = random_graph(n, p, seed, und).unwrap();
            let mut t = tiny_trace();
            t.graph = g.clone();
            t.inputs = FeatureBundle::new().with("s", vec![0.0; n]);
            t.hints = vec![FeatureBundle::new().with_indices("p", &vec![0; n]); 2];
            t.outputs = FeatureBundle::new().with_indices("out", &vec![0; n]);
            let back = Trace::from_json(&t.to_json().unwrap()).unwrap();
            prop_assert_eq!(back.graph.adjacency(), g.adjacency());
            prop_assert_eq!(back, t);
        }
    }
}
