//! Classical-algorithm simulators that emit ground-truth traces.
//!
//! Every task feeds a `pos` node scalar (`i / n`) so that index-based tie
//! breaking in the reference algorithms is observable to the model. Graph
//! tasks add an `adj` edge mask; weighted ones an edge scalar `w`. Pointer
//! style quantities are `node_index` probes. The full probe layout per task
//! is listed in `docs/formats.md`.

mod bellman_ford;
mod bfs;
mod binary_search;
mod insertion_sort;
mod minimum;
mod mst_prim;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use bellman_ford::gen_bellman_ford;
pub use bfs::gen_bfs;
pub use binary_search::gen_binary_search;
pub use insertion_sort::gen_insertion_sort;
pub use minimum::gen_minimum;
pub use mst_prim::gen_mst_prim;

use crate::error::{Error, Result};
use crate::graph::{
    random_graph_with, FeatureBundle, Graph, Location, ProbeKind, ProbeSpec, Stage, Trace,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskId {
    Bfs,
    BellmanFord,
    InsertionSort,
    Minimum,
    BinarySearch,
    MstPrim,
}

impl TaskId {
    pub const ALL: [TaskId; 6] = [
        TaskId::Bfs,
        TaskId::BellmanFord,
        TaskId::InsertionSort,
        TaskId::Minimum,
        TaskId::BinarySearch,
        TaskId::MstPrim,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskId::Bfs => "bfs",
            TaskId::BellmanFord => "bellman_ford",
            TaskId::InsertionSort => "insertion_sort",
            TaskId::Minimum => "minimum",
            TaskId::BinarySearch => "binary_search",
            TaskId::MstPrim => "mst_prim",
        }
    }

    pub fn spec(self) -> TaskSpec {
        TaskSpec::new(self)
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskId::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Domain(format!("unknown task `{s}`")))
    }
}

/// Instance sampler settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerParams {
    /// Edge probability for graph tasks.
    pub edge_p: f64,
    /// Raw edge weights are drawn uniformly from this range.
    pub weight_range: (f64, f64),
}

impl Default for SamplerParams {
    fn default() -> Self {
        Self {
            edge_p: 0.5,
            weight_range: (0.05, 1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub id: TaskId,
    pub probe_specs: Vec<ProbeSpec>,
    pub sampler: SamplerParams,
}

fn probe(name: &str, stage: Stage, location: Location, kind: ProbeKind) -> ProbeSpec {
    ProbeSpec::new(name, stage, location, kind)
}

impl TaskSpec {
    pub fn new(id: TaskId) -> Self {
        use Location::{Edge, Node};
        use ProbeKind::{Mask, NodeIndex, Scalar};
        use Stage::{Hint, Input, Output};

        let pos = probe("pos", Input, Node, Scalar);
        let probe_specs = match id {
            TaskId::Bfs => vec![
                pos,
                probe("s", Input, Node, Mask),
                probe("adj", Input, Edge, Mask),
                probe("reach_h", Hint, Node, Mask),
                probe("pi_h", Hint, Node, NodeIndex),
                probe("pi", Output, Node, NodeIndex),
            ],
            TaskId::BellmanFord => vec![
                pos,
                probe("s", Input, Node, Mask),
                probe("adj", Input, Edge, Mask),
                probe("w", Input, Edge, Scalar),
                probe("d", Hint, Node, Scalar),
                probe("msk", Hint, Node, Mask),
                probe("pi_h", Hint, Node, NodeIndex),
                probe("pi", Output, Node, NodeIndex),
            ],
            TaskId::InsertionSort => vec![
                pos,
                probe("key", Input, Node, Scalar),
                probe("pred_h", Hint, Node, NodeIndex),
                probe("i", Hint, Node, Mask),
                probe("pred", Output, Node, NodeIndex),
            ],
            TaskId::Minimum => vec![
                pos,
                probe("key", Input, Node, Scalar),
                probe("min_h", Hint, Node, NodeIndex),
                probe("i", Hint, Node, Mask),
                probe("min", Output, Node, NodeIndex),
            ],
            TaskId::BinarySearch => vec![
                pos,
                probe("key", Input, Node, Scalar),
                probe("target", Input, Node, Scalar),
                probe("low", Hint, Node, Mask),
                probe("high", Hint, Node, Mask),
                probe("mid", Hint, Node, NodeIndex),
                probe("position", Output, Node, NodeIndex),
            ],
            TaskId::MstPrim => vec![
                pos,
                probe("s", Input, Node, Mask),
                probe("adj", Input, Edge, Mask),
                probe("w", Input, Edge, Scalar),
                probe("in_tree", Hint, Node, Mask),
                probe("pi_h", Hint, Node, NodeIndex),
                probe("pi", Output, Node, NodeIndex),
            ],
        };
        Self {
            id,
            probe_specs,
            sampler: SamplerParams::default(),
        }
    }

    /// Samples one instance with `n` nodes and runs the generator on it.
    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> Result<Trace> {
        if n == 0 {
            return Err(Error::Domain("instances need at least one node".into()));
        }
        let p = self.sampler.edge_p;
        match self.id {
            TaskId::Bfs => {
                let g = random_graph_with(n, p, rng, true)?;
                let s = rng.gen_range(0..n);
                gen_bfs(&g, s)
            }
            TaskId::BellmanFord => {
                let g = connected_graph(n, p, rng)?;
                let w = self.sample_weights(&g, rng);
                let s = rng.gen_range(0..n);
                gen_bellman_ford(&g, &w, s)
            }
            TaskId::InsertionSort => gen_insertion_sort(&distinct_keys(n, rng)),
            TaskId::Minimum => gen_minimum(&distinct_keys(n, rng)),
            TaskId::BinarySearch => {
                let mut keys = distinct_keys(n, rng);
                keys.sort_by(f64::total_cmp);
                let target = rng.gen_range(keys[0]..=keys[n - 1]);
                gen_binary_search(&keys, target)
            }
            TaskId::MstPrim => {
                let g = connected_graph(n, p, rng)?;
                let w = self.sample_weights(&g, rng);
                let s = rng.gen_range(0..n);
                gen_mst_prim(&g, &w, s)
            }
        }
    }

    /// Samples with `n` uniform in `[n_min, n_max]`.
    pub fn sample_sized<R: Rng>(&self, n_min: usize, n_max: usize, rng: &mut R) -> Result<Trace> {
        if n_min == 0 || n_min > n_max {
            return Err(Error::Domain(format!(
                "invalid size range [{n_min}, {n_max}]"
            )));
        }
        let n = rng.gen_range(n_min..=n_max);
        self.sample(n, rng)
    }

    /// `count` instances from a generator seeded with `seed`.
    pub fn generate(
        &self,
        count: usize,
        n_min: usize,
        n_max: usize,
        seed: u64,
    ) -> Result<Vec<Trace>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| self.sample_sized(n_min, n_max, &mut rng))
            .collect()
    }

    /// Symmetric dense weights, distinct across undirected edges.
    fn sample_weights<R: Rng>(&self, g: &Graph, rng: &mut R) -> Vec<f64> {
        let n = g.n();
        let (lo, hi) = self.sampler.weight_range;
        let mut w = vec![0.0; n * n];
        let mut used: Vec<f64> = Vec::new();
        for &(u, v) in g.edges() {
            if u < v {
                let x = loop {
                    let x = rng.gen_range(lo..hi);
                    if !used.contains(&x) {
                        break x;
                    }
                };
                used.push(x);
                w[u * n + v] = x;
                w[v * n + u] = x;
            }
        }
        w
    }
}

fn distinct_keys<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    let mut keys: Vec<f64> = Vec::with_capacity(n);
    while keys.len() < n {
        let k: f64 = rng.gen();
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys
}

/// Undirected Erdős–Rényi sample, resampled until connected. After a bounded
/// number of rejections a random spanning path is overlaid instead.
fn connected_graph<R: Rng>(n: usize, p: f64, rng: &mut R) -> Result<Graph> {
    for _ in 0..64 {
        let g = random_graph_with(n, p, rng, true)?;
        if g.is_connected() {
            return Ok(g);
        }
    }
    let g = random_graph_with(n, p, rng, true)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let path = order.windows(2).flat_map(|w| [(w[0], w[1]), (w[1], w[0])]);
    Graph::new(n, g.edges().iter().copied().chain(path))
}

/// Min-max scaling to `[0, 1]`; constant input maps to zeros.
pub(crate) fn normalize(values: &[f64]) -> (Vec<f64>, impl Fn(f64) -> f64) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let map = move |x: f64| if span > 0.0 { (x - lo) / span } else { 0.0 };
    (values.iter().map(|&x| map(x)).collect(), map)
}

pub(crate) fn pos_feature(n: usize) -> Vec<f64> {
    (0..n).map(|i| i as f64 / n as f64).collect()
}

pub(crate) fn source_mask(n: usize, s: usize) -> Vec<bool> {
    (0..n).map(|v| v == s).collect()
}

pub(crate) fn adjacency_feature(g: &Graph) -> Vec<f64> {
    g.adjacency()
        .iter()
        .map(|&b| f64::from(u8::from(b)))
        .collect()
}

pub(crate) fn check_source(g: &Graph, source: usize) -> Result<()> {
    if source >= g.n() {
        return Err(Error::Domain(format!(
            "source {source} outside [0, {})",
            g.n()
        )));
    }
    Ok(())
}

/// Validates dense weights and rescales them by their maximum so every
/// live entry lies in `(0, 1]`.
pub(crate) fn normalized_weights(g: &Graph, w: &[f64]) -> Result<Vec<f64>> {
    let n = g.n();
    if w.len() != n * n {
        return Err(Error::shape("weights", n * n, w.len()));
    }
    let mut max = 0.0f64;
    for &(u, v) in g.edges() {
        let x = w[u * n + v];
        if !(x > 0.0 && x.is_finite()) {
            return Err(Error::Domain(format!(
                "edge ({u}, {v}) has non-positive weight {x}"
            )));
        }
        max = max.max(x);
    }
    Ok((0..n * n)
        .map(|i| if g.adjacency()[i] { w[i] / max } else { 0.0 })
        .collect())
}

pub(crate) fn build_trace(
    task: TaskId,
    graph: Graph,
    inputs: FeatureBundle,
    hints: Vec<FeatureBundle>,
    outputs: FeatureBundle,
) -> Trace {
    let steps = hints.len();
    Trace {
        graph,
        probe_specs: TaskSpec::new(task).probe_specs,
        inputs,
        hints,
        outputs,
        steps,
    }
}
