use crate::error::{Error, Result};
use crate::graph::{FeatureBundle, Graph, Trace};
use crate::tasks::{
    adjacency_feature, build_trace, check_source, normalized_weights, pos_feature, source_mask,
    TaskId,
};

/// Synchronous Bellman-Ford relaxation.
///
/// Each round relaxes every edge against the previous round's distances;
/// among equal candidates the smallest-index predecessor wins. Rounds run
/// until nothing changes, so `T ≤ n - 1` for positive weights. Distances are
/// reported divided by `(n - 1)`, the largest possible path weight after the
/// weights are rescaled into `(0, 1]`; unreached nodes report 0 with
/// `msk = 0`.
pub fn gen_bellman_ford(g: &Graph, w: &[f64], source: usize) -> Result<Trace> {
    check_source(g, source)?;
    let n = g.n();
    let w = normalized_weights(g, w)?;
    let norm = (n.max(2) - 1) as f64;

    let mut dist = vec![f64::INFINITY; n];
    dist[source] = 0.0;
    let mut pred: Vec<usize> = (0..n).collect();
    let mut hints = Vec::new();
    let snapshot = |dist: &[f64], pred: &[usize]| {
        let reached: Vec<bool> = dist.iter().map(|d| d.is_finite()).collect();
        let d = dist
            .iter()
            .map(|&d| if d.is_finite() { d / norm } else { 0.0 })
            .collect();
        FeatureBundle::new()
            .with("d", d)
            .with_mask("msk", &reached)
            .with_indices("pi_h", pred)
    };

    loop {
        let prev = dist.clone();
        let mut changed = false;
        for v in 0..n {
            for u in 0..n {
                if g.has_edge(u, v) && prev[u].is_finite() {
                    let cand = prev[u] + w[u * n + v];
                    if cand < dist[v] {
                        dist[v] = cand;
                        pred[v] = u;
                        changed = true;
                    }
                }
            }
        }
        if !changed {
            break;
        }
        hints.push(snapshot(&dist, &pred));
        if hints.len() > n {
            return Err(Error::Generator("relaxation failed to converge".into()));
        }
    }
    if let Some(v) = dist.iter().position(|d| !d.is_finite()) {
        return Err(Error::Generator(format!(
            "node {v} is unreachable from source {source}"
        )));
    }
    if hints.is_empty() {
        hints.push(snapshot(&dist, &pred));
    }

    let inputs = FeatureBundle::new()
        .with("pos", pos_feature(n))
        .with_mask("s", &source_mask(n, source))
        .with("adj", adjacency_feature(g))
        .with("w", w);
    let outputs = FeatureBundle::new().with_indices("pi", &pred);
    Ok(build_trace(
        TaskId::BellmanFord,
        g.clone(),
        inputs,
        hints,
        outputs,
    ))
}
