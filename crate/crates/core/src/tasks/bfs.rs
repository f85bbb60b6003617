use crate::error::Result;
use crate::graph::{FeatureBundle, Graph, Trace};
use crate::tasks::{
    adjacency_feature, build_trace, check_source, pos_feature, source_mask, TaskId,
};

/// Layered breadth-first search.
///
/// Step `t` expands every node reached after `t - 1` layers. A newly reached
/// node takes the smallest-index reached neighbour as its parent; the source
/// and unreached nodes point to themselves. `T` is the eccentricity of the
/// source within its component (1 when it is isolated).
pub fn gen_bfs(g: &Graph, source: usize) -> Result<Trace> {
    check_source(g, source)?;
    let n = g.n();
    let mut reach = source_mask(n, source);
    let mut parent: Vec<usize> = (0..n).collect();
    let mut hints = Vec::new();
    let snapshot = |reach: &[bool], parent: &[usize]| {
        FeatureBundle::new()
            .with_mask("reach_h", reach)
            .with_indices("pi_h", parent)
    };

    loop {
        let frontier = reach.clone();
        let mut changed = false;
        for u in (0..n).filter(|&u| frontier[u]) {
            for v in g.neighbors(u) {
                if !reach[v] {
                    reach[v] = true;
                    parent[v] = u;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
        hints.push(snapshot(&reach, &parent));
    }
    if hints.is_empty() {
        hints.push(snapshot(&reach, &parent));
    }

    let inputs = FeatureBundle::new()
        .with("pos", pos_feature(n))
        .with_mask("s", &source_mask(n, source))
        .with("adj", adjacency_feature(g));
    let outputs = FeatureBundle::new().with_indices("pi", &parent);
    Ok(build_trace(TaskId::Bfs, g.clone(), inputs, hints, outputs))
}
