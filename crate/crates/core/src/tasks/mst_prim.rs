use crate::error::{Error, Result};
use crate::graph::{FeatureBundle, Graph, Trace};
use crate::tasks::{
    adjacency_feature, build_trace, check_source, normalized_weights, pos_feature, source_mask,
    TaskId,
};

/// Prim's algorithm from `source`.
///
/// Step `t` adds the lightest edge leaving the current tree. Nodes outside
/// the tree point to themselves, as does the source. `T = n - 1` (one step
/// for a single node).
pub fn gen_mst_prim(g: &Graph, w: &[f64], source: usize) -> Result<Trace> {
    check_source(g, source)?;
    if !g.is_undirected() {
        return Err(Error::Domain("MST-Prim needs an undirected graph".into()));
    }
    let n = g.n();
    let wn = normalized_weights(g, w)?;
    let mut seen: Vec<f64> = g
        .edges()
        .iter()
        .filter(|(u, v)| u < v)
        .map(|&(u, v)| w[u * n + v])
        .collect();
    seen.sort_by(f64::total_cmp);
    if seen.windows(2).any(|p| p[0] == p[1]) {
        return Err(Error::Domain("MST-Prim needs distinct edge weights".into()));
    }

    let mut in_tree = source_mask(n, source);
    let mut parent: Vec<usize> = (0..n).collect();
    let snapshot = |in_tree: &[bool], parent: &[usize]| {
        FeatureBundle::new()
            .with_mask("in_tree", in_tree)
            .with_indices("pi_h", parent)
    };
    let mut hints = Vec::new();
    for _ in 1..n {
        let best = g
            .edges()
            .iter()
            .filter(|&&(u, v)| in_tree[u] && !in_tree[v])
            .min_by(|&&(a, b), &&(c, d)| w[a * n + b].total_cmp(&w[c * n + d]));
        let Some(&(u, v)) = best else {
            return Err(Error::Generator("graph is disconnected".into()));
        };
        in_tree[v] = true;
        parent[v] = u;
        hints.push(snapshot(&in_tree, &parent));
    }
    if hints.is_empty() {
        hints.push(snapshot(&in_tree, &parent));
    }

    let inputs = FeatureBundle::new()
        .with("pos", pos_feature(n))
        .with_mask("s", &source_mask(n, source))
        .with("adj", adjacency_feature(g))
        .with("w", wn);
    let outputs = FeatureBundle::new().with_indices("pi", &parent);
    Ok(build_trace(
        TaskId::MstPrim,
        g.clone(),
        inputs,
        hints,
        outputs,
    ))
}
