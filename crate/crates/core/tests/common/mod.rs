//! Shared helpers for the integration tests and the acceptance runner:
//! independent reference algorithms and a finite-difference checker.

#![allow(dead_code)]

pub mod fd_cases;

use std::collections::VecDeque;

use cef_core::diff::{grad, BoundParams, ParamStore, Tape, Var};
use cef_core::graph::Trace;
use cef_core::tasks::TaskId;
use cef_core::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------------------
// reference algorithms, written without reference to the generators

pub fn queue_bfs(n: usize, adj: &[f64], s: usize) -> Vec<Option<usize>> {
    let mut dist = vec![None; n];
    dist[s] = Some(0);
    let mut q = VecDeque::from([s]);
    while let Some(u) = q.pop_front() {
        for v in 0..n {
            if adj[u * n + v] > 0.5 && dist[v].is_none() {
                dist[v] = Some(dist[u].unwrap() + 1);
                q.push_back(v);
            }
        }
    }
    dist
}

/// O(n²) Dijkstra on a dense weight matrix where 0 means "no edge".
pub fn dijkstra(n: usize, w: &[f64], s: usize) -> Vec<f64> {
    let mut dist = vec![f64::INFINITY; n];
    let mut done = vec![false; n];
    dist[s] = 0.0;
    for _ in 0..n {
        let Some(u) = (0..n)
            .filter(|&u| !done[u] && dist[u].is_finite())
            .min_by(|&a, &b| dist[a].total_cmp(&dist[b]))
        else {
            break;
        };
        done[u] = true;
        for v in 0..n {
            if w[u * n + v] > 0.0 && dist[u] + w[u * n + v] < dist[v] {
                dist[v] = dist[u] + w[u * n + v];
            }
        }
    }
    dist
}

/// Kruskal with union-find; `None` if the graph is disconnected.
pub fn kruskal_weight(n: usize, w: &[f64]) -> Option<f64> {
    let mut edges: Vec<(f64, usize, usize)> = (0..n)
        .flat_map(|u| (u + 1..n).map(move |v| (u, v)))
        .filter(|&(u, v)| w[u * n + v] > 0.0)
        .map(|(u, v)| (w[u * n + v], u, v))
        .collect();
    edges.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while p[r] != r {
            r = p[r];
        }
        let mut x = x;
        while p[x] != r {
            let next = p[x];
            p[x] = r;
            x = next;
        }
        r
    }
    let (mut total, mut used) = (0.0, 0);
    for (x, u, v) in edges {
        let (a, b) = (find(&mut parent, u), find(&mut parent, v));
        if a != b {
            parent[a] = b;
            total += x;
            used += 1;
        }
    }
    (used + 1 == n).then_some(total)
}

fn source_of(t: &Trace) -> usize {
    t.inputs
        .get("s")
        .unwrap()
        .iter()
        .position(|&x| x == 1.0)
        .unwrap()
}

fn indices(t: &Trace, bundle: &cef_core::graph::FeatureBundle, name: &str) -> Vec<usize> {
    let _ = t;
    bundle.indices(name).unwrap()
}

/// Checks one trace against the reference algorithm of its task; returns a
/// description of the first disagreement.
pub fn oracle_mismatch(task: TaskId, t: &Trace) -> Option<String> {
    let n = t.n();
    match task {
        TaskId::Bfs => {
            let adj = t.inputs.get("adj").unwrap();
            let s = source_of(t);
            let dist = queue_bfs(n, adj, s);
            let pi = indices(t, &t.outputs, "pi");
            for v in 0..n {
                match dist[v] {
                    None if pi[v] != v => {
                        return Some(format!("unreached {v} has parent {}", pi[v]))
                    }
                    None => {}
                    Some(d) => {
                        // walk parents back to the source
                        let (mut x, mut hops) = (v, 0);
                        while x != s && hops <= n {
                            if adj[pi[x] * n + x] < 0.5 {
                                return Some(format!("parent {} of {x} is not a neighbour", pi[x]));
                            }
                            x = pi[x];
                            hops += 1;
                        }
                        if hops != d {
                            return Some(format!("node {v}: path length {hops}, distance {d}"));
                        }
                    }
                }
            }
            None
        }
        TaskId::BellmanFord => {
            let w = t.inputs.get("w").unwrap();
            let s = source_of(t);
            let truth = dijkstra(n, w, s);
            let norm = (n.max(2) - 1) as f64;
            let d = t.hints.last().unwrap().get("d").unwrap();
            let pi = indices(t, &t.outputs, "pi");
            for v in 0..n {
                if (d[v] * norm - truth[v]).abs() > 1e-9 {
                    return Some(format!(
                        "node {v}: distance {} vs {}",
                        d[v] * norm,
                        truth[v]
                    ));
                }
                if v != s && (truth[pi[v]] + w[pi[v] * n + v] - truth[v]).abs() > 1e-9 {
                    return Some(format!("predecessor of {v} is not on a shortest path"));
                }
            }
            None
        }
        TaskId::InsertionSort => {
            let keys = t.inputs.get("key").unwrap();
            let pred = indices(t, &t.outputs, "pred");
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| keys[a].total_cmp(&keys[b]));
            let heads: Vec<usize> = (0..n).filter(|&v| pred[v] == v).collect();
            if heads != [order[0]] {
                return Some(format!("heads {heads:?}, smallest {}", order[0]));
            }
            for w in order.windows(2) {
                if pred[w[1]] != w[0] {
                    return Some(format!("{} should follow {}", w[1], w[0]));
                }
            }
            None
        }
        TaskId::Minimum => {
            let keys = t.inputs.get("key").unwrap();
            let argmin = (0..n).min_by(|&a, &b| keys[a].total_cmp(&keys[b])).unwrap();
            let out = indices(t, &t.outputs, "min");
            (out.iter().any(|&m| m != argmin)).then(|| format!("min {out:?} vs {argmin}"))
        }
        TaskId::BinarySearch => {
            let keys = t.inputs.get("key").unwrap();
            let target = t.inputs.get("target").unwrap()[0];
            let want = (0..n).find(|&i| keys[i] >= target).unwrap_or(n - 1);
            let out = indices(t, &t.outputs, "position");
            (out.iter().any(|&p| p != want)).then(|| format!("position {out:?} vs {want}"))
        }
        TaskId::MstPrim => {
            let w = t.inputs.get("w").unwrap();
            let pi = indices(t, &t.outputs, "pi");
            let s = source_of(t);
            let mut total = 0.0;
            for v in (0..n).filter(|&v| v != s) {
                if pi[v] == v || w[pi[v] * n + v] == 0.0 {
                    return Some(format!("node {v} has no tree edge"));
                }
                total += w[pi[v] * n + v];
            }
            let k = kruskal_weight(n, w).unwrap();
            ((total - k).abs() > 1e-9).then(|| format!("tree weight {total} vs {k}"))
        }
    }
}

/// The probe of the last hint bundle that must agree with the output.
pub fn final_hint_matches_output(task: TaskId, t: &Trace) -> bool {
    let last = t.hints.last().unwrap();
    let (hint, out) = match task {
        TaskId::Bfs | TaskId::BellmanFord | TaskId::MstPrim => ("pi_h", "pi"),
        TaskId::InsertionSort => ("pred_h", "pred"),
        TaskId::Minimum => ("min_h", "min"),
        TaskId::BinarySearch => {
            let lo = last
                .get("low")
                .unwrap()
                .iter()
                .position(|&x| x == 1.0)
                .unwrap();
            return t
                .outputs
                .indices("position")
                .unwrap()
                .iter()
                .all(|&p| p == lo);
        }
    };
    last.get(hint) == t.outputs.get(out)
}

/// Samples `count` instances with `n ∈ [n_min, n_max]` and returns the
/// oracle mismatches.
pub fn oracle_sweep(task: TaskId, count: usize, n: (usize, usize), seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = task.spec();
    let mut bad = Vec::new();
    for _ in 0..count {
        let t = spec.sample_sized(n.0, n.1, &mut rng).unwrap();
        if let Some(m) = oracle_mismatch(task, &t) {
            bad.push(m);
        }
    }
    bad
}

// ---------------------------------------------------------------------------
// finite differences

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error, so that entries whose true
/// gradient is zero are compared in absolute terms.
pub const FD_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Worst entry: (group index, analytic, numeric).
    pub worst: (usize, f64, f64),
}

/// Central-difference check of every parameter entry of `params`.
pub fn fd_check<F>(params: &ParamStore<f64>, loss: F) -> Result<FdReport>
where
    F: Fn(&mut Tape<f64>, &BoundParams) -> Result<Var>,
{
    let (_, analytic) = grad(params, &loss)?;
    let eval = |p: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = tape.bind(p);
        let l = loss(&mut tape, &bound)?;
        tape.scalar(l)
    };
    let mut p = params.clone();
    let mut worst: f64 = 0.0;
    let mut at = (0, 0.0, 0.0);
    let mut checked = 0;
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(FD_FLOOR);
    for gi in 0..p.len() {
        let (rows, cols) = p.groups()[gi].weights.dim();
        for r in 0..rows {
            for c in 0..cols {
                let x = p.groups()[gi].weights[[r, c]];
                p.groups_mut()[gi].weights[[r, c]] = x + FD_STEP;
                let up = eval(&p)?;
                p.groups_mut()[gi].weights[[r, c]] = x - FD_STEP;
                let down = eval(&p)?;
                p.groups_mut()[gi].weights[[r, c]] = x;
                let (a, fd) = (analytic.weights[gi][[r, c]], (up - down) / (2.0 * FD_STEP));
                if rel(a, fd) > worst {
                    worst = rel(a, fd);
                    at = (gi, a, fd);
                }
                checked += 1;
            }
        }
        for k in 0..p.groups()[gi].bias.len() {
            let x = p.groups()[gi].bias[k];
            p.groups_mut()[gi].bias[k] = x + FD_STEP;
            let up = eval(&p)?;
            p.groups_mut()[gi].bias[k] = x - FD_STEP;
            let down = eval(&p)?;
            p.groups_mut()[gi].bias[k] = x;
            let (a, fd) = (analytic.biases[gi][k], (up - down) / (2.0 * FD_STEP));
            if rel(a, fd) > worst {
                worst = rel(a, fd);
                at = (gi, a, fd);
            }
            checked += 1;
        }
    }
    Ok(FdReport {
        max_rel_error: worst,
        checked,
        worst: at,
    })
}

/// Replaces every parameter (biases included) with a fresh uniform draw so
/// that no activation sits exactly on a kink.
pub fn randomize(params: &mut ParamStore<f64>, seed: u64, scale: f64) {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for g in params.groups_mut() {
        g.weights.mapv_inplace(|_| rng.gen_range(-scale..scale));
        g.bias.mapv_inplace(|_| rng.gen_range(-scale..scale));
    }
}
