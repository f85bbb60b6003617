use crate::error::Result;
use crate::graph::{FeatureBundle, Graph, Trace};
use crate::tasks::insertion_sort::check_distinct;
use crate::tasks::{build_trace, normalize, pos_feature, TaskId};

/// Linear scan for the minimum key.
///
/// Step `t` has looked at `keys[0..t]`; every node points at the running
/// argmin and the `i` mask marks the element just scanned. `T = n`.
pub fn gen_minimum(keys: &[f64]) -> Result<Trace> {
    check_distinct(keys)?;
    let n = keys.len();
    let mut best = 0;
    let mut hints = Vec::with_capacity(n);
    for t in 0..n {
        if keys[t] < keys[best] {
            best = t;
        }
        hints.push(
            FeatureBundle::new()
                .with_indices("min_h", &vec![best; n])
                .with_mask("i", &(0..n).map(|v| v == t).collect::<Vec<_>>()),
        );
    }
    let (key, _) = normalize(keys);
    let inputs = FeatureBundle::new()
        .with("pos", pos_feature(n))
        .with("key", key);
    let outputs = FeatureBundle::new().with_indices("min", &vec![best; n]);
    Ok(build_trace(
        TaskId::Minimum,
        Graph::complete(n)?,
        inputs,
        hints,
        outputs,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_key() {
        let t = gen_minimum(&[7.0]).unwrap();
        assert_eq!(t.hints[0].indices("min_h").unwrap(), vec![0]);
        assert_eq!(t.outputs.indices("min").unwrap(), vec![0]);
    }

    #[test]
    fn running_minimum() {
        let t = gen_minimum(&[4.0, 2.0, 9.0]).unwrap();
        let running: Vec<usize> = t
            .hints
            .iter()
            .map(|h| h.indices("min_h").unwrap()[0])
            .collect();
        assert_eq!(running, vec![0, 1, 1]);
        assert_eq!(t.outputs.indices("min").unwrap(), vec![1, 1, 1]);
    }
}
