use crate::error::{Error, Result};
use crate::graph::{FeatureBundle, Graph, Trace};
use crate::tasks::{build_trace, normalize, pos_feature, TaskId};

/// Insertion sort over nodes carrying `keys[i]`.
///
/// The array order is encoded as a predecessor chain: the head points to
/// itself and every other node to the node before it. Step `t` inserts node
/// `t` into the sorted prefix; the `i` mask marks it. `T = n - 1` (one trivial
/// step for a single key).
pub fn gen_insertion_sort(keys: &[f64]) -> Result<Trace> {
    check_distinct(keys)?;
    let n = keys.len();
    let mut order: Vec<usize> = (0..n).collect();
    let chain = |order: &[usize]| {
        let mut pred = vec![0; n];
        pred[order[0]] = order[0];
        for w in order.windows(2) {
            pred[w[1]] = w[0];
        }
        pred
    };
    let snapshot = |order: &[usize], inserted: usize| {
        FeatureBundle::new()
            .with_indices("pred_h", &chain(order))
            .with_mask("i", &(0..n).map(|v| v == inserted).collect::<Vec<_>>())
    };

    let mut hints = Vec::new();
    for t in 1..n {
        let mut j = t;
        while j > 0 && keys[order[j - 1]] > keys[order[j]] {
            order.swap(j - 1, j);
            j -= 1;
        }
        hints.push(snapshot(&order, t));
    }
    if hints.is_empty() {
        hints.push(snapshot(&order, 0));
    }

    let (key, _) = normalize(keys);
    let inputs = FeatureBundle::new()
        .with("pos", pos_feature(n))
        .with("key", key);
    let outputs = FeatureBundle::new().with_indices("pred", &chain(&order));
    Ok(build_trace(
        TaskId::InsertionSort,
        Graph::complete(n)?,
        inputs,
        hints,
        outputs,
    ))
}

pub(crate) fn check_distinct(keys: &[f64]) -> Result<()> {
    if keys.is_empty() {
        return Err(Error::Domain("at least one key is required".into()));
    }
    if keys.iter().any(|k| !k.is_finite()) {
        return Err(Error::Domain("keys must be finite".into()));
    }
    let mut sorted = keys.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Generator("keys must be distinct".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_key() {
        let t = gen_insertion_sort(&[5.0]).unwrap();
        assert_eq!(t.steps, 1);
        assert_eq!(t.outputs.indices("pred").unwrap(), vec![0]);
    }

    #[test]
    fn three_keys() {
        let t = gen_insertion_sort(&[3.0, 1.0, 2.0]).unwrap();
        assert_eq!(t.steps, 2);
        assert_eq!(t.outputs.indices("pred").unwrap(), vec![2, 1, 1]);
        // after inserting node 1 the array reads [1, 0, 2]
        assert_eq!(t.hints[0].indices("pred_h").unwrap(), vec![1, 1, 0]);
        assert_eq!(t.hints[1].get("i").unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn duplicates_rejected() {
        assert!(matches!(
            gen_insertion_sort(&[1.0, 1.0]),
            Err(Error::Generator(_))
        ));
    }
}
