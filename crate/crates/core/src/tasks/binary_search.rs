use crate::error::{Error, Result};
use crate::graph::{FeatureBundle, Graph, Trace};
use crate::tasks::{build_trace, normalize, pos_feature, TaskId};

/// Lower-bound binary search: the answer is the first position whose key is
/// at least `target`.
///
/// Each step probes `mid = (low + high) / 2` and halves the interval; the
/// hints carry the interval ends after the step as one-hot masks plus the
/// probed position. A single-key search still emits one step.
pub fn gen_binary_search(sorted_keys: &[f64], target: f64) -> Result<Trace> {
    let n = sorted_keys.len();
    if n == 0 {
        return Err(Error::Domain("at least one key is required".into()));
    }
    if sorted_keys.iter().any(|k| !k.is_finite()) || !target.is_finite() {
        return Err(Error::Domain("keys and target must be finite".into()));
    }
    if sorted_keys.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Generator("keys must be strictly increasing".into()));
    }
    if target < sorted_keys[0] || target > sorted_keys[n - 1] {
        return Err(Error::Domain(format!(
            "target {target} outside [{}, {}]",
            sorted_keys[0],
            sorted_keys[n - 1]
        )));
    }

    let one_hot = |i: usize| (0..n).map(|v| v == i).collect::<Vec<_>>();
    let snapshot = |low: usize, high: usize, mid: usize| {
        FeatureBundle::new()
            .with_mask("low", &one_hot(low))
            .with_mask("high", &one_hot(high))
            .with_indices("mid", &vec![mid; n])
    };

    let (mut low, mut high) = (0, n - 1);
    let mut hints = Vec::new();
    while low < high {
        let mid = (low + high) / 2;
        if sorted_keys[mid] < target {
            low = mid + 1;
        } else {
            high = mid;
        }
        hints.push(snapshot(low, high, mid));
    }
    if hints.is_empty() {
        hints.push(snapshot(low, high, low));
    }

    let (key, map) = normalize(sorted_keys);
    let inputs = FeatureBundle::new()
        .with("pos", pos_feature(n))
        .with("key", key)
        .with("target", vec![map(target); n]);
    let outputs = FeatureBundle::new().with_indices("position", &vec![low; n]);
    Ok(build_trace(
        TaskId::BinarySearch,
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
        let t = gen_binary_search(&[1.0], 1.0).unwrap();
        assert_eq!(t.steps, 1);
        assert_eq!(t.outputs.indices("position").unwrap(), vec![0]);
    }

    #[test]
    fn probes_follow_the_halving() {
        let t = gen_binary_search(&[1.0, 3.0, 5.0, 7.0], 5.0).unwrap();
        let mids: Vec<usize> = t
            .hints
            .iter()
            .map(|h| h.indices("mid").unwrap()[0])
            .collect();
        assert_eq!(mids, vec![1, 2]);
        assert_eq!(t.outputs.indices("position").unwrap()[0], 2);
    }

    #[test]
    fn unsorted_input_rejected() {
        assert!(matches!(
            gen_binary_search(&[2.0, 1.0], 1.5),
            Err(Error::Generator(_))
        ));
        assert!(gen_binary_search(&[1.0, 2.0], 3.0).is_err());
    }
}
