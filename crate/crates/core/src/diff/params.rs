//! Named parameter groups and their gradients.

use std::collections::HashMap;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// One linear layer: `weights` is `d_out × d_in`, `bias` has length `d_out`.
///
/// Bias-only groups (learned vectors) use `d_in = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup<T> {
    pub name: String,
    pub weights: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> ParamGroup<T> {
    pub fn zeros(name: impl Into<String>, d_out: usize, d_in: usize) -> Self {
        Self {
            name: name.into(),
            weights: Array2::zeros((d_out, d_in)),
            bias: Array1::zeros(d_out),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weights.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.weights.nrows()
    }

    pub fn n_values(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn is_finite(&self) -> bool {
        self.weights
            .iter()
            .chain(self.bias.iter())
            .all(|v| v.is_finite())
    }
}

/// `weights · x + bias` for a single input vector.
pub fn linear<T: Scalar>(p: &ParamGroup<T>, x: &[T]) -> Result<Vec<T>> {
    if x.len() != p.d_in() {
        return Err(Error::shape(
            "linear",
            format!("input length {}", p.d_in()),
            x.len(),
        ));
    }
    Ok(p.weights
        .rows()
        .into_iter()
        .zip(p.bias.iter())
        .map(|(row, &b)| row.iter().zip(x).fold(b, |acc, (&w, &xi)| acc + w * xi))
        .collect())
}

/// Ordered collection of parameter groups addressed by index or by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    groups: Vec<ParamGroup<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            groups: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn groups(&self) -> &[ParamGroup<T>] {
        &self.groups
    }

    pub fn groups_mut(&mut self) -> &mut [ParamGroup<T>] {
        &mut self.groups
    }

    pub fn get(&self, name: &str) -> Option<&ParamGroup<T>> {
        self.by_name.get(name).map(|&i| &self.groups[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamGroup<T>> {
        self.by_name.get(name).map(|&i| &mut self.groups[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn n_values(&self) -> usize {
        self.groups.iter().map(ParamGroup::n_values).sum()
    }

    /// Appends a group, rejecting duplicate names.
    pub fn push(&mut self, group: ParamGroup<T>) -> Result<usize> {
        if self.by_name.contains_key(&group.name) {
            return Err(Error::Contract(format!(
                "duplicate parameter group `{}`",
                group.name
            )));
        }
        let i = self.groups.len();
        self.by_name.insert(group.name.clone(), i);
        self.groups.push(group);
        Ok(i)
    }

    /// Adds a group with weights uniform in `±1/√d_in` and zero bias.
    ///
    /// The generator is seeded from `(seed, name)`, so the values of one group
    /// do not depend on which other groups exist or their order.
    pub fn push_init(&mut self, name: &str, d_out: usize, d_in: usize, seed: u64) -> Result<usize> {
        let mut g = ParamGroup::zeros(name, d_out, d_in);
        if d_in > 0 {
            let bound = 1.0 / (d_in as f64).sqrt();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name_hash(name));
            g.weights
                .mapv_inplace(|_| T::lit(rng.gen_range(-bound..=bound)));
        }
        self.push(g)
    }

    pub fn is_finite(&self) -> bool {
        self.groups.iter().all(ParamGroup::is_finite)
    }

    /// Converts every value to another scalar type.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for g in &self.groups {
            out.push(ParamGroup {
                name: g.name.clone(),
                weights: g.weights.mapv(|v| U::lit(v.as_f64())),
                bias: g.bias.mapv(|v| U::lit(v.as_f64())),
            })
            .expect("names are unique in the source store");
        }
        out
    }
}

/// FNV-1a, used only to derive per-group seeds.
fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Gradients mirroring the shapes of a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads<T> {
    pub weights: Vec<Array2<T>>,
    pub biases: Vec<Array1<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Self {
            weights: store
                .groups()
                .iter()
                .map(|g| Array2::zeros(g.weights.dim()))
                .collect(),
            biases: store
                .groups()
                .iter()
                .map(|g| Array1::zeros(g.bias.len()))
                .collect(),
        }
    }

    pub fn global_norm(&self) -> T {
        self.weights
            .iter()
            .flat_map(|w| w.iter())
            .chain(self.biases.iter().flat_map(|b| b.iter()))
            .map(|&v| v * v)
            .sum::<T>()
            .sqrt()
    }

    pub fn scale(&mut self, k: T) {
        for w in &mut self.weights {
            w.mapv_inplace(|v| v * k);
        }
        for b in &mut self.biases {
            b.mapv_inplace(|v| v * k);
        }
    }

    /// Rescales so the global norm is at most `max_norm`.
    pub fn clip_norm(&mut self, max_norm: T) {
        let norm = self.global_norm();
        if norm > max_norm {
            self.scale(max_norm / norm);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights
            .iter()
            .flat_map(|w| w.iter())
            .chain(self.biases.iter().flat_map(|b| b.iter()))
            .all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identity_linear_passes_input_through() {
        let mut p = ParamGroup::<f64>::zeros("id", 2, 2);
        p.weights = Array2::eye(2);
        assert_eq!(linear(&p, &[3.0, -1.0]).unwrap(), vec![3.0, -1.0]);
    }

    #[test]
    fn scalar_linear() {
        let p = ParamGroup {
            name: "s".into(),
            weights: array![[2.0]],
            bias: array![1.0],
        };
        assert_eq!(linear(&p, &[3.0]).unwrap(), vec![7.0]);
        assert!(matches!(linear(&p, &[1.0, 2.0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn init_is_bounded_and_independent_of_neighbours() {
        let mut a = ParamStore::<f64>::new();
        a.push_init("x", 8, 16, 7).unwrap();
        let mut b = ParamStore::<f64>::new();
        b.push_init("other", 3, 3, 7).unwrap();
        b.push_init("x", 8, 16, 7).unwrap();
        assert_eq!(a.get("x"), b.get("x"));
        let g = a.get("x").unwrap();
        assert!(g.weights.iter().all(|w| w.abs() <= 0.25));
        assert!(g.bias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.push_init("a", 1, 1, 0).unwrap();
        assert!(s.push_init("a", 1, 1, 0).is_err());
    }

    #[test]
    fn clip_limits_global_norm() {
        let mut s = ParamStore::<f64>::new();
        s.push_init("a", 2, 2, 0).unwrap();
        let mut g = Grads::zeros_like(&s);
        g.weights[0].fill(3.0);
        g.biases[0].fill(4.0);
        g.clip_norm(1.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-12);
    }
}
