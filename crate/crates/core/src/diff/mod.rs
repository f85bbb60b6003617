//! Differentiable-computation substrate: tape, parameters, optimizer.

pub mod adam;
pub mod checkpoint;
pub mod params;
pub mod tape;

pub use adam::{adam_step, AdamConfig, OptimizerState};
pub use params::{linear, Grads, ParamGroup, ParamStore};
pub use tape::{Adjoints, BoundParams, Index, Tape, Var};

use crate::error::Result;
use crate::scalar::Scalar;

/// Value and parameter gradients of a scalar loss built by `loss_fn`.
///
/// `loss_fn` receives a fresh tape with every group of `params` bound as a
/// leaf and must return a `1 × 1` node; anything else is a contract error.
pub fn grad<T, F>(params: &ParamStore<T>, loss_fn: F) -> Result<(T, Grads<T>)>
where
    T: Scalar,
    F: FnOnce(&mut Tape<T>, &BoundParams) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = tape.bind(params);
    let loss = loss_fn(&mut tape, &bound)?;
    let value = tape.scalar(loss)?;
    let adj = tape.backward(loss)?;
    Ok((value, tape.param_grads(&adj, &bound, params)))
}

/// Elementwise activations on plain values, matching the tape's definitions.
pub mod act {
    use crate::scalar::Scalar;

    pub fn tanh<T: Scalar>(x: T) -> T {
        x.tanh()
    }

    pub fn relu<T: Scalar>(x: T) -> T {
        super::tape::relu(x)
    }

    pub fn sigmoid<T: Scalar>(x: T) -> T {
        super::tape::sigmoid(x)
    }

    pub fn softmax<T: Scalar>(xs: &[T]) -> Vec<T> {
        let m = xs.iter().copied().fold(T::neg_infinity(), T::max);
        let e: Vec<T> = xs.iter().map(|&x| (x - m).exp()).collect();
        let z: T = e.iter().copied().sum();
        e.into_iter().map(|v| v / z).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn activation_fixed_points() {
        assert_eq!(act::tanh(0.0f64), 0.0);
        assert_eq!(act::relu(-2.0f64), 0.0);
        assert_eq!(act::sigmoid(0.0f64), 0.5);
        assert_eq!(act::softmax(&[0.0f64, 0.0]), vec![0.5, 0.5]);
        let g = act::relu(act::tanh(5.0f64));
        assert!((g - 0.999_909_204_262_595_1).abs() < 1e-15 && g < 1.0);
    }

    #[test]
    fn linear_squared_error_matches_closed_form() {
        // ∂/∂W (Wx + b − y)² = 2(Wx + b − y)·xᵀ
        let mut store = ParamStore::<f64>::new();
        store.push_init("l", 1, 3, 4).unwrap();
        store.groups_mut()[0].bias[0] = 0.3;
        let x = array![[0.5, -1.0, 2.0]];
        let y = 0.7;
        let (_, g) = grad(&store, |tape, p| {
            let xv = tape.constant(x.clone());
            let out = tape.linear(xv, p.weight(0), Some(p.bias(0)))?;
            tape.squared_error(out, array![[y]], ndarray::Array1::ones(1))
        })
        .unwrap();
        let w = &store.groups()[0].weights;
        let r = w.row(0).dot(&x.row(0)) + 0.3 - y;
        for k in 0..3 {
            assert!((g.weights[0][[0, k]] - 2.0 * r * x[[0, k]]).abs() < 1e-12);
        }
        assert!((g.biases[0][0] - 2.0 * r).abs() < 1e-12);
    }
}
