//! Adam with bias correction.

use ndarray::{Array1, Array2, Zip};

use crate::diff::params::{Grads, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment accumulators, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub m_weights: Vec<Array2<T>>,
    pub v_weights: Vec<Array2<T>>,
    pub m_biases: Vec<Array1<T>>,
    pub v_biases: Vec<Array1<T>>,
    pub step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let z = Grads::zeros_like(store);
        Self {
            m_weights: z.weights.clone(),
            v_weights: z.weights,
            m_biases: z.biases.clone(),
            v_biases: z.biases,
            step: 0,
        }
    }
}

/// One Adam update of `params` in place.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &Grads<T>,
    state: &mut OptimizerState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
        return Err(Error::Domain(format!(
            "learning rate must be non-negative, got {}",
            cfg.lr
        )));
    }
    let n = params.len();
    if grads.weights.len() != n || state.m_weights.len() != n {
        return Err(Error::shape(
            "adam_step",
            format!("{n} parameter groups"),
            format!(
                "{} gradients, {} moments",
                grads.weights.len(),
                state.m_weights.len()
            ),
        ));
    }
    for (gi, g) in params.groups().iter().enumerate() {
        if grads.weights[gi].dim() != g.weights.dim() || grads.biases[gi].len() != g.bias.len() {
            return Err(Error::shape(
                "adam_step",
                format!("group `{}` shaped {:?}", g.name, g.weights.dim()),
                format!("{:?}", grads.weights[gi].dim()),
            ));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let b1 = T::lit(cfg.beta1);
    let b2 = T::lit(cfg.beta2);
    let one = T::one();
    let bc1 = one - b1.powi(t);
    let bc2 = one - b2.powi(t);
    let lr = T::lit(cfg.lr);
    let eps = T::lit(cfg.eps);

    let update = |p: &mut T, &g: &T, m: &mut T, v: &mut T| {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    };

    for (gi, group) in params.groups_mut().iter_mut().enumerate() {
        Zip::from(&mut group.weights)
            .and(&grads.weights[gi])
            .and(&mut state.m_weights[gi])
            .and(&mut state.v_weights[gi])
            .for_each(update);
        Zip::from(&mut group.bias)
            .and(&grads.biases[gi])
            .and(&mut state.m_biases[gi])
            .and(&mut state.v_biases[gi])
            .for_each(update);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.push_init("a", 3, 2, 11).unwrap();
        s.push_init("b", 1, 3, 12).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_params_and_moments() {
        let mut s = store();
        let before = s.clone();
        let mut st = OptimizerState::new(&s);
        let g = Grads::zeros_like(&s);
        adam_step(&mut s, &g, &mut st, &AdamConfig::with_lr(0.001)).unwrap();
        assert_eq!(s, before);
        assert_eq!(st.step, 1);
        assert!(st.m_weights.iter().all(|m| m.iter().all(|&v| v == 0.0)));
        assert!(st.v_biases.iter().all(|m| m.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn first_step_moves_each_coordinate_by_lr() {
        // t = 1: m̂ = g, v̂ = g², so the step is lr·g/(|g| + ε) ≈ lr·sign(g)
        for lr in [0.001, 0.00025] {
            let mut s = store();
            let before = s.clone();
            let mut st = OptimizerState::new(&s);
            let mut g = Grads::zeros_like(&s);
            g.weights[0].fill(0.37);
            g.biases[1].fill(-2.5);
            adam_step(&mut s, &g, &mut st, &AdamConfig::with_lr(lr)).unwrap();
            let dw = &before.groups()[0].weights - &s.groups()[0].weights;
            let expected = lr * 0.37 / (0.37 + 1e-8);
            assert!(dw.iter().all(|&d| (d - expected).abs() < 1e-15));
            let db = s.groups()[1].bias[0] - before.groups()[1].bias[0];
            assert!((db - lr * 2.5 / (2.5 + 1e-8)).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut s = store();
        let mut st = OptimizerState::new(&s);
        let mut other = ParamStore::<f64>::new();
        other.push_init("a", 2, 2, 0).unwrap();
        other.push_init("b", 1, 3, 0).unwrap();
        let g = Grads::zeros_like(&other);
        assert!(matches!(
            adam_step(&mut s, &g, &mut st, &AdamConfig::with_lr(0.001)),
            Err(Error::Shape { .. })
        ));
    }
}
