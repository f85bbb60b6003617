//! Range, convexity and normalization laws of the context preprocessors.

use cef_core::diff::{Tape, Var};
use cef_core::model::{attention_enhance, fixed_gate, gnn_gate, transformer_gate};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ROWS: usize = 100;
const BATCHES: usize = 100;

/// Mixes ordinary and saturating magnitudes.
fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    let scale = [0.1, 1.0, 10.0, 1e3][rng.gen_range(0..4)];
    Array2::from_shape_fn((r, c), |_| rng.gen_range(-scale..scale))
}

fn consts(t: &mut Tape<f64>, xs: Vec<Array2<f64>>) -> Vec<Var> {
    xs.into_iter().map(|x| t.constant(x)).collect()
}

#[test]
fn gnn_gate_alpha_is_in_zero_one_half_open() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let d = 5;
    let mut seen = 0;
    for _ in 0..BATCHES {
        let mut t = Tape::new();
        let v = consts(
            &mut t,
            vec![
                random(&mut rng, ROWS, d),
                random(&mut rng, ROWS, d),
                random(&mut rng, 1, d),
                random(&mut rng, 1, 1),
            ],
        );
        let gate = gnn_gate(&mut t, v[0], v[1], v[2], v[3]).unwrap();
        for &a in t.value(gate.alpha) {
            assert!((0.0..1.0).contains(&a), "alpha {a}");
            seen += 1;
        }
    }
    assert!(seen >= 10_000);
}

#[test]
fn transformer_gate_alpha_is_in_open_unit_interval() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let d = 3;
    let mut seen = 0;
    for _ in 0..BATCHES {
        let mut t = Tape::new();
        let v = consts(
            &mut t,
            vec![
                random(&mut rng, ROWS, d),
                random(&mut rng, ROWS, d),
                random(&mut rng, ROWS, 2 * d),
                random(&mut rng, 1, 2 * d),
                random(&mut rng, 1, 1),
            ],
        );
        let (_, gate) = transformer_gate(&mut t, v[0], v[1], v[2], v[3], v[4]).unwrap();
        for &a in t.value(gate.alpha) {
            assert!(a > 0.0 && a < 1.0, "alpha {a}");
            seen += 1;
        }
    }
    assert!(seen >= 10_000);
}

#[test]
fn attention_weights_are_normalized_and_outputs_stay_in_the_value_hull() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d = 4;
    let mut seen = 0;
    for _ in 0..BATCHES {
        let mut t = Tape::new();
        let len = rng.gen_range(0..5);
        let l = t.constant(random(&mut rng, ROWS, d));
        let hist: Vec<Var> = (0..len)
            .map(|_| t.constant(random(&mut rng, ROWS, d)))
            .collect();
        let lin = |rng: &mut ChaCha8Rng, t: &mut Tape<f64>| {
            let w = t.constant(random(rng, d, d));
            let b = t.constant(random(rng, 1, d));
            (w, b)
        };
        let (q, k, v) = (
            lin(&mut rng, &mut t),
            lin(&mut rng, &mut t),
            lin(&mut rng, &mut t),
        );
        let att = attention_enhance(&mut t, l, &hist, q, k, v).unwrap();
        let w = t.value(att.weights).clone();
        assert_eq!(w.ncols(), len.max(1));
        assert_eq!(att.history_next.len(), len + 1);
        let entries = if hist.is_empty() {
            vec![l]
        } else {
            hist.clone()
        };
        let values: Vec<Array2<f64>> = entries
            .iter()
            .map(|&h| t.value(h).dot(&t.value(v.0).t()) + t.value(v.1))
            .collect();
        let s = t.value(att.s);
        for r in 0..ROWS {
            let sum: f64 = w.row(r).sum();
            assert!((sum - 1.0).abs() <= 1e-9, "weights sum to {sum}");
            assert!(w.row(r).iter().all(|&a| a >= 0.0));
            for c in 0..d {
                let lo = values
                    .iter()
                    .map(|x| x[[r, c]])
                    .fold(f64::INFINITY, f64::min);
                let hi = values
                    .iter()
                    .map(|x| x[[r, c]])
                    .fold(f64::NEG_INFINITY, f64::max);
                let slack = 1e-9 * (1.0 + lo.abs().max(hi.abs()));
                assert!(s[[r, c]] >= lo - slack && s[[r, c]] <= hi + slack);
            }
            seen += 1;
        }
    }
    assert!(seen >= 10_000);
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-50.0..50.0f64, rows * cols)
        .prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn inf_norm(a: &Array2<f64>) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}

proptest! {
    #[test]
    fn learned_gates_never_blow_up_the_context(
        l in matrix(6, 3),
        h in matrix(6, 3),
        c in matrix(6, 6),
        w in matrix(1, 6),
        b in matrix(1, 1),
    ) {
        let mut t = Tape::new();
        let v = consts(&mut t, vec![l.clone(), h.clone(), c.clone(), w, b.clone()]);
        let (z, gate) = transformer_gate(&mut t, v[0], v[1], v[2], v[3], v[4]).unwrap();
        let bound = inf_norm(&c).max(inf_norm(t.value(z)));
        prop_assert!(inf_norm(t.value(gate.c_next)) <= bound * (1.0 + 1e-12));

        let wn = t.constant(Array2::from_elem((1, 3), 0.7));
        let cn = t.constant(c.slice(ndarray::s![.., ..3]).to_owned());
        let g = gnn_gate(&mut t, v[0], cn, wn, v[4]).unwrap();
        let bound = inf_norm(t.value(cn)).max(inf_norm(&l));
        prop_assert!(inf_norm(t.value(g.c_next)) <= bound * (1.0 + 1e-12));
    }

    #[test]
    fn fixed_gate_is_a_convex_combination(x in matrix(4, 3), c in matrix(4, 3), alpha in 0.0..=1.0f64) {
        let mut t = Tape::new();
        let v = consts(&mut t, vec![x.clone(), c.clone()]);
        let out = fixed_gate(&mut t, v[0], v[1], alpha).unwrap();
        for ((o, a), b) in t.value(out).iter().zip(&x).zip(&c) {
            let (lo, hi) = (a.min(*b), a.max(*b));
            prop_assert!(*o >= lo - 1e-12 * (1.0 + lo.abs()) && *o <= hi + 1e-12 * (1.0 + hi.abs()));
        }
    }
}
