//! Context-state preprocessors.
//!
//! Every gate produces a scalar forget factor `α` per row and blends
//! `c_next = α · c + (1 − α) · x`. Rows are nodes or node pairs; the matrix
//! form applies the same per-row rule to all of them at once.

use serde::{Deserialize, Serialize};

use crate::diff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateActivation {
    /// `relu(tanh(·))`, range `[0, 1)`.
    TanhRelu,
    /// `sigmoid(·)`, range `(0, 1)`.
    Sigmoid,
}

impl GateActivation {
    pub fn flipped(self) -> Self {
        match self {
            GateActivation::TanhRelu => GateActivation::Sigmoid,
            GateActivation::Sigmoid => GateActivation::TanhRelu,
        }
    }
}

/// Result of one gate application.
#[derive(Clone, Copy, Debug)]
pub struct Gate {
    /// `rows × 1` forget factors.
    pub alpha: Var,
    pub c_next: Var,
}

fn check_same(tape: &Tape<impl Scalar>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape(
            op,
            format!("{:?}", tape.shape(a)),
            format!("{:?}", tape.shape(b)),
        ));
    }
    Ok(())
}

/// `α · c + (1 − α) · x` with `α` an `r × 1` column.
pub fn blend<T: Scalar>(tape: &mut Tape<T>, alpha: Var, c: Var, x: Var) -> Result<Var> {
    let keep = tape.mul_col(c, alpha)?;
    let rest = tape.one_minus(alpha);
    let fresh = tape.mul_col(x, rest)?;
    tape.add(keep, fresh)
}

/// Learned gate: `α = act(c · wᵀ + b)` with `w: 1 × k`.
pub fn learned_gate<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    c: Var,
    w: Var,
    b: Var,
    activation: GateActivation,
) -> Result<Gate> {
    check_same(tape, "gate", x, c)?;
    let pre = tape.linear(c, w, Some(b))?;
    if tape.shape(pre).1 != 1 {
        return Err(Error::shape("gate", "a scalar per row", tape.shape(pre).1));
    }
    // tanh and sigmoid round to exactly 0 or 1 once saturated; the clamp
    // keeps the open ends of the documented ranges
    let below_one = T::one() - T::epsilon();
    let alpha = match activation {
        GateActivation::TanhRelu => {
            let t = tape.tanh(pre);
            let r = tape.relu(t);
            tape.clamp(r, T::zero(), below_one)
        }
        GateActivation::Sigmoid => {
            let s = tape.sigmoid(pre);
            tape.clamp(s, T::min_positive_value(), below_one)
        }
    };
    let c_next = blend(tape, alpha, c, x)?;
    Ok(Gate { alpha, c_next })
}

/// Node gate of the GNN variant. The enhanced latent `s` equals `c_next`;
/// edge latents are not gated. `w` is shared by all nodes.
pub fn gnn_gate<T: Scalar>(tape: &mut Tape<T>, l: Var, c: Var, w: Var, b: Var) -> Result<Gate> {
    learned_gate(tape, l, c, w, b, GateActivation::TanhRelu)
}

/// Gate of the attention variant: builds `z = [ℓ ‖ h_prev]` and blends the
/// `2d`-wide context towards it. Returns `(z, gate)`; the processor reads
/// both. Nodes and edges use separate `(w, b)`.
pub fn transformer_gate<T: Scalar>(
    tape: &mut Tape<T>,
    l: Var,
    h_prev: Var,
    c: Var,
    w: Var,
    b: Var,
) -> Result<(Var, Gate)> {
    let z = tape.concat_cols(&[l, h_prev])?;
    let gate = learned_gate(tape, z, c, w, b, GateActivation::Sigmoid)?;
    Ok((z, gate))
}

/// Constant forget factor. `α = 0` returns `x` exactly; `α = 1` returns `c`.
pub fn fixed_gate<T: Scalar>(tape: &mut Tape<T>, x: Var, c: Var, alpha: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Domain(format!(
            "forget factor {alpha} outside [0, 1]"
        )));
    }
    check_same(tape, "fixed_gate", x, c)?;
    // the endpoints return the operand itself so the reductions hold bitwise
    if alpha == 0.0 {
        return Ok(x);
    }
    if alpha == 1.0 {
        return Ok(c);
    }
    let keep = tape.scale(c, T::lit(alpha));
    let fresh = tape.scale(x, T::lit(1.0 - alpha));
    tape.add(keep, fresh)
}

/// Attention over the history of node latents.
#[derive(Clone, Debug)]
pub struct Attended {
    pub s: Var,
    /// `N × t` attention weights over the history entries attended to.
    pub weights: Var,
    /// Newest first; length grows by one per step.
    pub history_next: Vec<Var>,
}

/// `s = softmax(q Kᵀ / √d) V` with the query from `ℓ` and keys and values
/// from the stored latents. An empty history (first step) is seeded with `ℓ`
/// itself.
pub fn attention_enhance<T: Scalar>(
    tape: &mut Tape<T>,
    l: Var,
    history: &[Var],
    q: (Var, Var),
    k: (Var, Var),
    v: (Var, Var),
) -> Result<Attended> {
    let seeded = [l];
    let entries: &[Var] = if history.is_empty() { &seeded } else { history };
    for &h in entries {
        check_same(tape, "attention_enhance", l, h)?;
    }
    let d = tape.shape(l).1;
    let scale = T::lit(1.0 / (d as f64).sqrt());
    let query = tape.linear(l, q.0, Some(q.1))?;
    let mut scores = Vec::with_capacity(entries.len());
    let mut values = Vec::with_capacity(entries.len());
    for &h in entries {
        let key = tape.linear(h, k.0, Some(k.1))?;
        let prod = tape.mul(query, key)?;
        let dot = tape.sum_cols(prod);
        scores.push(tape.scale(dot, scale));
        values.push(tape.linear(h, v.0, Some(v.1))?);
    }
    let scores = tape.concat_cols(&scores)?;
    let weights = tape.softmax_rows(scores);
    let mut parts = Vec::with_capacity(values.len());
    for (j, &val) in values.iter().enumerate() {
        let a = tape.slice_cols(weights, j, 1)?;
        parts.push(tape.mul_col(val, a)?);
    }
    let s = tape.add_all(&parts)?;
    let mut history_next = Vec::with_capacity(history.len() + 1);
    history_next.push(l);
    history_next.extend_from_slice(history);
    Ok(Attended {
        s,
        weights,
        history_next,
    })
}
