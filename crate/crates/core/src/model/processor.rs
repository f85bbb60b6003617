//! Processors: max-aggregation message passing and relational attention.
//!
//! Concatenated-input linear layers are applied in split form: the weight
//! is sliced by input block and each block is multiplied where it is
//! cheapest (per node, then gathered onto edges).

use crate::diff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::batch::Topology;
use crate::scalar::Scalar;

/// Weight and bias leaves.
pub type Linear = (Var, Var);

fn width<T: Scalar>(tape: &Tape<T>, x: Var) -> usize {
    tape.shape(x).1
}

fn expect_shape<T: Scalar>(
    tape: &Tape<T>,
    op: &'static str,
    x: Var,
    rows: usize,
    cols: usize,
) -> Result<()> {
    let got = tape.shape(x);
    if got != (rows, cols) {
        return Err(Error::shape(
            op,
            format!("{rows}x{cols}"),
            format!("{}x{}", got.0, got.1),
        ));
    }
    Ok(())
}

/// `x · W[:, start..start + len]ᵀ`.
fn block<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, start: usize, len: usize) -> Result<Var> {
    let wb = tape.slice_cols(w, start, len)?;
    tape.linear(x, wb, None)
}

/// Message passing with elementwise-max aggregation over in-edges.
///
/// `z: N × 2d` (enhanced latent ‖ hidden), `s_e: P × d` edge latents.
/// `r = relu(f₁ z)`, the message into `v` along `(u, v)` is
/// `relu(f₂ [r_v ‖ r_u ‖ s_(u,v)])`, empty neighbourhoods aggregate to zero,
/// and `h = f₃ [r ‖ m]`.
pub fn gnn_process<T: Scalar>(
    tape: &mut Tape<T>,
    topo: &Topology,
    z: Var,
    s_e: Var,
    f1: Linear,
    f2: Linear,
    f3: Linear,
) -> Result<Var> {
    let d = tape.shape(f1.0).0;
    expect_shape(tape, "gnn_process", z, topo.n_nodes, 2 * d)?;
    expect_shape(tape, "gnn_process", s_e, topo.n_pairs, d)?;
    let pre = tape.linear(z, f1.0, Some(f1.1))?;
    let r = tape.relu(pre);

    let m = if topo.n_edges() == 0 {
        tape.zeros(topo.n_nodes, d)
    } else {
        let to = block(tape, r, f2.0, 0, d)?;
        let from = block(tape, r, f2.0, d, d)?;
        let s = tape.gather_rows(s_e, &topo.edge_pair)?;
        let ws = tape.slice_cols(f2.0, 2 * d, d)?;
        let along = tape.linear(s, ws, Some(f2.1))?;
        let to = tape.gather_rows(to, &topo.edge_dst)?;
        let from = tape.gather_rows(from, &topo.edge_src)?;
        let msg = tape.add_all(&[to, from, along])?;
        let msg = tape.relu(msg);
        tape.segment_max(msg, &topo.edge_dst, topo.n_nodes)?
    };
    let rm = tape.concat_cols(&[r, m])?;
    tape.linear(rm, f3.0, Some(f3.1))
}

/// Relational-attention weights: query, key, value, node update, edge update.
#[derive(Clone, Copy, Debug)]
pub struct RtWeights {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub node: Linear,
    pub edge: Linear,
}

/// Shared body of both attention processors. Queries read `z`; keys and
/// values read `(kv_v, kv_e)` and the edge update reads `kv_e`.
fn relational<T: Scalar>(
    tape: &mut Tape<T>,
    topo: &Topology,
    z_v: Var,
    z_e: Var,
    kv_v: Var,
    kv_e: Var,
    w: &RtWeights,
) -> Result<(Var, Var)> {
    let d = tape.shape(w.query.0).0;
    let k = 2 * d;
    expect_shape(tape, "rt_process", z_v, topo.n_nodes, k)?;
    expect_shape(tape, "rt_process", z_e, topo.n_pairs, k)?;
    expect_shape(tape, "rt_process", kv_v, topo.n_nodes, k)?;
    expect_shape(tape, "rt_process", kv_e, topo.n_pairs, k)?;
    debug_assert_eq!(width(tape, w.edge.0), 6 * d);

    let pool = if topo.n_edges() == 0 {
        tape.zeros(topo.n_nodes, d)
    } else {
        // query from the node and the mean of its outgoing edge states
        let z_out = tape.gather_rows(z_e, &topo.edge_pair)?;
        let z_mean = tape.segment_mean(z_out, &topo.edge_src, topo.n_nodes)?;
        let qin = tape.concat_cols(&[z_v, z_mean])?;
        let q = tape.linear(qin, w.query.0, Some(w.query.1))?;

        let kv_nb = tape.gather_rows(kv_v, &topo.edge_dst)?;
        let kv_ed = tape.gather_rows(kv_e, &topo.edge_pair)?;
        let kin = tape.concat_cols(&[kv_nb, kv_ed])?;
        let key = tape.linear(kin, w.key.0, Some(w.key.1))?;
        let val = tape.linear(kin, w.value.0, Some(w.value.1))?;

        let q_e = tape.gather_rows(q, &topo.edge_src)?;
        let qk = tape.mul(q_e, key)?;
        let dot = tape.sum_cols(qk);
        let logits = tape.scale(dot, T::lit(1.0 / (d as f64).sqrt()));
        let a = tape.segment_softmax(logits, &topo.edge_src, topo.n_nodes)?;
        let weighted = tape.mul_col(val, a)?;
        tape.segment_sum(weighted, &topo.edge_src, topo.n_nodes)?
    };
    let nin = tape.concat_cols(&[z_v, pool])?;
    let h_v = tape.linear(nin, w.node.0, Some(w.node.1))?;

    // h_(a,b) = f_edge [h_a ‖ h_b ‖ e_(a,b) ‖ e_(b,a)]
    let ha = block(tape, h_v, w.edge.0, 0, d)?;
    let hb = block(tape, h_v, w.edge.0, d, d)?;
    let ha = tape.gather_rows(ha, &topo.pair_src)?;
    let hb = tape.gather_rows(hb, &topo.pair_dst)?;
    let fwd = {
        let wf = tape.slice_cols(w.edge.0, 2 * d, k)?;
        tape.linear(kv_e, wf, Some(w.edge.1))?
    };
    let rev = block(tape, kv_e, w.edge.0, 2 * d + k, k)?;
    let rev = tape.gather_rows(rev, &topo.pair_rev)?;
    let h_e = tape.add_all(&[ha, hb, fwd, rev])?;
    Ok((h_v, h_e))
}

/// Relational attention over `z_v: N × 2d`, `z_e: P × 2d`. Returns node
/// hidden states `N × d` and hidden states `P × d` for every node pair.
pub fn rt_process<T: Scalar>(
    tape: &mut Tape<T>,
    topo: &Topology,
    z_v: Var,
    z_e: Var,
    w: &RtWeights,
) -> Result<(Var, Var)> {
    relational(tape, topo, z_v, z_e, z_v, z_e, w)
}

/// Relational attention whose keys, values and edge update read the
/// updated context states; queries still read `z`.
pub fn cef_rt_process<T: Scalar>(
    tape: &mut Tape<T>,
    topo: &Topology,
    z_v: Var,
    z_e: Var,
    c_v: Var,
    c_e: Var,
    w: &RtWeights,
) -> Result<(Var, Var)> {
    relational(tape, topo, z_v, z_e, c_v, c_e, w)
}
