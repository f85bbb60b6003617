//! Matrix-valued reverse-mode tape.
//!
//! Every value on the tape is a dense row-major matrix. Vectors are `r × 1`
//! columns or `1 × c` rows. Operations append a node holding the forward value
//! and enough bookkeeping to run the adjoint. [`Tape::backward`] walks the
//! nodes in reverse and accumulates gradients for every node that feeds the
//! loss.
//!
//! The operation vocabulary is deliberately closed: linear layers, matrix
//! products, elementwise arithmetic and maximum, the activations, column
//! concatenation and slicing, row gathers, segment reductions (sum, mean,
//! max, softmax), row-wise softmax, and the three losses. Everything in the
//! model is assembled from these, so gradient coverage is exactly the set of
//! adjoints below.

use std::sync::Arc;

use ndarray::{s, Array1, Array2, Axis, Zip};
use num_traits::Float;

use crate::diff::params::{Grads, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Shared index buffer. Segment and gather ops keep their indices alive for
/// the backward pass; batches reuse the same buffers across steps.
pub type Index = Arc<[usize]>;

enum Op<T> {
    Constant,
    Param,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Maximum(Var, Var),
    AddRow {
        x: Var,
        row: Var,
    },
    MulCol {
        x: Var,
        col: Var,
    },
    Scale(Var, T),
    OneMinus(Var),
    Tanh(Var),
    Relu(Var),
    Sigmoid(Var),
    Clamp {
        x: Var,
        lo: T,
        hi: T,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        idx: Index,
    },
    SegmentSum {
        x: Var,
        seg: Index,
    },
    SegmentMean {
        x: Var,
        seg: Index,
        counts: Vec<usize>,
    },
    SegmentMax {
        x: Var,
        // argmax row per output entry, `usize::MAX` for an empty segment
        argmax: Vec<usize>,
    },
    SegmentSoftmax {
        x: Var,
        seg: Index,
    },
    SoftmaxRows(Var),
    SumCols(Var),
    SumAll(Var),
    BceLogits {
        logits: Var,
        target: Array2<T>,
        weight: Array1<T>,
        total: T,
    },
    SegmentCrossEntropy {
        logits: Var,
        seg: Index,
        // softmax of the logits within each segment, cached from forward
        probs: Array1<T>,
        target_rows: Vec<usize>,
        seg_weight: Vec<T>,
        total: T,
    },
    SquaredError {
        pred: Var,
        target: Array2<T>,
        weight: Array1<T>,
        total: T,
    },
}

struct Node<T> {
    value: Array2<T>,
    op: Op<T>,
}

/// Parameter leaves created by [`Tape::bind`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    weights: Vec<Var>,
    biases: Vec<Var>,
}

impl BoundParams {
    pub fn weight(&self, group: usize) -> Var {
        self.weights[group]
    }

    pub fn bias(&self, group: usize) -> Var {
        self.biases[group]
    }
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims<T>(a: &Array2<T>) -> String {
    format!("{}x{}", a.nrows(), a.ncols())
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> Result<T> {
        let val = self.value(v);
        if val.dim() != (1, 1) {
            return Err(Error::Contract(format!(
                "expected a scalar node, found shape {}",
                dims(val)
            )));
        }
        Ok(val[[0, 0]])
    }

    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.constant(Array2::zeros((rows, cols)))
    }

    pub fn filled(&mut self, rows: usize, cols: usize, x: T) -> Var {
        self.constant(Array2::from_elem((rows, cols), x))
    }

    /// Registers every group of `store` as differentiable leaves.
    pub fn bind(&mut self, store: &ParamStore<T>) -> BoundParams {
        let mut weights = Vec::with_capacity(store.len());
        let mut biases = Vec::with_capacity(store.len());
        for g in store.groups() {
            let w = self.push(g.weights.clone(), Op::Param);
            let b = self.push(g.bias.clone().insert_axis(Axis(0)), Op::Param);
            weights.push(w);
            biases.push(b);
        }
        BoundParams { weights, biases }
    }

    // ---------------------------------------------------------------------
    // dense algebra

    /// `x · wᵀ + b` for `x: r × k`, `w: o × k`, `b: 1 × o`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        if xv.ncols() != wv.ncols() {
            return Err(Error::shape(
                "linear",
                format!("input width {}", wv.ncols()),
                format!("input {}", dims(xv)),
            ));
        }
        let mut out = xv.dot(&wv.t());
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.dim() != (1, wv.nrows()) {
                return Err(Error::shape(
                    "linear",
                    format!("bias 1x{}", wv.nrows()),
                    dims(bv),
                ));
            }
            out += bv;
        }
        Ok(self.push(out, Op::Linear { x, w, b }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ncols() != bv.nrows() {
            return Err(Error::shape(
                "matmul",
                format!("{} rows", av.ncols()),
                dims(bv),
            ));
        }
        let out = av.dot(bv);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.dim() != bv.dim() {
            return Err(Error::shape(op, dims(av), dims(bv)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a) + self.value(b);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a) - self.value(b);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a) * self.value(b);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Elementwise maximum. Ties send the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("maximum", a, b)?;
        let mut out = self.value(a).clone();
        Zip::from(&mut out)
            .and(self.value(b))
            .for_each(|o, &y| *o = if y > *o { y } else { *o });
        Ok(self.push(out, Op::Maximum(a, b)))
    }

    /// Sum of several same-shape nodes.
    pub fn add_all(&mut self, parts: &[Var]) -> Result<Var> {
        let (first, rest) = parts
            .split_first()
            .ok_or_else(|| Error::Contract("add_all over an empty list".into()))?;
        let mut acc = *first;
        for &p in rest {
            acc = self.add(acc, p)?;
        }
        Ok(acc)
    }

    /// Broadcasts a `1 × c` row over every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(row));
        if rv.dim() != (1, xv.ncols()) {
            return Err(Error::shape(
                "add_row",
                format!("1x{}", xv.ncols()),
                dims(rv),
            ));
        }
        let out = xv + rv;
        Ok(self.push(out, Op::AddRow { x, row }))
    }

    /// Scales row `i` of `x` by `col[i]`.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var> {
        let (xv, cv) = (self.value(x), self.value(col));
        if cv.dim() != (xv.nrows(), 1) {
            return Err(Error::shape(
                "mul_col",
                format!("{}x1", xv.nrows()),
                dims(cv),
            ));
        }
        let out = xv * cv;
        Ok(self.push(out, Op::MulCol { x, col }))
    }

    pub fn scale(&mut self, x: Var, k: T) -> Var {
        let out = self.value(x).mapv(|v| v * k);
        self.push(out, Op::Scale(x, k))
    }

    pub fn one_minus(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| T::one() - v);
        self.push(out, Op::OneMinus(x))
    }

    // ---------------------------------------------------------------------
    // activations

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(Float::tanh);
        self.push(out, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(relu);
        self.push(out, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    /// Elementwise clamp into `[lo, hi]`; the gradient passes only where
    /// the input lies strictly inside.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let out = self.value(x).mapv(|v| v.max(lo).min(hi));
        self.push(out, Op::Clamp { x, lo, hi })
    }

    // ---------------------------------------------------------------------
    // structure

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = match parts.first() {
            Some(&p) => self.value(p).nrows(),
            None => return Err(Error::Contract("concat_cols over an empty list".into())),
        };
        let mut width = 0;
        for &p in parts {
            let v = self.value(p);
            if v.nrows() != rows {
                return Err(Error::shape("concat_cols", format!("{rows} rows"), dims(v)));
            }
            width += v.ncols();
        }
        let mut out = Array2::zeros((rows, width));
        let mut at = 0;
        for &p in parts {
            let v = self.value(p);
            out.slice_mut(s![.., at..at + v.ncols()]).assign(v);
            at += v.ncols();
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + len > xv.ncols() {
            return Err(Error::shape(
                "slice_cols",
                format!("at least {} columns", start + len),
                dims(xv),
            ));
        }
        let out = xv.slice(s![.., start..start + len]).to_owned();
        Ok(self.push(out, Op::SliceCols { x, start }))
    }

    /// `out[i] = x[idx[i]]`.
    pub fn gather_rows(&mut self, x: Var, idx: &Index) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= xv.nrows()) {
            return Err(Error::shape(
                "gather_rows",
                format!("row index < {}", xv.nrows()),
                bad,
            ));
        }
        let mut out = Array2::zeros((idx.len(), xv.ncols()));
        for (o, &i) in idx.iter().enumerate() {
            out.row_mut(o).assign(&xv.row(i));
        }
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                idx: idx.clone(),
            },
        ))
    }

    fn check_segments(&self, op: &'static str, x: Var, seg: &Index, n_seg: usize) -> Result<()> {
        let xv = self.value(x);
        if seg.len() != xv.nrows() {
            return Err(Error::shape(
                op,
                format!("{} segment ids", xv.nrows()),
                seg.len(),
            ));
        }
        if let Some(&bad) = seg.iter().find(|&&s| s >= n_seg) {
            return Err(Error::shape(op, format!("segment id < {n_seg}"), bad));
        }
        Ok(())
    }

    /// Row-wise sum into `n_seg` buckets.
    pub fn segment_sum(&mut self, x: Var, seg: &Index, n_seg: usize) -> Result<Var> {
        self.check_segments("segment_sum", x, seg, n_seg)?;
        let xv = self.value(x);
        let mut out = Array2::zeros((n_seg, xv.ncols()));
        for (i, &sg) in seg.iter().enumerate() {
            let mut o = out.row_mut(sg);
            o += &xv.row(i);
        }
        Ok(self.push(
            out,
            Op::SegmentSum {
                x,
                seg: seg.clone(),
            },
        ))
    }

    /// Row-wise mean into `n_seg` buckets; empty buckets are zero.
    pub fn segment_mean(&mut self, x: Var, seg: &Index, n_seg: usize) -> Result<Var> {
        self.check_segments("segment_mean", x, seg, n_seg)?;
        let xv = self.value(x);
        let mut out = Array2::zeros((n_seg, xv.ncols()));
        let mut counts = vec![0usize; n_seg];
        for (i, &sg) in seg.iter().enumerate() {
            let mut o = out.row_mut(sg);
            o += &xv.row(i);
            counts[sg] += 1;
        }
        for (sg, &c) in counts.iter().enumerate() {
            if c > 1 {
                let k = T::lit(c as f64);
                out.row_mut(sg).mapv_inplace(|v| v / k);
            }
        }
        Ok(self.push(
            out,
            Op::SegmentMean {
                x,
                seg: seg.clone(),
                counts,
            },
        ))
    }

    /// Elementwise maximum per bucket; empty buckets are zero.
    pub fn segment_max(&mut self, x: Var, seg: &Index, n_seg: usize) -> Result<Var> {
        self.check_segments("segment_max", x, seg, n_seg)?;
        let xv = self.value(x);
        let c = xv.ncols();
        let mut out = Array2::zeros((n_seg, c));
        let mut argmax = vec![usize::MAX; n_seg * c];
        for (i, &sg) in seg.iter().enumerate() {
            let row = xv.row(i);
            for k in 0..c {
                let slot = &mut argmax[sg * c + k];
                if *slot == usize::MAX || row[k] > out[[sg, k]] {
                    *slot = i;
                    out[[sg, k]] = row[k];
                }
            }
        }
        Ok(self.push(out, Op::SegmentMax { x, argmax }))
    }

    /// Softmax of a column within each bucket.
    pub fn segment_softmax(&mut self, x: Var, seg: &Index, n_seg: usize) -> Result<Var> {
        self.check_segments("segment_softmax", x, seg, n_seg)?;
        let xv = self.value(x);
        if xv.ncols() != 1 {
            return Err(Error::shape("segment_softmax", "a column", dims(xv)));
        }
        let col = xv.column(0);
        let probs = segment_softmax_values(col.iter().copied(), seg, n_seg);
        let out = Array2::from_shape_vec((probs.len(), 1), probs.to_vec()).expect("column");
        Ok(self.push(
            out,
            Op::SegmentSoftmax {
                x,
                seg: seg.clone(),
            },
        ))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for mut row in out.rows_mut() {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            row.mapv_inplace(|v| (v - m).exp());
            let z: T = row.iter().copied().sum();
            row.mapv_inplace(|v| v / z);
        }
        self.push(out, Op::SoftmaxRows(x))
    }

    /// Per-row sum, giving an `r × 1` column.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let out = self.value(x).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(out, Op::SumCols(x))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        self.push(Array2::from_elem((1, 1), total), Op::SumAll(x))
    }

    // ---------------------------------------------------------------------
    // losses (all return 1 × 1 weighted means)

    /// Binary cross-entropy on logits, weighted mean over rows.
    ///
    /// Returns a zero-valued node when every weight is zero.
    pub fn bce_logits(&mut self, logits: Var, target: Array2<T>, weight: Array1<T>) -> Result<Var> {
        let lv = self.value(logits);
        if lv.ncols() != 1 || target.dim() != lv.dim() || weight.len() != lv.nrows() {
            return Err(Error::shape("bce_logits", dims(lv), dims(&target)));
        }
        let total: T = weight.iter().copied().sum();
        let mut acc = T::zero();
        for i in 0..lv.nrows() {
            if weight[i] != T::zero() {
                let x = lv[[i, 0]];
                let y = target[[i, 0]];
                acc += weight[i] * (x.max(T::zero()) - x * y + (-x.abs()).exp().ln_1p());
            }
        }
        let value = if total > T::zero() {
            acc / total
        } else {
            T::zero()
        };
        Ok(self.push(
            Array2::from_elem((1, 1), value),
            Op::BceLogits {
                logits,
                target,
                weight,
                total,
            },
        ))
    }

    /// Softmax cross-entropy where each bucket of the logit column is one
    /// categorical distribution. `target_rows[s]` is the row (in `logits`)
    /// of the correct class for bucket `s`; `seg_weight[s]` weights it.
    pub fn segment_cross_entropy(
        &mut self,
        logits: Var,
        seg: &Index,
        target_rows: Vec<usize>,
        seg_weight: Vec<T>,
    ) -> Result<Var> {
        let n_seg = target_rows.len();
        self.check_segments("segment_cross_entropy", logits, seg, n_seg)?;
        if seg_weight.len() != n_seg {
            return Err(Error::shape(
                "segment_cross_entropy",
                n_seg,
                seg_weight.len(),
            ));
        }
        let lv = self.value(logits);
        if lv.ncols() != 1 {
            return Err(Error::shape("segment_cross_entropy", "a column", dims(lv)));
        }
        for (s, &r) in target_rows.iter().enumerate() {
            if r >= lv.nrows() || seg[r] != s {
                return Err(Error::Contract(format!(
                    "target row {r} does not belong to segment {s}"
                )));
            }
        }
        let probs = segment_softmax_values(lv.column(0).iter().copied(), seg, n_seg);
        let total: T = seg_weight.iter().copied().sum();
        let tiny = T::min_positive_value();
        let mut acc = T::zero();
        for (s, &r) in target_rows.iter().enumerate() {
            if seg_weight[s] != T::zero() {
                acc += seg_weight[s] * -(probs[r].max(tiny)).ln();
            }
        }
        let value = if total > T::zero() {
            acc / total
        } else {
            T::zero()
        };
        Ok(self.push(
            Array2::from_elem((1, 1), value),
            Op::SegmentCrossEntropy {
                logits,
                seg: seg.clone(),
                probs,
                target_rows,
                seg_weight,
                total,
            },
        ))
    }

    /// Squared error, summed over columns, weighted mean over rows.
    pub fn squared_error(
        &mut self,
        pred: Var,
        target: Array2<T>,
        weight: Array1<T>,
    ) -> Result<Var> {
        let pv = self.value(pred);
        if target.dim() != pv.dim() || weight.len() != pv.nrows() {
            return Err(Error::shape("squared_error", dims(pv), dims(&target)));
        }
        let total: T = weight.iter().copied().sum();
        let mut acc = T::zero();
        for i in 0..pv.nrows() {
            if weight[i] != T::zero() {
                let row: T = pv
                    .row(i)
                    .iter()
                    .zip(target.row(i).iter())
                    .map(|(&p, &y)| (p - y) * (p - y))
                    .sum();
                acc += weight[i] * row;
            }
        }
        let value = if total > T::zero() {
            acc / total
        } else {
            T::zero()
        };
        Ok(self.push(
            Array2::from_elem((1, 1), value),
            Op::SquaredError {
                pred,
                target,
                weight,
                total,
            },
        ))
    }

    // ---------------------------------------------------------------------
    // reverse pass

    /// Gradients of the `1 × 1` node `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Adjoints<T>> {
        let lv = self.value(loss);
        if lv.dim() != (1, 1) {
            return Err(Error::Contract(format!(
                "gradient requested for a non-scalar loss of shape {}",
                dims(lv)
            )));
        }
        let mut grads: Vec<Option<Array2<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::from_elem((1, 1), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant | Op::Param => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Linear { x, w, b } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    accumulate(&mut grads, *x, g.dot(wv));
                    accumulate(&mut grads, *w, g.t().dot(xv));
                    if let Some(b) = b {
                        accumulate(&mut grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                }
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    accumulate(&mut grads, *a, g.dot(&bv.t()));
                    accumulate(&mut grads, *b, av.t().dot(&g));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.mapv(|x| -x));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Maximum(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let mut ga = g.clone();
                    let mut gb = g;
                    Zip::from(&mut ga)
                        .and(&mut gb)
                        .and(av)
                        .and(bv)
                        .for_each(|ga, gb, &x, &y| {
                            if y > x {
                                *ga = T::zero();
                            } else {
                                *gb = T::zero();
                            }
                        });
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddRow { x, row } => {
                    accumulate(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    accumulate(&mut grads, *x, g);
                }
                Op::MulCol { x, col } => {
                    let xv = self.value(*x);
                    let cv = self.value(*col);
                    let gc = (&g * xv).sum_axis(Axis(1)).insert_axis(Axis(1));
                    accumulate(&mut grads, *x, g * cv);
                    accumulate(&mut grads, *col, gc);
                }
                Op::Scale(x, k) => {
                    let k = *k;
                    accumulate(&mut grads, *x, g.mapv(|v| v * k));
                }
                Op::OneMinus(x) => accumulate(&mut grads, *x, -g),
                Op::Tanh(x) => {
                    let mut gx = g;
                    Zip::from(&mut gx)
                        .and(&node.value)
                        .for_each(|gx, &y| *gx = *gx * (T::one() - y * y));
                    accumulate(&mut grads, *x, gx);
                }
                Op::Clamp { x, lo, hi } => {
                    let mut gx = g;
                    Zip::from(&mut gx).and(self.value(*x)).for_each(|gx, &v| {
                        if v <= *lo || v >= *hi {
                            *gx = T::zero();
                        }
                    });
                    accumulate(&mut grads, *x, gx);
                }
                Op::Relu(x) => {
                    let mut gx = g;
                    Zip::from(&mut gx).and(self.value(*x)).for_each(|gx, &v| {
                        if v <= T::zero() {
                            *gx = T::zero();
                        }
                    });
                    accumulate(&mut grads, *x, gx);
                }
                Op::Sigmoid(x) => {
                    let mut gx = g;
                    Zip::from(&mut gx)
                        .and(&node.value)
                        .for_each(|gx, &y| *gx = *gx * y * (T::one() - y));
                    accumulate(&mut grads, *x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let c = self.value(p).ncols();
                        accumulate(&mut grads, p, g.slice(s![.., at..at + c]).to_owned());
                        at += c;
                    }
                }
                Op::SliceCols { x, start } => {
                    let xv = self.value(*x);
                    let mut gx = Array2::zeros(xv.dim());
                    gx.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    accumulate(&mut grads, *x, gx);
                }
                Op::GatherRows { x, idx } => {
                    let xv = self.value(*x);
                    let mut gx = Array2::zeros(xv.dim());
                    for (o, &r) in idx.iter().enumerate() {
                        let mut row = gx.row_mut(r);
                        row += &g.row(o);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::SegmentSum { x, seg } => {
                    let mut gx = Array2::zeros(self.value(*x).dim());
                    for (r, &sg) in seg.iter().enumerate() {
                        gx.row_mut(r).assign(&g.row(sg));
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::SegmentMean { x, seg, counts } => {
                    let mut gx = Array2::zeros(self.value(*x).dim());
                    for (r, &sg) in seg.iter().enumerate() {
                        let k = T::lit(counts[sg] as f64);
                        let mut row = gx.row_mut(r);
                        row.assign(&g.row(sg));
                        row.mapv_inplace(|v| v / k);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::SegmentMax { x, argmax } => {
                    let xv = self.value(*x);
                    let c = xv.ncols();
                    let mut gx = Array2::zeros(xv.dim());
                    for (slot, &r) in argmax.iter().enumerate() {
                        if r != usize::MAX {
                            let (sg, k) = (slot / c, slot % c);
                            gx[[r, k]] += g[[sg, k]];
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::SegmentSoftmax { x, seg } => {
                    let y = &node.value;
                    let n_seg = seg.iter().copied().max().map_or(0, |m| m + 1);
                    let mut dot = vec![T::zero(); n_seg];
                    for (r, &sg) in seg.iter().enumerate() {
                        dot[sg] += g[[r, 0]] * y[[r, 0]];
                    }
                    let mut gx = Array2::zeros(y.dim());
                    for (r, &sg) in seg.iter().enumerate() {
                        gx[[r, 0]] = y[[r, 0]] * (g[[r, 0]] - dot[sg]);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::SoftmaxRows(x) => {
                    let y = &node.value;
                    let mut gx = Array2::zeros(y.dim());
                    for ((mut gr, yr), gi) in gx.rows_mut().into_iter().zip(y.rows()).zip(g.rows())
                    {
                        let dot: T = yr.iter().zip(gi.iter()).map(|(&a, &b)| a * b).sum();
                        for k in 0..yr.len() {
                            gr[k] = yr[k] * (gi[k] - dot);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::SumCols(x) => {
                    let xv = self.value(*x);
                    let gx = Array2::from_shape_fn(xv.dim(), |(r, _)| g[[r, 0]]);
                    accumulate(&mut grads, *x, gx);
                }
                Op::SumAll(x) => {
                    let gv = g[[0, 0]];
                    accumulate(&mut grads, *x, Array2::from_elem(self.value(*x).dim(), gv));
                }
                Op::BceLogits {
                    logits,
                    target,
                    weight,
                    total,
                } => {
                    let lv = self.value(*logits);
                    let mut gx = Array2::zeros(lv.dim());
                    if *total > T::zero() {
                        let scale = g[[0, 0]] / *total;
                        for r in 0..lv.nrows() {
                            gx[[r, 0]] = scale * weight[r] * (sigmoid(lv[[r, 0]]) - target[[r, 0]]);
                        }
                    }
                    accumulate(&mut grads, *logits, gx);
                }
                Op::SegmentCrossEntropy {
                    logits,
                    seg,
                    probs,
                    target_rows,
                    seg_weight,
                    total,
                } => {
                    let mut gx = Array2::zeros(self.value(*logits).dim());
                    if *total > T::zero() {
                        let scale = g[[0, 0]] / *total;
                        for (r, &sg) in seg.iter().enumerate() {
                            gx[[r, 0]] = scale * seg_weight[sg] * probs[r];
                        }
                        for (sg, &r) in target_rows.iter().enumerate() {
                            gx[[r, 0]] -= scale * seg_weight[sg];
                        }
                    }
                    accumulate(&mut grads, *logits, gx);
                }
                Op::SquaredError {
                    pred,
                    target,
                    weight,
                    total,
                } => {
                    let pv = self.value(*pred);
                    let mut gx = Array2::zeros(pv.dim());
                    if *total > T::zero() {
                        let scale = g[[0, 0]] * T::lit(2.0) / *total;
                        for r in 0..pv.nrows() {
                            for k in 0..pv.ncols() {
                                gx[[r, k]] = scale * weight[r] * (pv[[r, k]] - target[[r, k]]);
                            }
                        }
                    }
                    accumulate(&mut grads, *pred, gx);
                }
            }
        }
        Ok(Adjoints { grads })
    }

    /// Collects parameter gradients from `adj` into the shape of `store`.
    pub fn param_grads(
        &self,
        adj: &Adjoints<T>,
        bound: &BoundParams,
        store: &ParamStore<T>,
    ) -> Grads<T> {
        let mut grads = Grads::zeros_like(store);
        for gi in 0..store.len() {
            if let Some(gw) = adj.get(bound.weight(gi)) {
                grads.weights[gi].assign(gw);
            }
            if let Some(gb) = adj.get(bound.bias(gi)) {
                grads.biases[gi].assign(&gb.row(0));
            }
        }
        grads
    }
}

/// Gradients of a loss with respect to every tape node.
pub struct Adjoints<T> {
    grads: Vec<Option<Array2<T>>>,
}

impl<T: Scalar> Adjoints<T> {
    pub fn get(&self, v: Var) -> Option<&Array2<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Array2<T>>], v: Var, g: Array2<T>) {
    match &mut grads[v.0] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

#[inline]
pub(crate) fn relu<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn segment_softmax_values<T: Scalar>(
    values: impl Iterator<Item = T> + Clone,
    seg: &[usize],
    n_seg: usize,
) -> Array1<T> {
    let mut max = vec![T::neg_infinity(); n_seg];
    for (v, &sg) in values.clone().zip(seg) {
        if v > max[sg] {
            max[sg] = v;
        }
    }
    let mut out: Array1<T> = values
        .zip(seg)
        .map(|(v, &sg)| (v - max[sg]).exp())
        .collect();
    let mut z = vec![T::zero(); n_seg];
    for (&e, &sg) in out.iter().zip(seg) {
        z[sg] += e;
    }
    for (e, &sg) in out.iter_mut().zip(seg) {
        *e /= z[sg];
    }
    out
}
