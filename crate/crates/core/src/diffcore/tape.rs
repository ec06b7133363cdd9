use crate::scalar::{real, Real};

use super::params::{ParamId, ParamStore};
use super::tensor::{DiffError, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Determinants with magnitude at or below this are treated as singular.
const SINGULAR_DET: f64 = 1e-8;

#[derive(Debug)]
enum Op<F> {
    Input,
    Param(ParamId),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, F),
    AddScalar(NodeId, F),
    Exp(NodeId),
    Ln(NodeId),
    Sqrt(NodeId),
    Tanh(NodeId),
    LeakyRelu(NodeId, F),
    SoftmaxRows(NodeId),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    GatherRows(NodeId, Vec<usize>),
    ScatterAddRows(NodeId, Vec<usize>),
    SegmentSum(NodeId, usize),
    SegmentMax(NodeId, Vec<usize>),
    RowSum(NodeId),
    Sum(NodeId),
    BroadcastRow(NodeId),
    BroadcastCol(NodeId),
    Reshape(NodeId),
    LogAbsDet(NodeId),
    MatInv(NodeId),
}

impl<F> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Matmul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Exp(_) => "exp",
            Op::Ln(_) => "ln",
            Op::Sqrt(_) => "sqrt",
            Op::Tanh(_) => "tanh",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::GatherRows(..) => "gather_rows",
            Op::ScatterAddRows(..) => "scatter_add_rows",
            Op::SegmentSum(..) => "segment_sum",
            Op::SegmentMax(..) => "segment_max",
            Op::RowSum(_) => "row_sum",
            Op::Sum(_) => "sum",
            Op::BroadcastRow(..) => "broadcast_row",
            Op::BroadcastCol(..) => "broadcast_col",
            Op::Reshape(_) => "reshape",
            Op::LogAbsDet(_) => "log_abs_det",
            Op::MatInv(_) => "mat_inv",
        }
    }
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
}

/// Write-once record of one network evaluation. Ops append nodes; backward
/// replays them in reverse. A tape never outlives the evaluation it records,
/// so parameter values are snapshotted at record time.
pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Result<NodeId, DiffError> {
        if !value.all_finite() {
            return Err(DiffError::NonFinite {
                context: op.name().to_string(),
            });
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op });
        Ok(id)
    }

    fn node_value(&self, id: NodeId, op: &'static str) -> Result<&Tensor<F>, DiffError> {
        self.nodes.get(id.0).map(|n| &n.value).ok_or_else(|| {
            DiffError::BadIndex {
                op,
                detail: format!("node {} out of range", id.0),
            }
        })
    }

    /// Records a constant input tensor.
    pub fn input(&mut self, value: Tensor<F>) -> Result<NodeId, DiffError> {
        self.push(value, Op::Input)
    }

    /// Records the current value of a parameter.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Result<NodeId, DiffError> {
        let value = store.value(id).clone();
        if !value.all_finite() {
            return Err(DiffError::NonFinite {
                context: format!("parameter {}", store.name(id)),
            });
        }
        self.push(value, Op::Param(id))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let value = {
            let ta = self.node_value(a, "matmul")?;
            let tb = self.node_value(b, "matmul")?;
            ta.matmul(tb)?
        };
        self.push(value, Op::Matmul(a, b))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        let value = self.node_value(x, "transpose")?.transpose();
        self.push(value, Op::Transpose(x))
    }

    fn binary_elementwise(
        &mut self,
        a: NodeId,
        b: NodeId,
        op: Op<F>,
        f: impl Fn(F, F) -> F,
    ) -> Result<NodeId, DiffError> {
        let name = op.name();
        let value = {
            let ta = self.node_value(a, name)?;
            let tb = self.node_value(b, name)?;
            if ta.shape() != tb.shape() {
                return Err(DiffError::ShapeMismatch {
                    op: name,
                    detail: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
                });
            }
            let data = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::from_vec(ta.rows(), ta.cols(), data)?
        };
        self.push(value, op)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.binary_elementwise(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.binary_elementwise(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.binary_elementwise(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn unary(&mut self, x: NodeId, op: Op<F>, f: impl Fn(F) -> F) -> Result<NodeId, DiffError> {
        let value = self.node_value(x, op.name())?.map(f);
        self.push(value, op)
    }

    pub fn scale(&mut self, x: NodeId, c: F) -> Result<NodeId, DiffError> {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: F) -> Result<NodeId, DiffError> {
        self.unary(x, Op::AddScalar(x, c), |v| v + c)
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.unary(x, Op::Exp(x), |v| v.exp())
    }

    pub fn ln(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.unary(x, Op::Ln(x), |v| v.ln())
    }

    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.unary(x, Op::Sqrt(x), |v| v.sqrt())
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        self.unary(x, Op::Tanh(x), |v| v.tanh())
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: F) -> Result<NodeId, DiffError> {
        self.unary(x, Op::LeakyRelu(x, slope), |v| {
            if v > F::zero() {
                v
            } else {
                v * slope
            }
        })
    }

    /// Row-wise softmax with the usual max-shift for stability.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        let value = {
            let t = self.node_value(x, "softmax_rows")?;
            let (rows, cols) = (t.rows(), t.cols());
            let mut out = vec![F::zero(); rows * cols];
            for i in 0..rows {
                let row = t.row(i);
                let mut m = row[0];
                for &v in row.iter().skip(1) {
                    if v > m {
                        m = v;
                    }
                }
                let mut denom = F::zero();
                for (o, &v) in out[i * cols..(i + 1) * cols].iter_mut().zip(row) {
                    let e = (v - m).exp();
                    *o = e;
                    denom += e;
                }
                let inv = F::one() / denom;
                out[i * cols..(i + 1) * cols]
                    .iter_mut()
                    .for_each(|o| *o *= inv);
            }
            Tensor::from_vec(rows, cols, out)?
        };
        self.push(value, Op::SoftmaxRows(x))
    }

    /// Concatenates along columns; all inputs must share the row count.
    pub fn concat_cols(&mut self, xs: &[NodeId]) -> Result<NodeId, DiffError> {
        if xs.is_empty() {
            return Err(DiffError::ShapeMismatch {
                op: "concat_cols",
                detail: "no inputs".to_string(),
            });
        }
        let rows = self.node_value(xs[0], "concat_cols")?.rows();
        let mut total_cols = 0;
        for &x in xs {
            let t = self.node_value(x, "concat_cols")?;
            if t.rows() != rows {
                return Err(DiffError::ShapeMismatch {
                    op: "concat_cols",
                    detail: format!("row counts differ: {} vs {}", rows, t.rows()),
                });
            }
            total_cols += t.cols();
        }
        let mut out = vec![F::zero(); rows * total_cols];
        let mut col_off = 0;
        for &x in xs {
            let t = &self.nodes[x.0].value;
            let c = t.cols();
            for i in 0..rows {
                out[i * total_cols + col_off..i * total_cols + col_off + c]
                    .copy_from_slice(t.row(i));
            }
            col_off += c;
        }
        let value = Tensor::from_vec(rows, total_cols, out)?;
        self.push(value, Op::ConcatCols(xs.to_vec()))
    }

    /// Columns `[start, start + len)` of `x`.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, DiffError> {
        let value = {
            let t = self.node_value(x, "slice_cols")?;
            if len == 0 || start + len > t.cols() {
                return Err(DiffError::BadIndex {
                    op: "slice_cols",
                    detail: format!("[{start}, {}) of {} columns", start + len, t.cols()),
                });
            }
            let mut out = vec![F::zero(); t.rows() * len];
            for i in 0..t.rows() {
                out[i * len..(i + 1) * len].copy_from_slice(&t.row(i)[start..start + len]);
            }
            Tensor::from_vec(t.rows(), len, out)?
        };
        self.push(value, Op::SliceCols(x, start, len))
    }

    /// Output row `t` is input row `idx[t]`; indices may repeat.
    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId, DiffError> {
        let value = {
            let t = self.node_value(x, "gather_rows")?;
            if idx.is_empty() {
                return Err(DiffError::BadIndex {
                    op: "gather_rows",
                    detail: "empty index list".to_string(),
                });
            }
            if let Some(&bad) = idx.iter().find(|&&i| i >= t.rows()) {
                return Err(DiffError::BadIndex {
                    op: "gather_rows",
                    detail: format!("row {bad} out of {}", t.rows()),
                });
            }
            let cols = t.cols();
            let mut out = vec![F::zero(); idx.len() * cols];
            for (r, &src) in idx.iter().enumerate() {
                out[r * cols..(r + 1) * cols].copy_from_slice(t.row(src));
            }
            Tensor::from_vec(idx.len(), cols, out)?
        };
        self.push(value, Op::GatherRows(x, idx.to_vec()))
    }

    /// Adds input row `t` into output row `idx[t]`; the output has
    /// `out_rows` rows and starts at zero.
    pub fn scatter_add_rows(
        &mut self,
        x: NodeId,
        idx: &[usize],
        out_rows: usize,
    ) -> Result<NodeId, DiffError> {
        let value = {
            let t = self.node_value(x, "scatter_add_rows")?;
            if idx.len() != t.rows() {
                return Err(DiffError::ShapeMismatch {
                    op: "scatter_add_rows",
                    detail: format!("{} indices for {} rows", idx.len(), t.rows()),
                });
            }
            if let Some(&bad) = idx.iter().find(|&&i| i >= out_rows) {
                return Err(DiffError::BadIndex {
                    op: "scatter_add_rows",
                    detail: format!("row {bad} out of {out_rows}"),
                });
            }
            let cols = t.cols();
            let mut out = vec![F::zero(); out_rows * cols];
            for (r, &dst) in idx.iter().enumerate() {
                let src = t.row(r);
                for (o, &v) in out[dst * cols..(dst + 1) * cols].iter_mut().zip(src) {
                    *o += v;
                }
            }
            Tensor::from_vec(out_rows, cols, out)?
        };
        self.push(value, Op::ScatterAddRows(x, idx.to_vec()))
    }

    /// Sums each consecutive block of `group` rows.
    pub fn segment_sum(&mut self, x: NodeId, group: usize) -> Result<NodeId, DiffError> {
        let value = {
            let t = self.node_value(x, "segment_sum")?;
            if group == 0 || t.rows() % group != 0 {
                return Err(DiffError::ShapeMismatch {
                    op: "segment_sum",
                    detail: format!("{} rows not divisible into groups of {group}", t.rows()),
                });
            }
            let (n_out, cols) = (t.rows() / group, t.cols());
            let mut out = vec![F::zero(); n_out * cols];
            for r in 0..t.rows() {
                let dst = r / group;
                for (o, &v) in out[dst * cols..(dst + 1) * cols].iter_mut().zip(t.row(r)) {
                    *o += v;
                }
            }
            Tensor::from_vec(n_out, cols, out)?
        };
        self.push(value, Op::SegmentSum(x, group))
    }

    /// Columnwise maximum over each consecutive block of `group` rows.
    /// The winning row index is recorded for the backward pass; ties go to
    /// the earliest row.
    pub fn segment_max(&mut self, x: NodeId, group: usize) -> Result<NodeId, DiffError> {
        let (value, argrows) = {
            let t = self.node_value(x, "segment_max")?;
            if group == 0 || t.rows() % group != 0 {
                return Err(DiffError::ShapeMismatch {
                    op: "segment_max",
                    detail: format!("{} rows not divisible into groups of {group}", t.rows()),
                });
            }
            let (n_out, cols) = (t.rows() / group, t.cols());
            let mut out = vec![F::zero(); n_out * cols];
            let mut arg = vec![0usize; n_out * cols];
            for seg in 0..n_out {
                let base = seg * group;
                for c in 0..cols {
                    let mut best = t.at(base, c);
                    let mut best_row = base;
                    for r in (base + 1)..(base + group) {
                        let v = t.at(r, c);
                        if v > best {
                            best = v;
                            best_row = r;
                        }
                    }
                    out[seg * cols + c] = best;
                    arg[seg * cols + c] = best_row;
                }
            }
            (Tensor::from_vec(n_out, cols, out)?, arg)
        };
        self.push(value, Op::SegmentMax(x, argrows))
    }

    /// Per-row sum, producing an Nx1 column.
    pub fn row_sum(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        let value = {
            let t = self.node_value(x, "row_sum")?;
            let mut out = vec![F::zero(); t.rows()];
            for i in 0..t.rows() {
                out[i] = t.row(i).iter().copied().sum();
            }
            Tensor::from_vec(t.rows(), 1, out)?
        };
        self.push(value, Op::RowSum(x))
    }

    /// Sum over all entries, producing a 1x1 scalar.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        let value = {
            let t = self.node_value(x, "sum")?;
            Tensor::scalar(t.data().iter().copied().sum())
        };
        self.push(value, Op::Sum(x))
    }

    /// Mean over all entries (sum followed by a scale).
    pub fn mean(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        let n = self.node_value(x, "sum")?.len();
        let s = self.sum(x)?;
        self.scale(s, F::one() / real::<F>(n as f64))
    }

    /// Repeats a 1xC row `rows` times.
    pub fn broadcast_row(&mut self, x: NodeId, rows: usize) -> Result<NodeId, DiffError> {
        let value = {
            let t = self.node_value(x, "broadcast_row")?;
            if t.rows() != 1 || rows == 0 {
                return Err(DiffError::ShapeMismatch {
                    op: "broadcast_row",
                    detail: format!("need 1xC input and rows > 0, got {:?} x{rows}", t.shape()),
                });
            }
            let mut out = vec![F::zero(); rows * t.cols()];
            for i in 0..rows {
                out[i * t.cols()..(i + 1) * t.cols()].copy_from_slice(t.row(0));
            }
            Tensor::from_vec(rows, t.cols(), out)?
        };
        self.push(value, Op::BroadcastRow(x))
    }

    /// Repeats an Nx1 column `cols` times.
    pub fn broadcast_col(&mut self, x: NodeId, cols: usize) -> Result<NodeId, DiffError> {
        let value = {
            let t = self.node_value(x, "broadcast_col")?;
            if t.cols() != 1 || cols == 0 {
                return Err(DiffError::ShapeMismatch {
                    op: "broadcast_col",
                    detail: format!("need Nx1 input and cols > 0, got {:?} x{cols}", t.shape()),
                });
            }
            let mut out = vec![F::zero(); t.rows() * cols];
            for i in 0..t.rows() {
                let v = t.at(i, 0);
                out[i * cols..(i + 1) * cols].iter_mut().for_each(|o| *o = v);
            }
            Tensor::from_vec(t.rows(), cols, out)?
        };
        self.push(value, Op::BroadcastCol(x))
    }

    /// Reinterprets the row-major buffer under a new shape with the same
    /// number of entries.
    pub fn reshape(&mut self, x: NodeId, rows: usize, cols: usize) -> Result<NodeId, DiffError> {
        let value = {
            let t = self.node_value(x, "reshape")?;
            if rows * cols != t.len() {
                return Err(DiffError::ShapeMismatch {
                    op: "reshape",
                    detail: format!("{:?} cannot become {rows}x{cols}", t.shape()),
                });
            }
            Tensor::from_vec(rows, cols, t.data().to_vec())?
        };
        self.push(value, Op::Reshape(x))
    }

    /// `ln |det X|` of a square matrix as a 1x1 scalar. Near-singular inputs
    /// (|det| <= 1e-8) are rejected.
    pub fn log_abs_det(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        let value = {
            let t = self.node_value(x, "log_abs_det")?;
            let (_, det) = t.invert_square().map_err(|e| singular_as("log_abs_det", e))?;
            if det.abs() <= real(SINGULAR_DET) {
                return Err(DiffError::Singular {
                    op: "log_abs_det",
                    detail: format!("|det| = {} at or below 1e-8", det.abs()),
                });
            }
            Tensor::scalar(det.abs().ln())
        };
        self.push(value, Op::LogAbsDet(x))
    }

    /// Inverse of a square matrix. Near-singular inputs (|det| <= 1e-8) are
    /// rejected.
    pub fn mat_inv(&mut self, x: NodeId) -> Result<NodeId, DiffError> {
        let value = {
            let t = self.node_value(x, "mat_inv")?;
            let (inv, det) = t.invert_square().map_err(|e| singular_as("mat_inv", e))?;
            if det.abs() <= real(SINGULAR_DET) {
                return Err(DiffError::Singular {
                    op: "mat_inv",
                    detail: format!("|det| = {} at or below 1e-8", det.abs()),
                });
            }
            inv
        };
        self.push(value, Op::MatInv(x))
    }

    /// Reverse pass from a scalar loss node. Returns per-node gradients;
    /// parameter gradients are pushed into a store via
    /// [`Gradients::accumulate_params`].
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<F>, DiffError> {
        let loss_t = self.node_value(loss, "backward")?;
        if loss_t.len() != 1 {
            return Err(DiffError::ShapeMismatch {
                op: "backward",
                detail: format!("loss must be 1x1, got {:?}", loss_t.shape()),
            });
        }
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(F::one()));
        for i in (0..=loss.0).rev() {
            let g = match grads[i].clone() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[i];
            let name = node.op.name();
            match &node.op {
                Op::Input | Op::Param(_) => {}
                Op::Matmul(a, b) => {
                    let (da, db) = {
                        let ta = &self.nodes[a.0].value;
                        let tb = &self.nodes[b.0].value;
                        (g.matmul(&tb.transpose())?, ta.transpose().matmul(&g)?)
                    };
                    accumulate(&mut grads, *a, da, name)?;
                    accumulate(&mut grads, *b, db, name)?;
                }
                Op::Transpose(x) => {
                    accumulate(&mut grads, *x, g.transpose(), name)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone(), name)?;
                    accumulate(&mut grads, *b, g, name)?;
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone(), name)?;
                    accumulate(&mut grads, *b, g.map(|v| -v), name)?;
                }
                Op::Mul(a, b) => {
                    let da = ew_mul(&g, &self.nodes[b.0].value);
                    let db = ew_mul(&g, &self.nodes[a.0].value);
                    accumulate(&mut grads, *a, da, name)?;
                    accumulate(&mut grads, *b, db, name)?;
                }
                Op::Scale(x, c) => {
                    let c = *c;
                    accumulate(&mut grads, *x, g.map(|v| v * c), name)?;
                }
                Op::AddScalar(x, _) => {
                    accumulate(&mut grads, *x, g, name)?;
                }
                Op::Exp(x) => {
                    accumulate(&mut grads, *x, ew_mul(&g, &node.value), name)?;
                }
                Op::Ln(x) => {
                    let src = &self.nodes[x.0].value;
                    let d = ew_zip(&g, src, |gv, xv| gv / xv);
                    accumulate(&mut grads, *x, d, name)?;
                }
                Op::Sqrt(x) => {
                    // Guarded at zero so matched-point distances of zero do
                    // not poison the whole gradient with NaN.
                    let floor = real::<F>(1e-12);
                    let half = real::<F>(0.5);
                    let d = ew_zip(&g, &node.value, |gv, yv| gv * half / yv.max(floor));
                    accumulate(&mut grads, *x, d, name)?;
                }
                Op::Tanh(x) => {
                    let d = ew_zip(&g, &node.value, |gv, yv| gv * (F::one() - yv * yv));
                    accumulate(&mut grads, *x, d, name)?;
                }
                Op::LeakyRelu(x, slope) => {
                    let slope = *slope;
                    let src = &self.nodes[x.0].value;
                    let d = ew_zip(&g, src, |gv, xv| {
                        if xv > F::zero() {
                            gv
                        } else {
                            gv * slope
                        }
                    });
                    accumulate(&mut grads, *x, d, name)?;
                }
                Op::SoftmaxRows(x) => {
                    let y = &node.value;
                    let (rows, cols) = (y.rows(), y.cols());
                    let mut d = vec![F::zero(); rows * cols];
                    for r in 0..rows {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: F = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                        for c in 0..cols {
                            d[r * cols + c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::from_vec(rows, cols, d)?, name)?;
                }
                Op::ConcatCols(xs) => {
                    let mut col_off = 0;
                    for &x in xs {
                        let c = self.nodes[x.0].value.cols();
                        let rows = g.rows();
                        let mut d = vec![F::zero(); rows * c];
                        for r in 0..rows {
                            d[r * c..(r + 1) * c]
                                .copy_from_slice(&g.row(r)[col_off..col_off + c]);
                        }
                        accumulate(&mut grads, x, Tensor::from_vec(rows, c, d)?, name)?;
                        col_off += c;
                    }
                }
                Op::SliceCols(x, start, len) => {
                    let src = &self.nodes[x.0].value;
                    let mut d = Tensor::zeros(src.rows(), src.cols());
                    for r in 0..g.rows() {
                        for c in 0..*len {
                            d.set(r, start + c, g.at(r, c));
                        }
                    }
                    accumulate(&mut grads, *x, d, name)?;
                }
                Op::GatherRows(x, idx) => {
                    let src = &self.nodes[x.0].value;
                    let cols = src.cols();
                    let mut d = Tensor::zeros(src.rows(), cols);
                    for (r, &dst) in idx.iter().enumerate() {
                        for c in 0..cols {
                            let v = d.at(dst, c) + g.at(r, c);
                            d.set(dst, c, v);
                        }
                    }
                    accumulate(&mut grads, *x, d, name)?;
                }
                Op::ScatterAddRows(x, idx) => {
                    let cols = g.cols();
                    let mut d = vec![F::zero(); idx.len() * cols];
                    for (r, &src_row) in idx.iter().enumerate() {
                        d[r * cols..(r + 1) * cols].copy_from_slice(g.row(src_row));
                    }
                    accumulate(&mut grads, *x, Tensor::from_vec(idx.len(), cols, d)?, name)?;
                }
                Op::SegmentSum(x, group) => {
                    let cols = g.cols();
                    let rows = g.rows() * group;
                    let mut d = vec![F::zero(); rows * cols];
                    for r in 0..rows {
                        d[r * cols..(r + 1) * cols].copy_from_slice(g.row(r / group));
                    }
                    accumulate(&mut grads, *x, Tensor::from_vec(rows, cols, d)?, name)?;
                }
                Op::SegmentMax(x, arg) => {
                    let src = &self.nodes[x.0].value;
                    let cols = src.cols();
                    let mut d = Tensor::zeros(src.rows(), cols);
                    for r in 0..g.rows() {
                        for c in 0..cols {
                            let winner = arg[r * cols + c];
                            let v = d.at(winner, c) + g.at(r, c);
                            d.set(winner, c, v);
                        }
                    }
                    accumulate(&mut grads, *x, d, name)?;
                }
                Op::RowSum(x) => {
                    let src = &self.nodes[x.0].value;
                    let cols = src.cols();
                    let mut d = vec![F::zero(); src.rows() * cols];
                    for r in 0..src.rows() {
                        let gv = g.at(r, 0);
                        d[r * cols..(r + 1) * cols].iter_mut().for_each(|o| *o = gv);
                    }
                    accumulate(&mut grads, *x, Tensor::from_vec(src.rows(), cols, d)?, name)?;
                }
                Op::Sum(x) => {
                    let src = &self.nodes[x.0].value;
                    let d = Tensor::full(src.rows(), src.cols(), g.item());
                    accumulate(&mut grads, *x, d, name)?;
                }
                Op::BroadcastRow(x) => {
                    let cols = g.cols();
                    let mut d = vec![F::zero(); cols];
                    for r in 0..g.rows() {
                        for (o, &v) in d.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::from_vec(1, cols, d)?, name)?;
                }
                Op::BroadcastCol(x) => {
                    let mut d = vec![F::zero(); g.rows()];
                    for (r, o) in d.iter_mut().enumerate() {
                        *o = g.row(r).iter().copied().sum();
                    }
                    accumulate(&mut grads, *x, Tensor::from_vec(g.rows(), 1, d)?, name)?;
                }
                Op::Reshape(x) => {
                    let src = &self.nodes[x.0].value;
                    let d = Tensor::from_vec(src.rows(), src.cols(), g.data().to_vec())?;
                    accumulate(&mut grads, *x, d, name)?;
                }
                Op::LogAbsDet(x) => {
                    let src = &self.nodes[x.0].value;
                    let (inv, _) = src.invert_square().map_err(|e| singular_as(name, e))?;
                    let gv = g.item();
                    let d = inv.transpose().map(|v| v * gv);
                    accumulate(&mut grads, *x, d, name)?;
                }
                Op::MatInv(x) => {
                    // d/dX of Y = X^-1: Xbar = -Y^T Ybar Y^T
                    let y_t = node.value.transpose();
                    let d = y_t.matmul(&g)?.matmul(&y_t)?.map(|v| -v);
                    accumulate(&mut grads, *x, d, name)?;
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn singular_as(op: &'static str, e: DiffError) -> DiffError {
    match e {
        DiffError::Singular { detail, .. } => DiffError::Singular { op, detail },
        other => other,
    }
}

fn ew_mul<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    ew_zip(a, b, |x, y| x * y)
}

fn ew_zip<F: Real>(a: &Tensor<F>, b: &Tensor<F>, f: impl Fn(F, F) -> F) -> Tensor<F> {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_vec(a.rows(), a.cols(), data).expect("shapes checked by caller")
}

fn accumulate<F: Real>(
    grads: &mut [Option<Tensor<F>>],
    target: NodeId,
    delta: Tensor<F>,
    op: &'static str,
) -> Result<(), DiffError> {
    if !delta.all_finite() {
        return Err(DiffError::NonFinite {
            context: format!("backward of {op}"),
        });
    }
    match &mut grads[target.0] {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                *e += *d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
    Ok(())
}

/// Gradients of one backward pass, indexed by tape node.
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient of the loss with respect to a node, if it received any.
    pub fn node(&self, id: NodeId) -> Option<&Tensor<F>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Adds all parameter-node gradients into the store, in tape order.
    pub fn accumulate_params(
        &self,
        tape: &Tape<F>,
        store: &mut ParamStore<F>,
    ) -> Result<(), DiffError> {
        for (i, node) in tape.nodes.iter().enumerate() {
            if let Op::Param(pid) = node.op {
                if let Some(g) = self.grads[i].as_ref() {
                    store.accumulate_grad(pid, g)?;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn forward_values_for_simple_chain() {
        let mut tape = Tape::new();
        let x = tape.input(t(1, 3, &[0.0, 1.0, -2.0])).unwrap();
        let e = tape.exp(x).unwrap();
        assert_eq!(tape.value(e).data()[0], 1.0);
        assert!((tape.value(e).data()[1] - std::f64::consts::E).abs() < 1e-15);
        let s = tape.sum(e).unwrap();
        let expect = 1.0 + std::f64::consts::E + (-2.0f64).exp();
        assert!((tape.value(s).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn matmul_gradients_match_closed_form() {
        // loss = sum(A @ B) so dA = row sums of B broadcast, dB = col sums of A.
        let mut tape = Tape::new();
        let a = tape.input(t(2, 2, &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let b = tape.input(t(2, 2, &[5.0, 6.0, 7.0, 8.0])).unwrap();
        let c = tape.matmul(a, b).unwrap();
        let loss = tape.sum(c).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.node(a).unwrap().data(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(grads.node(b).unwrap().data(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_grad_is_orthogonal_to_ones() {
        let mut tape = Tape::new();
        let x = tape.input(t(2, 3, &[1.0, 2.0, 3.0, -1.0, 0.0, 1.0])).unwrap();
        let y = tape.softmax_rows(x).unwrap();
        for r in 0..2 {
            let s: f64 = tape.value(y).row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-14);
        }
        // Pick out one output coordinate and check the gradient sums to zero
        // per row (softmax is invariant to a constant shift of its input).
        let pick = tape.input(t(2, 3, &[1.0, 0.0, 0.0, 0.0, 2.0, 0.0])).unwrap();
        let prod = tape.mul(y, pick).unwrap();
        let loss = tape.sum(prod).unwrap();
        let grads = tape.backward(loss).unwrap();
        let gx = grads.node(x).unwrap();
        for r in 0..2 {
            let s: f64 = gx.row(r).iter().sum();
            assert!(s.abs() < 1e-14, "row {r} grad sum {s}");
        }
    }

    #[test]
    fn leaky_relu_uses_slope_at_zero() {
        let mut tape = Tape::new();
        let x = tape.input(t(1, 3, &[-1.0, 0.0, 2.0])).unwrap();
        let y = tape.leaky_relu(x, 0.2).unwrap();
        assert_eq!(tape.value(y).data(), &[-0.2, 0.0, 2.0]);
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.node(x).unwrap().data(), &[0.2, 0.2, 1.0]);
    }

    #[test]
    fn gather_scatter_are_adjoint() {
        // <g, gather(x)> == <scatter_add(g), x> for any g, x.
        let mut tape = Tape::new();
        let x = tape.input(t(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        let idx = [2usize, 0, 2, 1];
        let gathered = tape.gather_rows(x, &idx).unwrap();
        let g = t(4, 2, &[0.5, -1.0, 2.0, 0.0, 1.0, 1.0, -0.5, 3.0]);
        let g_node = tape.input(g.clone()).unwrap();
        let prod = tape.mul(gathered, g_node).unwrap();
        let loss = tape.sum(prod).unwrap();
        let lhs = tape.value(loss).item();

        let mut tape2 = Tape::new();
        let g2 = tape2.input(g).unwrap();
        let scattered = tape2.scatter_add_rows(g2, &idx, 3).unwrap();
        let x2 = tape2.input(t(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        let prod2 = tape2.mul(scattered, x2).unwrap();
        let loss2 = tape2.sum(prod2).unwrap();
        assert!((lhs - tape2.value(loss2).item()).abs() < 1e-14);
    }

    #[test]
    fn segment_max_routes_gradient_to_winner() {
        let mut tape = Tape::new();
        let x = tape
            .input(t(4, 2, &[1.0, 9.0, 5.0, 2.0, 0.0, 0.0, -1.0, 4.0]))
            .unwrap();
        let y = tape.segment_max(x, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0, 9.0, 0.0, 4.0]);
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(
            grads.node(x).unwrap().data(),
            &[0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0]
        );
    }

    #[test]
    fn segment_sum_matches_manual_grouping() {
        let mut tape = Tape::new();
        let x = tape
            .input(t(4, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]))
            .unwrap();
        let y = tape.segment_sum(x, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0, 6.0, 12.0, 14.0]);
    }

    #[test]
    fn broadcast_row_backward_sums_columns() {
        let mut tape = Tape::new();
        let x = tape.input(t(1, 2, &[1.0, -1.0])).unwrap();
        let y = tape.broadcast_row(x, 3).unwrap();
        assert_eq!(tape.value(y).shape(), [3, 2]);
        let w = tape.input(t(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        let p = tape.mul(y, w).unwrap();
        let loss = tape.sum(p).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.node(x).unwrap().data(), &[9.0, 12.0]);
    }

    #[test]
    fn log_abs_det_gradient_is_inverse_transpose() {
        let mut tape = Tape::new();
        let x = tape.input(t(2, 2, &[2.0, 0.0, 0.0, 4.0])).unwrap();
        let ld = tape.log_abs_det(x).unwrap();
        assert!((tape.value(ld).item() - (8.0f64).ln()).abs() < 1e-14);
        let grads = tape.backward(ld).unwrap();
        assert_eq!(grads.node(x).unwrap().data(), &[0.5, 0.0, 0.0, 0.25]);
    }

    #[test]
    fn mat_inv_value_and_near_singular_rejection() {
        let mut tape = Tape::new();
        let x = tape.input(t(2, 2, &[4.0, 7.0, 2.0, 6.0])).unwrap();
        let inv = tape.mat_inv(x).unwrap();
        let prod = tape.matmul(x, inv).unwrap();
        for (v, e) in tape.value(prod).data().iter().zip([1.0, 0.0, 0.0, 1.0]) {
            assert!((v - e).abs() < 1e-12);
        }
        let near_singular = t(2, 2, &[1.0, 1.0, 1.0, 1.0 + 1e-10]);
        let y = tape.input(near_singular).unwrap();
        assert!(matches!(
            tape.mat_inv(y),
            Err(DiffError::Singular { op: "mat_inv", .. })
        ));
    }

    #[test]
    fn non_finite_forward_is_reported_with_op_name() {
        let mut tape = Tape::new();
        let x = tape.input(t(1, 1, &[0.0])).unwrap();
        match tape.ln(x) {
            Err(DiffError::NonFinite { context }) => assert_eq!(context, "ln"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.input(t(2, 2, &[1.0; 4])).unwrap();
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn params_accumulate_into_store() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", t(1, 2, &[3.0, -1.0])).unwrap();
        let mut tape = Tape::new();
        let wn = tape.param(&store, w).unwrap();
        // Record the same parameter twice; both uses must contribute.
        let wn2 = tape.param(&store, w).unwrap();
        let s1 = tape.sum(wn).unwrap();
        let s2 = tape.sum(wn2).unwrap();
        let both = tape.add(s1, s2).unwrap();
        let grads = tape.backward(both).unwrap();
        grads.accumulate_params(&tape, &mut store).unwrap();
        assert_eq!(store.grad(w).data(), &[2.0, 2.0]);
    }

    #[test]
    fn slice_and_concat_round_trip() {
        let mut tape = Tape::new();
        let x = tape.input(t(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        let a = tape.slice_cols(x, 0, 1).unwrap();
        let b = tape.slice_cols(x, 1, 2).unwrap();
        let back = tape.concat_cols(&[a, b]).unwrap();
        assert_eq!(tape.value(back).data(), tape.value(x).data());
        let loss = tape.sum(back).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.node(x).unwrap().data(), &[1.0; 6]);
    }
}
