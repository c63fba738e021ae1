//! Reverse-mode automatic differentiation over dense matrices.
//!
//! Every value on a [`Tape`] is a 2-D `f64` matrix. Operations are recorded
//! eagerly: the value is computed when the node is pushed. [`Tape::grad`]
//! walks the recorded nodes backwards and expresses every vector-Jacobian
//! product as *new tape operations*, so the returned gradients are themselves
//! differentiable. Differentiating a quantity that contains a gradient (a
//! gradient-norm penalty, the trace of the per-sample gradient kernel) is a
//! second call to [`Tape::grad`] on the same tape.
//!
//! Shape violations inside the tape are programming errors and panic; callers
//! validate user-facing shapes before recording.

use std::sync::Arc;

use ndarray::{s, Array2, Axis};

use crate::linalg::symmetric_eigen;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Valid (unpadded), stride-1 convolution geometry over channel-last images.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub kernel: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.in_h + 1 - self.kernel
    }

    pub fn out_w(&self) -> usize {
        self.in_w + 1 - self.kernel
    }

    /// Number of output positions per image.
    pub fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// Length of one im2col patch.
    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.in_c
    }

    pub fn in_len(&self) -> usize {
        self.in_h * self.in_w * self.in_c
    }
}

/// 2x2, stride-2 average pooling over channel-last images.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeom {
    pub in_h: usize,
    pub in_w: usize,
    pub channels: usize,
}

impl PoolGeom {
    pub fn out_h(&self) -> usize {
        self.in_h / 2
    }

    pub fn out_w(&self) -> usize {
        self.in_w / 2
    }

    pub fn in_len(&self) -> usize {
        self.in_h * self.in_w * self.channels
    }

    pub fn out_len(&self) -> usize {
        self.out_h() * self.out_w() * self.channels
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        batch: usize,
        ta: bool,
        tb: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddConst(Var),
    Scale(Var, f64),
    MulConst(Var, Arc<Array2<f64>>),
    ScalarMul {
        a: Var,
        s: Var,
    },
    AddRow {
        a: Var,
        row: Var,
    },
    SumAll(Var),
    ColSums(Var),
    RowSums(Var),
    BroadcastRows(Var),
    BroadcastCols(Var),
    RepeatRows(Var, usize),
    SumRowGroups(Var, usize),
    Reshape(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    SafeRecip(Var),
    Sqrt(Var),
    LogSoftmax(Var),
    Im2Col(Var, ConvGeom),
    Col2Im(Var, ConvGeom),
    AvgPool(Var, PoolGeom),
    AvgPoolAdjoint(Var, PoolGeom),
    SymLogDet(Var),
    SymInverse(Var),
}

impl Op {
    fn inputs(&self) -> [Option<Var>; 2] {
        use Op::*;
        match *self {
            Leaf => [None, None],
            MatMul { a, b, .. } | BatchMatMul { a, b, .. } | Add(a, b) | Sub(a, b) | Mul(a, b) => [Some(a), Some(b)],
            ScalarMul { a, s } => [Some(a), Some(s)],
            AddRow { a, row } => [Some(a), Some(row)],
            AddConst(a)
            | Scale(a, _)
            | MulConst(a, _)
            | SumAll(a)
            | ColSums(a)
            | RowSums(a)
            | BroadcastRows(a)
            | BroadcastCols(a)
            | RepeatRows(a, _)
            | SumRowGroups(a, _)
            | Reshape(a)
            | Relu(a)
            | Exp(a)
            | Log(a)
            | SafeRecip(a)
            | Sqrt(a)
            | LogSoftmax(a)
            | Im2Col(a, _)
            | Col2Im(a, _)
            | AvgPool(a, _)
            | AvgPoolAdjoint(a, _)
            | SymLogDet(a)
            | SymInverse(a) => [Some(a), None],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

/// A Wengert list of matrix operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input. Whether it is treated as a parameter or a constant
    /// depends only on what it is later differentiated against.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar_leaf(&mut self, value: f64) -> Var {
        self.leaf(Array2::from_elem((1, 1), value))
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.dim(), (1, 1), "scalar() on a {:?} node", m.dim());
        m[[0, 0]]
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    // ---- linear algebra -------------------------------------------------

    /// `op(a) · op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let av = if ta { av.t() } else { av.view() };
        let bv = if tb { bv.t() } else { bv.view() };
        assert_eq!(av.ncols(), bv.nrows(), "matmul inner dimensions");
        let out = av.dot(&bv);
        self.push(out, Op::MatMul { a, b, ta, tb })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    /// Block-wise product. `a` and `b` stack `batch` equally sized blocks
    /// along rows; block `k` of the result is `op(a_k) · op(b_k)`, stacked the
    /// same way.
    pub fn batch_matmul(&mut self, a: Var, b: Var, batch: usize, ta: bool, tb: bool) -> Var {
        let out = batch_matmul_value(self.value(a), self.value(b), batch, ta, tb);
        self.push(out, Op::BatchMatMul { a, b, batch, ta, tb })
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shapes");
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shapes");
        let out = self.value(a) - self.value(b);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shapes");
        let out = self.value(a) * self.value(b);
        self.push(out, Op::Mul(a, b))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).mapv(|v| v + c);
        self.push(out, Op::AddConst(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).mapv(|v| v * c);
        self.push(out, Op::Scale(a, c))
    }

    /// Elementwise product with a constant matrix (masks, one-hot selectors).
    pub fn mul_const(&mut self, a: Var, m: Arc<Array2<f64>>) -> Var {
        assert_eq!(self.shape(a), m.dim(), "mul_const shapes");
        let out = self.value(a) * &*m;
        self.push(out, Op::MulConst(a, m))
    }

    /// `a` times the `1 x 1` node `s`.
    pub fn scalar_mul(&mut self, a: Var, s: Var) -> Var {
        let sv = self.scalar(s);
        let out = self.value(a).mapv(|v| v * sv);
        self.push(out, Op::ScalarMul { a, s })
    }

    /// Adds the `1 x c` node `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (_, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "add_row shapes");
        let out = self.value(a) + self.value(row);
        self.push(out, Op::AddRow { a, row })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|v| v.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::ln);
        self.push(out, Op::Log(a))
    }

    /// `1/a`, with `1/0` defined as 0 (zero subgradient convention).
    pub fn safe_recip(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|v| if v == 0.0 { 0.0 } else { 1.0 / v });
        self.push(out, Op::SafeRecip(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::sqrt);
        self.push(out, Op::Sqrt(a))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for mut row in out.axis_iter_mut(Axis(0)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|v| v - lse);
        }
        self.push(out, Op::LogSoftmax(a))
    }

    // ---- reductions and broadcasts --------------------------------------

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Array2::from_elem((1, 1), s), Op::SumAll(a))
    }

    /// Column sums as a `1 x c` row.
    pub fn col_sums(&mut self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(out, Op::ColSums(a))
    }

    /// Row sums as an `r x 1` column.
    pub fn row_sums(&mut self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(out, Op::RowSums(a))
    }

    /// Stacks the `1 x c` row `a` `n` times.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Var {
        let v = self.value(a);
        assert_eq!(v.nrows(), 1, "broadcast_rows needs a row");
        let out = v.broadcast((n, v.ncols())).unwrap().to_owned();
        self.push(out, Op::BroadcastRows(a))
    }

    /// Repeats the `r x 1` column `a` across `n` columns.
    pub fn broadcast_cols(&mut self, a: Var, n: usize) -> Var {
        let v = self.value(a);
        assert_eq!(v.ncols(), 1, "broadcast_cols needs a column");
        let out = v.broadcast((v.nrows(), n)).unwrap().to_owned();
        self.push(out, Op::BroadcastCols(a))
    }

    /// Row `i` of `a` becomes rows `i*k .. i*k+k` of the result.
    pub fn repeat_rows(&mut self, a: Var, k: usize) -> Var {
        let out = repeat_rows_value(self.value(a), k);
        self.push(out, Op::RepeatRows(a, k))
    }

    /// Sums consecutive groups of `k` rows; the adjoint of [`Tape::repeat_rows`].
    pub fn sum_row_groups(&mut self, a: Var, k: usize) -> Var {
        let out = sum_row_groups_value(self.value(a), k);
        self.push(out, Op::SumRowGroups(a, k))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let v = self.value(a);
        assert_eq!(v.len(), rows * cols, "reshape size");
        let out = Array2::from_shape_vec((rows, cols), v.iter().copied().collect()).unwrap();
        self.push(out, Op::Reshape(a))
    }

    // ---- image operators ------------------------------------------------

    pub fn im2col(&mut self, a: Var, g: ConvGeom) -> Var {
        let out = im2col_value(self.value(a), g);
        self.push(out, Op::Im2Col(a, g))
    }

    pub fn col2im(&mut self, a: Var, g: ConvGeom) -> Var {
        let out = col2im_value(self.value(a), g);
        self.push(out, Op::Col2Im(a, g))
    }

    pub fn avg_pool(&mut self, a: Var, g: PoolGeom) -> Var {
        let out = avg_pool_value(self.value(a), g);
        self.push(out, Op::AvgPool(a, g))
    }

    pub fn avg_pool_adjoint(&mut self, a: Var, g: PoolGeom) -> Var {
        let out = avg_pool_adjoint_value(self.value(a), g);
        self.push(out, Op::AvgPoolAdjoint(a, g))
    }

    // ---- symmetric matrix functions -------------------------------------

    /// `Σ log λᵢ` of a symmetric positive definite matrix. Callers check
    /// definiteness first; a non-positive eigenvalue yields NaN.
    pub fn sym_logdet(&mut self, a: Var) -> Var {
        let v = match symmetric_eigen(self.value(a)) {
            Ok(e) => e.values.iter().map(|l| l.ln()).sum(),
            Err(_) => f64::NAN,
        };
        self.push(Array2::from_elem((1, 1), v), Op::SymLogDet(a))
    }

    pub fn sym_inverse(&mut self, a: Var) -> Var {
        let out = match symmetric_eigen(self.value(a)) {
            Ok(e) => e.reconstruct_with(|l| 1.0 / l),
            Err(_) => Array2::from_elem(self.shape(a), f64::NAN),
        };
        self.push(out, Op::SymInverse(a))
    }

    // ---- differentiation ------------------------------------------------

    /// Gradient of the scalar node `y` with respect to each of `wrt`.
    ///
    /// The result is recorded on the tape (create-graph semantics), so it can
    /// be differentiated again. Nodes in `wrt` that `y` does not depend on
    /// get a zero matrix.
    pub fn grad(&mut self, y: Var, wrt: &[Var]) -> Vec<Var> {
        assert_eq!(self.shape(y), (1, 1), "grad of a non-scalar");
        let n = y.0 + 1;

        let mut from_wrt = vec![false; n];
        for w in wrt {
            if w.0 < n {
                from_wrt[w.0] = true;
            }
        }
        for i in 0..n {
            if !from_wrt[i] {
                from_wrt[i] = self.nodes[i].op.inputs().iter().flatten().any(|p| from_wrt[p.0]);
            }
        }
        let mut needed = vec![false; n];
        needed[y.0] = from_wrt[y.0];
        for i in (0..n).rev() {
            if needed[i] {
                for p in self.nodes[i].op.inputs().iter().flatten() {
                    if from_wrt[p.0] {
                        needed[p.0] = true;
                    }
                }
            }
        }

        let mut adjoint: Vec<Option<Var>> = vec![None; n];
        if needed[y.0] {
            adjoint[y.0] = Some(self.scalar_leaf(1.0));
        }
        for i in (0..n).rev() {
            let Some(g) = adjoint[i] else { continue };
            if !needed[i] {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let inputs = op.inputs();
            let want = [
                inputs[0].is_some_and(|p| needed[p.0]),
                inputs[1].is_some_and(|p| needed[p.0]),
            ];
            if !want[0] && !want[1] {
                continue;
            }
            let contributions = self.vjp(Var(i), &op, g, want);
            for (slot, c) in inputs.iter().zip(contributions) {
                if let (Some(p), Some(c)) = (slot, c) {
                    adjoint[p.0] = Some(match adjoint[p.0] {
                        Some(prev) => self.add(prev, c),
                        None => c,
                    });
                }
            }
        }

        wrt.iter()
            .map(|w| match adjoint.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let shape = self.shape(*w);
                    self.leaf(Array2::zeros(shape))
                }
            })
            .collect()
    }

    fn vjp(&mut self, out: Var, op: &Op, g: Var, want: [bool; 2]) -> [Option<Var>; 2] {
        use Op::*;
        let mut res = [None, None];
        match *op {
            Leaf => {}
            MatMul { a, b, ta, tb } => {
                if want[0] {
                    res[0] = Some(match (ta, tb) {
                        (false, false) => self.matmul_t(g, b, false, true),
                        (true, false) => self.matmul_t(b, g, false, true),
                        (false, true) => self.matmul_t(g, b, false, false),
                        (true, true) => self.matmul_t(b, g, true, true),
                    });
                }
                if want[1] {
                    res[1] = Some(match (ta, tb) {
                        (false, false) => self.matmul_t(a, g, true, false),
                        (true, false) => self.matmul_t(a, g, false, false),
                        (false, true) => self.matmul_t(g, a, true, false),
                        (true, true) => self.matmul_t(g, a, true, true),
                    });
                }
            }
            BatchMatMul { a, b, batch, ta, tb } => {
                if want[0] {
                    res[0] = Some(match (ta, tb) {
                        (false, false) => self.batch_matmul(g, b, batch, false, true),
                        (true, false) => self.batch_matmul(b, g, batch, false, true),
                        (false, true) => self.batch_matmul(g, b, batch, false, false),
                        (true, true) => self.batch_matmul(b, g, batch, true, true),
                    });
                }
                if want[1] {
                    res[1] = Some(match (ta, tb) {
                        (false, false) => self.batch_matmul(a, g, batch, true, false),
                        (true, false) => self.batch_matmul(a, g, batch, false, false),
                        (false, true) => self.batch_matmul(g, a, batch, true, false),
                        (true, true) => self.batch_matmul(g, a, batch, true, true),
                    });
                }
            }
            Add(_, _) => res = [Some(g), Some(g)],
            Sub(_, _) => {
                res[0] = Some(g);
                if want[1] {
                    res[1] = Some(self.scale(g, -1.0));
                }
            }
            Mul(a, b) => {
                if want[0] {
                    res[0] = Some(self.mul(g, b));
                }
                if want[1] {
                    res[1] = Some(self.mul(g, a));
                }
            }
            AddConst(_) => res[0] = Some(g),
            Scale(_, c) => res[0] = Some(self.scale(g, c)),
            MulConst(_, ref m) => res[0] = Some(self.mul_const(g, Arc::clone(m))),
            ScalarMul { a, s } => {
                if want[0] {
                    res[0] = Some(self.scalar_mul(g, s));
                }
                if want[1] {
                    let ga = self.mul(g, a);
                    res[1] = Some(self.sum_all(ga));
                }
            }
            AddRow { .. } => {
                res[0] = Some(g);
                if want[1] {
                    res[1] = Some(self.col_sums(g));
                }
            }
            SumAll(a) => {
                let ones = self.leaf(Array2::ones(self.shape(a)));
                res[0] = Some(self.scalar_mul(ones, g));
            }
            ColSums(a) => {
                let rows = self.shape(a).0;
                res[0] = Some(self.broadcast_rows(g, rows));
            }
            RowSums(a) => {
                let cols = self.shape(a).1;
                res[0] = Some(self.broadcast_cols(g, cols));
            }
            BroadcastRows(_) => res[0] = Some(self.col_sums(g)),
            BroadcastCols(_) => res[0] = Some(self.row_sums(g)),
            RepeatRows(_, k) => res[0] = Some(self.sum_row_groups(g, k)),
            SumRowGroups(_, k) => res[0] = Some(self.repeat_rows(g, k)),
            Reshape(a) => {
                let (r, c) = self.shape(a);
                res[0] = Some(self.reshape(g, r, c));
            }
            Relu(a) => {
                let mask = self.value(a).mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                res[0] = Some(self.mul_const(g, Arc::new(mask)));
            }
            Exp(_) => res[0] = Some(self.mul(g, out)),
            Log(a) => {
                let r = self.safe_recip(a);
                res[0] = Some(self.mul(g, r));
            }
            SafeRecip(_) => {
                let sq = self.mul(out, out);
                let t = self.mul(g, sq);
                res[0] = Some(self.scale(t, -1.0));
            }
            Sqrt(_) => {
                let r = self.safe_recip(out);
                let t = self.mul(g, r);
                res[0] = Some(self.scale(t, 0.5));
            }
            LogSoftmax(_) => {
                let cols = self.shape(out).1;
                let p = self.exp(out);
                let gs = self.row_sums(g);
                let gb = self.broadcast_cols(gs, cols);
                let pg = self.mul(p, gb);
                res[0] = Some(self.sub(g, pg));
            }
            Im2Col(_, geom) => res[0] = Some(self.col2im(g, geom)),
            Col2Im(_, geom) => res[0] = Some(self.im2col(g, geom)),
            AvgPool(_, geom) => res[0] = Some(self.avg_pool_adjoint(g, geom)),
            AvgPoolAdjoint(_, geom) => res[0] = Some(self.avg_pool(g, geom)),
            SymLogDet(a) => {
                let inv = self.sym_inverse(a);
                res[0] = Some(self.scalar_mul(inv, g));
            }
            SymInverse(_) => {
                let t = self.matmul_t(out, g, true, false);
                let t = self.matmul_t(t, out, false, true);
                res[0] = Some(self.scale(t, -1.0));
            }
        }
        res
    }
}

fn batch_matmul_value(a: &Array2<f64>, b: &Array2<f64>, batch: usize, ta: bool, tb: bool) -> Array2<f64> {
    assert!(
        batch > 0 && a.nrows().is_multiple_of(batch) && b.nrows().is_multiple_of(batch),
        "batch_matmul blocks"
    );
    let ra = a.nrows() / batch;
    let rb = b.nrows() / batch;
    let (or, inner_a) = if ta { (a.ncols(), ra) } else { (ra, a.ncols()) };
    let (inner_b, oc) = if tb { (b.ncols(), rb) } else { (rb, b.ncols()) };
    assert_eq!(inner_a, inner_b, "batch_matmul inner dimensions");
    let mut out = Array2::zeros((batch * or, oc));
    for k in 0..batch {
        let ab = a.slice(s![k * ra..(k + 1) * ra, ..]);
        let bb = b.slice(s![k * rb..(k + 1) * rb, ..]);
        let ab = if ta { ab.reversed_axes() } else { ab };
        let bb = if tb { bb.reversed_axes() } else { bb };
        let mut dst = out.slice_mut(s![k * or..(k + 1) * or, ..]);
        ndarray::linalg::general_mat_mul(1.0, &ab, &bb, 0.0, &mut dst);
    }
    out
}

fn repeat_rows_value(a: &Array2<f64>, k: usize) -> Array2<f64> {
    let (r, c) = a.dim();
    let mut out = Array2::zeros((r * k, c));
    for (i, row) in a.axis_iter(Axis(0)).enumerate() {
        for j in 0..k {
            out.row_mut(i * k + j).assign(&row);
        }
    }
    out
}

fn sum_row_groups_value(a: &Array2<f64>, k: usize) -> Array2<f64> {
    let (r, c) = a.dim();
    assert!(k > 0 && r % k == 0, "sum_row_groups: {r} rows not divisible by {k}");
    let mut out = Array2::zeros((r / k, c));
    for (i, row) in a.axis_iter(Axis(0)).enumerate() {
        let mut dst = out.row_mut(i / k);
        dst += &row;
    }
    out
}

fn im2col_value(a: &Array2<f64>, g: ConvGeom) -> Array2<f64> {
    assert_eq!(a.ncols(), g.in_len(), "im2col input width");
    let n = a.nrows();
    let (oh, ow, k, c) = (g.out_h(), g.out_w(), g.kernel, g.in_c);
    let p = g.positions();
    let mut out = Array2::zeros((n * p, g.patch_len()));
    for s in 0..n {
        let src = a.row(s);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut dst = out.row_mut(s * p + oy * ow + ox);
                for ky in 0..k {
                    for kx in 0..k {
                        let sb = ((oy + ky) * g.in_w + ox + kx) * c;
                        let db = (ky * k + kx) * c;
                        for ch in 0..c {
                            dst[db + ch] = src[sb + ch];
                        }
                    }
                }
            }
        }
    }
    out
}

fn col2im_value(a: &Array2<f64>, g: ConvGeom) -> Array2<f64> {
    let p = g.positions();
    assert!(
        a.nrows().is_multiple_of(p) && a.ncols() == g.patch_len(),
        "col2im input shape"
    );
    let n = a.nrows() / p;
    let (oh, ow, k, c) = (g.out_h(), g.out_w(), g.kernel, g.in_c);
    let mut out = Array2::zeros((n, g.in_len()));
    for s in 0..n {
        let mut dst = out.row_mut(s);
        for oy in 0..oh {
            for ox in 0..ow {
                let src = a.row(s * p + oy * ow + ox);
                for ky in 0..k {
                    for kx in 0..k {
                        let db = ((oy + ky) * g.in_w + ox + kx) * c;
                        let sb = (ky * k + kx) * c;
                        for ch in 0..c {
                            dst[db + ch] += src[sb + ch];
                        }
                    }
                }
            }
        }
    }
    out
}

fn avg_pool_value(a: &Array2<f64>, g: PoolGeom) -> Array2<f64> {
    assert_eq!(a.ncols(), g.in_len(), "avg_pool input width");
    let (oh, ow, c) = (g.out_h(), g.out_w(), g.channels);
    let mut out = Array2::zeros((a.nrows(), g.out_len()));
    for (src, mut dst) in a.axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
        for py in 0..oh {
            for px in 0..ow {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            acc += src[((2 * py + dy) * g.in_w + 2 * px + dx) * c + ch];
                        }
                    }
                    dst[(py * ow + px) * c + ch] = 0.25 * acc;
                }
            }
        }
    }
    out
}

fn avg_pool_adjoint_value(a: &Array2<f64>, g: PoolGeom) -> Array2<f64> {
    assert_eq!(a.ncols(), g.out_len(), "avg_pool_adjoint input width");
    let (oh, ow, c) = (g.out_h(), g.out_w(), g.channels);
    let mut out = Array2::zeros((a.nrows(), g.in_len()));
    for (src, mut dst) in a.axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
        for py in 0..oh {
            for px in 0..ow {
                for ch in 0..c {
                    let v = 0.25 * src[(py * ow + px) * c + ch];
                    for dy in 0..2 {
                        for dx in 0..2 {
                            dst[((2 * py + dy) * g.in_w + 2 * px + dx) * c + ch] += v;
                        }
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Central-difference gradient of `f` at `x`.
    fn numeric_grad(f: &dyn Fn(&Array2<f64>) -> f64, x: &Array2<f64>) -> Array2<f64> {
        let mut g = Array2::zeros(x.dim());
        for idx in 0..x.len() {
            let h = 1e-5 * (1.0 + x.as_slice().unwrap()[idx].abs());
            let mut xp = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            let mut xm = x.clone();
            xm.as_slice_mut().unwrap()[idx] -= h;
            g.as_slice_mut().unwrap()[idx] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn max_rel(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let scale = b.iter().fold(1e-8_f64, |m, v| m.max(v.abs()));
        a.iter().zip(b).fold(0.0_f64, |m, (x, y)| m.max((x - y).abs())) / scale
    }

    /// Checks first and second order: the gradient of `build` and the
    /// gradient of `‖∇build‖²`.
    fn check(build: &dyn Fn(&mut Tape, Var) -> Var, x: Array2<f64>) {
        let f = |x: &Array2<f64>| {
            let mut t = Tape::new();
            let v = t.leaf(x.clone());
            let y = build(&mut t, v);
            t.scalar(y)
        };
        let mut t = Tape::new();
        let v = t.leaf(x.clone());
        let y = build(&mut t, v);
        let g = t.grad(y, &[v])[0];
        let num = numeric_grad(&f, &x);
        assert!(
            max_rel(t.value(g), &num) < 1e-6,
            "first order: {:?} vs {:?}",
            t.value(g),
            num
        );

        let second = |x: &Array2<f64>| {
            let mut t = Tape::new();
            let v = t.leaf(x.clone());
            let y = build(&mut t, v);
            let g = t.grad(y, &[v])[0];
            let sq = t.mul(g, g);
            let s = t.sum_all(sq);
            t.scalar(s)
        };
        let sq = t.mul(g, g);
        let s = t.sum_all(sq);
        let gg = t.grad(s, &[v])[0];
        let num2 = numeric_grad(&second, &x);
        assert!(
            max_rel(t.value(gg), &num2) < 1e-5,
            "second order: {:?} vs {:?}",
            t.value(gg),
            num2
        );
    }

    #[test]
    fn matmul_variants() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = random(&mut rng, 3, 3);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let bc = b.clone();
            check(
                &move |t, x| {
                    let bv = t.leaf(bc.clone());
                    let xx = t.mul(x, x);
                    let m = t.matmul_t(xx, bv, ta, tb);
                    let m2 = t.matmul_t(m, x, false, true);
                    t.sum_all(m2)
                },
                random(&mut rng, 3, 3),
            );
        }
    }

    #[test]
    fn batch_matmul_variants() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let other = random(&mut rng, 4, 2);
            check(
                &move |t, x| {
                    let o = t.leaf(other.clone());
                    let xx = t.mul(x, x);
                    let c = t.batch_matmul(xx, o, 2, ta, tb);
                    let c2 = t.mul(c, c);
                    t.sum_all(c2)
                },
                random(&mut rng, 4, 2),
            );
        }
    }

    #[test]
    fn batch_matmul_matches_blocks() {
        let a = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0], [7.0, 8.0]];
        let b = array![[1.0], [0.0], [0.0], [1.0]];
        let mut t = Tape::new();
        let (av, bv) = (t.leaf(a), t.leaf(b));
        let c = t.batch_matmul(av, bv, 2, true, false);
        assert_eq!(t.value(c), &array![[1.0], [2.0], [7.0], [8.0]]);
    }

    #[test]
    fn elementwise_and_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        check(
            &|t, x| {
                let e = t.exp(x);
                let a = t.add_const(e, 1.0);
                let l = t.log(a);
                let s = t.sqrt(a);
                let r = t.safe_recip(s);
                let m = t.mul(l, r);
                let cs = t.col_sums(m);
                let br = t.broadcast_rows(cs, 3);
                let rs = t.row_sums(br);
                let bc = t.broadcast_cols(rs, 2);
                let z = t.sub(bc, x);
                let zz = t.mul(z, z);
                let sc = t.scale(zz, 0.3);
                t.sum_all(sc)
            },
            random(&mut rng, 3, 2),
        );
    }

    #[test]
    fn row_structure_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        check(
            &|t, x| {
                let r = t.repeat_rows(x, 3);
                let rr = t.mul(r, r);
                let g = t.sum_row_groups(rr, 2);
                let sh = t.reshape(g, 1, 9);
                let flat = t.repeat_rows(x, 1);
                let flat = t.reshape(flat, 3, 2);
                let cs = t.col_sums(x);
                let b = t.add_row(rr, cs);
                let bb = t.mul(b, b);
                let s1 = t.sum_all(bb);
                let s2 = t.mul(sh, sh);
                let s2 = t.sum_all(s2);
                let f2 = t.mul(flat, flat);
                let s3 = t.sum_all(f2);
                let s = t.add(s1, s2);
                t.add(s, s3)
            },
            random(&mut rng, 2, 3),
        );
    }

    #[test]
    fn log_softmax_and_relu() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        check(
            &|t, x| {
                let r = t.relu(x);
                let xx = t.mul(x, r);
                let ls = t.log_softmax(xx);
                let w = t.mul(ls, ls);
                t.sum_all(w)
            },
            random(&mut rng, 3, 4),
        );
    }

    #[test]
    fn scalar_mul_and_const() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mask = Arc::new(random(&mut rng, 2, 2));
        check(
            &move |t, x| {
                let s = t.sum_all(x);
                let m = t.mul_const(x, Arc::clone(&mask));
                let y = t.scalar_mul(m, s);
                let yy = t.mul(y, x);
                t.sum_all(yy)
            },
            random(&mut rng, 2, 2),
        );
    }

    #[test]
    fn image_ops_are_adjoint_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = ConvGeom {
            in_h: 5,
            in_w: 4,
            in_c: 2,
            kernel: 2,
        };
        let x = random(&mut rng, 3, g.in_len());
        let y = random(&mut rng, 3 * g.positions(), g.patch_len());
        let lhs = (im2col_value(&x, g) * &y).sum();
        let rhs = (&x * &col2im_value(&y, g)).sum();
        assert!((lhs - rhs).abs() < 1e-12);

        let p = PoolGeom {
            in_h: 4,
            in_w: 6,
            channels: 3,
        };
        let x = random(&mut rng, 2, p.in_len());
        let y = random(&mut rng, 2, p.out_len());
        let lhs = (avg_pool_value(&x, p) * &y).sum();
        let rhs = (&x * &avg_pool_adjoint_value(&y, p)).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn conv_chain_second_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = ConvGeom {
            in_h: 4,
            in_w: 4,
            in_c: 1,
            kernel: 3,
        };
        let pg = PoolGeom {
            in_h: 2,
            in_w: 2,
            channels: 2,
        };
        let w = random(&mut rng, g.patch_len(), 2);
        check(
            &move |t, x| {
                let wv = t.leaf(w.clone());
                let cols = t.im2col(x, g);
                let z = t.matmul(cols, wv);
                let z = t.reshape(z, 2, g.positions() * 2);
                let zz = t.mul(z, z);
                let p = t.avg_pool(zz, pg);
                let pp = t.mul(p, p);
                t.sum_all(pp)
            },
            random(&mut rng, 2, g.in_len()),
        );
    }

    #[test]
    fn logdet_and_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        check(
            &|t, x| {
                let k = t.matmul_t(x, x, false, true);
                let k = t.add_const(k, 0.0);
                t.sym_logdet(k)
            },
            random(&mut rng, 3, 5),
        );
        check(
            &|t, x| {
                let k = t.matmul_t(x, x, false, true);
                let inv = t.sym_inverse(k);
                let s = t.mul(inv, inv);
                t.sum_all(s)
            },
            random(&mut rng, 2, 4),
        );
    }

    #[test]
    fn unused_inputs_get_zero_gradients() {
        let mut t = Tape::new();
        let a = t.leaf(array![[1.0, 2.0]]);
        let b = t.leaf(array![[3.0]]);
        let s = t.sum_all(a);
        let g = t.grad(s, &[a, b]);
        assert_eq!(t.value(g[0]), &array![[1.0, 1.0]]);
        assert_eq!(t.value(g[1]), &array![[0.0]]);
    }

    #[test]
    fn sqrt_at_zero_has_zero_subgradient() {
        let mut t = Tape::new();
        let a = t.leaf(array![[0.0]]);
        let s = t.sqrt(a);
        let g = t.grad(s, &[a]);
        assert_eq!(t.scalar(g[0]), 0.0);
    }
}
