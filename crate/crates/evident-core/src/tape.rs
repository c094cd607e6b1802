//! Minimal reverse-mode gradient tape over matrix-valued nodes.
//!
//! Operations are recorded in creation order; since every operation only
//! references earlier nodes, a single reverse sweep over the tape is a
//! valid topological traversal. [`Tape::backward`] runs that sweep from a
//! scalar (1x1) node and returns per-node gradients.
//!
//! The tape is single-threaded by design. Independent samples get
//! independent tapes and may be evaluated concurrently.

use crate::matrix::Matrix;
use statrs::function::erf::erf;
use statrs::function::gamma::{digamma, ln_gamma};
use std::cell::RefCell;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Scale(usize, f64),
    AddScalar(usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    SumAll(usize),
    MeanRows(usize),
    Softplus(usize),
    Sigmoid(usize),
    Gelu(usize),
    Ln(usize),
    Sqrt(usize),
    Square(usize),
    PowI(usize, i32),
    Abs(usize),
    LnGamma(usize),
    SoftmaxRows(usize),
    LayerNormRows(usize, f64),
    ConvDepthwise(usize, usize),
    HaarLow(usize),
    HaarHigh(usize),
    HaarUp(usize, usize),
    PadRows(usize),
    TakeRows(usize, usize),
    ConcatCols(usize, usize),
    StackRows(Vec<usize>),
    SliceCols(usize, usize, usize),
    ScaleBy(usize, usize),
}

struct NodeData {
    value: Matrix,
    op: Op,
}

/// Gradients produced by one backward sweep.
pub struct Gradients {
    grads: Vec<Matrix>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> &Matrix {
        &self.grads[id.0]
    }
}

/// Recording tape. Create nodes with [`Tape::leaf`] and the op methods.
pub struct Tape {
    nodes: RefCell<Vec<NodeData>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Matrix, op: Op) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(NodeData { value, op });
        NodeId(nodes.len() - 1)
    }

    /// Input or parameter node.
    pub fn leaf(&self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Scalar constant as a 1x1 leaf.
    pub fn constant(&self, v: f64) -> NodeId {
        self.leaf(Matrix::scalar(v))
    }

    pub fn value(&self, id: NodeId) -> Matrix {
        self.nodes.borrow()[id.0].value.clone()
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes.borrow()[id.0].value.shape()
    }

    /// Scalar value of a 1x1 node.
    pub fn item(&self, id: NodeId) -> f64 {
        self.nodes.borrow()[id.0].value.item()
    }

    fn with2<R>(&self, a: NodeId, b: NodeId, f: impl FnOnce(&Matrix, &Matrix) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(&nodes[a.0].value, &nodes[b.0].value)
    }

    fn with1<R>(&self, a: NodeId, f: impl FnOnce(&Matrix) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(&nodes[a.0].value)
    }

    pub fn add(&self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.with2(a, b, |x, y| x.add(y));
        self.push(v, Op::Add(a.0, b.0))
    }

    pub fn sub(&self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.with2(a, b, |x, y| x.sub(y));
        self.push(v, Op::Sub(a.0, b.0))
    }

    /// Elementwise product.
    pub fn mul(&self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.with2(a, b, |x, y| x.hadamard(y));
        self.push(v, Op::Mul(a.0, b.0))
    }

    /// Elementwise quotient.
    pub fn div(&self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.with2(a, b, |x, y| x.zip_map(y, |p, q| p / q));
        self.push(v, Op::Div(a.0, b.0))
    }

    pub fn matmul(&self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.with2(a, b, |x, y| x.matmul(y));
        self.push(v, Op::MatMul(a.0, b.0))
    }

    pub fn transpose(&self, a: NodeId) -> NodeId {
        let v = self.with1(a, |x| x.transpose());
        self.push(v, Op::Transpose(a.0))
    }

    pub fn scale(&self, a: NodeId, c: f64) -> NodeId {
        let v = self.with1(a, |x| x.scale(c));
        self.push(v, Op::Scale(a.0, c))
    }

    pub fn add_scalar(&self, a: NodeId, c: f64) -> NodeId {
        let v = self.with1(a, |x| x.map(|e| e + c));
        self.push(v, Op::AddScalar(a.0))
    }

    /// Broadcast add of a 1xC row vector to every row of `x`.
    pub fn add_row(&self, x: NodeId, r: NodeId) -> NodeId {
        let v = self.with2(x, r, |m, row| {
            assert!(
                row.rows() == 1 && row.cols() == m.cols(),
                "add_row wants 1x{} row, got {}x{}",
                m.cols(),
                row.rows(),
                row.cols()
            );
            let mut out = m.clone();
            for i in 0..m.rows() {
                for j in 0..m.cols() {
                    out.set(i, j, out.get(i, j) + row.get(0, j));
                }
            }
            out
        });
        self.push(v, Op::AddRow(x.0, r.0))
    }

    /// Broadcast elementwise multiply by a 1xC row vector.
    pub fn mul_row(&self, x: NodeId, r: NodeId) -> NodeId {
        let v = self.with2(x, r, |m, row| {
            assert!(
                row.rows() == 1 && row.cols() == m.cols(),
                "mul_row wants 1x{} row, got {}x{}",
                m.cols(),
                row.rows(),
                row.cols()
            );
            let mut out = m.clone();
            for i in 0..m.rows() {
                for j in 0..m.cols() {
                    out.set(i, j, out.get(i, j) * row.get(0, j));
                }
            }
            out
        });
        self.push(v, Op::MulRow(x.0, r.0))
    }

    /// Sum of all entries as a 1x1 node.
    pub fn sum_all(&self, a: NodeId) -> NodeId {
        let v = self.with1(a, |x| Matrix::scalar(x.sum()));
        self.push(v, Op::SumAll(a.0))
    }

    /// Column means: TxD -> 1xD.
    pub fn mean_rows(&self, a: NodeId) -> NodeId {
        let v = self.with1(a, |x| x.col_means());
        self.push(v, Op::MeanRows(a.0))
    }

    pub fn softplus(&self, a: NodeId) -> NodeId {
        let v = self.with1(a, |x| x.map(softplus_stable));
        self.push(v, Op::Softplus(a.0))
    }

    pub fn sigmoid(&self, a: NodeId) -> NodeId {
        let v = self.with1(a, |x| x.map(sigmoid_stable));
        self.push(v, Op::Sigmoid(a.0))
    }

    pub fn gelu(&self, a: NodeId) -> NodeId {
        let v = self.with1(a, |x| x.map(gelu_exact));
        self.push(v, Op::Gelu(a.0))
    }

    /// Elementwise natural log; caller guarantees positive inputs.
    pub fn ln(&self, a: NodeId) -> NodeId {
        let v = self.with1(a, |x| x.map(f64::ln));
        self.push(v, Op::Ln(a.0))
    }

    pub fn sqrt(&self, a: NodeId) -> NodeId {
        let v = self.with1(a, |x| x.map(f64::sqrt));
        self.push(v, Op::Sqrt(a.0))
    }

    pub fn square(&self, a: NodeId) -> NodeId {
        let v = self.with1(a, |x| x.map(|e| e * e));
        self.push(v, Op::Square(a.0))
    }

    pub fn powi(&self, a: NodeId, k: i32) -> NodeId {
        let v = self.with1(a, |x| x.map(|e| e.powi(k)));
        self.push(v, Op::PowI(a.0, k))
    }

    pub fn abs(&self, a: NodeId) -> NodeId {
        let v = self.with1(a, |x| x.map(f64::abs));
        self.push(v, Op::Abs(a.0))
    }

    /// Elementwise log-Gamma; caller guarantees positive inputs.
    pub fn ln_gamma(&self, a: NodeId) -> NodeId {
        let v = self.with1(a, |x| x.map(ln_gamma));
        self.push(v, Op::LnGamma(a.0))
    }

    /// Row-wise softmax with max-shift stabilization.
    pub fn softmax_rows(&self, a: NodeId) -> NodeId {
        let v = self.with1(a, |x| {
            let mut out = x.clone();
            for i in 0..x.rows() {
                let row_max = x.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0;
                for j in 0..x.cols() {
                    let e = (x.get(i, j) - row_max).exp();
                    out.set(i, j, e);
                    denom += e;
                }
                for j in 0..x.cols() {
                    out.set(i, j, out.get(i, j) / denom);
                }
            }
            out
        });
        self.push(v, Op::SoftmaxRows(a.0))
    }

    /// Per-row normalization (x - mean) / sqrt(var + eps), population variance.
    pub fn layer_norm_rows(&self, a: NodeId, eps: f64) -> NodeId {
        let v = self.with1(a, |x| {
            let mut out = x.clone();
            for i in 0..x.rows() {
                let (mu, sd) = row_norm_stats(x.row(i), eps);
                for j in 0..x.cols() {
                    out.set(i, j, (x.get(i, j) - mu) / sd);
                }
            }
            out
        });
        self.push(v, Op::LayerNormRows(a.0, eps))
    }

    /// Per-channel temporal convolution with same zero padding.
    /// `x` is TxD, `w` is KxD (odd K); channel d is correlated with w[., d].
    pub fn conv_depthwise(&self, x: NodeId, w: NodeId) -> NodeId {
        let v = self.with2(x, w, |m, k| {
            assert!(k.rows() % 2 == 1, "conv kernel length must be odd");
            assert!(
                k.cols() == m.cols(),
                "conv kernel channels {} != input channels {}",
                k.cols(),
                m.cols()
            );
            conv_depthwise_forward(m, k)
        });
        self.push(v, Op::ConvDepthwise(x.0, w.0))
    }

    /// One orthonormal Haar analysis step, low half: (x[2t] + x[2t+1]) / sqrt(2).
    pub fn haar_low(&self, a: NodeId) -> NodeId {
        let v = self.with1(a, |x| {
            assert!(x.rows() % 2 == 0, "haar_low needs an even row count");
            let half = x.rows() / 2;
            let mut out = Matrix::zeros(half, x.cols());
            for t in 0..half {
                for j in 0..x.cols() {
                    out.set(t, j, (x.get(2 * t, j) + x.get(2 * t + 1, j)) * INV_SQRT2);
                }
            }
            out
        });
        self.push(v, Op::HaarLow(a.0))
    }

    /// One orthonormal Haar analysis step, high half: (x[2t] - x[2t+1]) / sqrt(2).
    pub fn haar_high(&self, a: NodeId) -> NodeId {
        let v = self.with1(a, |x| {
            assert!(x.rows() % 2 == 0, "haar_high needs an even row count");
            let half = x.rows() / 2;
            let mut out = Matrix::zeros(half, x.cols());
            for t in 0..half {
                for j in 0..x.cols() {
                    out.set(t, j, (x.get(2 * t, j) - x.get(2 * t + 1, j)) * INV_SQRT2);
                }
            }
            out
        });
        self.push(v, Op::HaarHigh(a.0))
    }

    /// One orthonormal Haar synthesis step from matching low/high halves.
    pub fn haar_up(&self, low: NodeId, high: NodeId) -> NodeId {
        let v = self.with2(low, high, |l, h| {
            assert!(
                l.shape() == h.shape(),
                "haar_up shape mismatch: {:?} vs {:?}",
                l.shape(),
                h.shape()
            );
            let mut out = Matrix::zeros(l.rows() * 2, l.cols());
            for t in 0..l.rows() {
                for j in 0..l.cols() {
                    out.set(2 * t, j, (l.get(t, j) + h.get(t, j)) * INV_SQRT2);
                    out.set(2 * t + 1, j, (l.get(t, j) - h.get(t, j)) * INV_SQRT2);
                }
            }
            out
        });
        self.push(v, Op::HaarUp(low.0, high.0))
    }

    /// Append zero rows up to `rows` total.
    pub fn pad_rows(&self, a: NodeId, rows: usize) -> NodeId {
        let v = self.with1(a, |x| {
            assert!(rows >= x.rows(), "pad_rows target smaller than input");
            let mut out = Matrix::zeros(rows, x.cols());
            for r in 0..x.rows() {
                for c in 0..x.cols() {
                    out.set(r, c, x.get(r, c));
                }
            }
            out
        });
        self.push(v, Op::PadRows(a.0))
    }

    /// Keep the first `rows` rows.
    pub fn take_rows(&self, a: NodeId, rows: usize) -> NodeId {
        let v = self.with1(a, |x| {
            assert!(rows <= x.rows(), "take_rows target larger than input");
            let mut out = Matrix::zeros(rows, x.cols());
            for r in 0..rows {
                for c in 0..x.cols() {
                    out.set(r, c, x.get(r, c));
                }
            }
            out
        });
        self.push(v, Op::TakeRows(a.0, rows))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.with2(a, b, |x, y| {
            assert!(
                x.rows() == y.rows(),
                "concat_cols row mismatch: {} vs {}",
                x.rows(),
                y.rows()
            );
            let mut out = Matrix::zeros(x.rows(), x.cols() + y.cols());
            for r in 0..x.rows() {
                for c in 0..x.cols() {
                    out.set(r, c, x.get(r, c));
                }
                for c in 0..y.cols() {
                    out.set(r, x.cols() + c, y.get(r, c));
                }
            }
            out
        });
        self.push(v, Op::ConcatCols(a.0, b.0))
    }

    /// Vertical stack of matrices with equal column counts.
    pub fn stack_rows(&self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "stack_rows of nothing");
        let v = {
            let nodes = self.nodes.borrow();
            let cols = nodes[parts[0].0].value.cols();
            let total: usize = parts.iter().map(|p| nodes[p.0].value.rows()).sum();
            let mut out = Matrix::zeros(total, cols);
            let mut at = 0;
            for p in parts {
                let m = &nodes[p.0].value;
                assert!(m.cols() == cols, "stack_rows column mismatch");
                for r in 0..m.rows() {
                    for c in 0..cols {
                        out.set(at + r, c, m.get(r, c));
                    }
                }
                at += m.rows();
            }
            out
        };
        self.push(v, Op::StackRows(parts.iter().map(|p| p.0).collect()))
    }

    /// Columns [start, start+len) of every row.
    pub fn slice_cols(&self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.with1(a, |x| {
            assert!(start + len <= x.cols(), "slice_cols out of range");
            let mut out = Matrix::zeros(x.rows(), len);
            for r in 0..x.rows() {
                for c in 0..len {
                    out.set(r, c, x.get(r, start + c));
                }
            }
            out
        });
        self.push(v, Op::SliceCols(a.0, start, len))
    }

    /// Multiply a matrix node by a scalar (1x1) node.
    pub fn scale_by(&self, x: NodeId, s: NodeId) -> NodeId {
        let v = self.with2(x, s, |m, sc| m.scale(sc.item()));
        self.push(v, Op::ScaleBy(x.0, s.0))
    }

    /// Reverse sweep from a scalar node. Panics if `root` is not 1x1.
    pub fn backward(&self, root: NodeId) -> Gradients {
        let nodes = self.nodes.borrow();
        assert!(
            nodes[root.0].value.shape() == (1, 1),
            "backward root must be a 1x1 scalar node"
        );
        let mut grads: Vec<Matrix> = nodes
            .iter()
            .map(|n| Matrix::zeros(n.value.rows(), n.value.cols()))
            .collect();
        grads[root.0] = Matrix::scalar(1.0);

        for i in (0..=root.0).rev() {
            // Parents always precede children, so split keeps borrows disjoint.
            let (parent_grads, rest) = grads.split_at_mut(i);
            let g = &rest[0];
            if g.data().iter().all(|&x| x == 0.0) {
                continue;
            }
            let value_of = |id: usize| &nodes[id].value;
            match &nodes[i].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    parent_grads[*a].add_in_place(g);
                    parent_grads[*b].add_in_place(g);
                }
                Op::Sub(a, b) => {
                    parent_grads[*a].add_in_place(g);
                    parent_grads[*b].add_scaled_in_place(g, -1.0);
                }
                Op::Mul(a, b) => {
                    parent_grads[*a].add_in_place(&g.hadamard(value_of(*b)));
                    parent_grads[*b].add_in_place(&g.hadamard(value_of(*a)));
                }
                Op::Div(a, b) => {
                    let vb = value_of(*b);
                    parent_grads[*a].add_in_place(&g.zip_map(vb, |gi, bi| gi / bi));
                    let va = value_of(*a);
                    let mut db = g.hadamard(va);
                    db = db.zip_map(vb, |num, bi| -num / (bi * bi));
                    parent_grads[*b].add_in_place(&db);
                }
                Op::MatMul(a, b) => {
                    parent_grads[*a].add_in_place(&g.matmul(&value_of(*b).transpose()));
                    parent_grads[*b].add_in_place(&value_of(*a).transpose().matmul(g));
                }
                Op::Transpose(a) => {
                    parent_grads[*a].add_in_place(&g.transpose());
                }
                Op::Scale(a, c) => {
                    parent_grads[*a].add_scaled_in_place(g, *c);
                }
                Op::AddScalar(a) => {
                    parent_grads[*a].add_in_place(g);
                }
                Op::AddRow(x, r) => {
                    parent_grads[*x].add_in_place(g);
                    parent_grads[*r].add_in_place(&g.col_sums());
                }
                Op::MulRow(x, r) => {
                    let row = value_of(*r);
                    let vx = value_of(*x);
                    let mut dx = g.clone();
                    for i2 in 0..dx.rows() {
                        for j in 0..dx.cols() {
                            dx.set(i2, j, dx.get(i2, j) * row.get(0, j));
                        }
                    }
                    parent_grads[*x].add_in_place(&dx);
                    parent_grads[*r].add_in_place(&g.hadamard(vx).col_sums());
                }
                Op::SumAll(a) => {
                    let gv = g.item();
                    let va = value_of(*a);
                    parent_grads[*a]
                        .add_in_place(&Matrix::ones(va.rows(), va.cols()).scale(gv));
                }
                Op::MeanRows(a) => {
                    let va = value_of(*a);
                    let inv_t = 1.0 / va.rows() as f64;
                    let mut da = Matrix::zeros(va.rows(), va.cols());
                    for r in 0..va.rows() {
                        for c in 0..va.cols() {
                            da.set(r, c, g.get(0, c) * inv_t);
                        }
                    }
                    parent_grads[*a].add_in_place(&da);
                }
                Op::Softplus(a) => {
                    let va = value_of(*a);
                    parent_grads[*a].add_in_place(&g.zip_map(va, |gi, x| gi * sigmoid_stable(x)));
                }
                Op::Sigmoid(a) => {
                    let s = &nodes[i].value;
                    parent_grads[*a].add_in_place(&g.zip_map(s, |gi, si| gi * si * (1.0 - si)));
                }
                Op::Gelu(a) => {
                    let va = value_of(*a);
                    parent_grads[*a].add_in_place(&g.zip_map(va, |gi, x| gi * gelu_grad(x)));
                }
                Op::Ln(a) => {
                    let va = value_of(*a);
                    parent_grads[*a].add_in_place(&g.zip_map(va, |gi, x| gi / x));
                }
                Op::Sqrt(a) => {
                    let s = &nodes[i].value;
                    parent_grads[*a].add_in_place(&g.zip_map(s, |gi, si| gi / (2.0 * si)));
                }
                Op::Square(a) => {
                    let va = value_of(*a);
                    parent_grads[*a].add_in_place(&g.zip_map(va, |gi, x| gi * 2.0 * x));
                }
                Op::PowI(a, k) => {
                    let va = value_of(*a);
                    let kk = *k;
                    parent_grads[*a].add_in_place(
                        &g.zip_map(va, |gi, x| gi * kk as f64 * x.powi(kk - 1)),
                    );
                }
                Op::Abs(a) => {
                    let va = value_of(*a);
                    parent_grads[*a].add_in_place(&g.zip_map(va, |gi, x| gi * x.signum_or_zero()));
                }
                Op::LnGamma(a) => {
                    let va = value_of(*a);
                    parent_grads[*a].add_in_place(&g.zip_map(va, |gi, x| gi * digamma(x)));
                }
                Op::SoftmaxRows(a) => {
                    let s = &nodes[i].value;
                    let mut da = Matrix::zeros(s.rows(), s.cols());
                    for r in 0..s.rows() {
                        let dot: f64 = (0..s.cols()).map(|c| g.get(r, c) * s.get(r, c)).sum();
                        for c in 0..s.cols() {
                            da.set(r, c, s.get(r, c) * (g.get(r, c) - dot));
                        }
                    }
                    parent_grads[*a].add_in_place(&da);
                }
                Op::LayerNormRows(a, eps) => {
                    let va = value_of(*a);
                    let y = &nodes[i].value;
                    let d = va.cols() as f64;
                    let mut da = Matrix::zeros(va.rows(), va.cols());
                    for r in 0..va.rows() {
                        let (_, sd) = row_norm_stats(va.row(r), *eps);
                        let gmean: f64 = (0..va.cols()).map(|c| g.get(r, c)).sum::<f64>() / d;
                        let gymean: f64 =
                            (0..va.cols()).map(|c| g.get(r, c) * y.get(r, c)).sum::<f64>() / d;
                        for c in 0..va.cols() {
                            da.set(r, c, (g.get(r, c) - gmean - y.get(r, c) * gymean) / sd);
                        }
                    }
                    parent_grads[*a].add_in_place(&da);
                }
                Op::ConvDepthwise(x, w) => {
                    let vx = value_of(*x);
                    let vw = value_of(*w);
                    let (dx, dw) = conv_depthwise_backward(vx, vw, g);
                    parent_grads[*x].add_in_place(&dx);
                    parent_grads[*w].add_in_place(&dw);
                }
                Op::HaarLow(a) => {
                    let va = value_of(*a);
                    let mut da = Matrix::zeros(va.rows(), va.cols());
                    for t in 0..g.rows() {
                        for c in 0..g.cols() {
                            let gv = g.get(t, c) * INV_SQRT2;
                            da.set(2 * t, c, da.get(2 * t, c) + gv);
                            da.set(2 * t + 1, c, da.get(2 * t + 1, c) + gv);
                        }
                    }
                    parent_grads[*a].add_in_place(&da);
                }
                Op::HaarHigh(a) => {
                    let va = value_of(*a);
                    let mut da = Matrix::zeros(va.rows(), va.cols());
                    for t in 0..g.rows() {
                        for c in 0..g.cols() {
                            let gv = g.get(t, c) * INV_SQRT2;
                            da.set(2 * t, c, da.get(2 * t, c) + gv);
                            da.set(2 * t + 1, c, da.get(2 * t + 1, c) - gv);
                        }
                    }
                    parent_grads[*a].add_in_place(&da);
                }
                Op::HaarUp(l, h) => {
                    let half = g.rows() / 2;
                    let cols = g.cols();
                    let mut dl = Matrix::zeros(half, cols);
                    let mut dh = Matrix::zeros(half, cols);
                    for t in 0..half {
                        for c in 0..cols {
                            let ge = g.get(2 * t, c);
                            let go = g.get(2 * t + 1, c);
                            dl.set(t, c, (ge + go) * INV_SQRT2);
                            dh.set(t, c, (ge - go) * INV_SQRT2);
                        }
                    }
                    parent_grads[*l].add_in_place(&dl);
                    parent_grads[*h].add_in_place(&dh);
                }
                Op::PadRows(a) => {
                    let va = value_of(*a);
                    let mut da = Matrix::zeros(va.rows(), va.cols());
                    for r in 0..va.rows() {
                        for c in 0..va.cols() {
                            da.set(r, c, g.get(r, c));
                        }
                    }
                    parent_grads[*a].add_in_place(&da);
                }
                Op::TakeRows(a, rows) => {
                    let va = value_of(*a);
                    let mut da = Matrix::zeros(va.rows(), va.cols());
                    for r in 0..*rows {
                        for c in 0..va.cols() {
                            da.set(r, c, g.get(r, c));
                        }
                    }
                    parent_grads[*a].add_in_place(&da);
                }
                Op::ConcatCols(a, b) => {
                    let ca = value_of(*a).cols();
                    let cb = value_of(*b).cols();
                    let rows = g.rows();
                    let mut da = Matrix::zeros(rows, ca);
                    let mut db = Matrix::zeros(rows, cb);
                    for r in 0..rows {
                        for c in 0..ca {
                            da.set(r, c, g.get(r, c));
                        }
                        for c in 0..cb {
                            db.set(r, c, g.get(r, ca + c));
                        }
                    }
                    parent_grads[*a].add_in_place(&da);
                    parent_grads[*b].add_in_place(&db);
                }
                Op::StackRows(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let vp = value_of(*p);
                        let mut dp = Matrix::zeros(vp.rows(), vp.cols());
                        for r in 0..vp.rows() {
                            for c in 0..vp.cols() {
                                dp.set(r, c, g.get(at + r, c));
                            }
                        }
                        parent_grads[*p].add_in_place(&dp);
                        at += vp.rows();
                    }
                }
                Op::SliceCols(a, start, len) => {
                    let va = value_of(*a);
                    let mut da = Matrix::zeros(va.rows(), va.cols());
                    for r in 0..va.rows() {
                        for c in 0..*len {
                            da.set(r, start + c, g.get(r, c));
                        }
                    }
                    parent_grads[*a].add_in_place(&da);
                }
                Op::ScaleBy(x, s) => {
                    let sv = value_of(*s).item();
                    parent_grads[*x].add_scaled_in_place(g, sv);
                    let vx = value_of(*x);
                    let ds: f64 = g
                        .data()
                        .iter()
                        .zip(vx.data())
                        .map(|(gi, xi)| gi * xi)
                        .sum();
                    let cur = parent_grads[*s].item();
                    parent_grads[*s] = Matrix::scalar(cur + ds);
                }
            }
        }

        Gradients { grads }
    }
}

const INV_SQRT2: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// ln(1 + e^x), branched so neither exp overflows.
pub fn softplus_stable(x: f64) -> f64 {
    if x > 20.0 {
        x + f64::ln_1p((-x).exp())
    } else {
        f64::ln_1p(x.exp())
    }
}

pub fn sigmoid_stable(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Exact GELU: x * Phi(x) with the Gaussian CDF.
pub fn gelu_exact(x: f64) -> f64 {
    x * 0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let phi_cdf = 0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2));
    let phi_pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    phi_cdf + x * phi_pdf
}

fn row_norm_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mu = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / d;
    (mu, (var + eps).sqrt())
}

fn conv_depthwise_forward(x: &Matrix, w: &Matrix) -> Matrix {
    let (t_len, d) = x.shape();
    let k = w.rows();
    let c = (k - 1) / 2;
    let mut out = Matrix::zeros(t_len, d);
    for t in 0..t_len {
        for ch in 0..d {
            let mut acc = 0.0;
            for j in 0..k {
                let src = t as isize + j as isize - c as isize;
                if src >= 0 && (src as usize) < t_len {
                    acc += w.get(j, ch) * x.get(src as usize, ch);
                }
            }
            out.set(t, ch, acc);
        }
    }
    out
}

fn conv_depthwise_backward(x: &Matrix, w: &Matrix, g: &Matrix) -> (Matrix, Matrix) {
    let (t_len, d) = x.shape();
    let k = w.rows();
    let c = (k - 1) / 2;
    let mut dx = Matrix::zeros(t_len, d);
    let mut dw = Matrix::zeros(k, d);
    for t in 0..t_len {
        for ch in 0..d {
            let gv = g.get(t, ch);
            if gv == 0.0 {
                continue;
            }
            for j in 0..k {
                let src = t as isize + j as isize - c as isize;
                if src >= 0 && (src as usize) < t_len {
                    dx.set(
                        src as usize,
                        ch,
                        dx.get(src as usize, ch) + w.get(j, ch) * gv,
                    );
                    dw.set(j, ch, dw.get(j, ch) + x.get(src as usize, ch) * gv);
                }
            }
        }
    }
    (dx, dw)
}

trait SignumOrZero {
    fn signum_or_zero(self) -> f64;
}

impl SignumOrZero for f64 {
    fn signum_or_zero(self) -> f64 {
        if self > 0.0 {
            1.0
        } else if self < 0.0 {
            -1.0
        } else {
            0.0
        }
    }
}
