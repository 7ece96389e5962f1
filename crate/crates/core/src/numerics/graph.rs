//! Reverse-mode differentiation over a linear tape.
//!
//! A [`Graph`] records every op in creation order; [`Graph::backward`] walks
//! the tape once in reverse and accumulates adjoints. Nodes that do not depend
//! on a differentiable leaf are skipped entirely.

use std::collections::HashMap;

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Down the rows, independently for every column.
    Rows,
    /// Along each row (the last axis).
    Cols,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Min(Var, Var),
    Max(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    LogSigmoid(Var),
    Abs(Var),
    PowConst(Var, f64),
    ClampMin(Var, f64),
    Softmax(Var, Axis),
    LogSoftmaxRows(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    BatchNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    GatherRows(Var, Vec<usize>),
    SegmentSoftmax(Var, Vec<usize>),
    SegmentSum(Var, Vec<usize>),
    SegmentMax { x: Var, argmax: Vec<usize> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    TileCols(Var, usize),
    Transpose(Var),
    SumAll(Var),
    SelectElems(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Clone, Copy)]
struct View<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl<'a> View<'a> {
    fn of(t: &'a Tensor) -> Self {
        Self::dense(t.data(), t.rows(), t.cols())
    }

    fn dense(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn maybe_t(self, flag: bool) -> Self {
        if flag {
            self.t()
        } else {
            self
        }
    }
}

/// `out += a * b` with `out` dense row-major.
fn gemm_acc(out: &mut [f64], a: View, b: View) {
    debug_assert_eq!(a.cols, b.rows);
    debug_assert_eq!(out.len(), a.rows * b.cols);
    let (m, k, n) = (a.rows, a.cols, b.cols);
    // SAFETY: the views were built from slices whose lengths cover the
    // strided extents, and `out` holds exactly m*n elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            1.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

/// Adjoint buffers produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Adjoints {
    grads: Vec<Option<Vec<f64>>>,
}

impl Adjoints {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<usize, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, name: &str) -> Result<Var> {
        if !value.is_finite() {
            let bad = value.data().iter().position(|v| !v.is_finite()).unwrap_or(0);
            return Err(Error::NonFinite {
                op: name.to_string(),
                detail: format!(
                    "shape {:?}, first bad element {bad} = {}",
                    value.shape(),
                    value.data()[bad]
                ),
            });
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Leaf that takes no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id.0) {
            return v;
        }
        let v = self.input(store.value(id).clone());
        self.params.insert(id.0, v);
        v
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if self.value(a).rows() != self.value(b).rows() || self.value(a).cols() != self.value(b).cols()
        {
            return Err(Error::dim(format!("{op}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    fn shape2(&self, v: Var) -> [usize; 2] {
        let t = self.value(v);
        [t.rows(), t.cols()]
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(&self.shape2(a), data)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(t, op, ng, name)
    }

    fn unary(&mut self, a: Var, name: &str, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(&self.shape2(a), data)?;
        let ng = self.ng(a);
        self.push(t, op, ng, name)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, false)
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, true)
    }

    pub fn matmul_ex(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let va = View::of(self.value(a)).maybe_t(ta);
        let vb = View::of(self.value(b)).maybe_t(tb);
        if va.cols != vb.rows {
            return Err(Error::dim(format!(
                "matmul: inner dimensions {}x{} * {}x{}",
                va.rows, va.cols, vb.rows, vb.cols
            )));
        }
        let mut out = vec![0.0; va.rows * vb.cols];
        gemm_acc(&mut out, va, vb);
        let t = Tensor::new(&[va.rows, vb.cols], out)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::MatMul { a, b, ta, tb }, ng, "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "min", |x, y| if x <= y { x } else { y }, Op::Min(a, b))
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn max(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "max", |x, y| if x >= y { x } else { y }, Op::Max(a, b))
    }

    /// Adds the `1 x n` row `r` to every row of `a`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let [m, n] = self.shape2(a);
        if self.shape2(r) != [1, n] {
            return Err(Error::dim(format!(
                "add_row: row {:?} does not broadcast over {m}x{n}",
                self.shape2(r)
            )));
        }
        let rv = self.value(r).data();
        let data = self
            .value(a)
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(rv).map(|(x, y)| x + y))
            .collect();
        let t = Tensor::new(&[m, n], data)?;
        let ng = self.ng(a) || self.ng(r);
        self.push(t, Op::AddRow(a, r), ng, "add_row")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, "scale", |x| c * x, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, "add_scalar", |x| x + c, Op::AddScalar(a))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "relu", |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "sigmoid", sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "exp", f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "ln", f64::ln, Op::Ln(a))
    }

    /// `ln(sigmoid(x))`, stable for large `|x|`.
    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "log_sigmoid", log_sigmoid, Op::LogSigmoid(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "abs", f64::abs, Op::Abs(a))
    }

    /// `x^p` for non-negative `x`. `p = 0` yields ones with zero gradient.
    pub fn pow_const(&mut self, a: Var, p: f64) -> Result<Var> {
        self.unary(
            a,
            "pow",
            |x| if p == 0.0 { 1.0 } else { x.powf(p) },
            Op::PowConst(a, p),
        )
    }

    pub fn clamp_min(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, "clamp_min", |x| x.max(c), Op::ClampMin(a, c))
    }

    pub fn softmax(&mut self, a: Var, axis: Axis) -> Result<Var> {
        let [m, n] = self.shape2(a);
        let x = self.value(a).data();
        let mut out = vec![0.0; m * n];
        match axis {
            Axis::Cols => {
                out.copy_from_slice(x);
                out.chunks_mut(n).for_each(softmax_in_place);
            }
            Axis::Rows => {
                let mut tmp = vec![0.0; m];
                for c in 0..n {
                    for r in 0..m {
                        tmp[r] = x[r * n + c];
                    }
                    softmax_in_place(&mut tmp);
                    for r in 0..m {
                        out[r * n + c] = tmp[r];
                    }
                }
            }
        }
        let t = Tensor::new(&[m, n], out)?;
        let ng = self.ng(a);
        self.push(t, Op::Softmax(a, axis), ng, "softmax")
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let [m, n] = self.shape2(a);
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(n) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let t = Tensor::new(&[m, n], out)?;
        let ng = self.ng(a);
        self.push(t, Op::LogSoftmaxRows(a), ng, "log_softmax")
    }

    /// Per-row normalization with affine `gain`/`bias` (both `1 x n`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let [m, n] = self.shape2(x);
        if self.shape2(gain) != [1, n] || self.shape2(bias) != [1, n] {
            return Err(Error::dim("layer_norm: gain/bias must be 1 x cols"));
        }
        let xv = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let t = Tensor::new(&[m, n], out)?;
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
            "layer_norm",
        )
    }

    /// Per-column normalization using the statistics of the current rows.
    pub fn batch_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let [m, n] = self.shape2(x);
        if self.shape2(gain) != [1, n] || self.shape2(bias) != [1, n] {
            return Err(Error::dim("batch_norm: gain/bias must be 1 x cols"));
        }
        let xv = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; n];
        let mut out = vec![0.0; m * n];
        for c in 0..n {
            let mean = (0..m).map(|r| xv[r * n + c]).sum::<f64>() / m as f64;
            let var = (0..m)
                .map(|r| (xv[r * n + c] - mean).powi(2))
                .sum::<f64>()
                / m as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[c] = rs;
            for r in 0..m {
                let h = (xv[r * n + c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let t = Tensor::new(&[m, n], out)?;
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(
            t,
            Op::BatchNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
            "batch_norm",
        )
    }

    /// Copies rows of `x` in index order; the backward pass scatter-adds.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let [m, n] = self.shape2(x);
        if idx.is_empty() {
            return Err(Error::dim("gather_rows: empty index list"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::Index { index: bad, len: m });
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(xv.row(i));
        }
        let t = Tensor::new(&[idx.len(), n], out)?;
        let ng = self.ng(x);
        self.push(t, Op::GatherRows(x, idx.to_vec()), ng, "gather_rows")
    }

    fn check_offsets(&self, x: Var, offsets: &[usize], op: &str) -> Result<()> {
        let m = self.value(x).rows();
        let ok = offsets.first() == Some(&0)
            && offsets.last() == Some(&m)
            && offsets.windows(2).all(|w| w[0] <= w[1]);
        if !ok {
            return Err(Error::dim(format!(
                "{op}: offsets {offsets:?} do not partition {m} rows"
            )));
        }
        Ok(())
    }

    /// Softmax over the rows of each segment, independently per column.
    /// `offsets` has one more entry than there are segments.
    pub fn segment_softmax(&mut self, x: Var, offsets: &[usize]) -> Result<Var> {
        self.check_offsets(x, offsets, "segment_softmax")?;
        let [m, n] = self.shape2(x);
        let xv = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for w in offsets.windows(2) {
            let (lo, hi) = (w[0], w[1]);
            if lo == hi {
                continue;
            }
            for c in 0..n {
                let mx = (lo..hi).map(|r| xv[r * n + c]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for r in lo..hi {
                    let e = (xv[r * n + c] - mx).exp();
                    out[r * n + c] = e;
                    s += e;
                }
                for r in lo..hi {
                    out[r * n + c] /= s;
                }
            }
        }
        let t = Tensor::new(&[m, n], out)?;
        let ng = self.ng(x);
        self.push(t, Op::SegmentSoftmax(x, offsets.to_vec()), ng, "segment_softmax")
    }

    /// Sums the rows of each segment; empty segments give zero rows.
    pub fn segment_sum(&mut self, x: Var, offsets: &[usize]) -> Result<Var> {
        self.check_offsets(x, offsets, "segment_sum")?;
        let n = self.value(x).cols();
        let xv = self.value(x).data();
        let segs = offsets.len() - 1;
        let mut out = vec![0.0; segs * n];
        for (s, w) in offsets.windows(2).enumerate() {
            for r in w[0]..w[1] {
                for c in 0..n {
                    out[s * n + c] += xv[r * n + c];
                }
            }
        }
        let t = Tensor::new(&[segs, n], out)?;
        let ng = self.ng(x);
        self.push(t, Op::SegmentSum(x, offsets.to_vec()), ng, "segment_sum")
    }

    /// Per-channel maximum over each segment. The gradient goes to the first
    /// maximal row of the segment.
    pub fn segment_max(&mut self, x: Var, offsets: &[usize]) -> Result<Var> {
        self.check_offsets(x, offsets, "segment_max")?;
        let n = self.value(x).cols();
        let xv = self.value(x).data();
        let segs = offsets.len() - 1;
        let mut out = vec![0.0; segs * n];
        let mut argmax = vec![0usize; segs * n];
        for (s, w) in offsets.windows(2).enumerate() {
            if w[0] == w[1] {
                return Err(Error::EmptyGroup(format!("segment {s} has no rows")));
            }
            for c in 0..n {
                let mut best = w[0];
                for r in w[0] + 1..w[1] {
                    if xv[r * n + c] > xv[best * n + c] {
                        best = r;
                    }
                }
                out[s * n + c] = xv[best * n + c];
                argmax[s * n + c] = best;
            }
        }
        let t = Tensor::new(&[segs, n], out)?;
        let ng = self.ng(x);
        self.push(t, Op::SegmentMax { x, argmax }, ng, "segment_max")
    }

    /// Per-channel maximum over all rows, as a `1 x d` row.
    pub fn channel_max(&mut self, x: Var) -> Result<Var> {
        let m = self.value(x).rows();
        if m == 0 {
            return Err(Error::EmptyGroup("channel_max over zero rows".into()));
        }
        self.segment_max(x, &[0, m])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != m) {
            return Err(Error::dim("concat_cols: row counts differ"));
        }
        let n: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let t = Tensor::new(&[m, n], out)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(t, Op::ConcatCols(parts.to_vec()), ng, "concat_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.value(parts[0]).cols();
        if parts.iter().any(|&p| self.value(p).cols() != n) {
            return Err(Error::dim("concat_rows: column counts differ"));
        }
        let m: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut out = Vec::with_capacity(m * n);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::new(&[m, n], out)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(t, Op::ConcatRows(parts.to_vec()), ng, "concat_rows")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [m, n] = self.shape2(x);
        if len == 0 || start + len > n {
            return Err(Error::dim(format!("slice_cols {start}+{len} of {n}")));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let t = Tensor::new(&[m, len], out)?;
        let ng = self.ng(x);
        self.push(t, Op::SliceCols { x, start }, ng, "slice_cols")
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [m, n] = self.shape2(x);
        if len == 0 || start + len > m {
            return Err(Error::dim(format!("slice_rows {start}+{len} of {m}")));
        }
        let out = self.value(x).data()[start * n..(start + len) * n].to_vec();
        let t = Tensor::new(&[len, n], out)?;
        let ng = self.ng(x);
        self.push(t, Op::SliceRows { x, start }, ng, "slice_rows")
    }

    /// Repeats the columns `times` times: `[x, x, ..., x]`.
    pub fn tile_cols(&mut self, x: Var, times: usize) -> Result<Var> {
        let [m, n] = self.shape2(x);
        if times == 0 {
            return Err(Error::dim("tile_cols: zero repetitions"));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(m * n * times);
        for r in 0..m {
            for _ in 0..times {
                out.extend_from_slice(xv.row(r));
            }
        }
        let t = Tensor::new(&[m, n * times], out)?;
        let ng = self.ng(x);
        self.push(t, Op::TileCols(x, times), ng, "tile_cols")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let [m, n] = self.shape2(x);
        let xv = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..n {
                out[c * m + r] = xv[r * n + c];
            }
        }
        let t = Tensor::new(&[n, m], out)?;
        let ng = self.ng(x);
        self.push(t, Op::Transpose(x), ng, "transpose")
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng, "sum_all")
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Picks `(row, col)` entries into a `k x 1` column.
    pub fn select(&mut self, x: Var, at: &[(usize, usize)]) -> Result<Var> {
        let [m, n] = self.shape2(x);
        if at.is_empty() {
            return Err(Error::dim("select: nothing selected"));
        }
        let mut flat = Vec::with_capacity(at.len());
        for &(r, c) in at {
            if r >= m || c >= n {
                return Err(Error::Index {
                    index: r * n + c,
                    len: m * n,
                });
            }
            flat.push(r * n + c);
        }
        let xv = self.value(x).data();
        let out = flat.iter().map(|&i| xv[i]).collect();
        let t = Tensor::new(&[at.len(), 1], out)?;
        let ng = self.ng(x);
        self.push(t, Op::SelectElems(x, flat), ng, "select")
    }

    /// Runs the reverse sweep from the scalar `out`.
    pub fn backward(&self, out: Var) -> Result<Adjoints> {
        if self.value(out).len() != 1 {
            return Err(Error::dim("backward needs a scalar output"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(vec![1.0]);
        for id in (0..=out.0).rev() {
            let Some(gy) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.needs_grad {
                self.backprop(node, &gy, &mut grads);
            }
            grads[id] = Some(gy);
        }
        Ok(Adjoints { grads })
    }

    /// Adds the parameter adjoints into `into`.
    pub fn accumulate_param_grads(&self, adj: &Adjoints, into: &mut Gradients) {
        let mut ids: Vec<_> = self.params.iter().map(|(&p, &v)| (p, v)).collect();
        ids.sort_unstable();
        for (p, v) in ids {
            if let Some(g) = adj.wrt(v) {
                into.add(ParamId(p), g);
            }
        }
    }

    fn backprop(&self, node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let y = node.value.data();
        // Gets (creating if needed) the adjoint buffer of an input that wants one.
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                if self.nodes[v.0].needs_grad {
                    let n = self.nodes[v.0].value.len();
                    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
                } else {
                    None
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (ta, tb) = (*ta, *tb);
                let va = View::of(val(*a)).maybe_t(ta);
                let vb = View::of(val(*b)).maybe_t(tb);
                let dy = View::dense(gy, va.rows, vb.cols);
                if let Some(ga) = acc!(*a) {
                    if ta {
                        gemm_acc(ga, vb, dy.t());
                    } else {
                        gemm_acc(ga, dy, vb.t());
                    }
                }
                if let Some(gb) = acc!(*b) {
                    if tb {
                        gemm_acc(gb, dy.t(), va);
                    } else {
                        gemm_acc(gb, va.t(), dy);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(g) = acc!(v) {
                        g.iter_mut().zip(gy).for_each(|(g, d)| *g += d);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(g) = acc!(*a) {
                    g.iter_mut().zip(gy).for_each(|(g, d)| *g += d);
                }
                if let Some(g) = acc!(*b) {
                    g.iter_mut().zip(gy).for_each(|(g, d)| *g -= d);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                if let Some(g) = acc!(*a) {
                    for i in 0..g.len() {
                        g[i] += gy[i] * bv[i];
                    }
                }
                if let Some(g) = acc!(*b) {
                    for i in 0..g.len() {
                        g[i] += gy[i] * av[i];
                    }
                }
            }
            Op::Div(a, b) => {
                let bv = val(*b).data();
                if let Some(g) = acc!(*a) {
                    for i in 0..g.len() {
                        g[i] += gy[i] / bv[i];
                    }
                }
                if let Some(g) = acc!(*b) {
                    for i in 0..g.len() {
                        g[i] -= gy[i] * y[i] / bv[i];
                    }
                }
            }
            Op::Min(a, b) | Op::Max(a, b) => {
                let is_min = matches!(node.op, Op::Min(..));
                let (av, bv) = (val(*a).data(), val(*b).data());
                let pick_a = |i: usize| if is_min { av[i] <= bv[i] } else { av[i] >= bv[i] };
                if let Some(g) = acc!(*a) {
                    for i in 0..g.len() {
                        if pick_a(i) {
                            g[i] += gy[i];
                        }
                    }
                }
                if let Some(g) = acc!(*b) {
                    for i in 0..g.len() {
                        if !pick_a(i) {
                            g[i] += gy[i];
                        }
                    }
                }
            }
            Op::AddRow(a, r) => {
                if let Some(g) = acc!(*a) {
                    g.iter_mut().zip(gy).for_each(|(g, d)| *g += d);
                }
                if let Some(g) = acc!(*r) {
                    let n = g.len();
                    for row in gy.chunks(n) {
                        g.iter_mut().zip(row).for_each(|(g, d)| *g += d);
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(g) = acc!(*a) {
                    g.iter_mut().zip(gy).for_each(|(g, d)| *g += c * d);
                }
            }
            Op::AddScalar(a) => {
                if let Some(g) = acc!(*a) {
                    g.iter_mut().zip(gy).for_each(|(g, d)| *g += d);
                }
            }
            Op::Relu(a) => {
                let av = val(*a).data();
                if let Some(g) = acc!(*a) {
                    for i in 0..g.len() {
                        if av[i] > 0.0 {
                            g[i] += gy[i];
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(g) = acc!(*a) {
                    for i in 0..g.len() {
                        g[i] += gy[i] * y[i] * (1.0 - y[i]);
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(g) = acc!(*a) {
                    for i in 0..g.len() {
                        g[i] += gy[i] * y[i];
                    }
                }
            }
            Op::Ln(a) => {
                let av = val(*a).data();
                if let Some(g) = acc!(*a) {
                    for i in 0..g.len() {
                        g[i] += gy[i] / av[i];
                    }
                }
            }
            Op::LogSigmoid(a) => {
                let av = val(*a).data();
                if let Some(g) = acc!(*a) {
                    for i in 0..g.len() {
                        g[i] += gy[i] * sigmoid(-av[i]);
                    }
                }
            }
            Op::Abs(a) => {
                let av = val(*a).data();
                if let Some(g) = acc!(*a) {
                    for i in 0..g.len() {
                        let s = if av[i] > 0.0 {
                            1.0
                        } else if av[i] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        g[i] += gy[i] * s;
                    }
                }
            }
            Op::PowConst(a, p) => {
                let av = val(*a).data();
                if let Some(g) = acc!(*a) {
                    if *p != 0.0 {
                        for i in 0..g.len() {
                            let d = if *p == 1.0 {
                                1.0
                            } else {
                                p * av[i].powf(p - 1.0)
                            };
                            g[i] += gy[i] * d;
                        }
                    }
                }
            }
            Op::ClampMin(a, c) => {
                let av = val(*a).data();
                if let Some(g) = acc!(*a) {
                    for i in 0..g.len() {
                        if av[i] > *c {
                            g[i] += gy[i];
                        }
                    }
                }
            }
            Op::Softmax(a, axis) => {
                let [m, n] = [node.value.rows(), node.value.cols()];
                if let Some(g) = acc!(*a) {
                    match axis {
                        Axis::Cols => {
                            for r in 0..m {
                                let s: f64 = (0..n).map(|c| gy[r * n + c] * y[r * n + c]).sum();
                                for c in 0..n {
                                    let i = r * n + c;
                                    g[i] += y[i] * (gy[i] - s);
                                }
                            }
                        }
                        Axis::Rows => {
                            for c in 0..n {
                                let s: f64 = (0..m).map(|r| gy[r * n + c] * y[r * n + c]).sum();
                                for r in 0..m {
                                    let i = r * n + c;
                                    g[i] += y[i] * (gy[i] - s);
                                }
                            }
                        }
                    }
                }
            }
            Op::LogSoftmaxRows(a) => {
                let n = node.value.cols();
                if let Some(g) = acc!(*a) {
                    for ((grow, dyrow), yrow) in g.chunks_mut(n).zip(gy.chunks(n)).zip(y.chunks(n)) {
                        let s: f64 = dyrow.iter().sum();
                        for c in 0..n {
                            grow[c] += dyrow[c] - yrow[c].exp() * s;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = node.value.cols();
                let m = node.value.rows();
                let gv = val(*gain).data().to_vec();
                if let Some(g) = acc!(*gain) {
                    for i in 0..m * n {
                        g[i % n] += gy[i] * xhat[i];
                    }
                }
                if let Some(g) = acc!(*bias) {
                    for i in 0..m * n {
                        g[i % n] += gy[i];
                    }
                }
                if let Some(g) = acc!(*x) {
                    let nf = n as f64;
                    for r in 0..m {
                        let base = r * n;
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for c in 0..n {
                            let dh = gy[base + c] * gv[c];
                            m1 += dh;
                            m2 += dh * xhat[base + c];
                        }
                        m1 /= nf;
                        m2 /= nf;
                        for c in 0..n {
                            let dh = gy[base + c] * gv[c];
                            g[base + c] += rstd[r] * (dh - m1 - xhat[base + c] * m2);
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = node.value.cols();
                let m = node.value.rows();
                let gv = val(*gain).data().to_vec();
                if let Some(g) = acc!(*gain) {
                    for i in 0..m * n {
                        g[i % n] += gy[i] * xhat[i];
                    }
                }
                if let Some(g) = acc!(*bias) {
                    for i in 0..m * n {
                        g[i % n] += gy[i];
                    }
                }
                if let Some(g) = acc!(*x) {
                    let mf = m as f64;
                    for c in 0..n {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for r in 0..m {
                            let dh = gy[r * n + c] * gv[c];
                            m1 += dh;
                            m2 += dh * xhat[r * n + c];
                        }
                        m1 /= mf;
                        m2 /= mf;
                        for r in 0..m {
                            let i = r * n + c;
                            g[i] += rstd[c] * (gy[i] * gv[c] - m1 - xhat[i] * m2);
                        }
                    }
                }
            }
            Op::GatherRows(x, idx) => {
                let n = node.value.cols();
                if let Some(g) = acc!(*x) {
                    for (k, &i) in idx.iter().enumerate() {
                        for c in 0..n {
                            g[i * n + c] += gy[k * n + c];
                        }
                    }
                }
            }
            Op::SegmentSoftmax(x, offsets) => {
                let n = node.value.cols();
                if let Some(g) = acc!(*x) {
                    for w in offsets.windows(2) {
                        for c in 0..n {
                            let s: f64 = (w[0]..w[1]).map(|r| gy[r * n + c] * y[r * n + c]).sum();
                            for r in w[0]..w[1] {
                                let i = r * n + c;
                                g[i] += y[i] * (gy[i] - s);
                            }
                        }
                    }
                }
            }
            Op::SegmentSum(x, offsets) => {
                let n = node.value.cols();
                if let Some(g) = acc!(*x) {
                    for (s, w) in offsets.windows(2).enumerate() {
                        for r in w[0]..w[1] {
                            for c in 0..n {
                                g[r * n + c] += gy[s * n + c];
                            }
                        }
                    }
                }
            }
            Op::SegmentMax { x, argmax } => {
                let n = node.value.cols();
                if let Some(g) = acc!(*x) {
                    for (k, &r) in argmax.iter().enumerate() {
                        g[r * n + k % n] += gy[k];
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let n = node.value.cols();
                let mut off = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if let Some(g) = acc!(p) {
                        for (r, grow) in g.chunks_mut(w).enumerate() {
                            let src = &gy[r * n + off..r * n + off + w];
                            grow.iter_mut().zip(src).for_each(|(g, d)| *g += d);
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = val(p).len();
                    if let Some(g) = acc!(p) {
                        g.iter_mut()
                            .zip(&gy[off..off + len])
                            .for_each(|(g, d)| *g += d);
                    }
                    off += len;
                }
            }
            Op::SliceCols { x, start } => {
                let w = node.value.cols();
                let n = val(*x).cols();
                if let Some(g) = acc!(*x) {
                    for (r, row) in gy.chunks(w).enumerate() {
                        let dst = &mut g[r * n + start..r * n + start + w];
                        dst.iter_mut().zip(row).for_each(|(g, d)| *g += d);
                    }
                }
            }
            Op::SliceRows { x, start } => {
                let n = node.value.cols();
                if let Some(g) = acc!(*x) {
                    g[start * n..start * n + gy.len()]
                        .iter_mut()
                        .zip(gy)
                        .for_each(|(g, d)| *g += d);
                }
            }
            Op::TileCols(x, times) => {
                let n = val(*x).cols();
                if let Some(g) = acc!(*x) {
                    for (r, grow) in g.chunks_mut(n).enumerate() {
                        for t in 0..*times {
                            let base = r * n * times + t * n;
                            grow.iter_mut()
                                .zip(&gy[base..base + n])
                                .for_each(|(g, d)| *g += d);
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                let [m, n] = [val(*x).rows(), val(*x).cols()];
                if let Some(g) = acc!(*x) {
                    for r in 0..m {
                        for c in 0..n {
                            g[r * n + c] += gy[c * m + r];
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                if let Some(g) = acc!(*x) {
                    g.iter_mut().for_each(|g| *g += gy[0]);
                }
            }
            Op::SelectElems(x, flat) => {
                if let Some(g) = acc!(*x) {
                    for (k, &i) in flat.iter().enumerate() {
                        g[i] += gy[k];
                    }
                }
            }
        }
    }
}

fn softmax_in_place(v: &mut [f64]) {
    let mx = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - mx).exp();
        s += *x;
    }
    v.iter_mut().for_each(|x| *x /= s);
}
