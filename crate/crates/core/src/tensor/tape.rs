//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation as a node holding its forward value
//! and references to its parents. Nodes are appended in evaluation order, so
//! parents always precede children and a single reverse sweep from the root
//! visits everything in topological order.
//!
//! ```
//! use mlrl_core::tensor::{Matrix, Tape};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Matrix::scalar(3.0));
//! let y = tape.square(x);
//! tape.backward(y).unwrap();
//! assert_eq!(tape.grad(x).unwrap().item(), 6.0);
//! ```
//!
//! Broadcasting is limited to row-vector against matrix and scalar against
//! matrix. Tapes are meant to live for one training step.

use crate::error::{Error, Result};
use crate::tensor::linalg;
use crate::tensor::Matrix;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulScalar(Var, Var),
    AddConst(Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sum(Var),
    SumRows(Var),
    SumCols(Var),
    Transpose(Var),
    Reshape(Var),
    Trace(Var),
    HCat(Var, Var),
    SliceCols(Var, usize),
    GroupWeightedSum(Var, Vec<f64>),
    LogSoftmaxRows(Var),
    PickPerRow(Var, Vec<usize>),
    Min(Var, Var),
    Clamp(Var, f64, f64),
    Cholesky(Var),
    LogDetSpd { a: Var, inverse: Matrix },
    SolveSpd { a: Var, b: Var, factor: Matrix },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Operation record plus per-node gradient accumulators.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Matrix>>,
    backward_done: bool,
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

    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Gradient of the last backward root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of its shape when nothing flowed into it.
    pub fn grad_or_zeros(&self, v: Var) -> Matrix {
        self.grad(v).cloned().unwrap_or_else(|| {
            let (r, c) = self.shape(v);
            Matrix::zeros(r, c)
        })
    }

    /// Clears accumulated gradients so `backward` may run again.
    pub fn reset(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        debug_assert!(
            !value.data().iter().any(|v| v.is_nan()),
            "forward produced NaN in {op:?}"
        );
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).map(f);
        let ng = self.ng(&[a]);
        self.push(value, op, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    fn check_row(&self, a: Var, row: Var, op: &str) -> Result<()> {
        let (_, c) = self.shape(a);
        let (rr, rc) = self.shape(row);
        if rr != 1 || rc != c {
            return Err(Error::dim(format!(
                "{op}: row vector {rr}x{rc} against {c} columns"
            )));
        }
        Ok(())
    }

    /// `a + 1·row` with `row` a `1×cols` vector.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.check_row(a, row, "add_row")?;
        let r = self.value(row).data().to_vec();
        let mut value = self.value(a).clone();
        for i in 0..value.rows() {
            for (x, b) in value.row_mut(i).iter_mut().zip(&r) {
                *x += b;
            }
        }
        let ng = self.ng(&[a, row]);
        Ok(self.push(value, Op::AddRow(a, row), ng))
    }

    /// `a - 1·row`.
    pub fn sub_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let neg = self.scale(row, -1.0);
        self.add_row(a, neg)
    }

    /// Each row of `a` multiplied elementwise by `row`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.check_row(a, row, "mul_row")?;
        let r = self.value(row).data().to_vec();
        let mut value = self.value(a).clone();
        for i in 0..value.rows() {
            for (x, b) in value.row_mut(i).iter_mut().zip(&r) {
                *x *= b;
            }
        }
        let ng = self.ng(&[a, row]);
        Ok(self.push(value, Op::MulRow(a, row), ng))
    }

    /// `a · s` for a `1×1` variable `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.shape(s) != (1, 1) {
            return Err(Error::dim("mul_scalar expects a 1x1 scalar"));
        }
        let sv = self.value(s).item();
        let value = self.value(a).scale(sv);
        let ng = self.ng(&[a, s]);
        Ok(self.push(value, Op::MulScalar(a, s), ng))
    }

    /// `a + c` for a constant matrix `c` of the same shape.
    pub fn add_const(&mut self, a: Var, c: &Matrix) -> Result<Var> {
        let value = self.value(a).add(c)?;
        let ng = self.ng(&[a]);
        Ok(self.push(value, Op::AddConst(a), ng))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v + c);
        let ng = self.ng(&[a]);
        self.push(value, Op::AddConst(a), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |v| v * c, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|v| *v <= 0.0) {
            return Err(Error::InvalidInput("log of a non-positive value".into()));
        }
        Ok(self.unary(a, f64::ln, Op::Log(a)))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |v| v * v, Op::Square(a))
    }

    /// Sum of all entries, `1×1`.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        let ng = self.ng(&[a]);
        self.push(value, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Column sums, `1×cols`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut out = vec![0.0; m.cols()];
        for i in 0..m.rows() {
            for (o, v) in out.iter_mut().zip(m.row(i)) {
                *o += v;
            }
        }
        let ng = self.ng(&[a]);
        self.push(Matrix::row_vector(&out), Op::SumRows(a), ng)
    }

    /// Column means, `1×cols`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let n = self.shape(a).0 as f64;
        let s = self.sum_rows(a);
        self.scale(s, 1.0 / n)
    }

    /// Row sums, `rows×1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let out: Vec<f64> = (0..m.rows()).map(|i| m.row(i).iter().sum()).collect();
        let ng = self.ng(&[a]);
        self.push(Matrix::column(&out), Op::SumCols(a), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let ng = self.ng(&[a]);
        self.push(value, Op::Transpose(a), ng)
    }

    /// Same row-major data viewed as `rows×cols`.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let value = Matrix::new(rows, cols, self.value(a).data().to_vec())?;
        let ng = self.ng(&[a]);
        Ok(self.push(value, Op::Reshape(a), ng))
    }

    pub fn trace(&mut self, a: Var) -> Result<Var> {
        if !self.value(a).is_square() {
            return Err(Error::dim("trace of a non-square matrix"));
        }
        let value = Matrix::scalar(self.value(a).trace());
        let ng = self.ng(&[a]);
        Ok(self.push(value, Op::Trace(a), ng))
    }

    pub fn hcat(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hcat(self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::HCat(a, b), ng))
    }

    /// Columns `start..start+len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let m = self.value(a);
        if start + len > m.cols() {
            return Err(Error::dim(format!(
                "slice {start}..{} of {} columns",
                start + len,
                m.cols()
            )));
        }
        let value = Matrix::from_fn(m.rows(), len, |i, j| m[(i, start + j)]);
        let ng = self.ng(&[a]);
        Ok(self.push(value, Op::SliceCols(a, start), ng))
    }

    /// Reduces consecutive groups of `weights.len()` rows of a column vector
    /// to their weighted sums: `out[g] = Σ_t weights[t]·a[g·j + t]`.
    pub fn group_weighted_sum(&mut self, a: Var, weights: &[f64]) -> Result<Var> {
        let m = self.value(a);
        let j = weights.len();
        if m.cols() != 1 || j == 0 || m.rows() % j != 0 {
            return Err(Error::dim(format!(
                "group_weighted_sum: {}x{} with group length {j}",
                m.rows(),
                m.cols()
            )));
        }
        let out: Vec<f64> = m
            .data()
            .chunks(j)
            .map(|g| g.iter().zip(weights).map(|(x, w)| x * w).sum())
            .collect();
        let ng = self.ng(&[a]);
        Ok(self.push(
            Matrix::column(&out),
            Op::GroupWeightedSum(a, weights.to_vec()),
            ng,
        ))
    }

    /// Row-wise `x - logsumexp(x)`.
    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut value = m.clone();
        for i in 0..m.rows() {
            let row = value.row_mut(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let ng = self.ng(&[a]);
        self.push(value, Op::LogSoftmaxRows(a), ng)
    }

    /// `out[i] = a[i, index[i]]`, `rows×1`.
    pub fn pick_per_row(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let m = self.value(a);
        if index.len() != m.rows() || index.iter().any(|&k| k >= m.cols()) {
            return Err(Error::dim("pick_per_row: index does not fit matrix"));
        }
        let out: Vec<f64> = index.iter().enumerate().map(|(i, &k)| m[(i, k)]).collect();
        let ng = self.ng(&[a]);
        Ok(self.push(Matrix::column(&out), Op::PickPerRow(a, index.to_vec()), ng))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), f64::min)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::Min(a, b), ng))
    }

    /// Elementwise clamp; gradient is zero outside `(lo, hi)`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |v| v.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// Lower Cholesky factor of a symmetric positive definite matrix.
    pub fn cholesky(&mut self, a: Var) -> Result<Var> {
        let value = linalg::cholesky(self.value(a))?;
        let ng = self.ng(&[a]);
        Ok(self.push(value, Op::Cholesky(a), ng))
    }

    /// `log det a`; the gradient is `a⁻¹`.
    pub fn logdet_spd(&mut self, a: Var) -> Result<Var> {
        let l = linalg::cholesky(self.value(a))?;
        let value = Matrix::scalar(linalg::logdet_from_cholesky(&l));
        let ng = self.ng(&[a]);
        let inverse = if ng {
            linalg::inverse_from_cholesky(&l)?
        } else {
            Matrix::zeros(0, 0)
        };
        Ok(self.push(value, Op::LogDetSpd { a, inverse }, ng))
    }

    /// `a⁻¹·b` through two triangular solves.
    pub fn solve_spd(&mut self, a: Var, b: Var) -> Result<Var> {
        let factor = linalg::cholesky(self.value(a))?;
        let value = linalg::cholesky_solve(&factor, self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::SolveSpd { a, b, factor }, ng))
    }

    /// Accumulates `∂root/∂v` for every node that requires a gradient.
    ///
    /// Fails on a non-scalar root, or when called twice without [`Tape::reset`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::TapeState(
                "backward already ran on this tape; call reset() first".into(),
            ));
        }
        if root.0 >= self.nodes.len() {
            return Err(Error::TapeState(format!("root {} is not on the tape", root.0)));
        }
        if self.shape(root) != (1, 1) {
            let (r, c) = self.shape(root);
            return Err(Error::Rank(format!("backward root must be 1x1, got {r}x{c}")));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if self.nodes[idx].needs_grad {
                self.propagate(idx, &g, &mut grads)?;
            }
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let node = &self.nodes[idx];
        let y = &node.value;
        let mut acc = |v: Var, d: Matrix| -> Result<()> {
            if !self.nodes[v.0].needs_grad {
                return Ok(());
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&d),
                slot @ None => {
                    *slot = Some(d);
                    Ok(())
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    acc(*a, g.matmul_t(self.value(*b))?)?;
                }
                if self.nodes[b.0].needs_grad {
                    acc(*b, self.value(*a).t_matmul(g)?)?;
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                acc(*a, g.hadamard(self.value(*b))?)?;
                acc(*b, g.hadamard(self.value(*a))?)?;
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone())?;
                acc(*row, column_sums(g))?;
            }
            Op::MulRow(a, row) => {
                let r = self.value(*row);
                let mut da = g.clone();
                for i in 0..da.rows() {
                    for (x, b) in da.row_mut(i).iter_mut().zip(r.data()) {
                        *x *= b;
                    }
                }
                acc(*a, da)?;
                acc(*row, column_sums(&g.hadamard(self.value(*a))?))?;
            }
            Op::MulScalar(a, s) => {
                acc(*a, g.scale(self.value(*s).item()))?;
                acc(*s, Matrix::scalar(g.hadamard(self.value(*a))?.sum()))?;
            }
            Op::AddConst(a) => acc(*a, g.clone())?,
            Op::Scale(a, c) => acc(*a, g.scale(*c))?,
            Op::Tanh(a) => acc(*a, g.zip_map(y, |gi, yi| gi * (1.0 - yi * yi))?)?,
            Op::Sigmoid(a) => acc(*a, g.zip_map(y, |gi, yi| gi * yi * (1.0 - yi))?)?,
            Op::Exp(a) => acc(*a, g.hadamard(y)?)?,
            Op::Log(a) => acc(*a, g.zip_map(self.value(*a), |gi, xi| gi / xi)?)?,
            Op::Square(a) => acc(*a, g.zip_map(self.value(*a), |gi, xi| 2.0 * gi * xi)?)?,
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                acc(*a, Matrix::filled(r, c, g.item()))?;
            }
            Op::SumRows(a) => {
                let (r, c) = self.shape(*a);
                acc(*a, Matrix::from_fn(r, c, |_, j| g[(0, j)]))?;
            }
            Op::SumCols(a) => {
                let (r, c) = self.shape(*a);
                acc(*a, Matrix::from_fn(r, c, |i, _| g[(i, 0)]))?;
            }
            Op::Transpose(a) => acc(*a, g.transpose())?,
            Op::Reshape(a) => {
                let (r, c) = self.shape(*a);
                acc(*a, Matrix::new(r, c, g.data().to_vec())?)?
            }
            Op::Trace(a) => {
                let n = self.shape(*a).0;
                acc(*a, Matrix::identity(n).scale(g.item()))?;
            }
            Op::HCat(a, b) => {
                let ca = self.shape(*a).1;
                let cb = self.shape(*b).1;
                acc(*a, Matrix::from_fn(g.rows(), ca, |i, j| g[(i, j)]))?;
                acc(*b, Matrix::from_fn(g.rows(), cb, |i, j| g[(i, ca + j)]))?;
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.shape(*a);
                let len = g.cols();
                acc(
                    *a,
                    Matrix::from_fn(r, c, |i, j| {
                        if j >= *start && j < start + len {
                            g[(i, j - start)]
                        } else {
                            0.0
                        }
                    }),
                )?;
            }
            Op::GroupWeightedSum(a, w) => {
                let rows = self.shape(*a).0;
                let j = w.len();
                let d: Vec<f64> = (0..rows).map(|r| g.data()[r / j] * w[r % j]).collect();
                acc(*a, Matrix::column(&d))?;
            }
            Op::LogSoftmaxRows(a) => {
                let mut d = g.clone();
                for i in 0..d.rows() {
                    let gsum: f64 = g.row(i).iter().sum();
                    for (dx, yi) in d.row_mut(i).iter_mut().zip(y.row(i)) {
                        *dx -= yi.exp() * gsum;
                    }
                }
                acc(*a, d)?;
            }
            Op::PickPerRow(a, index) => {
                let (r, c) = self.shape(*a);
                let mut d = Matrix::zeros(r, c);
                for (i, &k) in index.iter().enumerate() {
                    d[(i, k)] = g[(i, 0)];
                }
                acc(*a, d)?;
            }
            Op::Min(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let da = Matrix::from_fn(g.rows(), g.cols(), |i, j| {
                    if av[(i, j)] <= bv[(i, j)] {
                        g[(i, j)]
                    } else {
                        0.0
                    }
                });
                let db = g.sub(&da)?;
                acc(*a, da)?;
                acc(*b, db)?;
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a);
                acc(
                    *a,
                    g.zip_map(x, |gi, xi| if xi > *lo && xi < *hi { gi } else { 0.0 })?,
                )?;
            }
            Op::Cholesky(a) => {
                // Ā = L⁻ᵀ Φ(Lᵀ L̄) L⁻¹, Φ keeps the lower triangle and halves the diagonal.
                let l = y;
                let mut p = l.t_matmul(g)?;
                let n = p.rows();
                for i in 0..n {
                    for j in 0..n {
                        if j > i {
                            p[(i, j)] = 0.0;
                        } else if i == j {
                            p[(i, j)] *= 0.5;
                        }
                    }
                }
                let left = linalg::solve_lower_transpose(l, &p)?;
                let full = linalg::solve_lower_transpose(l, &left.transpose())?.transpose();
                acc(*a, full.symmetrize()?)?;
            }
            Op::LogDetSpd { a, inverse } => acc(*a, inverse.scale(g.item()))?,
            Op::SolveSpd { a, b, factor } => {
                let db = linalg::cholesky_solve(factor, g)?;
                if self.nodes[a.0].needs_grad {
                    let da = db.matmul_t(y)?.scale(-1.0).symmetrize()?;
                    acc(*a, da)?;
                }
                acc(*b, db)?;
            }
        }
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = vec![0.0; g.cols()];
    for i in 0..g.rows() {
        for (o, v) in out.iter_mut().zip(g.row(i)) {
            *o += v;
        }
    }
    Matrix::row_vector(&out)
}
