//! Reverse-mode automatic differentiation over dense matrices.
//!
//! Operations are recorded on a [`Tape`] as they are evaluated. Calling
//! [`Tape::backward`] on a scalar node replays the tape in reverse and
//! returns the adjoint of every node that depends on a parameter leaf.
//! Constants (data, masks, noise draws) never receive gradients, which keeps
//! the backward pass proportional to the differentiable part of the graph.
//!
//! Elementwise binary operations broadcast along any axis of extent one, so a
//! `[1, c]` row can be added to an `[r, c]` matrix and a `[1, 1]` scalar to
//! anything.

use super::linalg::{cholesky_with_jitter, solve_triangular, solve_unchecked};
use super::tensor::Tensor;
use crate::error::Result;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Square(Var),
    Relu(Var),
    Tanh(Var),
    Clamp(Var, f64, f64),
    LogSoftmaxRows(Var),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    SelectCols(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    Gather(Var, Vec<(usize, usize)>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Diag(Var),
    DiagMatrix(Var),
    Cholesky(Var),
    SolveTri { l: Var, b: Var, transpose: bool },
    PairwiseSqDist(Var, Var),
    TrilExpDiag(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the output with respect to `v`, `None` when `v` does not
    /// influence the output through differentiable operations.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient with a zero fallback shaped like `like`.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.rows(), like.cols()))
    }
}

fn broadcast_dims(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let dim = |x: usize, y: usize| {
        if x == y {
            x
        } else if x == 1 {
            y
        } else if y == 1 {
            x
        } else {
            panic!("cannot broadcast {a:?} with {b:?}")
        }
    };
    (dim(a.0, b.0), dim(a.1, b.1))
}

fn broadcast_zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (r, c) = broadcast_dims(a.dims(), b.dims());
    if a.dims() == (r, c) && b.dims() == (r, c) {
        return a.zip_map(b, f);
    }
    let (ar, ac) = a.dims();
    let (br, bc) = b.dims();
    Tensor::from_fn(r, c, |i, j| {
        let x = a.get(if ar == 1 { 0 } else { i }, if ac == 1 { 0 } else { j });
        let y = b.get(if br == 1 { 0 } else { i }, if bc == 1 { 0 } else { j });
        f(x, y)
    })
}

/// Sums `g` down to `dims`, undoing a broadcast.
fn reduce_to(g: Tensor, dims: (usize, usize)) -> Tensor {
    if g.dims() == dims {
        return g;
    }
    let (gr, gc) = g.dims();
    let mut out = Tensor::zeros(dims.0, dims.1);
    for i in 0..gr {
        for j in 0..gc {
            let oi = if dims.0 == 1 { 0 } else { i };
            let oj = if dims.1 == 1 { 0 } else { j };
            let v = out.get(oi, oj) + g.get(i, j);
            out.set(oi, oj, v);
        }
    }
    out
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        self.value(v).dims()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = broadcast_zip(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = broadcast_zip(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = broadcast_zip(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = broadcast_zip(self.value(a), self.value(b), |x, y| x / y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Div(a, b), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| -x);
        let rg = self.rg(&[a]);
        self.push(v, Op::Neg(a), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        let rg = self.rg(&[a]);
        self.push(v, Op::AddScalar(a), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(v, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(v, Op::Transpose(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        let rg = self.rg(&[a]);
        self.push(v, Op::Exp(a), rg)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        let rg = self.rg(&[a]);
        self.push(v, Op::Ln(a), rg)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::sqrt);
        let rg = self.rg(&[a]);
        self.push(v, Op::Sqrt(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        let rg = self.rg(&[a]);
        self.push(v, Op::Square(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        let rg = self.rg(&[a]);
        self.push(v, Op::Tanh(a), rg)
    }

    /// Elementwise clamp; the gradient is zero where the bound is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        let rg = self.rg(&[a]);
        self.push(v, Op::Clamp(a, lo, hi), rg)
    }

    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        self.clamp(a, lo, f64::INFINITY)
    }

    /// Row-wise `log softmax`.
    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (r, c) = x.dims();
        let mut out = Tensor::zeros(r, c);
        for i in 0..r {
            let row = x.row_slice(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for j in 0..c {
                out.set(i, j, row[j] - lse);
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::LogSoftmaxRows(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let l = self.log_softmax_rows(a);
        self.exp(l)
    }

    /// Sum of all entries, `[1, 1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(v, Op::SumAll(a), rg)
    }

    /// Per-row sums, `[r, 1]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Tensor::from_fn(x.rows(), 1, |i, _| x.row_slice(i).iter().sum());
        let rg = self.rg(&[a]);
        self.push(v, Op::SumRows(a), rg)
    }

    /// Per-column sums, `[1, c]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (r, c) = x.dims();
        let mut v = Tensor::zeros(1, c);
        for i in 0..r {
            for j in 0..c {
                let s = v.get(0, j) + x.get(i, j);
                v.set(0, j, s);
            }
        }
        let rg = self.rg(&[a]);
        self.push(v, Op::SumCols(a), rg)
    }

    pub fn select_cols(&mut self, a: Var, idx: &[usize]) -> Var {
        let v = self.value(a).select_cols(idx);
        let rg = self.rg(&[a]);
        self.push(v, Op::SelectCols(a, idx.to_vec()), rg)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let v = self.value(a).select_rows(idx);
        let rg = self.rg(&[a]);
        self.push(v, Op::GatherRows(a, idx.to_vec()), rg)
    }

    /// Picks individual entries into a `[k, 1]` column.
    pub fn gather(&mut self, a: Var, idx: &[(usize, usize)]) -> Var {
        let x = self.value(a);
        let v = Tensor::from_fn(idx.len(), 1, |k, _| x.get(idx[k].0, idx[k].1));
        let rg = self.rg(&[a]);
        self.push(v, Op::Gather(a, idx.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let r = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Tensor::zeros(r, total);
        let mut off = 0;
        for (p, w) in parts.iter().zip(&widths) {
            let x = self.value(*p);
            assert_eq!(x.rows(), r, "concat_cols row mismatch");
            for i in 0..r {
                for j in 0..*w {
                    out.set(i, off + j, x.get(i, j));
                }
            }
            off += w;
        }
        let rg = self.rg(parts);
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let x = self.value(*p);
            assert_eq!(x.cols(), c, "concat_rows column mismatch");
            data.extend_from_slice(x.data());
            rows += x.rows();
        }
        let rg = self.rg(parts);
        self.push(Tensor::from_vec(rows, c, data), Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Main diagonal as an `[n, 1]` column.
    pub fn diag(&mut self, a: Var) -> Var {
        let v = Tensor::column(&self.value(a).diagonal());
        let rg = self.rg(&[a]);
        self.push(v, Op::Diag(a), rg)
    }

    /// Square matrix with the `[n, 1]` input on its diagonal.
    pub fn diag_matrix(&mut self, a: Var) -> Var {
        let v = Tensor::diag(self.value(a).data());
        let rg = self.rg(&[a]);
        self.push(v, Op::DiagMatrix(a), rg)
    }

    /// Lower Cholesky factor of `a + jitter I` with jitter escalation.
    pub fn cholesky(&mut self, a: Var, jitter: f64) -> Result<Var> {
        let (l, _) = cholesky_with_jitter(self.value(a), jitter)?;
        let rg = self.rg(&[a]);
        Ok(self.push(l, Op::Cholesky(a), rg))
    }

    /// `L⁻¹ B` (or `L⁻ᵀ B`).
    pub fn solve_tri(&mut self, l: Var, b: Var, transpose: bool) -> Result<Var> {
        let x = solve_triangular(self.value(l), self.value(b), transpose)?;
        let rg = self.rg(&[l, b]);
        Ok(self.push(x, Op::SolveTri { l, b, transpose }, rg))
    }

    /// `(L Lᵀ)⁻¹ B`.
    pub fn cholesky_solve(&mut self, l: Var, b: Var) -> Result<Var> {
        let y = self.solve_tri(l, b, false)?;
        self.solve_tri(l, y, true)
    }

    /// `2 Σ log L_ii`.
    pub fn logdet_from_factor(&mut self, l: Var) -> Var {
        let d = self.diag(l);
        let lg = self.ln(d);
        let s = self.sum(lg);
        self.scale(s, 2.0)
    }

    /// `D_ij = Σ_q (a_iq − b_jq)²`.
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Var {
        let x = self.value(a);
        let y = self.value(b);
        assert_eq!(x.cols(), y.cols(), "pairwise distance width mismatch");
        let q = x.cols();
        let v = Tensor::from_fn(x.rows(), y.rows(), |i, j| {
            let (xi, yj) = (x.row_slice(i), y.row_slice(j));
            (0..q).map(|k| (xi[k] - yj[k]) * (xi[k] - yj[k])).sum()
        });
        let rg = self.rg(&[a, b]);
        self.push(v, Op::PairwiseSqDist(a, b), rg)
    }

    /// Lower-triangular matrix whose strict lower part is copied from `raw`
    /// and whose diagonal is `exp(raw_ii)`; the upper part of `raw` is ignored.
    pub fn tril_exp_diag(&mut self, raw: Var) -> Var {
        let x = self.value(raw);
        let v = Tensor::from_fn(x.rows(), x.cols(), |i, j| {
            if j < i {
                x.get(i, j)
            } else if i == j {
                x.get(i, i).exp()
            } else {
                0.0
            }
        });
        let rg = self.rg(&[raw]);
        self.push(v, Op::TrilExpDiag(raw), rg)
    }

    /// Convenience: sum of elementwise product.
    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let m = self.mul(a, b);
        self.sum(m)
    }

    /// Sum of squares of all entries.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.square(a);
        self.sum(s)
    }

    /// Reverse pass from a `[1, 1]` output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.dims(output), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=output.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[idx].value;
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                if self.requires_grad(a) {
                    self.accumulate(grads, a, reduce_to(g.clone(), self.dims(a)));
                }
                if self.requires_grad(b) {
                    self.accumulate(grads, b, reduce_to(g.clone(), self.dims(b)));
                }
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                if self.requires_grad(a) {
                    self.accumulate(grads, a, reduce_to(g.clone(), self.dims(a)));
                }
                if self.requires_grad(b) {
                    self.accumulate(grads, b, reduce_to(g.map(|x| -x), self.dims(b)));
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.requires_grad(a) {
                    let ga = broadcast_zip(g, self.value(b), |x, y| x * y);
                    self.accumulate(grads, a, reduce_to(ga, self.dims(a)));
                }
                if self.requires_grad(b) {
                    let gb = broadcast_zip(g, self.value(a), |x, y| x * y);
                    self.accumulate(grads, b, reduce_to(gb, self.dims(b)));
                }
            }
            Op::Div(a, b) => {
                let (a, b) = (*a, *b);
                if self.requires_grad(a) {
                    let ga = broadcast_zip(g, self.value(b), |x, y| x / y);
                    self.accumulate(grads, a, reduce_to(ga, self.dims(a)));
                }
                if self.requires_grad(b) {
                    // d(a/b)/db = -out / b
                    let t = broadcast_zip(g, out, |x, o| -x * o);
                    let gb = broadcast_zip(&t, self.value(b), |x, y| x / y);
                    self.accumulate(grads, b, reduce_to(gb, self.dims(b)));
                }
            }
            Op::Neg(a) => self.accumulate(grads, *a, g.map(|x| -x)),
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.map(|x| x * s));
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                if self.requires_grad(a) {
                    let ga = g.matmul(&self.value(b).transpose());
                    self.accumulate(grads, a, ga);
                }
                if self.requires_grad(b) {
                    let gb = self.value(a).transpose().matmul(g);
                    self.accumulate(grads, b, gb);
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::Exp(a) => self.accumulate(grads, *a, g.zip_map(out, |x, o| x * o)),
            Op::Ln(a) => {
                let ga = g.zip_map(self.value(*a), |x, y| x / y);
                self.accumulate(grads, *a, ga);
            }
            Op::Sqrt(a) => self.accumulate(grads, *a, g.zip_map(out, |x, o| 0.5 * x / o)),
            Op::Square(a) => {
                let ga = g.zip_map(self.value(*a), |x, y| 2.0 * x * y);
                self.accumulate(grads, *a, ga);
            }
            Op::Relu(a) => {
                let ga = g.zip_map(self.value(*a), |x, y| if y > 0.0 { x } else { 0.0 });
                self.accumulate(grads, *a, ga);
            }
            Op::Tanh(a) => self.accumulate(grads, *a, g.zip_map(out, |x, o| x * (1.0 - o * o))),
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let ga = g.zip_map(self.value(*a), |x, y| if y >= lo && y <= hi { x } else { 0.0 });
                self.accumulate(grads, *a, ga);
            }
            Op::LogSoftmaxRows(a) => {
                let (r, c) = out.dims();
                let mut ga = Tensor::zeros(r, c);
                for i in 0..r {
                    let gs: f64 = g.row_slice(i).iter().sum();
                    for j in 0..c {
                        ga.set(i, j, g.get(i, j) - out.get(i, j).exp() * gs);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::SumAll(a) => {
                let (r, c) = self.dims(*a);
                self.accumulate(grads, *a, Tensor::filled(r, c, g.item()));
            }
            Op::SumRows(a) => {
                let (r, c) = self.dims(*a);
                self.accumulate(grads, *a, Tensor::from_fn(r, c, |i, _| g.get(i, 0)));
            }
            Op::SumCols(a) => {
                let (r, c) = self.dims(*a);
                self.accumulate(grads, *a, Tensor::from_fn(r, c, |_, j| g.get(0, j)));
            }
            Op::SelectCols(a, idx) => {
                let (r, c) = self.dims(*a);
                let mut ga = Tensor::zeros(r, c);
                for i in 0..r {
                    for (k, &j) in idx.iter().enumerate() {
                        let v = ga.get(i, j) + g.get(i, k);
                        ga.set(i, j, v);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::GatherRows(a, idx) => {
                let (r, c) = self.dims(*a);
                let mut ga = Tensor::zeros(r, c);
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        let v = ga.get(i, j) + g.get(k, j);
                        ga.set(i, j, v);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Gather(a, idx) => {
                let (r, c) = self.dims(*a);
                let mut ga = Tensor::zeros(r, c);
                for (k, &(i, j)) in idx.iter().enumerate() {
                    let v = ga.get(i, j) + g.get(k, 0);
                    ga.set(i, j, v);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let (r, w) = self.dims(*p);
                    if self.requires_grad(*p) {
                        let gp = Tensor::from_fn(r, w, |i, j| g.get(i, off + j));
                        self.accumulate(grads, *p, gp);
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let (h, c) = self.dims(*p);
                    if self.requires_grad(*p) {
                        let gp = Tensor::from_fn(h, c, |i, j| g.get(off + i, j));
                        self.accumulate(grads, *p, gp);
                    }
                    off += h;
                }
            }
            Op::Diag(a) => {
                let (r, c) = self.dims(*a);
                let mut ga = Tensor::zeros(r, c);
                for i in 0..r.min(c) {
                    ga.set(i, i, g.get(i, 0));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::DiagMatrix(a) => {
                let n = out.rows();
                let ga = Tensor::from_fn(n, 1, |i, _| g.get(i, i));
                self.accumulate(grads, *a, ga);
            }
            Op::Cholesky(a) => {
                let ga = cholesky_backward(out, g);
                self.accumulate(grads, *a, ga);
            }
            Op::SolveTri { l, b, transpose } => {
                let (l, b, transpose) = (*l, *b, *transpose);
                let lv = self.value(l);
                // B̄ = L⁻ᵀ X̄ (plain) or L⁻¹ X̄ (transposed)
                let gb = solve_unchecked(lv, g, !transpose);
                if self.requires_grad(l) {
                    let gl = if transpose {
                        out.matmul(&gb.transpose())
                    } else {
                        gb.matmul(&out.transpose())
                    };
                    self.accumulate(grads, l, gl.tril().map(|x| -x));
                }
                if self.requires_grad(b) {
                    self.accumulate(grads, b, gb);
                }
            }
            Op::PairwiseSqDist(a, b) => {
                let (a, b) = (*a, *b);
                let x = self.value(a);
                let y = self.value(b);
                let q = x.cols();
                let mut ga = Tensor::zeros(x.rows(), q);
                let mut gb = Tensor::zeros(y.rows(), q);
                for i in 0..x.rows() {
                    for j in 0..y.rows() {
                        let gij = g.get(i, j);
                        if gij == 0.0 {
                            continue;
                        }
                        for k in 0..q {
                            let d = 2.0 * gij * (x.get(i, k) - y.get(j, k));
                            ga.set(i, k, ga.get(i, k) + d);
                            gb.set(j, k, gb.get(j, k) - d);
                        }
                    }
                }
                if self.requires_grad(a) {
                    self.accumulate(grads, a, ga);
                }
                if self.requires_grad(b) {
                    self.accumulate(grads, b, gb);
                }
            }
            Op::TrilExpDiag(raw) => {
                let n = out.rows();
                let ga = Tensor::from_fn(n, out.cols(), |i, j| {
                    if j < i {
                        g.get(i, j)
                    } else if i == j {
                        g.get(i, i) * out.get(i, i)
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *raw, ga);
            }
        }
    }
}

/// Symmetric adjoint of `A` given the factor `L` and its adjoint `L̄`.
///
/// `Ā = ½ L⁻ᵀ (P + Pᵀ) L⁻¹` restricted to the symmetric part, where
/// `P = tril(Lᵀ L̄)` with its diagonal halved.
fn cholesky_backward(l: &Tensor, gl: &Tensor) -> Tensor {
    let n = l.rows();
    let p = l.transpose().matmul(&gl.tril()).tril();
    // ½ (P + strict_lower(P)ᵀ): symmetric, diagonal halved
    let sym = Tensor::from_fn(n, n, |i, j| {
        if i == j {
            0.5 * p.get(i, i)
        } else if j < i {
            0.5 * p.get(i, j)
        } else {
            0.5 * p.get(j, i)
        }
    });
    // L⁻ᵀ S L⁻¹
    let left = solve_unchecked(l, &sym, true);
    let right = solve_unchecked(l, &left.transpose(), true).transpose();
    // symmetrise against roundoff
    Tensor::from_fn(n, n, |i, j| 0.5 * (right.get(i, j) + right.get(j, i)))
}
