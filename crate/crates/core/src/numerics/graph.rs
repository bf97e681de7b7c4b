//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is rebuilt for every evaluation: each operation records its
//! inputs and caches its forward value, so node order is a topological order
//! and the backward pass is a single reverse sweep.

use crate::error::{Error, Result};

use super::linalg;
use super::Tensor;

/// Handle to a node of a [`Graph`].
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
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Log1m(Var),
    Sigmoid(Var),
    Softplus(Var),
    Square(Var),
    Sqrt(Var),
    Logit(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    SumCols(Var),
    MeanRows(Var),
    Transpose(Var),
    TraceMatMul(Var, Var),
    GatherRows(Var, Vec<usize>),
    SqDist(Var, Var),
    Cholesky(Var),
    CholSolve(Var, Var),
    SolveLower(Var, Var),
    CholLogdet(Var),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    trainable: bool,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one scalar output with respect to every node that needed one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `v`; zeros if `v` does not influence the output.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }
}

fn broadcast_dim(a: usize, b: usize) -> Option<usize> {
    if a == b {
        Some(a)
    } else if a == 1 {
        Some(b)
    } else if b == 1 {
        Some(a)
    } else {
        None
    }
}

fn broadcast_shape(a: &Tensor, b: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    let (ar, ac) = a.dims();
    let (br, bc) = b.dims();
    match (broadcast_dim(ar, br), broadcast_dim(ac, bc)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        }),
    }
}

#[inline]
fn bidx(i: usize, j: usize, r: usize, c: usize) -> usize {
    (if r == 1 { 0 } else { i }) * c + if c == 1 { 0 } else { j }
}

fn broadcast_zip(a: &Tensor, b: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let (r, c) = broadcast_shape(a, b, op)?;
    let (ar, ac) = a.dims();
    let (br, bc) = b.dims();
    let (ad, bd) = (a.data(), b.data());
    if a.dims() == (r, c) && b.dims() == (r, c) {
        return Ok(a.zip_map(b, f));
    }
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            out.push(f(ad[bidx(i, j, ar, ac)], bd[bidx(i, j, br, bc)]));
        }
    }
    Ok(Tensor::matrix(r, c, out))
}

/// Sums a broadcast gradient back down to `(r, c)`.
fn reduce_to(g: &Tensor, r: usize, c: usize) -> Tensor {
    if g.dims() == (r, c) {
        return g.clone();
    }
    let (gr, gc) = g.dims();
    let mut out = vec![0.0; r * c];
    for i in 0..gr {
        for j in 0..gc {
            out[bidx(i, j, r, c)] += g.data()[i * gc + j];
        }
    }
    Tensor::matrix(r, c, out)
}

/// Expands `g` (broadcast-compatible with `(r, c)`) to the full shape.
fn expand(g: &Tensor, r: usize, c: usize) -> Tensor {
    if g.dims() == (r, c) {
        return g.clone();
    }
    let (gr, gc) = g.dims();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            out.push(g.data()[bidx(i, j, gr, gc)]);
        }
    }
    Tensor::matrix(r, c, out)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn tril(t: &Tensor) -> Tensor {
    let (n, _) = t.dims();
    let mut out = t.clone();
    for i in 0..n {
        for j in i + 1..n {
            out.set(i, j, 0.0);
        }
    }
    out
}

fn symmetrize(t: &Tensor) -> Tensor {
    t.zip_map(&t.transpose(), |a, b| 0.5 * (a + b))
}

fn sq_dist(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, q) = a.dims();
    let (n, q2) = b.dims();
    if q != q2 {
        return Err(Error::ShapeMismatch {
            op: "sq_dist",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let ai = a.row(i);
        for j in 0..n {
            let d: f64 = ai.iter().zip(b.row(j)).map(|(x, y)| (x - y) * (x - y)).sum();
            out.push(d);
        }
    }
    Ok(Tensor::matrix(m, n, out))
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, name: &'static str) -> Result<Var> {
        let value = value.check_finite(name)?;
        let requires_grad = match &op {
            Op::Leaf => false,
            other => inputs(other).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            value,
            trainable: false,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A non-differentiated input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: t,
            trainable: false,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: t,
            trainable: true,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn params(&self) -> Vec<Var> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].trainable)
            .map(Var)
            .collect()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push(Op::MatMul(a, b), v, "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = broadcast_zip(self.value(a), self.value(b), "add", |x, y| x + y)?;
        self.push(Op::Add(a, b), v, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = broadcast_zip(self.value(a), self.value(b), "sub", |x, y| x - y)?;
        self.push(Op::Sub(a, b), v, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = broadcast_zip(self.value(a), self.value(b), "mul", |x, y| x * y)?;
        self.push(Op::Mul(a, b), v, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = broadcast_zip(self.value(a), self.value(b), "div", |x, y| x / y)?;
        self.push(Op::Div(a, b), v, "div")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).scale(c);
        self.push(Op::Scale(a, c), v, "scale")
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x + c);
        self.push(Op::AddScalar(a), v, "add_scalar")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), v, "exp")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::ln);
        self.push(Op::Log(a), v, "log")
    }

    /// `log(1 - a)`.
    pub fn log1m(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| (-x).ln_1p());
        self.push(Op::Log1m(a), v, "log1m")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), v, "sigmoid")
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(softplus);
        self.push(Op::Softplus(a), v, "softplus")
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x * x);
        self.push(Op::Square(a), v, "square")
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::sqrt);
        self.push(Op::Sqrt(a), v, "sqrt")
    }

    /// `log(a) - log(1 - a)`.
    pub fn logit(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.ln() - (-x).ln_1p());
        self.push(Op::Logit(a), v, "logit")
    }

    /// Element-wise clamp; the gradient is zero where the bound is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(Op::Clamp(a, lo, hi), v, "clamp")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), v, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(Op::Mean(a), v, "mean")
    }

    /// Sum over rows: `m×n → 1×n`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let v = t.column_means().scale(t.rows() as f64);
        self.push(Op::SumRows(a), v, "sum_rows")
    }

    /// Sum over columns: `m×n → m×1`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let v = Tensor::matrix(t.rows(), 1, (0..t.rows()).map(|i| t.row(i).iter().sum()).collect());
        self.push(Op::SumCols(a), v, "sum_cols")
    }

    /// Mean over rows: `m×n → 1×n`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).column_means();
        self.push(Op::MeanRows(a), v, "mean_rows")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose();
        self.push(Op::Transpose(a), v, "transpose")
    }

    /// `Tr(a·b)` without forming the product.
    pub fn trace_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims();
        if tb.dims() != (k, m) {
            return Err(Error::ShapeMismatch {
                op: "trace_matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut s = 0.0;
        for i in 0..m {
            for j in 0..k {
                s += ta.get(i, j) * tb.get(j, i);
            }
        }
        self.push(Op::TraceMatMul(a, b), Tensor::scalar(s), "trace_matmul")
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::invalid(format!("row index {bad} out of range for {} rows", t.rows())));
        }
        let v = t.gather_rows(idx);
        self.push(Op::GatherRows(a, idx.to_vec()), v, "gather_rows")
    }

    /// Pairwise squared Euclidean distances between rows: `m×q, n×q → m×n`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = sq_dist(self.value(a), self.value(b))?;
        self.push(Op::SqDist(a, b), v, "sq_dist")
    }

    /// Cholesky factor of a symmetric input (plus `jitter·I`).
    pub fn cholesky(&mut self, a: Var, jitter: f64) -> Result<Var> {
        let v = linalg::cholesky(self.value(a), jitter)?;
        self.push(Op::Cholesky(a), v, "cholesky")
    }

    /// Cholesky with the default jitter and one retry at the larger one.
    pub fn cholesky_with_retry(&mut self, a: Var) -> Result<Var> {
        let (v, _) = linalg::cholesky_with_retry(self.value(a))?;
        self.push(Op::Cholesky(a), v, "cholesky")
    }

    pub fn chol_solve(&mut self, l: Var, b: Var) -> Result<Var> {
        let v = linalg::chol_solve(self.value(l), self.value(b))?;
        self.push(Op::CholSolve(l, b), v, "chol_solve")
    }

    /// `L⁻¹·b` for a lower-triangular factor `l`.
    pub fn solve_lower(&mut self, l: Var, b: Var) -> Result<Var> {
        let v = linalg::solve_lower(self.value(l), self.value(b))?;
        self.push(Op::SolveLower(l, b), v, "solve_lower")
    }

    pub fn chol_logdet(&mut self, l: Var) -> Result<Var> {
        let v = linalg::chol_logdet(self.value(l))?;
        self.push(Op::CholLogdet(l), Tensor::scalar(v), "chol_logdet")
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(Error::NonScalarObjective {
                shape: out.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let contributions = self.node_backward(idx, &g)?;
            grads[idx] = Some(g);
            for (var, contrib) in contributions {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.dims()).collect();
        Ok(Gradients { grads, shapes })
    }

    /// Gradients of `objective` for the listed parameters, in order.
    pub fn gradient(&self, objective: Var, params: &[Var]) -> Result<Vec<Tensor>> {
        let g = self.backward(objective)?;
        Ok(params.iter().map(|&p| g.get(p)).collect())
    }

    fn node_backward(&self, idx: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[idx];
        let y = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let unary = |a: Var, f: &dyn Fn(f64, f64, f64) -> f64| -> Vec<(Var, Tensor)> {
            // f(input, output, upstream)
            let x = val(a);
            let data = x
                .data()
                .iter()
                .zip(y.data())
                .zip(g.data())
                .map(|((&x, &y), &g)| f(x, y, g))
                .collect();
            let (r, c) = x.dims();
            vec![(a, Tensor::matrix(r, c, data))]
        };

        let out = match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let mut out = Vec::with_capacity(2);
                if needs(*a) {
                    out.push((*a, g.matmul_nt(val(*b))?));
                }
                if needs(*b) {
                    out.push((*b, val(*a).matmul_tn(g)?));
                }
                out
            }
            Op::Add(a, b) => {
                let (ar, ac) = val(*a).dims();
                let (br, bc) = val(*b).dims();
                vec![(*a, reduce_to(g, ar, ac)), (*b, reduce_to(g, br, bc))]
            }
            Op::Sub(a, b) => {
                let (ar, ac) = val(*a).dims();
                let (br, bc) = val(*b).dims();
                vec![(*a, reduce_to(g, ar, ac)), (*b, reduce_to(&g.scale(-1.0), br, bc))]
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (r, c) = g.dims();
                let ea = expand(ta, r, c);
                let eb = expand(tb, r, c);
                let ga = g.zip_map(&eb, |g, b| g * b);
                let gb = g.zip_map(&ea, |g, a| g * a);
                vec![
                    (*a, reduce_to(&ga, ta.rows(), ta.cols())),
                    (*b, reduce_to(&gb, tb.rows(), tb.cols())),
                ]
            }
            Op::Div(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (r, c) = g.dims();
                let eb = expand(tb, r, c);
                let ga = g.zip_map(&eb, |g, b| g / b);
                // d(a/b)/db = -y/b
                let gb = ga.zip_map(y, |gb, y| -gb * y);
                vec![
                    (*a, reduce_to(&ga, ta.rows(), ta.cols())),
                    (*b, reduce_to(&gb, tb.rows(), tb.cols())),
                ]
            }
            Op::Scale(a, c) => vec![(*a, g.scale(*c))],
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::Exp(a) => unary(*a, &|_, y, g| g * y),
            Op::Log(a) => unary(*a, &|x, _, g| g / x),
            Op::Log1m(a) => unary(*a, &|x, _, g| -g / (1.0 - x)),
            Op::Sigmoid(a) => unary(*a, &|_, y, g| g * y * (1.0 - y)),
            Op::Softplus(a) => unary(*a, &|x, _, g| g * sigmoid(x)),
            Op::Square(a) => unary(*a, &|x, _, g| 2.0 * g * x),
            Op::Sqrt(a) => unary(*a, &|_, y, g| g * 0.5 / y),
            Op::Logit(a) => unary(*a, &|x, _, g| g / (x * (1.0 - x))),
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                unary(*a, &|x, _, g| if x < lo || x > hi { 0.0 } else { g })
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).dims();
                vec![(*a, Tensor::full(r, c, g.item()))]
            }
            Op::Mean(a) => {
                let t = val(*a);
                let (r, c) = t.dims();
                vec![(*a, Tensor::full(r, c, g.item() / t.len() as f64))]
            }
            Op::SumRows(a) | Op::SumCols(a) => {
                let (r, c) = val(*a).dims();
                vec![(*a, expand(g, r, c))]
            }
            Op::MeanRows(a) => {
                let (r, c) = val(*a).dims();
                vec![(*a, expand(&g.scale(1.0 / r as f64), r, c))]
            }
            Op::Transpose(a) => vec![(*a, g.transpose())],
            Op::TraceMatMul(a, b) => {
                let s = g.item();
                vec![
                    (*a, val(*b).transpose().scale(s)),
                    (*b, val(*a).transpose().scale(s)),
                ]
            }
            Op::GatherRows(a, rows) => {
                let (r, c) = val(*a).dims();
                let mut out = Tensor::zeros(r, c);
                let od = out.data_mut();
                for (k, &i) in rows.iter().enumerate() {
                    for (o, v) in od[i * c..(i + 1) * c].iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                vec![(*a, out)]
            }
            Op::SqDist(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, q) = ta.dims();
                let n = tb.rows();
                let mut ga = Tensor::zeros(m, q);
                let mut gb = Tensor::zeros(n, q);
                for i in 0..m {
                    for j in 0..n {
                        let w = 2.0 * g.get(i, j);
                        if w == 0.0 {
                            continue;
                        }
                        for k in 0..q {
                            let d = w * (ta.get(i, k) - tb.get(j, k));
                            ga.data_mut()[i * q + k] += d;
                            gb.data_mut()[j * q + k] -= d;
                        }
                    }
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Cholesky(a) => {
                // Symmetric adjoint: Ā = ½(S + Sᵀ), S = L⁻ᵀ Φ(Lᵀ L̄) L⁻¹,
                // Φ = lower triangle with halved diagonal.
                let l = y;
                let n = l.rows();
                let mut phi = tril(&l.matmul_tn(&tril(g))?);
                for i in 0..n {
                    let v = phi.get(i, i) * 0.5;
                    phi.set(i, i, v);
                }
                // S = L⁻ᵀ (L⁻ᵀ Φᵀ)ᵀ
                let t = linalg::solve_lower_transpose(l, &phi.transpose())?;
                let s = linalg::solve_lower_transpose(l, &t.transpose())?;
                vec![(*a, symmetrize(&s))]
            }
            Op::CholSolve(l, b) => {
                let lt = val(*l);
                let gb = linalg::chol_solve(lt, g)?;
                let mut out = Vec::with_capacity(2);
                if needs(*l) {
                    let x = y;
                    let mut outer = gb.matmul_nt(x)?;
                    outer.add_assign(&x.matmul_nt(&gb)?);
                    out.push((*l, tril(&outer.matmul(lt)?.scale(-1.0))));
                }
                out.push((*b, gb));
                out
            }
            Op::SolveLower(l, b) => {
                let gb = linalg::solve_lower_transpose(val(*l), g)?;
                let mut out = Vec::with_capacity(2);
                if needs(*l) {
                    out.push((*l, tril(&gb.matmul_nt(y)?.scale(-1.0))));
                }
                out.push((*b, gb));
                out
            }
            Op::CholLogdet(l) => {
                let lt = val(*l);
                let n = lt.rows();
                let d: Vec<f64> = (0..n).map(|i| 2.0 * g.item() / lt.get(i, i)).collect();
                vec![(*l, Tensor::diag(&d))]
            }
        };
        Ok(out)
    }
}

fn inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b)
        | Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::Div(a, b)
        | Op::TraceMatMul(a, b)
        | Op::SqDist(a, b)
        | Op::CholSolve(a, b)
        | Op::SolveLower(a, b) => vec![*a, *b],
        Op::Scale(a, _)
        | Op::AddScalar(a)
        | Op::Exp(a)
        | Op::Log(a)
        | Op::Log1m(a)
        | Op::Sigmoid(a)
        | Op::Softplus(a)
        | Op::Square(a)
        | Op::Sqrt(a)
        | Op::Logit(a)
        | Op::Clamp(a, _, _)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::SumRows(a)
        | Op::SumCols(a)
        | Op::MeanRows(a)
        | Op::Transpose(a)
        | Op::GatherRows(a, _)
        | Op::Cholesky(a)
        | Op::CholLogdet(a) => vec![*a],
    }
}
