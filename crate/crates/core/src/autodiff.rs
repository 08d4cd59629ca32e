//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value,
//! and [`Graph::backward`] sweeps the tape in reverse. Batches are carried as
//! matrices with one example per row, so per-example reductions are
//! `row_sum` and batch reductions are `sum`.

use crate::numerics::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Square(Var),
    Ln(Var),
    Exp(Var),
    Recip(Var),
    LogSoftmax(Var),
    RowSum(Var),
    Sum(Var),
    Col(Var, usize),
    Pick(Var, Vec<usize>),
    BroadcastCols(Var),
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    /// Adjoint of `v`, or zeros shaped like `like` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, like: &Matrix) -> Matrix {
        self.get(v).cloned().unwrap_or_else(|| Matrix::zeros(like.rows(), like.cols()))
    }
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

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant: no adjoint is accumulated for it.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Detached copy of `v`: same value, no gradient path.
    pub fn stop_gradient(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_nt(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMulNt(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).add(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).sub(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).hadamard(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    /// `a (m×n) + r (1×n)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, r: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(r));
        assert_eq!(rv.rows(), 1, "add_row expects a row vector");
        assert_eq!(av.cols(), rv.cols(), "add_row width mismatch");
        let mut value = av.clone();
        for i in 0..value.rows() {
            for (o, &b) in value.row_mut(i).iter_mut().zip(rv.as_slice()) {
                *o += b;
            }
        }
        let ng = self.needs(a) || self.needs(r);
        self.push(value, Op::AddRow(a, r), ng)
    }

    /// Scales row `i` of `a` by `c[i]` (`c` is m×1).
    pub fn mul_col(&mut self, a: Var, c: Var) -> Var {
        let (av, cv) = (self.value(a), self.value(c));
        assert_eq!(cv.cols(), 1, "mul_col expects a column vector");
        assert_eq!(av.rows(), cv.rows(), "mul_col height mismatch");
        let mut value = av.clone();
        for i in 0..value.rows() {
            let s = cv[(i, 0)];
            value.row_mut(i).iter_mut().for_each(|v| *v *= s);
        }
        let ng = self.needs(a) || self.needs(c);
        self.push(value, Op::MulCol(a, c), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let ng = self.needs(a);
        self.push(value, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|v| v + s);
        let ng = self.needs(a);
        self.push(value, Op::AddScalar(a), ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// `1 − a`
    pub fn one_minus(&mut self, a: Var) -> Var {
        let n = self.neg(a);
        self.add_scalar(n, 1.0)
    }

    /// ReLU with derivative 0 at exactly 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        let ng = self.needs(a);
        self.push(value, Op::Relu(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v * v);
        let ng = self.needs(a);
        self.push(value, Op::Square(a), ng)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        let ng = self.needs(a);
        self.push(value, Op::Ln(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let ng = self.needs(a);
        self.push(value, Op::Exp(a), ng)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| 1.0 / v);
        let ng = self.needs(a);
        self.push(value, Op::Recip(a), ng)
    }

    /// Row-wise log-softmax with max subtraction.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut value = av.clone();
        for i in 0..value.rows() {
            let row = value.row_mut(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let ng = self.needs(a);
        self.push(value, Op::LogSoftmax(a), ng)
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let ls = self.log_softmax(a);
        self.exp(ls)
    }

    /// Per-row sum, m×n → m×1.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let sums: Vec<f64> = (0..av.rows()).map(|i| av.row(i).iter().sum()).collect();
        let ng = self.needs(a);
        self.push(Matrix::col_vector(&sums), Op::RowSum(a), ng)
    }

    /// Sum of all entries, → 1×1.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.needs(a);
        self.push(Matrix::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Column `k` as an m×1 matrix.
    pub fn col(&mut self, a: Var, k: usize) -> Var {
        let value = Matrix::col_vector(&self.value(a).col(k));
        let ng = self.needs(a);
        self.push(value, Op::Col(a, k), ng)
    }

    /// Entry `a[i, idx[i]]` of every row, → m×1.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Var {
        let av = self.value(a);
        assert_eq!(av.rows(), idx.len(), "pick index count mismatch");
        let vals: Vec<f64> = idx.iter().enumerate().map(|(i, &j)| av[(i, j)]).collect();
        let ng = self.needs(a);
        self.push(Matrix::col_vector(&vals), Op::Pick(a, idx.to_vec()), ng)
    }

    /// Repeats an m×1 column `n` times, → m×n.
    pub fn broadcast_cols(&mut self, c: Var, n: usize) -> Var {
        let cv = self.value(c);
        assert_eq!(cv.cols(), 1, "broadcast_cols expects a column vector");
        let mut value = Matrix::zeros(cv.rows(), n);
        for i in 0..cv.rows() {
            let v = cv[(i, 0)];
            value.row_mut(i).iter_mut().for_each(|o| *o = v);
        }
        let ng = self.needs(c);
        self.push(value, Op::BroadcastCols(c), ng)
    }

    /// Row-wise squared Euclidean norm, → m×1.
    pub fn row_norm_sq(&mut self, a: Var) -> Var {
        let sq = self.square(a);
        self.row_sum(sq)
    }

    /// Row-wise inner product, → m×1.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let p = self.mul(a, b);
        self.row_sum(p)
    }

    /// Reverse sweep from a scalar (1×1) output.
    pub fn backward(&self, out: Var) -> Gradients {
        let shape = self.value(out).shape();
        assert_eq!(shape, (1, 1), "backward expects a scalar output");
        self.backward_with(out, Matrix::scalar(1.0))
    }

    /// Reverse sweep seeded with an explicit adjoint for `out`.
    pub fn backward_with(&self, out: Var, seed: Matrix) -> Gradients {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, delta: Matrix) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.matmul_nt(self.value(*b)));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, self.value(*a).matmul_tn(g));
                }
            }
            Op::MatMulNt(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.matmul(self.value(*b)));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.matmul_tn(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.hadamard(self.value(*b)));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.hadamard(self.value(*a)));
                }
            }
            Op::AddRow(a, r) => {
                self.accumulate(grads, *a, g.clone());
                if self.needs(*r) {
                    let mut col_sums = vec![0.0; g.cols()];
                    for i in 0..g.rows() {
                        for (s, &v) in col_sums.iter_mut().zip(g.row(i)) {
                            *s += v;
                        }
                    }
                    self.accumulate(grads, *r, Matrix::row_vector(&col_sums));
                }
            }
            Op::MulCol(a, c) => {
                let (av, cv) = (self.value(*a), self.value(*c));
                if self.needs(*a) {
                    let mut da = g.clone();
                    for i in 0..da.rows() {
                        let s = cv[(i, 0)];
                        da.row_mut(i).iter_mut().for_each(|v| *v *= s);
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*c) {
                    let dc: Vec<f64> =
                        (0..g.rows()).map(|i| g.row(i).iter().zip(av.row(i)).map(|(x, y)| x * y).sum()).collect();
                    self.accumulate(grads, *c, Matrix::col_vector(&dc));
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Relu(a) => {
                let da = g.zip_map(self.value(*a), |d, x| if x > 0.0 { d } else { 0.0 });
                self.accumulate(grads, *a, da);
            }
            Op::Square(a) => {
                let da = g.zip_map(self.value(*a), |d, x| 2.0 * x * d);
                self.accumulate(grads, *a, da);
            }
            Op::Ln(a) => {
                let da = g.zip_map(self.value(*a), |d, x| d / x);
                self.accumulate(grads, *a, da);
            }
            Op::Exp(_) => {
                if let Op::Exp(a) = node.op {
                    let da = g.hadamard(&node.value);
                    self.accumulate(grads, a, da);
                }
            }
            Op::Recip(a) => {
                let da = g.zip_map(self.value(*a), |d, x| -d / (x * x));
                self.accumulate(grads, *a, da);
            }
            Op::LogSoftmax(a) => {
                let y = &node.value;
                let mut da = g.clone();
                for i in 0..da.rows() {
                    let gsum: f64 = g.row(i).iter().sum();
                    for (o, &ly) in da.row_mut(i).iter_mut().zip(y.row(i)) {
                        *o -= ly.exp() * gsum;
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::RowSum(a) => {
                let av = self.value(*a);
                let mut da = Matrix::zeros(av.rows(), av.cols());
                for i in 0..av.rows() {
                    let d = g[(i, 0)];
                    da.row_mut(i).iter_mut().for_each(|v| *v = d);
                }
                self.accumulate(grads, *a, da);
            }
            Op::Sum(a) => {
                let av = self.value(*a);
                self.accumulate(grads, *a, Matrix::filled(av.rows(), av.cols(), g.item()));
            }
            Op::Col(a, k) => {
                let av = self.value(*a);
                let mut da = Matrix::zeros(av.rows(), av.cols());
                for i in 0..av.rows() {
                    da[(i, *k)] = g[(i, 0)];
                }
                self.accumulate(grads, *a, da);
            }
            Op::Pick(a, idx) => {
                let av = self.value(*a);
                let mut da = Matrix::zeros(av.rows(), av.cols());
                for (i, &j) in idx.iter().enumerate() {
                    da[(i, j)] = g[(i, 0)];
                }
                self.accumulate(grads, *a, da);
            }
            Op::BroadcastCols(c) => {
                let dc: Vec<f64> = (0..g.rows()).map(|i| g.row(i).iter().sum()).collect();
                self.accumulate(grads, *c, Matrix::col_vector(&dc));
            }
        }
    }
}
