//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] borrows a [`ParamStore`] for the duration of one forward pass.
//! Every operation appends a node holding its value; [`Graph::backward`] walks
//! the tape in reverse and returns gradients for all parameters that were read
//! plus any leaf created with [`Graph::leaf`].

use std::collections::{BTreeMap, HashMap};

use super::{Matrix, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Affine(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    /// Argmax source row per output element; `usize::MAX` for empty segments.
    SegmentMax(Var, Vec<usize>),
    Sum(Var),
    SumSq(Var),
    CenterRows(Var),
    Transpose(Var),
    LogSoftmaxRows(Var),
    ReverseGrad(Var, f64),
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    nodes: Vec<Node>,
    store: &'p ParamStore,
    param_vars: HashMap<String, Var>,
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    by_node: Vec<Option<Matrix>>,
    params: BTreeMap<String, Matrix>,
}

impl Gradients {
    /// Gradient of a node, `None` if no gradient reached it.
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.by_node[v.0].as_ref()
    }

    pub fn params(&self) -> &BTreeMap<String, Matrix> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Matrix> {
        self.params
    }
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            nodes: Vec::with_capacity(512),
            store,
            param_vars: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, false)
    }

    /// A free input whose gradient is tracked.
    pub fn leaf(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, true)
    }

    /// Reads a named parameter. Repeated reads share one node.
    ///
    /// Panics if the parameter does not exist; parameter names are fixed by
    /// model construction, so a miss is a programming error.
    pub fn param(&mut self, name: &str) -> Var {
        if let Some(v) = self.param_vars.get(name) {
            return *v;
        }
        let value = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
            .clone();
        let v = self.push(value, Op::Leaf, true);
        self.param_vars.insert(name.to_string(), v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(v, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(&[a, b]);
        self.push(v, Op::Add(a, b), ng)
    }

    /// `a + row` with `row` (1 × cols) broadcast over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "add_row shape");
        let mut v = self.value(a).clone();
        let b = &self.nodes[row.0].value.data;
        for i in 0..r {
            for (x, y) in v.data[i * c..(i + 1) * c].iter_mut().zip(b) {
                *x += y;
            }
        }
        let ng = self.ng(&[a, row]);
        self.push(v, Op::AddRow(a, row), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(&[a, b]);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(&[a, b]);
        self.push(v, Op::Mul(a, b), ng)
    }

    /// `a ⊙ col` with `col` (rows × 1) broadcast across columns.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(col), (r, 1), "mul_col shape");
        let mut v = self.value(a).clone();
        for i in 0..r {
            let s = self.nodes[col.0].value.data[i];
            for x in &mut v.data[i * c..(i + 1) * c] {
                *x *= s;
            }
        }
        let ng = self.ng(&[a, col]);
        self.push(v, Op::MulCol(a, col), ng)
    }

    /// `scale · a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let v = self.value(a).map(|x| scale * x + shift);
        let ng = self.ng(&[a]);
        self.push(v, Op::Affine(a, scale), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        let ng = self.ng(&[a]);
        self.push(v, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        let ng = self.ng(&[a]);
        self.push(v, Op::Tanh(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(&[a]);
        self.push(v, Op::Relu(a), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|p| self.shape(*p).1).sum();
        let mut v = Matrix::zeros(rows, cols);
        let mut off = 0;
        for p in parts {
            let m = &self.nodes[p.0].value;
            assert_eq!(m.rows, rows, "concat row mismatch");
            for r in 0..rows {
                v.data[r * cols + off..r * cols + off + m.cols].copy_from_slice(m.row(r));
            }
            off += m.cols;
        }
        let ng = self.ng(parts);
        self.push(v, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let m = self.value(a);
        assert!(start + len <= m.cols, "slice out of range");
        let mut v = Matrix::zeros(m.rows, len);
        for r in 0..m.rows {
            v.data[r * len..(r + 1) * len].copy_from_slice(&m.row(r)[start..start + len]);
        }
        let ng = self.ng(&[a]);
        self.push(v, Op::SliceCols(a, start), ng)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let m = self.value(a);
        let mut v = Matrix::zeros(idx.len(), m.cols);
        for (o, &i) in idx.iter().enumerate() {
            v.data[o * m.cols..(o + 1) * m.cols].copy_from_slice(m.row(i));
        }
        let ng = self.ng(&[a]);
        self.push(v, Op::GatherRows(a, idx.to_vec()), ng)
    }

    /// Column-wise max over each row segment. Empty segments yield zeros.
    pub fn segment_max(&mut self, a: Var, segments: &[Vec<usize>]) -> Var {
        let m = self.value(a);
        let c = m.cols;
        let mut v = Matrix::zeros(segments.len(), c);
        let mut arg = vec![usize::MAX; segments.len() * c];
        for (s, seg) in segments.iter().enumerate() {
            for col in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut best_row = usize::MAX;
                for &r in seg {
                    let x = m.get(r, col);
                    if x > best {
                        best = x;
                        best_row = r;
                    }
                }
                if best_row != usize::MAX {
                    v.data[s * c + col] = best;
                    arg[s * c + col] = best_row;
                }
            }
        }
        let ng = self.ng(&[a]);
        self.push(v, Op::SegmentMax(a, arg), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::scalar(self.value(a).sum());
        let ng = self.ng(&[a]);
        self.push(v, Op::Sum(a), ng)
    }

    pub fn sum_sq(&mut self, a: Var) -> Var {
        let v = Matrix::scalar(self.value(a).sum_sq());
        let ng = self.ng(&[a]);
        self.push(v, Op::SumSq(a), ng)
    }

    /// Subtracts the column mean from every row.
    pub fn center_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut mean = m.col_sums();
        mean.scale_in_place(1.0 / m.rows.max(1) as f64);
        let mut v = m.clone();
        for r in 0..m.rows {
            for (x, mu) in v.data[r * m.cols..(r + 1) * m.cols].iter_mut().zip(&mean.data) {
                *x -= mu;
            }
        }
        let ng = self.ng(&[a]);
        self.push(v, Op::CenterRows(a), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        let ng = self.ng(&[a]);
        self.push(v, Op::Transpose(a), ng)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut v = m.clone();
        for r in 0..m.rows {
            let row = &mut v.data[r * m.cols..(r + 1) * m.cols];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let ng = self.ng(&[a]);
        self.push(v, Op::LogSoftmaxRows(a), ng)
    }

    /// Identity on the forward pass; multiplies the incoming gradient by
    /// `-lambda` on the backward pass.
    pub fn reverse_grad(&mut self, a: Var, lambda: f64) -> Var {
        let v = self.value(a).clone();
        let ng = self.ng(&[a]);
        self.push(v, Op::ReverseGrad(a, lambda), ng)
    }

    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "backward from a non-scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::scalar(1.0));

        fn acc(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let want = |v: &Var| self.nodes[v.0].needs_grad;
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if want(a) {
                        acc(&mut grads, *a, g.matmul_t(self.value(*b)));
                    }
                    if want(b) {
                        acc(&mut grads, *b, self.value(*a).t_matmul(&g));
                    }
                }
                Op::Add(a, b) => {
                    if want(a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if want(b) {
                        acc(&mut grads, *b, g);
                    }
                }
                Op::AddRow(a, row) => {
                    if want(row) {
                        acc(&mut grads, *row, g.col_sums());
                    }
                    if want(a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::Sub(a, b) => {
                    if want(b) {
                        acc(&mut grads, *b, g.map(|x| -x));
                    }
                    if want(a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if want(a) {
                        acc(&mut grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                    }
                    if want(b) {
                        acc(&mut grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                    }
                }
                Op::MulCol(a, col) => {
                    let (r, c) = g.shape();
                    let cv = self.value(*col);
                    if want(col) {
                        let av = self.value(*a);
                        let gc = (0..r)
                            .map(|i| (0..c).map(|j| g.get(i, j) * av.get(i, j)).sum())
                            .collect();
                        acc(&mut grads, *col, Matrix::from_vec(r, 1, gc));
                    }
                    if want(a) {
                        let mut ga = g;
                        for i in 0..r {
                            let s = cv.data[i];
                            for x in &mut ga.data[i * c..(i + 1) * c] {
                                *x *= s;
                            }
                        }
                        acc(&mut grads, *a, ga);
                    }
                }
                Op::Affine(a, s) => {
                    let s = *s;
                    acc(&mut grads, *a, g.map(|x| s * x));
                }
                Op::Sigmoid(a) => {
                    acc(&mut grads, *a, g.zip_map(&node.value, |x, y| x * y * (1.0 - y)));
                }
                Op::Tanh(a) => {
                    acc(&mut grads, *a, g.zip_map(&node.value, |x, y| x * (1.0 - y * y)));
                }
                Op::Relu(a) => {
                    acc(
                        &mut grads,
                        *a,
                        g.zip_map(self.value(*a), |x, y| if y > 0.0 { x } else { 0.0 }),
                    );
                }
                Op::ConcatCols(parts) => {
                    let cols = g.cols;
                    let mut off = 0;
                    for p in parts {
                        let pc = self.shape(*p).1;
                        if want(p) {
                            let mut gp = Matrix::zeros(g.rows, pc);
                            for r in 0..g.rows {
                                gp.data[r * pc..(r + 1) * pc]
                                    .copy_from_slice(&g.data[r * cols + off..r * cols + off + pc]);
                            }
                            acc(&mut grads, *p, gp);
                        }
                        off += pc;
                    }
                }
                Op::SliceCols(a, start) => {
                    let (r, c) = self.shape(*a);
                    let len = g.cols;
                    let mut ga = Matrix::zeros(r, c);
                    for i in 0..r {
                        ga.data[i * c + start..i * c + start + len].copy_from_slice(g.row(i));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::GatherRows(a, idx) => {
                    let (r, c) = self.shape(*a);
                    let mut ga = Matrix::zeros(r, c);
                    for (o, &src) in idx.iter().enumerate() {
                        for (x, y) in ga.data[src * c..(src + 1) * c].iter_mut().zip(g.row(o)) {
                            *x += y;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SegmentMax(a, arg) => {
                    let (r, c) = self.shape(*a);
                    let mut ga = Matrix::zeros(r, c);
                    for (k, &src) in arg.iter().enumerate() {
                        if src != usize::MAX {
                            ga.data[src * c + k % c] += g.data[k];
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let (r, c) = self.shape(*a);
                    acc(&mut grads, *a, Matrix::filled(r, c, g.item()));
                }
                Op::SumSq(a) => {
                    let s = 2.0 * g.item();
                    acc(&mut grads, *a, self.value(*a).map(|x| s * x));
                }
                Op::CenterRows(a) => {
                    let mut mean = g.col_sums();
                    mean.scale_in_place(1.0 / g.rows.max(1) as f64);
                    let mut ga = g;
                    let c = ga.cols;
                    for r in 0..ga.rows {
                        for (x, mu) in ga.data[r * c..(r + 1) * c].iter_mut().zip(&mean.data) {
                            *x -= mu;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Transpose(a) => {
                    acc(&mut grads, *a, g.transpose());
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = g.clone();
                    let c = y.cols;
                    for r in 0..y.rows {
                        let gs: f64 = g.row(r).iter().sum();
                        for j in 0..c {
                            ga.data[r * c + j] -= y.get(r, j).exp() * gs;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ReverseGrad(a, lambda) => {
                    let l = *lambda;
                    acc(&mut grads, *a, g.map(|x| -l * x));
                }
            }
        }

        let params = self
            .param_vars
            .iter()
            .filter_map(|(name, v)| grads[v.0].clone().map(|g| (name.clone(), g)))
            .collect();
        Gradients {
            by_node: grads,
            params,
        }
    }
}
